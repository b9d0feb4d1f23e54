pub mod checkpoint;
pub mod codec;
pub mod data;
pub mod degrade;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod operator;
pub mod solvers;
pub mod tensor;

pub use error::{Error, Result};
