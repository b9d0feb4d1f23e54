mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use silo_core::operator::OperatorVariant;
use silo_core::solvers::Method;

use crate::config::ExperimentConfig;

/// Latent-space posterior sampling laboratory.
///
/// Every artifact lives under `<root>/run-<hash>/`, where the hash covers the
/// data, schedule, codec, denoiser, operator, degradation and measurement
/// settings. The root is `[output] dir` from the config, else `$SILO_LAB_DIR`,
/// else `./silo-lab`.
#[derive(Parser, Debug)]
#[command(name = "silo-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (`key = value` with `[sections]`); defaults if omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Solver seed; image `i` uses `seed + i`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-image work.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// silo | ldps | gml | psld | unguided
    #[arg(long, global = true)]
    method: Option<Method>,
    /// Guidance step size; omitted means the method's default.
    #[arg(long, global = true)]
    eta: Option<f64>,
    /// Measurement noise standard deviation.
    #[arg(long = "sigma-y", global = true)]
    sigma_y: Option<f64>,
    /// blur | sr2 | inpaint | jpeg | identity
    #[arg(long, global = true)]
    degradation: Option<String>,
    /// tcond | tindep
    #[arg(long = "operator-variant", global = true)]
    operator_variant: Option<OperatorVariant>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic train/test images.
    GenData(Common),
    /// Fit the linear autoencoder.
    TrainAe(Common),
    /// Fit the latent denoiser.
    TrainDenoiser(Common),
    /// Train the latent degradation operator for the configured degradation.
    TrainOperator(Common),
    /// Reconstruct the test set with one method.
    Reconstruct(Common),
    /// Score every reconstruction of this run and print a table.
    Evaluate(Common),
    /// Record decoder-gradient fields during a pixel-guided run.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// Test image to diagnose.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Comma-separated timesteps; default is ten evenly spaced ones.
        #[arg(long, value_delimiter = ',')]
        timesteps: Vec<usize>,
    },
    /// Time the latent-operator method against the pixel-guided baselines.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Number of test images.
        #[arg(long, default_value_t = 20)]
        images: usize,
    },
}

impl Common {
    fn load_config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.solver.seed = seed;
        }
        if let Some(m) = self.method {
            if m != cfg.solver.method {
                cfg.solver.gamma = None;
            }
            cfg.solver.method = m;
        }
        if let Some(eta) = self.eta {
            cfg.solver.eta = Some(eta);
        }
        if let Some(s) = self.sigma_y {
            cfg.measurement.sigma_y = s;
        }
        if let Some(d) = &self.degradation {
            cfg.degradation.kind = d.clone();
        }
        if let Some(v) = self.operator_variant {
            cfg.operator.variant = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    let common = match &cli.command {
        Command::GenData(c)
        | Command::TrainAe(c)
        | Command::TrainDenoiser(c)
        | Command::TrainOperator(c)
        | Command::Reconstruct(c)
        | Command::Evaluate(c) => c,
        Command::Diagnose { common, .. } | Command::Bench { common, .. } => common,
    };
    let cfg = common.load_config()?;
    let ctx = commands::Context::new(cfg, common.force, common.jobs)?;
    match cli.command {
        Command::GenData(_) => ctx.gen_data(),
        Command::TrainAe(_) => ctx.train_ae(),
        Command::TrainDenoiser(_) => ctx.train_denoiser(),
        Command::TrainOperator(_) => ctx.train_operator(),
        Command::Reconstruct(_) => ctx.reconstruct(),
        Command::Evaluate(_) => ctx.evaluate(),
        Command::Diagnose { index, timesteps, .. } => ctx.diagnose(index, &timesteps),
        Command::Bench { images, .. } => ctx.bench(images),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
