//! Linear (PCA) autoencoder: `z = Bᵀ(x − μ)`, `x ≈ μ + B z`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::data::ImageSample;
use crate::degrade::{measure, DegradationOp};
use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::tensor::{self, NodeTag, Tape, Tensor, Var};

/// Componentwise clamp applied to encoded measurements.
pub const LATENT_CLAMP: f64 = 4.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LatentCodec {
    mean: Tensor,
    /// `[d, k]`
    decoder: Tensor,
    /// `[k, d]`
    encoder: Tensor,
}

impl LatentCodec {
    /// Fits the top-`k` principal directions of the centered training pixels.
    pub fn fit(images: &[ImageSample], k: usize) -> Result<Self> {
        let n = images.len();
        let d = images.first().map_or(0, ImageSample::len);
        if k == 0 || n < k {
            return Err(Error::invalid(format!("need at least k = {k} images, got {n}")));
        }
        if k > d {
            return Err(Error::invalid(format!("k = {k} exceeds pixel dimension {d}")));
        }
        if images.iter().any(|x| x.len() != d) {
            return Err(Error::invalid("training images have differing sizes"));
        }
        let mut mean = vec![0.0; d];
        for x in images {
            for (m, v) in mean.iter_mut().zip(&x.pixels) {
                *m += v / n as f64;
            }
        }
        let centered = DMatrix::from_fn(n, d, |i, j| images[i].pixels[j] - mean[j]);
        let cov = centered.transpose() * &centered / n as f64;
        let eig = SymmetricEigen::new(cov);

        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let top = eig.eigenvalues[order[0]].max(0.0);
        let tol = (top * 1e-10).max(1e-24);
        let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > tol).count();
        if rank < k {
            return Err(Error::RankDeficient { requested: k, achieved: rank });
        }

        let mut basis = vec![0.0; d * k];
        for (col, &i) in order.iter().take(k).enumerate() {
            let v = eig.eigenvectors.column(i);
            // deterministic sign: largest-magnitude entry positive
            let pivot = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            for row in 0..d {
                basis[row * k + col] = sign * v[row];
            }
        }
        let decoder = Tensor::matrix(d, k, basis)?;
        let encoder = tensor::transpose(&decoder)?;
        Ok(LatentCodec {
            mean: Tensor::vector(mean),
            decoder,
            encoder,
        })
    }

    /// Codec from explicit maps, `E(x) = encoder·(x − mean)`, `D(z) = mean + decoder·z`.
    /// `encoder` defaults to `decoderᵀ`.
    pub fn from_parts(mean: Vec<f64>, decoder: Tensor, encoder: Option<Tensor>) -> Result<Self> {
        if decoder.rank() != 2 || decoder.rows() != mean.len() {
            return Err(Error::invalid(format!(
                "decoder shape {:?} incompatible with mean of length {}",
                decoder.shape(),
                mean.len()
            )));
        }
        let encoder = match encoder {
            Some(e) => e,
            None => tensor::transpose(&decoder)?,
        };
        if encoder.shape() != [decoder.cols(), decoder.rows()] {
            return Err(Error::invalid(format!(
                "encoder shape {:?} does not match decoder {:?}",
                encoder.shape(),
                decoder.shape()
            )));
        }
        Ok(LatentCodec {
            mean: Tensor::vector(mean),
            decoder,
            encoder,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.decoder.cols()
    }

    pub fn pixel_dim(&self) -> usize {
        self.decoder.rows()
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.data()
    }

    pub fn decoder_matrix(&self) -> &Tensor {
        &self.decoder
    }

    pub fn encoder_matrix(&self) -> &Tensor {
        &self.encoder
    }

    fn check(&self, what: &'static str, len: usize, expected: usize) -> Result<()> {
        if len != expected {
            return Err(Error::Dimension {
                what,
                expected,
                actual: len,
            });
        }
        Ok(())
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check("encoder input", x.len(), self.pixel_dim())?;
        let centered = tensor::sub(&Tensor::vector(x.to_vec()), &self.mean)?;
        Ok(tensor::matmul(&self.encoder, &centered)?.into_data())
    }

    /// Unclamped decoder output; clamp only when emitting an image.
    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check("decoder input", z.len(), self.latent_dim())?;
        tensor::add(&tensor::matmul(&self.decoder, &Tensor::vector(z.to_vec()))?, &self.mean).map(Tensor::into_data)
    }

    /// `clamp(E(y), -4, 4)` for a measurement already placed on the pixel grid.
    pub fn encode_measure(&self, y: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .encode(y)?
            .into_iter()
            .map(|v| v.clamp(-LATENT_CLAMP, LATENT_CLAMP))
            .collect())
    }

    pub fn encode_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.check("encoder input", tape.value(x).len(), self.pixel_dim())?;
        tape.scoped(NodeTag::Encoder, |tape| {
            let mean = tape.constant(self.mean.clone());
            let e = tape.constant(self.encoder.clone());
            let c = tape.sub(x, mean)?;
            tape.matmul(e, c)
        })
    }

    pub fn decode_on_tape(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        self.check("decoder input", tape.value(z).len(), self.latent_dim())?;
        tape.scoped(NodeTag::Decoder, |tape| {
            let mean = tape.constant(self.mean.clone());
            let d = tape.constant(self.decoder.clone());
            let x = tape.matmul(d, z)?;
            tape.add(x, mean)
        })
    }

    /// Largest deviation of `decoderᵀ·decoder` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let g = tensor::matmul(&tensor::transpose(&self.decoder).expect("matrix"), &self.decoder).expect("conforming");
        let k = self.latent_dim();
        (0..k * k)
            .map(|i| (g.data()[i] - if i / k == i % k { 1.0 } else { 0.0 }).abs())
            .fold(0.0, f64::max)
    }

    /// Decoder Lipschitz constant (largest singular value of the decoder map).
    pub fn lipschitz_constant(&self) -> f64 {
        tensor::spectral_norm(&self.decoder, 500)
    }

    pub fn save(&self, ckpt: &mut Checkpoint) {
        ckpt.set_meta("codec.kind", "pca");
        ckpt.insert("codec.mean", self.mean.clone());
        ckpt.insert("codec.decoder", self.decoder.clone());
        ckpt.insert("codec.encoder", self.encoder.clone());
    }

    pub fn load(ckpt: &Checkpoint) -> Result<Self> {
        let kind = ckpt.meta("codec.kind")?;
        if kind != "pca" {
            return Err(Error::Checkpoint(format!("unknown codec kind '{kind}'")));
        }
        let mean = ckpt.array("codec.mean")?;
        if mean.rank() != 1 {
            return Err(Error::Checkpoint("codec.mean must be a vector".into()));
        }
        LatentCodec::from_parts(
            mean.data().to_vec(),
            ckpt.array("codec.decoder")?.clone(),
            Some(ckpt.array("codec.encoder")?.clone()),
        )
        .map_err(|e| Error::Checkpoint(e.to_string()))
    }

    /// `D(E(x))` clamped to the pixel range.
    pub fn round_trip(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.decode(&self.encode(x)?)?.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect())
    }
}

/// Mean PSNRs for the four image pairs that expose how the codec treats
/// degraded inputs, with `f = D∘E`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EncodeDecodeRow {
    pub degradation: String,
    pub sigma_y: f64,
    /// PSNR(x, f(x))
    pub clean: f64,
    /// PSNR(y_nl, f(y_nl)), `y_nl = A(x)` without noise
    pub noiseless: f64,
    /// PSNR(y, f(y))
    pub noisy: f64,
    /// PSNR(y_nl, f(y))
    pub denoising: f64,
}

pub fn encode_decode_report(
    codec: &LatentCodec,
    images: &[ImageSample],
    ops: &[DegradationOp],
    sigma_y: f64,
    seed: u64,
) -> Result<Vec<EncodeDecodeRow>> {
    if ops.is_empty() || images.is_empty() {
        return Err(Error::invalid("report needs at least one image and one degradation"));
    }
    let n = images.len() as f64;
    ops.iter()
        .map(|op| {
            let mut row = EncodeDecodeRow {
                degradation: op.kind().name().to_string(),
                sigma_y,
                clean: 0.0,
                noiseless: 0.0,
                noisy: 0.0,
                denoising: 0.0,
            };
            for (i, x) in images.iter().enumerate() {
                let y_nl = op.lift(&op.apply(&x.pixels)?)?;
                let y = op.lift(&measure(op, x, sigma_y, seed.wrapping_add(i as u64))?.y)?;
                let f_y = codec.round_trip(&y)?;
                row.clean += psnr(&x.pixels, &codec.round_trip(&x.pixels)?)? / n;
                row.noiseless += psnr(&y_nl, &codec.round_trip(&y_nl)?)? / n;
                row.noisy += psnr(&y, &f_y)? / n;
                row.denoising += psnr(&y_nl, &f_y)? / n;
            }
            Ok(row)
        })
        .collect()
}
