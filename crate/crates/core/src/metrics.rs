//! Distortion metrics, the latent Fréchet proxy and run-level evaluation.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::codec::LatentCodec;
use crate::data::ImageSample;
use crate::degrade::DegradationOp;
use crate::error::{Error, Result};

/// Value reported for identical inputs, where PSNR is infinite.
pub const PSNR_CAP: f64 = 300.0;

/// PSNR with a data range of 2 (pixels in `[-1, 1]`).
pub fn psnr(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    if x.len() != x_hat.len() || x.is_empty() {
        return Err(Error::Dimension {
            what: "psnr inputs",
            expected: x.len(),
            actual: x_hat.len(),
        });
    }
    let mse = x.iter().zip(x_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (4.0 / mse).log10()).min(PSNR_CAP))
}

/// PSNR between `A(x)` and `A(x̂)`: consistency with the measurement.
pub fn cpsnr(x: &[f64], x_hat: &[f64], op: &DegradationOp) -> Result<f64> {
    psnr(&op.apply(x)?, &op.apply(x_hat)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FrechetProxy {
    pub distance: f64,
    /// Set when the covariance square root needed clipping of negative
    /// eigenvalues produced by round-off.
    pub fallback: bool,
}

/// Mean and unbiased covariance of row features.
pub fn gaussian_fit(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    let dim = features.first().map_or(0, Vec::len);
    if n == 0 || dim == 0 {
        return Err(Error::invalid("feature set is empty"));
    }
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::invalid("feature vectors have differing lengths"));
    }
    let mut mean = DVector::zeros(dim);
    for f in features {
        mean += DVector::from_column_slice(f);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for f in features {
        let c = DVector::from_column_slice(f) - &mean;
        cov += &c * c.transpose();
    }
    if n > 1 {
        cov /= (n - 1) as f64;
    }
    Ok((mean, cov))
}

fn symmetric_sqrt(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.amax().max(1e-300);
    let mut clipped = false;
    let roots = eig.eigenvalues.map(|l| {
        if l < -1e-10 * scale {
            clipped = true;
        }
        l.max(0.0).sqrt()
    });
    let v = &eig.eigenvectors;
    (v * DMatrix::from_diagonal(&roots) * v.transpose(), clipped)
}

/// Fréchet distance between two Gaussians,
/// `‖μa − μb‖² + tr(Σa + Σb − 2 (Σa^½ Σb Σa^½)^½)`.
pub fn frechet_gaussian(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> FrechetProxy {
    let (root_a, f1) = symmetric_sqrt(cov_a);
    let (cross, f2) = symmetric_sqrt(&(&root_a * cov_b * &root_a));
    let distance = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
    FrechetProxy {
        distance: distance.max(0.0),
        fallback: f1 || f2,
    }
}

pub fn frechet_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<FrechetProxy> {
    let (ma, ca) = gaussian_fit(a)?;
    let (mb, cb) = gaussian_fit(b)?;
    if ma.len() != mb.len() {
        return Err(Error::Dimension {
            what: "feature dimension",
            expected: ma.len(),
            actual: mb.len(),
        });
    }
    Ok(frechet_gaussian(&ma, &ca, &mb, &cb))
}

/// Fréchet proxy between two image sets, using codec latents as features.
pub fn frechet_proxy(codec: &LatentCodec, a: &[ImageSample], b: &[ImageSample]) -> Result<FrechetProxy> {
    let feats = |set: &[ImageSample]| -> Result<Vec<Vec<f64>>> { set.iter().map(|x| codec.encode(&x.pixels)).collect() };
    frechet_features(&feats(a)?, &feats(b)?)
}

/// One reconstructed test image.
#[derive(Clone, Debug)]
pub struct ReconRecord {
    /// Index into the test split.
    pub index: usize,
    pub image: ImageSample,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ImageScore {
    pub index: usize,
    pub psnr: f64,
    pub cpsnr: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Summary {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Summary { mean: f64::NAN, std: f64::NAN };
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        Summary { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub label: String,
    pub images: Vec<ImageScore>,
    pub psnr: Summary,
    pub cpsnr: Summary,
    pub frechet_proxy: FrechetProxy,
    pub wall_ms: Summary,
}

/// Scores reconstructions against the first `records.len()` test images.
/// `records[i]` must reconstruct test image `i`.
pub fn evaluate_run(
    label: &str,
    records: &[ReconRecord],
    test: &[ImageSample],
    op: &DegradationOp,
    codec: &LatentCodec,
) -> Result<EvalReport> {
    if records.is_empty() || records.len() > test.len() {
        return Err(Error::invalid(format!(
            "{} reconstructions for a test set of {}",
            records.len(),
            test.len()
        )));
    }
    let mut images = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        if r.index != i {
            return Err(Error::invalid(format!(
                "reconstruction at position {i} belongs to test image {}",
                r.index
            )));
        }
        let x = &test[i].pixels;
        images.push(ImageScore {
            index: i,
            psnr: psnr(x, &r.image.pixels)?,
            cpsnr: cpsnr(x, &r.image.pixels, op)?,
            wall_ms: r.wall_ms,
        });
    }
    let recon: Vec<ImageSample> = records.iter().map(|r| r.image.clone()).collect();
    Ok(EvalReport {
        label: label.to_string(),
        psnr: Summary::of(images.iter().map(|s| s.psnr)),
        cpsnr: Summary::of(images.iter().map(|s| s.cpsnr)),
        wall_ms: Summary::of(images.iter().map(|s| s.wall_ms)),
        frechet_proxy: frechet_proxy(codec, &test[..records.len()], &recon)?,
        images,
    })
}

/// Plain-text table: method, PSNR, CPSNR, Fréchet proxy, time per image.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let width = reports.iter().map(|r| r.label.chars().count()).max().unwrap_or(0).max(6);
    let _ = writeln!(
        out,
        "{:<width$} {:>14} {:>14} {:>16} {:>12}",
        "method", "PSNR [dB]", "CPSNR [dB]", "Frechet proxy", "time [ms]"
    );
    for r in reports {
        let flag = if r.frechet_proxy.fallback { "*" } else { "" };
        let _ = writeln!(
            out,
            "{:<width$} {:>8.2}±{:<5.2} {:>8.2}±{:<5.2} {:>15.4}{:1} {:>12.1}",
            r.label, r.psnr.mean, r.psnr.std, r.cpsnr.mean, r.cpsnr.std, r.frechet_proxy.distance, flag, r.wall_ms.mean
        );
    }
    out
}
