//! Gaussian-mixture latent prior with a closed-form denoiser.
//!
//! Under `z_t = √ā·z₀ + √(1−ā)·ε` each component `N(μ_i, Σ_i)` becomes
//! `N(√ā·μ_i, S_i)` with `S_i = ā·Σ_i + (1−ā)·I`. Every `Σ_i` is stored by its
//! eigendecomposition, so `S_i` shares the eigenvectors and only the spectrum
//! depends on `ā`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Tensor};

#[derive(Clone, Debug, PartialEq)]
struct Component {
    weight: f64,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    /// Columns are eigenvectors of `cov`.
    basis: DMatrix<f64>,
    spectrum: DVector<f64>,
}

impl Component {
    fn new(weight: f64, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let sym = (&cov + cov.transpose()) * 0.5;
        if (&sym - &cov).amax() > 1e-9 * cov.amax().max(1.0) {
            return Err(Error::invalid("covariance is not symmetric"));
        }
        let eig = SymmetricEigen::new(sym.clone());
        if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::invalid("covariance is not positive definite"));
        }
        Ok(Component {
            weight,
            mean,
            cov: sym,
            basis: eig.eigenvectors,
            spectrum: eig.eigenvalues,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gmm {
    components: Arc<Vec<Component>>,
    dim: usize,
}

/// Everything the posterior mean and its Jacobian need at one `(z, ā)`.
#[derive(Clone, Debug)]
pub struct GmmPosterior {
    pub z0_hat: Vec<f64>,
    pub responsibilities: Vec<f64>,
    /// `∇ log p_t(z)`.
    pub score: Vec<f64>,
    /// Per component: conditional means `c_i` and scores `g_i`.
    cond_means: Vec<DVector<f64>>,
    scores: Vec<DVector<f64>>,
    alpha_bar: f64,
    components: Arc<Vec<Component>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GmmFitConfig {
    pub components: usize,
    pub max_iters: usize,
    /// Added to every covariance diagonal.
    pub reg: f64,
    pub tol: f64,
}

impl Default for GmmFitConfig {
    fn default() -> Self {
        GmmFitConfig {
            components: 8,
            max_iters: 200,
            reg: 1e-4,
            tol: 1e-7,
        }
    }
}

fn log_gaussian(diff: &DVector<f64>, basis: &DMatrix<f64>, spectrum: &DVector<f64>) -> f64 {
    let proj = basis.tr_mul(diff);
    let maha: f64 = proj.iter().zip(spectrum.iter()).map(|(p, s)| p * p / s).sum();
    let logdet: f64 = spectrum.iter().map(|s| s.ln()).sum();
    -0.5 * (maha + logdet + diff.len() as f64 * (2.0 * std::f64::consts::PI).ln())
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl Gmm {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covs: Vec<DMatrix<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != covs.len() {
            return Err(Error::invalid("mixture needs matching, non-empty weights, means and covariances"));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w > 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("mixture weights must be positive and sum to 1 (sum {total})")));
        }
        let dim = means[0].len();
        let mut components = Vec::with_capacity(weights.len());
        for ((w, m), c) in weights.into_iter().zip(means).zip(covs) {
            if m.len() != dim || c.shape() != (dim, dim) {
                return Err(Error::invalid("mixture component dimensions differ"));
            }
            components.push(Component::new(w, DVector::from_vec(m), c)?);
        }
        Ok(Gmm {
            components: Arc::new(components),
            dim,
        })
    }

    /// Expectation-maximization fit with k-means++ style initialization.
    pub fn fit(data: &[Vec<f64>], cfg: &GmmFitConfig, rng: &mut impl Rng) -> Result<Self> {
        let n = data.len();
        let k = cfg.components;
        if k == 0 || n < k {
            return Err(Error::invalid(format!("need at least {k} points to fit {k} components, got {n}")));
        }
        let dim = data[0].len();
        let points: Vec<DVector<f64>> = data.iter().map(|p| DVector::from_column_slice(p)).collect();

        let global_mean = points.iter().fold(DVector::zeros(dim), |acc, p| acc + p) / n as f64;
        let mut global_cov = DMatrix::zeros(dim, dim);
        for p in &points {
            let d = p - &global_mean;
            global_cov += &d * d.transpose();
        }
        global_cov /= n as f64;
        let reg = DMatrix::identity(dim, dim) * cfg.reg;

        let mut means = vec![points[rng.random_range(0..n)].clone()];
        while means.len() < k {
            let d2: Vec<f64> = points
                .iter()
                .map(|p| means.iter().map(|m| (p - m).norm_squared()).fold(f64::INFINITY, f64::min))
                .collect();
            let total: f64 = d2.iter().sum();
            let mut pick = rng.random_range(0.0..total.max(f64::MIN_POSITIVE));
            let mut idx = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if pick < *d {
                    idx = i;
                    break;
                }
                pick -= d;
            }
            means.push(points[idx].clone());
        }
        let mut gmm = Gmm {
            components: Arc::new(
                means
                    .into_iter()
                    .map(|m| Component::new(1.0 / k as f64, m, &global_cov + &reg))
                    .collect::<Result<_>>()?,
            ),
            dim,
        };

        let mut prev = f64::NEG_INFINITY;
        let mut resp = vec![vec![0.0; k]; n];
        for _ in 0..cfg.max_iters {
            // E-step
            let mut loglik = 0.0;
            for (p, r) in points.iter().zip(resp.iter_mut()) {
                for (ri, c) in r.iter_mut().zip(gmm.components.iter()) {
                    *ri = c.weight.ln() + log_gaussian(&(p - &c.mean), &c.basis, &c.spectrum);
                }
                let lse = log_sum_exp(r);
                loglik += lse;
                r.iter_mut().for_each(|v| *v = (*v - lse).exp());
            }
            loglik /= n as f64;
            // M-step
            let mut comps = Vec::with_capacity(k);
            for j in 0..k {
                let nj: f64 = resp.iter().map(|r| r[j]).sum::<f64>().max(1e-12);
                let mean = points.iter().zip(&resp).fold(DVector::zeros(dim), |acc, (p, r)| acc + p * r[j]) / nj;
                let mut cov = DMatrix::zeros(dim, dim);
                for (p, r) in points.iter().zip(&resp) {
                    let d = p - &mean;
                    cov += (&d * d.transpose()) * r[j];
                }
                cov = cov / nj + &reg;
                comps.push((nj / n as f64, mean, cov));
            }
            let total: f64 = comps.iter().map(|c| c.0).sum();
            gmm.components = Arc::new(
                comps
                    .into_iter()
                    .map(|(w, m, c)| Component::new(w / total, m, c))
                    .collect::<Result<_>>()?,
            );
            if (loglik - prev).abs() < cfg.tol * loglik.abs().max(1.0) {
                break;
            }
            prev = loglik;
        }
        Ok(gmm)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        self.components
            .iter()
            .fold(DVector::zeros(self.dim), |acc, c| acc + &c.mean * c.weight)
            .iter()
            .copied()
            .collect()
    }

    /// Mixture covariance `Σ π_i (Σ_i + μ_i μ_iᵀ) − μ μᵀ`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mu = DVector::from_vec(self.mean());
        let mut second = DMatrix::zeros(self.dim, self.dim);
        for c in self.components.iter() {
            second += (&c.cov + &c.mean * c.mean.transpose()) * c.weight;
        }
        second - &mu * mu.transpose()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let u: f64 = rng.random_range(0.0..1.0);
        let mut acc = 0.0;
        let mut chosen = self.components.last().expect("non-empty mixture");
        for c in self.components.iter() {
            acc += c.weight;
            if u < acc {
                chosen = c;
                break;
            }
        }
        let e = DVector::from_iterator(self.dim, (0..self.dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let scaled = e.zip_map(&chosen.spectrum, |v, s| v * s.sqrt());
        (&chosen.mean + &chosen.basis * scaled).iter().copied().collect()
    }

    /// `log p_t(z)` of the mixture noised to level `ā` (`ā = 1` is the prior).
    pub fn log_density(&self, z: &[f64], alpha_bar: f64) -> f64 {
        let z = DVector::from_column_slice(z);
        let terms: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                let s = c.spectrum.map(|l| alpha_bar * l + 1.0 - alpha_bar);
                c.weight.ln() + log_gaussian(&(&z - &c.mean * alpha_bar.sqrt()), &c.basis, &s)
            })
            .collect();
        log_sum_exp(&terms)
    }

    /// Exact `E[z₀ | z_t = z]` together with the score and Jacobian factors.
    pub fn posterior(&self, z: &[f64], alpha_bar: f64) -> Result<GmmPosterior> {
        if z.len() != self.dim {
            return Err(Error::Dimension {
                what: "mixture posterior input",
                expected: self.dim,
                actual: z.len(),
            });
        }
        let zv = DVector::from_column_slice(z);
        let sa = alpha_bar.sqrt();
        let mut logw = Vec::with_capacity(self.len());
        let mut cond_means = Vec::with_capacity(self.len());
        let mut scores = Vec::with_capacity(self.len());
        for c in self.components.iter() {
            let s = c.spectrum.map(|l| alpha_bar * l + 1.0 - alpha_bar);
            let diff = &zv - &c.mean * sa;
            let proj = c.basis.tr_mul(&diff);
            logw.push(c.weight.ln() + log_gaussian(&diff, &c.basis, &s));
            // S⁻¹(z − m) and Σ S⁻¹ (z − m) share the eigenbasis.
            let inv = proj.zip_map(&s, |p, si| p / si);
            let gain = proj.zip_zip_map(&c.spectrum, &s, |p, l, si| sa * l * p / si);
            cond_means.push(&c.mean + &c.basis * gain);
            scores.push(-(&c.basis * inv));
        }
        let lse = log_sum_exp(&logw);
        let resp: Vec<f64> = logw.iter().map(|l| (l - lse).exp()).collect();
        let mut z0 = DVector::zeros(self.dim);
        let mut score = DVector::zeros(self.dim);
        for ((r, c), g) in resp.iter().zip(&cond_means).zip(&scores) {
            z0 += c * *r;
            score += g * *r;
        }
        Ok(GmmPosterior {
            z0_hat: z0.iter().copied().collect(),
            responsibilities: resp,
            score: score.iter().copied().collect(),
            cond_means,
            scores,
            alpha_bar,
            components: Arc::clone(&self.components),
        })
    }

    pub fn save(&self, ckpt: &mut Checkpoint, prefix: &str) {
        ckpt.set_meta(format!("{prefix}.components"), self.len().to_string());
        ckpt.insert(format!("{prefix}.weights"), Tensor::vector(self.weights()));
        for (i, c) in self.components.iter().enumerate() {
            ckpt.insert(format!("{prefix}.mean{i}"), Tensor::vector(c.mean.iter().copied().collect()));
            // nalgebra is column-major; the matrix is symmetric so layout is moot
            ckpt.insert(
                format!("{prefix}.cov{i}"),
                Tensor::matrix(self.dim, self.dim, c.cov.iter().copied().collect()).expect("square"),
            );
        }
    }

    pub fn load(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let n: usize = ckpt.meta_parse(&format!("{prefix}.components"))?;
        let weights = ckpt.array(&format!("{prefix}.weights"))?.data().to_vec();
        let mut means = Vec::with_capacity(n);
        let mut covs = Vec::with_capacity(n);
        for i in 0..n {
            means.push(ckpt.array(&format!("{prefix}.mean{i}"))?.data().to_vec());
            let c = ckpt.array(&format!("{prefix}.cov{i}"))?;
            if c.rank() != 2 || c.rows() != c.cols() {
                return Err(Error::Checkpoint(format!("{prefix}.cov{i} is not square")));
            }
            covs.push(DMatrix::from_column_slice(c.rows(), c.cols(), c.data()));
        }
        Gmm::new(weights, means, covs).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

impl GmmPosterior {
    /// `Jᵀu` where `J = ∂ẑ₀/∂z`:
    /// `Σ r_i G_i u + Σ r_i (c_i·u)(g_i − ḡ)` with `G_i = √ā Σ_i S_i⁻¹` (symmetric).
    pub fn vjp(&self, u: &[f64]) -> Vec<f64> {
        let uv = DVector::from_column_slice(u);
        let gbar = DVector::from_column_slice(&self.score);
        let sa = self.alpha_bar.sqrt();
        let mut out = DVector::zeros(u.len());
        for (i, c) in self.components.iter().enumerate() {
            let r = self.responsibilities[i];
            if r < 1e-300 {
                continue;
            }
            let proj = c.basis.tr_mul(&uv);
            let gain = proj.zip_map(&c.spectrum, |p, l| sa * l * p / (self.alpha_bar * l + 1.0 - self.alpha_bar));
            out += (&c.basis * gain) * r;
            out += (&self.scores[i] - &gbar) * (r * self.cond_means[i].dot(&uv));
        }
        out.iter().copied().collect()
    }
}

/// Posterior-mean node for the tape; its VJP is [`GmmPosterior::vjp`].
pub(crate) struct PosteriorMeanOp(pub GmmPosterior);

impl CustomOp for PosteriorMeanOp {
    fn name(&self) -> &'static str {
        "gmm_posterior_mean"
    }

    fn vjp(&self, upstream: &Tensor) -> Tensor {
        Tensor::vector(self.0.vjp(upstream.data()))
    }
}
