//! Denoiser backends: the closed-form mixture posterior and a learned
//! ε-prediction network.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gmm::{Gmm, PosteriorMeanOp};
use super::{forward_noise, NoiseSchedule};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{cosine_lr, Activation, Adam, Mlp};
use crate::tensor::{NodeTag, Tape, Tensor, Var};

/// ε-prediction network taking `z_t ⊕ [t/T, √(1−ᾱ_t)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpDenoiser {
    pub net: Mlp,
    pub latent_dim: usize,
}

impl MlpDenoiser {
    pub fn new(latent_dim: usize, hidden: &[usize], activation: Activation, rng: &mut impl Rng) -> Result<Self> {
        let mut sizes = vec![latent_dim + 2];
        sizes.extend_from_slice(hidden);
        sizes.push(latent_dim);
        Ok(MlpDenoiser {
            net: Mlp::new(&sizes, activation, true, rng)?,
            latent_dim,
        })
    }

    fn time_features(t: usize, schedule: &NoiseSchedule) -> [f64; 2] {
        [t as f64 / schedule.steps() as f64, (1.0 - schedule.alpha_bar(t)).sqrt()]
    }

    /// Input rows `[z ⊕ time features]` for a batch.
    fn input_rows(zs: &[&[f64]], ts: &[usize], schedule: &NoiseSchedule) -> Tensor {
        let cols = zs[0].len() + 2;
        let mut data = Vec::with_capacity(zs.len() * cols);
        for (z, &t) in zs.iter().zip(ts) {
            data.extend_from_slice(z);
            data.extend_from_slice(&Self::time_features(t, schedule));
        }
        Tensor::matrix(zs.len(), cols, data).expect("consistent rows")
    }

    pub fn predict_eps(&self, z: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
        Ok(self.net.predict(&Self::input_rows(&[z], &[t], schedule))?.into_data())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DenoiserModel {
    Gmm(Gmm),
    Mlp(MlpDenoiser),
}

impl DenoiserModel {
    pub fn backend(&self) -> &'static str {
        match self {
            DenoiserModel::Gmm(_) => "gmm",
            DenoiserModel::Mlp(_) => "mlp",
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            DenoiserModel::Gmm(g) => g.dim(),
            DenoiserModel::Mlp(m) => m.latent_dim,
        }
    }

    fn check(&self, z: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<()> {
        if z.len() != self.latent_dim() {
            return Err(Error::Dimension {
                what: "denoiser input",
                expected: self.latent_dim(),
                actual: z.len(),
            });
        }
        if t > schedule.steps() {
            return Err(Error::invalid(format!("timestep {t} outside 0..={}", schedule.steps())));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { t });
        }
        Ok(())
    }

    /// Predicted noise `ε̂(z_t, t)`.
    pub fn predict_eps(&self, z: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
        self.check(z, t, schedule)?;
        match self {
            DenoiserModel::Mlp(m) => m.predict_eps(z, t, schedule),
            DenoiserModel::Gmm(g) => {
                let ab = schedule.alpha_bar(t);
                if ab >= 1.0 {
                    return Ok(vec![0.0; z.len()]);
                }
                let p = g.posterior(z, ab)?;
                Ok(z.iter().zip(&p.z0_hat).map(|(zi, xi)| (zi - ab.sqrt() * xi) / (1.0 - ab).sqrt()).collect())
            }
        }
    }

    /// `ẑ₀ᵗ`: the exact posterior mean for the mixture, or
    /// `(z_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t` for the network.
    pub fn denoise_z0(&self, z: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
        self.check(z, t, schedule)?;
        let ab = schedule.alpha_bar(t);
        match self {
            DenoiserModel::Gmm(g) => Ok(g.posterior(z, ab)?.z0_hat),
            DenoiserModel::Mlp(m) => {
                // Same operation order as the traced path, so both agree bitwise.
                let eps = m.predict_eps(z, t, schedule)?;
                let (s, inv) = ((1.0 - ab).sqrt(), 1.0 / ab.sqrt());
                Ok(z.iter().zip(&eps).map(|(zi, e)| (zi - e * s) * inv).collect())
            }
        }
    }

    /// Traced `ẑ₀ᵗ`. With `detach`, ε̂ is held constant so the Jacobian
    /// reduces to `I/√ᾱ_t`.
    pub fn denoise_on_tape(&self, tape: &mut Tape, z: Var, t: usize, schedule: &NoiseSchedule, detach: bool) -> Result<Var> {
        let zval = tape.value(z).data().to_vec();
        self.check(&zval, t, schedule)?;
        let ab = schedule.alpha_bar(t);
        tape.scoped(NodeTag::Denoiser, |tape| {
            if detach {
                let eps = self.predict_eps(&zval, t, schedule)?;
                let e = tape.constant(Tensor::vector(eps));
                let scaled = tape.scale(e, (1.0 - ab).sqrt());
                let diff = tape.sub(z, scaled)?;
                return Ok(tape.scale(diff, 1.0 / ab.sqrt()));
            }
            match self {
                DenoiserModel::Gmm(g) => {
                    let post = g.posterior(&zval, ab)?;
                    let value = Tensor::vector(post.z0_hat.clone());
                    Ok(tape.custom(z, value, Box::new(PosteriorMeanOp(post))))
                }
                DenoiserModel::Mlp(m) => {
                    let k = m.latent_dim;
                    let params = m.net.bind(tape, false);
                    let row = tape.reshape(z, &[1, k])?;
                    let tf = tape.constant(Tensor::matrix(1, 2, MlpDenoiser::time_features(t, schedule).to_vec())?);
                    let input = tape.concat(row, tf)?;
                    let out = m.net.forward(tape, &params, input)?;
                    let eps = tape.reshape(out, &[k])?;
                    let scaled = tape.scale(eps, (1.0 - ab).sqrt());
                    let diff = tape.sub(z, scaled)?;
                    Ok(tape.scale(diff, 1.0 / ab.sqrt()))
                }
            }
        })
    }

    pub fn save(&self, ckpt: &mut Checkpoint) {
        ckpt.set_meta("denoiser.backend", self.backend());
        match self {
            DenoiserModel::Gmm(g) => g.save(ckpt, "denoiser.gmm"),
            DenoiserModel::Mlp(m) => m.net.save(ckpt, "denoiser.mlp"),
        }
    }

    pub fn load(ckpt: &Checkpoint) -> Result<Self> {
        match ckpt.meta("denoiser.backend")? {
            "gmm" => Ok(DenoiserModel::Gmm(Gmm::load(ckpt, "denoiser.gmm")?)),
            "mlp" => {
                let net = Mlp::load(ckpt, "denoiser.mlp")?;
                let latent_dim = net.output_dim();
                if net.input_dim() != latent_dim + 2 {
                    return Err(Error::Checkpoint(format!(
                        "denoiser network takes {} inputs, expected {}",
                        net.input_dim(),
                        latent_dim + 2
                    )));
                }
                Ok(DenoiserModel::Mlp(MlpDenoiser { net, latent_dim }))
            }
            other => Err(Error::Checkpoint(format!("unknown denoiser backend '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserTrainConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        DenoiserTrainConfig {
            hidden: vec![128, 128],
            activation: Activation::Tanh,
            steps: 4000,
            batch: 64,
            lr: 2e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Minibatch loss per optimizer step.
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean loss over the last `n` steps.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let tail = &self.losses[self.losses.len().saturating_sub(n)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Minimizes `E‖ε − ε̂(z_t, t)‖²` with `t ~ U{1..T}`.
pub fn train_mlp_denoiser(
    latents: &[Vec<f64>],
    schedule: &NoiseSchedule,
    cfg: &DenoiserTrainConfig,
) -> Result<(DenoiserModel, TrainReport)> {
    let k = latents.first().map_or(0, Vec::len);
    if k == 0 || cfg.batch == 0 {
        return Err(Error::invalid("denoiser training needs non-empty latents and batch"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = MlpDenoiser::new(k, &cfg.hidden, cfg.activation, &mut rng)?;
    let mut adam = Adam::new(&model.net.parameters());
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..latents.len()).collect();
    let mut cursor = order.len();
    for step in 0..cfg.steps {
        let mut zs = Vec::with_capacity(cfg.batch);
        let mut ts = Vec::with_capacity(cfg.batch);
        let mut eps = Vec::with_capacity(cfg.batch * k);
        for _ in 0..cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let t = rng.random_range(1..=schedule.steps());
            let (zt, e) = forward_noise(&latents[order[cursor]], t, schedule, &mut rng)?;
            cursor += 1;
            zs.push(zt);
            ts.push(t);
            eps.extend(e);
        }
        let refs: Vec<&[f64]> = zs.iter().map(Vec::as_slice).collect();
        let mut tape = Tape::new();
        let params = model.net.bind(&mut tape, true);
        let input = tape.constant(MlpDenoiser::input_rows(&refs, &ts, schedule));
        let target = tape.constant(Tensor::matrix(cfg.batch, k, eps)?);
        let out = model.net.forward(&mut tape, &params, input)?;
        let r = tape.sub(out, target)?;
        let sq = tape.squared_norm(r)?;
        let loss = tape.scale(sq, 1.0 / cfg.batch as f64);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged { what: "denoiser", step });
        }
        report.losses.push(value);
        let grads = model.net.gradients(&tape, &params, &tape.backward(loss)?);
        adam.step(model.net.parameters_mut(), &grads, cosine_lr(cfg.lr, 0.05, step, cfg.steps));
    }
    Ok((DenoiserModel::Mlp(model), report))
}
