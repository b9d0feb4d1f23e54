//! Learned latent degradation `H_θ(ẑ₀ᵗ, t, σ_y) ≈ E(A(D(·)) + v)`.

use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::Checkpoint;
use crate::codec::{LatentCodec, LATENT_CLAMP};
use crate::data::ImageSample;
use crate::degrade::DegradationOp;
use crate::diffusion::{forward_noise, DenoiserModel, NoiseSchedule, TrainReport};
use crate::error::{Error, Result};
use crate::nn::{column_stats, cosine_lr, Activation, Adam, Mlp};
use crate::tensor::{NodeTag, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OperatorVariant {
    /// Input carries `[t/T, √(1−ᾱ_t)]`.
    TimeConditioned,
    /// Ignores `t`; trained on clean latents.
    TimeIndependent,
}

impl OperatorVariant {
    pub fn name(self) -> &'static str {
        match self {
            OperatorVariant::TimeConditioned => "tcond",
            OperatorVariant::TimeIndependent => "tindep",
        }
    }

    fn time_features(self) -> usize {
        match self {
            OperatorVariant::TimeConditioned => 2,
            OperatorVariant::TimeIndependent => 0,
        }
    }
}

impl fmt::Display for OperatorVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OperatorVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tcond" => Ok(OperatorVariant::TimeConditioned),
            "tindep" => Ok(OperatorVariant::TimeIndependent),
            other => Err(Error::Parse(format!("unknown operator variant '{other}' (expected tcond|tindep)"))),
        }
    }
}

fn input_row(variant: OperatorVariant, z: &[f64], t: usize, sigma_y: f64, schedule: &NoiseSchedule) -> Vec<f64> {
    let mut row = z.to_vec();
    if variant == OperatorVariant::TimeConditioned {
        row.push(t as f64 / schedule.steps() as f64);
        row.push((1.0 - schedule.alpha_bar(t)).sqrt());
    }
    row.push(sigma_y);
    row
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentOperatorModel {
    pub variant: OperatorVariant,
    pub net: Mlp,
    pub latent_dim: usize,
    /// Name of the degradation this operator emulates.
    pub degradation: String,
    /// Noise levels seen in training.
    pub sigma_ys: Vec<f64>,
}

impl LatentOperatorModel {
    fn input_dim(variant: OperatorVariant, k: usize) -> usize {
        k + variant.time_features() + 1
    }

    fn row(&self, z: &[f64], t: usize, sigma_y: f64, schedule: &NoiseSchedule) -> Vec<f64> {
        input_row(self.variant, z, t, sigma_y, schedule)
    }

    fn check(&self, len: usize, t: usize, schedule: &NoiseSchedule) -> Result<()> {
        if len != self.latent_dim {
            return Err(Error::Dimension {
                what: "latent operator input",
                expected: self.latent_dim,
                actual: len,
            });
        }
        if t > schedule.steps() {
            return Err(Error::invalid(format!("timestep {t} outside 0..={}", schedule.steps())));
        }
        Ok(())
    }

    /// `ŵ = H_θ(ẑ₀, t, σ_y)`.
    pub fn apply(&self, z: &[f64], t: usize, sigma_y: f64, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
        self.check(z.len(), t, schedule)?;
        let row = self.row(z, t, sigma_y, schedule);
        let n = row.len();
        Ok(self.net.predict(&Tensor::matrix(1, n, row)?)?.into_data())
    }

    /// Traced application; differentiable with respect to `z`.
    pub fn apply_on_tape(&self, tape: &mut Tape, z: Var, t: usize, sigma_y: f64, schedule: &NoiseSchedule) -> Result<Var> {
        let k = self.latent_dim;
        self.check(tape.value(z).len(), t, schedule)?;
        tape.scoped(NodeTag::Operator, |tape| {
            let params = self.net.bind(tape, false);
            let zrow = tape.reshape(z, &[1, k])?;
            let extra = self.row(&[], t, sigma_y, schedule);
            let extra_len = extra.len();
            let ev = tape.constant(Tensor::matrix(1, extra_len, extra)?);
            let input = tape.concat(zrow, ev)?;
            let out = self.net.forward(tape, &params, input)?;
            tape.reshape(out, &[k])
        })
    }

    pub fn save(&self, ckpt: &mut Checkpoint) {
        ckpt.set_meta("operator.variant", self.variant.name());
        ckpt.set_meta("operator.degradation", &self.degradation);
        ckpt.set_meta("operator.latent_dim", self.latent_dim.to_string());
        ckpt.set_meta(
            "operator.sigma_ys",
            self.sigma_ys.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
        );
        self.net.save(ckpt, "operator.net");
    }

    pub fn load(ckpt: &Checkpoint) -> Result<Self> {
        let variant: OperatorVariant = ckpt.meta("operator.variant")?.parse()?;
        let latent_dim: usize = ckpt.meta_parse("operator.latent_dim")?;
        let sigma_ys = ckpt
            .meta("operator.sigma_ys")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| Error::Checkpoint(format!("bad sigma_y '{s}'"))))
            .collect::<Result<Vec<f64>>>()?;
        let net = Mlp::load(ckpt, "operator.net")?;
        if net.input_dim() != Self::input_dim(variant, latent_dim) || net.output_dim() != latent_dim {
            return Err(Error::Checkpoint(format!(
                "operator network is {}→{}, expected {}→{latent_dim}",
                net.input_dim(),
                net.output_dim(),
                Self::input_dim(variant, latent_dim)
            )));
        }
        Ok(LatentOperatorModel {
            variant,
            net,
            latent_dim,
            degradation: ckpt.meta("operator.degradation")?.to_string(),
            sigma_ys,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OperatorTrainConfig {
    pub variant: OperatorVariant,
    /// Hidden widths; empty means `[4k, 4k]`.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Each training sample draws its noise level from this set.
    pub sigma_ys: Vec<f64>,
    /// Restrict training to clean latents (`t = 0`).
    pub clean_only: bool,
    /// Clamp the training target like the encoded measurement at inference.
    pub clamp_target: bool,
}

impl Default for OperatorTrainConfig {
    fn default() -> Self {
        OperatorTrainConfig {
            variant: OperatorVariant::TimeConditioned,
            hidden: Vec::new(),
            activation: Activation::Tanh,
            steps: 3000,
            batch: 64,
            lr: 2e-3,
            seed: 0,
            sigma_ys: vec![crate::degrade::DEFAULT_SIGMA_Y],
            clean_only: false,
            clamp_target: false,
        }
    }
}

/// One training or evaluation example for the operator.
#[derive(Clone, Debug)]
pub struct OperatorSample {
    pub input: Vec<f64>,
    pub t: usize,
    pub sigma_y: f64,
    pub target: Vec<f64>,
}

/// Pipeline that turns clean images into `(ẑ₀ᵗ, t, σ_y) → E(y)` examples.
/// Gradients never pass through it.
pub struct SampleSource<'a> {
    pub codec: &'a LatentCodec,
    pub denoiser: &'a DenoiserModel,
    pub op: &'a DegradationOp,
    pub schedule: &'a NoiseSchedule,
}

impl SampleSource<'_> {
    pub fn draw(
        &self,
        x: &ImageSample,
        t: usize,
        sigma_y: f64,
        clamp_target: bool,
        rng: &mut impl Rng,
    ) -> Result<OperatorSample> {
        let mut y = self.op.apply(&x.pixels)?;
        if sigma_y > 0.0 {
            let normal = Normal::new(0.0, sigma_y).map_err(|e| Error::invalid(e.to_string()))?;
            y.iter_mut().for_each(|v| *v += normal.sample(rng));
        }
        let lifted = self.op.lift(&y)?;
        let target = if clamp_target {
            self.codec.encode_measure(&lifted)?
        } else {
            self.codec.encode(&lifted)?
        };
        let z0 = self.codec.encode(&x.pixels)?;
        let input = if t == 0 {
            z0
        } else {
            let (zt, _) = forward_noise(&z0, t, self.schedule, rng)?;
            self.denoiser.denoise_z0(&zt, t, self.schedule)?
        };
        Ok(OperatorSample {
            input,
            t,
            sigma_y,
            target,
        })
    }
}

/// Mean per-sample `‖H(input) − target‖₁`, with both sides clamped when `clamp`.
pub fn operator_l1(
    model: &LatentOperatorModel,
    samples: &[OperatorSample],
    schedule: &NoiseSchedule,
    clamp: bool,
) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let w = model.apply(&s.input, s.t, s.sigma_y, schedule)?;
        total += w
            .iter()
            .zip(&s.target)
            .map(|(a, b)| {
                if clamp {
                    (a.clamp(-LATENT_CLAMP, LATENT_CLAMP) - b.clamp(-LATENT_CLAMP, LATENT_CLAMP)).abs()
                } else {
                    (a - b).abs()
                }
            })
            .sum::<f64>();
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Minimizes `E‖H_θ(ẑ₀ᵗ, t, σ_y) − E(y)‖₁` over images, noise and `t ~ U{0..T}`.
pub fn train_operator(
    source: &SampleSource<'_>,
    images: &[ImageSample],
    cfg: &OperatorTrainConfig,
) -> Result<(LatentOperatorModel, TrainReport)> {
    if images.is_empty() || cfg.batch == 0 || cfg.sigma_ys.is_empty() {
        return Err(Error::invalid("operator training needs images, a batch size and noise levels"));
    }
    let k = source.codec.latent_dim();
    if source.denoiser.latent_dim() != k {
        return Err(Error::Dimension {
            what: "denoiser latent dimension",
            expected: k,
            actual: source.denoiser.latent_dim(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let hidden = if cfg.hidden.is_empty() { vec![4 * k, 4 * k] } else { cfg.hidden.clone() };
    let in_dim = LatentOperatorModel::input_dim(cfg.variant, k);
    let mut sizes = vec![in_dim];
    sizes.extend(&hidden);
    sizes.push(k);
    let mut model = LatentOperatorModel {
        variant: cfg.variant,
        net: Mlp::new(&sizes, cfg.activation, true, &mut rng)?,
        latent_dim: k,
        degradation: source.op.kind().name().to_string(),
        sigma_ys: cfg.sigma_ys.clone(),
    };
    let clean_only = cfg.clean_only || cfg.variant == OperatorVariant::TimeIndependent;
    let draw_batch = |rng: &mut ChaCha8Rng| -> Result<(Tensor, Tensor)> {
        let mut inputs = Vec::with_capacity(cfg.batch * in_dim);
        let mut targets = Vec::with_capacity(cfg.batch * k);
        for _ in 0..cfg.batch {
            let x = &images[rng.random_range(0..images.len())];
            let t = if clean_only { 0 } else { rng.random_range(0..=source.schedule.steps()) };
            let sigma = *cfg.sigma_ys.choose(rng).expect("non-empty");
            let s = source.draw(x, t, sigma, cfg.clamp_target, rng)?;
            inputs.extend(input_row(cfg.variant, &s.input, t, sigma, source.schedule));
            targets.extend(s.target);
        }
        Ok((Tensor::matrix(cfg.batch, in_dim, inputs)?, Tensor::matrix(cfg.batch, k, targets)?))
    };

    // Fold input standardization into the first layer from a pilot batch.
    let (pilot, _) = draw_batch(&mut rng)?;
    let (mean, std) = column_stats(&pilot);
    model.net.standardize_inputs(&mean, &std)?;

    let mut adam = Adam::new(&model.net.parameters());
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let (inputs, targets) = draw_batch(&mut rng)?;
        let mut tape = Tape::new();
        let params = model.net.bind(&mut tape, true);
        let xi = tape.constant(inputs);
        let yi = tape.constant(targets);
        let out = model.net.forward(&mut tape, &params, xi)?;
        let r = tape.sub(out, yi)?;
        let l1 = tape.l1(r);
        let loss = tape.scale(l1, 1.0 / cfg.batch as f64);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged { what: "latent operator", step });
        }
        report.losses.push(value);
        let grads = model.net.gradients(&tape, &params, &tape.backward(loss)?);
        adam.step(model.net.parameters_mut(), &grads, cosine_lr(cfg.lr, 0.02, step, cfg.steps));
    }
    Ok((model, report))
}
