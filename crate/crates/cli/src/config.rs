//! Experiment configuration: a sectioned `key = value` text format.
//!
//! ```text
//! # comment
//! [solver]
//! method = silo
//! eta =            # empty means "method default"
//! ```
//!
//! Every key has a default, so an empty file is a valid config. Serializing
//! always writes every key in a fixed order; that canonical text is what the
//! run-directory hash is computed from.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use sha2::{Digest, Sha256};
use silo_core::data::DatasetSpec;
use silo_core::degrade::{DegradationKind, DegradationOp, DEFAULT_SIGMA_Y, HIGH_SIGMA_Y};
use silo_core::diffusion::{DenoiserTrainConfig, GmmFitConfig, NoiseSchedule};
use silo_core::nn::Activation;
use silo_core::operator::OperatorTrainConfig;
use silo_core::solvers::{Method, SolverConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backend {
    Gmm,
    Mlp,
}

impl Backend {
    pub fn name(self) -> &'static str {
        match self {
            Backend::Gmm => "gmm",
            Backend::Mlp => "mlp",
        }
    }
}

impl FromStr for Backend {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gmm" => Ok(Backend::Gmm),
            "mlp" => Ok(Backend::Mlp),
            other => bail!("unknown denoiser backend '{other}' (expected gmm|mlp)"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserSection {
    pub backend: Backend,
    pub gmm: GmmFitConfig,
    pub gmm_seed: u64,
    pub mlp: DenoiserTrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DegradationSection {
    pub kind: String,
    pub blur_kernel: usize,
    pub blur_sigma: f64,
    pub sr_factor: usize,
    /// Side of the masked box; 0 means half the image side.
    pub inpaint_box: usize,
    pub inpaint_fill: f64,
    pub jpeg_quality: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementSection {
    pub sigma_y: f64,
    /// Test image `i` is measured with noise seed `seed + i`.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverSection {
    pub method: Method,
    pub eta: Option<f64>,
    pub gamma: Option<f64>,
    pub seed: u64,
    pub detach_denoiser: bool,
    pub squared_residual: bool,
    /// Number of test images to reconstruct; 0 means all.
    pub images: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DatasetSpec,
    pub schedule: ScheduleSection,
    pub latent_dim: usize,
    pub denoiser: DenoiserSection,
    pub operator: OperatorTrainConfig,
    pub degradation: DegradationSection,
    pub measurement: MeasurementSection,
    pub solver: SolverSection,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let schedule = NoiseSchedule::scaled_linear(200).expect("valid default schedule");
        let (beta_start, beta_end) = schedule.beta_range();
        ExperimentConfig {
            data: DatasetSpec::default(),
            schedule: ScheduleSection {
                steps: schedule.steps(),
                beta_start,
                beta_end,
            },
            latent_dim: 32,
            denoiser: DenoiserSection {
                backend: Backend::Gmm,
                gmm: GmmFitConfig::default(),
                gmm_seed: 0,
                mlp: DenoiserTrainConfig::default(),
            },
            operator: OperatorTrainConfig {
                sigma_ys: vec![DEFAULT_SIGMA_Y, HIGH_SIGMA_Y],
                ..Default::default()
            },
            degradation: DegradationSection {
                kind: "blur".into(),
                blur_kernel: 7,
                blur_sigma: 1.0,
                sr_factor: 2,
                inpaint_box: 0,
                inpaint_fill: 0.0,
                jpeg_quality: 10,
            },
            measurement: MeasurementSection {
                sigma_y: DEFAULT_SIGMA_Y,
                seed: 5000,
            },
            solver: SolverSection {
                method: Method::Silo,
                eta: None,
                gamma: None,
                seed: 0,
                detach_denoiser: false,
                squared_residual: false,
                images: 0,
            },
            output_dir: None,
        }
    }
}

fn list<T: fmt::Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn opt<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e| anyhow!("{key}: cannot parse '{value}': {e}"))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: fmt::Display,
{
    if value.is_empty() {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

/// Sections that determine trained models and measurements. The run
/// directory is named after these; solver settings vary within a run.
const RUN_SECTIONS: [&str; 7] = ["data", "schedule", "codec", "denoiser", "operator", "degradation", "measurement"];

impl ExperimentConfig {
    /// `(section, key, value)` for every field, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, &'static str, String)> {
        let (d, s, n, o, g, m, v) = (
            &self.data,
            &self.schedule,
            &self.denoiser,
            &self.operator,
            &self.degradation,
            &self.measurement,
            &self.solver,
        );
        vec![
            ("data", "image_size", d.image_size.to_string()),
            ("data", "train_count", d.train_count.to_string()),
            ("data", "test_count", d.test_count.to_string()),
            ("data", "master_seed", d.master_seed.to_string()),
            ("schedule", "steps", s.steps.to_string()),
            ("schedule", "beta_start", s.beta_start.to_string()),
            ("schedule", "beta_end", s.beta_end.to_string()),
            ("codec", "latent_dim", self.latent_dim.to_string()),
            ("denoiser", "backend", n.backend.name().into()),
            ("denoiser", "gmm_components", n.gmm.components.to_string()),
            ("denoiser", "gmm_max_iters", n.gmm.max_iters.to_string()),
            ("denoiser", "gmm_reg", n.gmm.reg.to_string()),
            ("denoiser", "gmm_tol", n.gmm.tol.to_string()),
            ("denoiser", "gmm_seed", n.gmm_seed.to_string()),
            ("denoiser", "mlp_hidden", list(&n.mlp.hidden)),
            ("denoiser", "mlp_activation", n.mlp.activation.name().into()),
            ("denoiser", "mlp_steps", n.mlp.steps.to_string()),
            ("denoiser", "mlp_batch", n.mlp.batch.to_string()),
            ("denoiser", "mlp_lr", n.mlp.lr.to_string()),
            ("denoiser", "mlp_seed", n.mlp.seed.to_string()),
            ("operator", "variant", o.variant.to_string()),
            ("operator", "hidden", list(&o.hidden)),
            ("operator", "activation", o.activation.name().into()),
            ("operator", "steps", o.steps.to_string()),
            ("operator", "batch", o.batch.to_string()),
            ("operator", "lr", o.lr.to_string()),
            ("operator", "seed", o.seed.to_string()),
            ("operator", "sigma_ys", list(&o.sigma_ys)),
            ("operator", "clean_only", o.clean_only.to_string()),
            ("operator", "clamp_target", o.clamp_target.to_string()),
            ("degradation", "kind", g.kind.clone()),
            ("degradation", "blur_kernel", g.blur_kernel.to_string()),
            ("degradation", "blur_sigma", g.blur_sigma.to_string()),
            ("degradation", "sr_factor", g.sr_factor.to_string()),
            ("degradation", "inpaint_box", g.inpaint_box.to_string()),
            ("degradation", "inpaint_fill", g.inpaint_fill.to_string()),
            ("degradation", "jpeg_quality", g.jpeg_quality.to_string()),
            ("measurement", "sigma_y", m.sigma_y.to_string()),
            ("measurement", "seed", m.seed.to_string()),
            ("solver", "method", v.method.to_string()),
            ("solver", "eta", opt(&v.eta)),
            ("solver", "gamma", opt(&v.gamma)),
            ("solver", "seed", v.seed.to_string()),
            ("solver", "detach_denoiser", v.detach_denoiser.to_string()),
            ("solver", "squared_residual", v.squared_residual.to_string()),
            ("solver", "images", v.images.to_string()),
            (
                "output",
                "dir",
                self.output_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
        ]
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let full = format!("{section}.{key}");
        let k = full.as_str();
        match (section, key) {
            ("data", "image_size") => self.data.image_size = parse(k, value)?,
            ("data", "train_count") => self.data.train_count = parse(k, value)?,
            ("data", "test_count") => self.data.test_count = parse(k, value)?,
            ("data", "master_seed") => self.data.master_seed = parse(k, value)?,
            ("schedule", "steps") => self.schedule.steps = parse(k, value)?,
            ("schedule", "beta_start") => self.schedule.beta_start = parse(k, value)?,
            ("schedule", "beta_end") => self.schedule.beta_end = parse(k, value)?,
            ("codec", "latent_dim") => self.latent_dim = parse(k, value)?,
            ("denoiser", "backend") => self.denoiser.backend = parse(k, value)?,
            ("denoiser", "gmm_components") => self.denoiser.gmm.components = parse(k, value)?,
            ("denoiser", "gmm_max_iters") => self.denoiser.gmm.max_iters = parse(k, value)?,
            ("denoiser", "gmm_reg") => self.denoiser.gmm.reg = parse(k, value)?,
            ("denoiser", "gmm_tol") => self.denoiser.gmm.tol = parse(k, value)?,
            ("denoiser", "gmm_seed") => self.denoiser.gmm_seed = parse(k, value)?,
            ("denoiser", "mlp_hidden") => self.denoiser.mlp.hidden = parse_list(k, value)?,
            ("denoiser", "mlp_activation") => self.denoiser.mlp.activation = Activation::parse(value)?,
            ("denoiser", "mlp_steps") => self.denoiser.mlp.steps = parse(k, value)?,
            ("denoiser", "mlp_batch") => self.denoiser.mlp.batch = parse(k, value)?,
            ("denoiser", "mlp_lr") => self.denoiser.mlp.lr = parse(k, value)?,
            ("denoiser", "mlp_seed") => self.denoiser.mlp.seed = parse(k, value)?,
            ("operator", "variant") => self.operator.variant = parse(k, value)?,
            ("operator", "hidden") => self.operator.hidden = parse_list(k, value)?,
            ("operator", "activation") => self.operator.activation = Activation::parse(value)?,
            ("operator", "steps") => self.operator.steps = parse(k, value)?,
            ("operator", "batch") => self.operator.batch = parse(k, value)?,
            ("operator", "lr") => self.operator.lr = parse(k, value)?,
            ("operator", "seed") => self.operator.seed = parse(k, value)?,
            ("operator", "sigma_ys") => self.operator.sigma_ys = parse_list(k, value)?,
            ("operator", "clean_only") => self.operator.clean_only = parse(k, value)?,
            ("operator", "clamp_target") => self.operator.clamp_target = parse(k, value)?,
            ("degradation", "kind") => self.degradation.kind = value.to_string(),
            ("degradation", "blur_kernel") => self.degradation.blur_kernel = parse(k, value)?,
            ("degradation", "blur_sigma") => self.degradation.blur_sigma = parse(k, value)?,
            ("degradation", "sr_factor") => self.degradation.sr_factor = parse(k, value)?,
            ("degradation", "inpaint_box") => self.degradation.inpaint_box = parse(k, value)?,
            ("degradation", "inpaint_fill") => self.degradation.inpaint_fill = parse(k, value)?,
            ("degradation", "jpeg_quality") => self.degradation.jpeg_quality = parse(k, value)?,
            ("measurement", "sigma_y") => self.measurement.sigma_y = parse(k, value)?,
            ("measurement", "seed") => self.measurement.seed = parse(k, value)?,
            ("solver", "method") => self.solver.method = parse(k, value)?,
            ("solver", "eta") => self.solver.eta = parse_opt(k, value)?,
            ("solver", "gamma") => self.solver.gamma = parse_opt(k, value)?,
            ("solver", "seed") => self.solver.seed = parse(k, value)?,
            ("solver", "detach_denoiser") => self.solver.detach_denoiser = parse(k, value)?,
            ("solver", "squared_residual") => self.solver.squared_residual = parse(k, value)?,
            ("solver", "images") => self.solver.images = parse(k, value)?,
            ("output", "dir") => self.output_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            _ => bail!("unknown key '{key}' in section [{section}]"),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = || format!("line {}: '{}'", n + 1, raw.trim());
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').with_context(|| format!("{}: unclosed section header", at()))?;
                section = Some(name.trim().to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("{}: expected 'key = value'", at()))?;
            let sec = section
                .as_deref()
                .with_context(|| format!("{}: key outside any [section]", at()))?;
            cfg.set(sec, key.trim(), value.trim()).with_context(at)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("config parse error in {}", path.display()))
    }

    /// Canonical text: every key, fixed order.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (section, key, value) in self.entries() {
            if section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{section}]");
                current = section;
            }
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    /// Short hash of the model-determining sections; names the run directory.
    pub fn run_hash(&self) -> String {
        hash_entries(self.entries().into_iter().filter(|(s, _, _)| RUN_SECTIONS.contains(s)))
    }

    /// Short hash of the solver section; names a reconstruction directory.
    pub fn solver_hash(&self) -> String {
        hash_entries(self.entries().into_iter().filter(|(s, _, _)| *s == "solver"))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.schedule()?;
        self.degradation_op()?;
        if self.latent_dim == 0 || self.latent_dim > self.data.image_size.pow(2) {
            bail!("codec.latent_dim must be in 1..={}", self.data.image_size.pow(2));
        }
        if self.operator.sigma_ys.is_empty() || self.operator.sigma_ys.iter().any(|s| !(*s >= 0.0)) {
            bail!("operator.sigma_ys must be a non-empty list of noise levels >= 0");
        }
        if !(self.measurement.sigma_y >= 0.0) {
            bail!("measurement.sigma_y must be >= 0");
        }
        self.solver_config(0)?;
        if self.solver.method == Method::Psld && !self.degradation_op()?.is_linear() {
            bail!(
                "psld needs a linear degradation and {} is nonlinear; choose another --method",
                self.degradation.kind
            );
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::new(self.schedule.steps, self.schedule.beta_start, self.schedule.beta_end)?)
    }

    pub fn degradation_kind(&self) -> Result<DegradationKind> {
        let g = &self.degradation;
        let size = self.data.image_size;
        Ok(match DegradationKind::default_for(&g.kind, size)? {
            DegradationKind::GaussianBlur { .. } => DegradationKind::GaussianBlur {
                kernel_size: g.blur_kernel,
                sigma: g.blur_sigma,
            },
            DegradationKind::Downsample { .. } => DegradationKind::Downsample { factor: g.sr_factor },
            DegradationKind::BoxInpaint { .. } => DegradationKind::BoxInpaint {
                box_size: if g.inpaint_box == 0 { size / 2 } else { g.inpaint_box },
                fill: g.inpaint_fill,
            },
            DegradationKind::DctJpeg { .. } => DegradationKind::DctJpeg {
                quality: g.jpeg_quality,
            },
            DegradationKind::Identity => DegradationKind::Identity,
        })
    }

    pub fn degradation_op(&self) -> Result<DegradationOp> {
        Ok(DegradationOp::new(self.degradation_kind()?, self.data.image_size)?)
    }

    /// Solver settings for test image `index` (seed offset by the index).
    pub fn solver_config(&self, index: usize) -> Result<SolverConfig> {
        let s = &self.solver;
        let kind = self.degradation_kind()?;
        let mut cfg = SolverConfig::defaults(s.method, kind, s.seed.wrapping_add(index as u64));
        cfg.eta = s.eta.unwrap_or(cfg.eta);
        cfg.gamma = s.gamma.unwrap_or(cfg.gamma);
        cfg.detach_denoiser = s.detach_denoiser;
        cfg.squared_residual = s.squared_residual;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn hash_entries(entries: impl Iterator<Item = (&'static str, &'static str, String)>) -> String {
    let mut hasher = Sha256::new();
    for (s, k, v) in entries {
        hasher.update(format!("{s}.{k}={v}\n").as_bytes());
    }
    hasher.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
}
