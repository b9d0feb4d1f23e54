//! Subcommand implementations. Each stage reads the checkpoints of the
//! stages before it from the run directory and refuses to overwrite its own
//! outputs unless forced.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context as _, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use silo_core::checkpoint::Checkpoint;
use silo_core::codec::LatentCodec;
use silo_core::data::{generate, write_image, ImageSample};
use silo_core::degrade::{measure, DegradationOp, Measurement};
use silo_core::diffusion::{train_mlp_denoiser, DenoiserModel, Gmm, NoiseSchedule};
use silo_core::metrics::{evaluate_run, render_table, EvalReport, ReconRecord};
use silo_core::operator::{train_operator, LatentOperatorModel, SampleSource};
use silo_core::solvers::{decoder_gradient_diagnostic, solve, solve_batch, Method, Models, ReconstructionTrace};
use silo_core::tensor::Tensor;

use crate::config::{Backend, ExperimentConfig};

const DEFAULT_ROOT: &str = "silo-lab";

pub struct Context {
    cfg: ExperimentConfig,
    run_dir: PathBuf,
    force: bool,
    jobs: usize,
}

/// Everything a solver needs, loaded from the run directory.
struct Loaded {
    test: Vec<ImageSample>,
    codec: LatentCodec,
    denoiser: DenoiserModel,
    schedule: NoiseSchedule,
    op: DegradationOp,
    operator: Option<LatentOperatorModel>,
}

impl Loaded {
    fn models(&self) -> Models<'_> {
        Models {
            codec: &self.codec,
            denoiser: &self.denoiser,
            schedule: &self.schedule,
            op: &self.op,
            operator: self.operator.as_ref(),
        }
    }
}

#[derive(Serialize)]
struct ImageSummary<'a> {
    index: usize,
    method: &'a str,
    eta: f64,
    seed: u64,
    wall_ms: f64,
    encoder_calls: usize,
    decoder_calls: usize,
    loop_decoder_calls: usize,
    guidance_encoder_nodes: usize,
    guidance_decoder_nodes: usize,
}

#[derive(Serialize)]
struct BenchRecord<'a> {
    method: &'a str,
    degradation: &'a str,
    images: usize,
    steps: usize,
    mean_ms: f64,
    ratio_to_silo: f64,
}

fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?);
    for r in records {
        serde_json::to_writer(&mut out, &r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn images_tensor(images: &[ImageSample]) -> Result<Tensor> {
    let d = images.first().map_or(0, ImageSample::len);
    let data = images.iter().flat_map(|x| x.pixels.iter().copied()).collect();
    Ok(Tensor::matrix(images.len(), d, data)?)
}

fn tensor_images(t: &Tensor, size: usize, seeds: impl Fn(usize) -> u64) -> Result<Vec<ImageSample>> {
    t.data()
        .chunks_exact(t.cols().max(1))
        .enumerate()
        .map(|(i, row)| Ok(ImageSample::new(size, size, row.to_vec(), seeds(i))?))
        .collect()
}

impl Context {
    pub fn new(cfg: ExperimentConfig, force: bool, jobs: usize) -> Result<Self> {
        let root = cfg
            .output_dir
            .clone()
            .or_else(|| std::env::var_os("SILO_LAB_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_ROOT));
        let run_dir = root.join(format!("run-{}", cfg.run_hash()));
        Ok(Context {
            cfg,
            run_dir,
            force,
            jobs: jobs.max(1),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.run_dir.join(name)
    }

    /// Fails if `path` exists and overwriting was not requested.
    fn claim(&self, path: &Path) -> Result<()> {
        if path.exists() && !self.force {
            bail!("{} already exists for this config; pass --force to overwrite", path.display());
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
        }
        Ok(())
    }

    fn read_checkpoint(&self, name: &str, producer: &str) -> Result<Checkpoint> {
        let path = self.path(name);
        if !path.exists() {
            bail!(
                "missing checkpoint {}; run `silo-lab {producer}` with the same config and flags first",
                path.display()
            );
        }
        Checkpoint::read(&path).with_context(|| format!("cannot read checkpoint {}", path.display()))
    }

    fn operator_file(&self) -> String {
        format!("operator-{}.silo", self.cfg.operator.variant)
    }

    fn load_data(&self) -> Result<(Vec<ImageSample>, Vec<ImageSample>)> {
        let ckpt = self.read_checkpoint("data.silo", "gen-data")?;
        let spec = &self.cfg.data;
        let train = tensor_images(ckpt.array("train")?, spec.image_size, |i| spec.train_seed(i))?;
        let test = tensor_images(ckpt.array("test")?, spec.image_size, |i| spec.test_seed(i))?;
        Ok((train, test))
    }

    fn load_codec(&self) -> Result<LatentCodec> {
        let codec = LatentCodec::load(&self.read_checkpoint("codec.silo", "train-ae")?)?;
        let d = self.cfg.data.image_size.pow(2);
        if codec.pixel_dim() != d || codec.latent_dim() != self.cfg.latent_dim {
            bail!(
                "codec checkpoint has dimensions {}→{}, config expects {}→{}; retrain with `silo-lab train-ae --force`",
                codec.pixel_dim(),
                codec.latent_dim(),
                d,
                self.cfg.latent_dim
            );
        }
        Ok(codec)
    }

    fn load_denoiser(&self) -> Result<(DenoiserModel, NoiseSchedule)> {
        let ckpt = self.read_checkpoint("denoiser.silo", "train-denoiser")?;
        let denoiser = DenoiserModel::load(&ckpt)?;
        let schedule = NoiseSchedule::load(&ckpt)?;
        if denoiser.latent_dim() != self.cfg.latent_dim {
            bail!(
                "denoiser checkpoint has latent dimension {}, config expects {}; retrain with `silo-lab train-denoiser --force`",
                denoiser.latent_dim(),
                self.cfg.latent_dim
            );
        }
        Ok((denoiser, schedule))
    }

    fn load_operator(&self) -> Result<LatentOperatorModel> {
        let op = LatentOperatorModel::load(&self.read_checkpoint(&self.operator_file(), "train-operator")?)?;
        if op.latent_dim != self.cfg.latent_dim {
            bail!(
                "operator checkpoint has latent dimension {}, config expects {}; retrain with `silo-lab train-operator --force`",
                op.latent_dim,
                self.cfg.latent_dim
            );
        }
        Ok(op)
    }

    fn load_all(&self, with_operator: bool) -> Result<Loaded> {
        let (_, test) = self.load_data()?;
        let codec = self.load_codec()?;
        let (denoiser, schedule) = self.load_denoiser()?;
        let operator = if with_operator { Some(self.load_operator()?) } else { None };
        if let Some(o) = &operator {
            let s = self.cfg.measurement.sigma_y;
            if !o.sigma_ys.iter().any(|v| (v - s).abs() < 1e-12) {
                eprintln!(
                    "warning: operator was trained for sigma_y in {:?}, measurements use {s}",
                    o.sigma_ys
                );
            }
        }
        Ok(Loaded {
            test,
            codec,
            denoiser,
            schedule,
            op: self.cfg.degradation_op()?,
            operator,
        })
    }

    fn measurements(&self, op: &DegradationOp, test: &[ImageSample], n: usize) -> Result<Vec<Measurement>> {
        let m = &self.cfg.measurement;
        test.iter()
            .take(n)
            .enumerate()
            .map(|(i, x)| Ok(measure(op, x, m.sigma_y, m.seed.wrapping_add(i as u64))?))
            .collect()
    }

    fn image_count(&self, available: usize) -> usize {
        match self.cfg.solver.images {
            0 => available,
            n => n.min(available),
        }
    }

    pub fn gen_data(&self) -> Result<()> {
        let path = self.path("data.silo");
        self.claim(&path)?;
        let data = generate(&self.cfg.data)?;
        let mut ckpt = Checkpoint::new();
        ckpt.insert("train", images_tensor(&data.train)?);
        ckpt.insert("test", images_tensor(&data.test)?);
        ckpt.set_meta("data.master_seed", self.cfg.data.master_seed.to_string());
        ckpt.write(&path)?;
        let dir = self.path("test-images");
        fs::create_dir_all(&dir)?;
        for (i, x) in data.test.iter().enumerate() {
            write_image(x, dir.join(format!("{i:04}.pgm")))?;
        }
        fs::write(self.path("config.txt"), self.cfg.serialize())?;
        println!(
            "wrote {} train and {} test images to {}",
            data.train.len(),
            data.test.len(),
            self.run_dir.display()
        );
        Ok(())
    }

    pub fn train_ae(&self) -> Result<()> {
        let (train, test) = self.load_data()?;
        let path = self.path("codec.silo");
        self.claim(&path)?;
        let codec = LatentCodec::fit(&train, self.cfg.latent_dim)?;
        let mut ckpt = Checkpoint::new();
        codec.save(&mut ckpt);
        ckpt.write(&path)?;
        let psnr: f64 = test
            .iter()
            .map(|x| silo_core::metrics::psnr(&x.pixels, &codec.round_trip(&x.pixels)?))
            .sum::<silo_core::Result<f64>>()?
            / test.len() as f64;
        println!(
            "codec k={} orthonormality error {:.2e}, test round-trip PSNR {psnr:.2} dB",
            codec.latent_dim(),
            codec.orthonormality_error()
        );
        Ok(())
    }

    pub fn train_denoiser(&self) -> Result<()> {
        let (train, _) = self.load_data()?;
        let codec = self.load_codec()?;
        let path = self.path("denoiser.silo");
        self.claim(&path)?;
        let schedule = self.cfg.schedule()?;
        let latents = train
            .iter()
            .map(|x| codec.encode(&x.pixels))
            .collect::<silo_core::Result<Vec<_>>>()?;
        let started = Instant::now();
        let denoiser = match self.cfg.denoiser.backend {
            Backend::Gmm => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.denoiser.gmm_seed);
                DenoiserModel::Gmm(Gmm::fit(&latents, &self.cfg.denoiser.gmm, &mut rng)?)
            }
            Backend::Mlp => {
                let (model, report) = train_mlp_denoiser(&latents, &schedule, &self.cfg.denoiser.mlp)?;
                println!("denoiser loss {:.4} -> {:.4}", report.losses[0], report.tail_mean(100));
                model
            }
        };
        let mut ckpt = Checkpoint::new();
        denoiser.save(&mut ckpt);
        schedule.save(&mut ckpt);
        ckpt.write(&path)?;
        println!(
            "{} denoiser fitted in {:.1}s (T = {})",
            denoiser.backend(),
            started.elapsed().as_secs_f64(),
            schedule.steps()
        );
        Ok(())
    }

    pub fn train_operator(&self) -> Result<()> {
        let (train, _) = self.load_data()?;
        let codec = self.load_codec()?;
        let (denoiser, schedule) = self.load_denoiser()?;
        let path = self.path(&self.operator_file());
        self.claim(&path)?;
        let op = self.cfg.degradation_op()?;
        let source = SampleSource {
            codec: &codec,
            denoiser: &denoiser,
            op: &op,
            schedule: &schedule,
        };
        let started = Instant::now();
        let (model, report) = train_operator(&source, &train, &self.cfg.operator)?;
        let mut ckpt = Checkpoint::new();
        model.save(&mut ckpt);
        ckpt.write(&path)?;
        println!(
            "{} operator for {} trained in {:.1}s, L1 loss {:.3} -> {:.3}",
            model.variant,
            model.degradation,
            started.elapsed().as_secs_f64(),
            report.losses[0],
            report.tail_mean(100)
        );
        Ok(())
    }

    fn recon_dir(&self) -> PathBuf {
        self.path("recon")
            .join(format!("{}-{}", self.cfg.solver.method, self.cfg.solver_hash()))
    }

    pub fn reconstruct(&self) -> Result<()> {
        let method = self.cfg.solver.method;
        let loaded = self.load_all(method == Method::Silo)?;
        let dir = self.recon_dir();
        self.claim(&dir.join("recon.silo"))?;
        let n = self.image_count(loaded.test.len());
        let measurements = self.measurements(&loaded.op, &loaded.test, n)?;
        let cfg = self.cfg.solver_config(0)?;
        let started = Instant::now();
        let traces = solve_batch(&loaded.models(), &measurements, &cfg, self.jobs)?;

        let images = dir.join("images");
        let steps = dir.join("traces");
        fs::create_dir_all(&images)?;
        fs::create_dir_all(&steps)?;
        for (i, t) in traces.iter().enumerate() {
            write_image(&t.image, images.join(format!("{i:04}.pgm")))?;
            write_jsonl(&steps.join(format!("{i:04}.jsonl")), &t.steps)?;
        }
        write_jsonl(&dir.join("summary.jsonl"), traces.iter().enumerate().map(|(i, t)| summary(i, t, cfg.eta)))?;
        let mut ckpt = Checkpoint::new();
        ckpt.insert("images", images_tensor(&traces.iter().map(|t| t.image.clone()).collect::<Vec<_>>())?);
        ckpt.insert("wall_ms", Tensor::vector(traces.iter().map(|t| t.wall_ms).collect()));
        ckpt.set_meta("method", method.name());
        ckpt.set_meta("eta", cfg.eta.to_string());
        ckpt.write(dir.join("recon.silo"))?;
        fs::write(dir.join("config.txt"), self.cfg.serialize())?;
        println!(
            "{method} (eta = {}) reconstructed {n} images in {:.1}s -> {}",
            cfg.eta,
            started.elapsed().as_secs_f64(),
            dir.display()
        );
        Ok(())
    }

    pub fn evaluate(&self) -> Result<()> {
        let recon_root = self.path("recon");
        let mut dirs: Vec<PathBuf> = match fs::read_dir(&recon_root) {
            Ok(entries) => entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.join("recon.silo").exists())
                .collect(),
            Err(_) => Vec::new(),
        };
        if dirs.is_empty() {
            bail!(
                "no reconstructions under {}; run `silo-lab reconstruct` first",
                recon_root.display()
            );
        }
        dirs.sort();
        let (_, test) = self.load_data()?;
        let codec = self.load_codec()?;
        let op = self.cfg.degradation_op()?;
        let mut reports: Vec<EvalReport> = Vec::new();
        for dir in &dirs {
            let ckpt = Checkpoint::read(dir.join("recon.silo"))?;
            let size = self.cfg.data.image_size;
            let images = tensor_images(ckpt.array("images")?, size, |i| self.cfg.data.test_seed(i))?;
            let wall = ckpt.array("wall_ms")?.data().to_vec();
            let records: Vec<ReconRecord> = images
                .into_iter()
                .zip(wall)
                .enumerate()
                .map(|(index, (image, wall_ms))| ReconRecord { index, image, wall_ms })
                .collect();
            let label = format!("{} eta={}", ckpt.meta("method")?, ckpt.meta("eta")?);
            reports.push(evaluate_run(&label, &records, &test, &op, &codec)?);
        }
        let out = self.path("eval");
        fs::create_dir_all(&out)?;
        write_jsonl(&out.join("report.jsonl"), &reports)?;
        let table = render_table(&reports);
        fs::write(out.join("table.txt"), &table)?;
        print!("{table}");
        Ok(())
    }

    pub fn diagnose(&self, index: usize, timesteps: &[usize]) -> Result<()> {
        let loaded = self.load_all(false)?;
        if index >= loaded.test.len() {
            bail!("--index {index} is outside the test set of {}", loaded.test.len());
        }
        let steps = loaded.schedule.steps();
        let timesteps: Vec<usize> = if timesteps.is_empty() {
            (1..=10).map(|i| (i * steps / 10).max(1)).collect()
        } else {
            timesteps.to_vec()
        };
        let mut cfg = self.cfg.clone();
        if cfg.solver.method != Method::Ldps {
            cfg.solver.method = Method::Ldps;
            cfg.solver.eta = None;
            cfg.solver.gamma = None;
        }
        let solver = cfg.solver_config(index)?;
        let dir = self.path("diagnose").join(format!("{index:04}-{}", cfg.solver_hash()));
        self.claim(&dir.join("fields.jsonl"))?;
        let m = self.measurements(&loaded.op, &loaded.test, index + 1)?.pop().expect("index checked");
        let (_, fields) = decoder_gradient_diagnostic(&loaded.models(), &m, &solver, &timesteps)?;
        write_jsonl(&dir.join("fields.jsonl"), &fields)?;
        let size = self.cfg.data.image_size;
        println!("{:>5} {:>12} {:>12} {:>12}", "t", "norm", "max_abs", "residual");
        for f in &fields {
            let peak = f.pixel_field.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
            let scaled = f.pixel_field.iter().map(|v| v / peak).collect();
            write_image(&ImageSample::new(size, size, scaled, 0)?, dir.join(format!("field-t{:04}.pgm", f.t)))?;
            println!("{:>5} {:>12.4e} {:>12.4e} {:>12.4e}", f.t, f.norm, f.max_abs, f.residual);
        }
        Ok(())
    }

    pub fn bench(&self, images: usize) -> Result<()> {
        let loaded = self.load_all(true)?;
        let n = images.min(loaded.test.len());
        if n == 0 {
            bail!("--images must be at least 1");
        }
        let measurements = self.measurements(&loaded.op, &loaded.test, n)?;
        let mut methods = vec![Method::Silo, Method::Ldps, Method::GmlDps];
        if loaded.op.is_linear() {
            methods.push(Method::Psld);
        }
        let mut totals = vec![0.0; methods.len()];
        let mut cfg = self.cfg.clone();
        // Interleave methods per image so drift in machine load hits all equally.
        for (i, m) in measurements.iter().enumerate() {
            for (slot, &method) in methods.iter().enumerate() {
                cfg.solver.method = method;
                cfg.solver.eta = None;
                cfg.solver.gamma = None;
                let trace = solve(&loaded.models(), m, &cfg.solver_config(i)?)?;
                totals[slot] += trace.wall_ms;
            }
        }
        let kind = loaded.op.kind();
        let silo_ms = totals[0] / n as f64;
        let records: Vec<BenchRecord> = methods
            .iter()
            .zip(&totals)
            .map(|(m, total)| {
                let mean = total / n as f64;
                BenchRecord {
                    method: m.name(),
                    degradation: kind.name(),
                    images: n,
                    steps: loaded.schedule.steps(),
                    mean_ms: mean,
                    ratio_to_silo: mean / silo_ms,
                }
            })
            .collect();
        let dir = self.path("bench");
        self.claim(&dir.join(format!("{}.jsonl", kind.name())))?;
        write_jsonl(&dir.join(format!("{}.jsonl", kind.name())), &records)?;
        println!("{:<10} {:>14} {:>14}", "method", "ms / image", "vs silo");
        for r in &records {
            println!("{:<10} {:>14.2} {:>13.2}x", r.method, r.mean_ms, r.ratio_to_silo);
        }
        Ok(())
    }
}

fn summary(index: usize, t: &ReconstructionTrace, eta: f64) -> ImageSummary<'static> {
    ImageSummary {
        index,
        method: t.method.name(),
        eta,
        seed: t.seed,
        wall_ms: t.wall_ms,
        encoder_calls: t.encoder_calls,
        decoder_calls: t.decoder_calls,
        loop_decoder_calls: t.loop_decoder_calls,
        guidance_encoder_nodes: t.guidance_encoder_nodes,
        guidance_decoder_nodes: t.guidance_decoder_nodes,
    }
}
