//! Acceptance suite: twelve criteria, run in order on one thread, one
//! `PASS`/`FAIL` line each. Pass substrings as arguments to run a subset,
//! e.g. `cargo test --test acceptance -- 7 speed`.

use std::collections::HashMap;
use std::process::ExitCode;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use silo_core::codec::LatentCodec;
use silo_core::data::{generate, sample_image, Dataset, DatasetSpec, ImageSample};
use silo_core::degrade::{measure, DegradationOp, Measurement, DEFAULT_SIGMA_Y, HIGH_SIGMA_Y};
use silo_core::diffusion::{forward_noise, sample_prior, standard_normal, DenoiserModel, Gmm, GmmFitConfig, NoiseSchedule};
use silo_core::metrics::{cpsnr, evaluate_run, EvalReport, ReconRecord};
use silo_core::operator::{operator_l1, train_operator, LatentOperatorModel, OperatorSample, OperatorTrainConfig, SampleSource};
use silo_core::solvers::{
    decoder_gradient, decoder_gradient_analytic, decoder_gradient_diagnostic, solve, solve_batch, Guide, Method, Models,
    SolverConfig,
};
use silo_core::tensor::{finite_difference, relative_error};
use silo_core::Error;

/// Out-of-mask CPSNR floor for the eight-seed inpainting run, measured once
/// on the desk setup and pinned.
const DIVERSITY_CPSNR_FLOOR: f64 = 32.0;

const LATENT_DIM: usize = 32;
const STEPS: usize = 200;
const MEASURE_SEED: u64 = 5000;
const DEGRADATIONS: [&str; 4] = ["blur", "sr2", "inpaint", "jpeg"];

struct Desk {
    data: Dataset,
    codec: LatentCodec,
    denoiser: DenoiserModel,
    schedule: NoiseSchedule,
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let data = generate(&DatasetSpec::default()).unwrap();
        let codec = LatentCodec::fit(&data.train, LATENT_DIM).unwrap();
        let latents: Vec<Vec<f64>> = data.train.iter().map(|x| codec.encode(&x.pixels).unwrap()).collect();
        let gmm = Gmm::fit(&latents, &GmmFitConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        Desk {
            data,
            codec,
            denoiser: DenoiserModel::Gmm(gmm),
            schedule: NoiseSchedule::scaled_linear(STEPS).unwrap(),
        }
    })
}

fn op(name: &str) -> &'static DegradationOp {
    static OPS: OnceLock<Mutex<HashMap<String, &'static DegradationOp>>> = OnceLock::new();
    let mut ops = OPS.get_or_init(Default::default).lock().unwrap();
    ops.entry(name.to_string())
        .or_insert_with(|| Box::leak(Box::new(DegradationOp::from_name(name, 16).unwrap())))
}

fn trained_operator(name: &str, cfg: OperatorTrainConfig) -> &'static LatentOperatorModel {
    static CACHE: OnceLock<Mutex<HashMap<String, &'static LatentOperatorModel>>> = OnceLock::new();
    let key = format!("{name} {:?} {} {}", cfg.sigma_ys, cfg.clean_only, cfg.steps);
    if let Some(m) = CACHE.get_or_init(Default::default).lock().unwrap().get(&key) {
        return m;
    }
    let d = desk();
    let source = SampleSource {
        codec: &d.codec,
        denoiser: &d.denoiser,
        op: op(name),
        schedule: &d.schedule,
    };
    let model: &'static LatentOperatorModel = Box::leak(Box::new(train_operator(&source, &d.data.train, &cfg).unwrap().0));
    CACHE.get().unwrap().lock().unwrap().insert(key, model);
    model
}

/// The operator used for reconstruction at the default noise level.
fn operator(name: &str) -> &'static LatentOperatorModel {
    trained_operator(name, OperatorTrainConfig::default())
}

fn models(name: &str, operator: Option<&'static LatentOperatorModel>) -> Models<'static> {
    let d = desk();
    Models {
        codec: &d.codec,
        denoiser: &d.denoiser,
        schedule: &d.schedule,
        op: op(name),
        operator,
    }
}

fn measurements(name: &str, count: usize, sigma_y: f64) -> Vec<Measurement> {
    desk().data.test[..count]
        .iter()
        .enumerate()
        .map(|(i, x)| measure(op(name), x, sigma_y, MEASURE_SEED + i as u64).unwrap())
        .collect()
}

fn run_method(name: &str, method: Method, meas: &[Measurement], operator: Option<&'static LatentOperatorModel>) -> EvalReport {
    let m = models(name, operator);
    let cfg = SolverConfig::defaults(method, op(name).kind(), 0);
    let traces = solve_batch(&m, meas, &cfg, 1).unwrap();
    let records: Vec<ReconRecord> = traces
        .into_iter()
        .enumerate()
        .map(|(index, t)| ReconRecord {
            index,
            image: t.image,
            wall_ms: t.wall_ms,
        })
        .collect();
    evaluate_run(method.name(), &records, &desk().data.test, op(name), &desk().codec).unwrap()
}

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn gradient_correctness() -> Outcome {
    let d = desk();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cases: Vec<(&str, Method)> = ["blur", "sr2", "inpaint"]
        .into_iter()
        .flat_map(|g| [Method::Silo, Method::Ldps, Method::GmlDps, Method::Psld].map(|m| (g, m)))
        .chain([("jpeg", Method::Silo)])
        .collect();
    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    for (name, method) in cases {
        let operator = (method == Method::Silo).then(|| operator(name));
        let m = models(name, operator);
        let meas = measurements(name, 10, DEFAULT_SIGMA_Y);
        let cfg = SolverConfig::defaults(method, op(name).kind(), 0);
        let mut case_worst = 0.0f64;
        for _ in 0..50 {
            let guide = Guide::new(&m, &meas[rng.random_range(0..meas.len())], &cfg).unwrap();
            let t = rng.random_range(1..=STEPS);
            let z0 = d.codec.encode(&d.data.test[rng.random_range(0..d.data.test.len())].pixels).unwrap();
            let (z, _) = forward_noise(&z0, t, &d.schedule, &mut rng).unwrap();
            let step = guide.evaluate(&z, t).unwrap();
            let fd = finite_difference(|p| guide.evaluate(p, t).unwrap().loss, &z, 1e-5);
            case_worst = case_worst.max(relative_error(&step.gradient, &fd));
        }
        lines.push(format!("{name}/{method} {case_worst:.1e}"));
        worst = worst.max(case_worst);
    }
    Outcome::new(worst < 1e-4, format!("max rel err {worst:.2e} < 1e-4 over 50 states each [{}]", lines.join(", ")))
}

fn denoiser_oracle() -> Outcome {
    let gmm = Gmm::new(
        vec![0.4, 0.6],
        vec![vec![-1.5, 0.5], vec![1.0, -0.8]],
        vec![
            DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, 0.2]),
            DMatrix::from_row_slice(2, 2, &[0.25, -0.05, -0.05, 0.4]),
        ],
    )
    .unwrap();
    let schedule = NoiseSchedule::scaled_linear(STEPS).unwrap();
    let denoiser = DenoiserModel::Gmm(gmm.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let prior: Vec<Vec<f64>> = (0..1_000_000).map(|_| gmm.sample(&mut rng)).collect();

    let mut mc_err = 0.0f64;
    let mut tweedie_err = 0.0f64;
    let mut score_err = 0.0f64;
    for t in [20, 60, 100, 140, 180] {
        let ab = schedule.alpha_bar(t);
        for _ in 0..4 {
            let (zt, _) = forward_noise(&gmm.sample(&mut rng), t, &schedule, &mut rng).unwrap();
            // Prior samples weighted by the forward likelihood p(z_t | z_0).
            let (mut acc, mut total) = ([0.0; 2], 0.0);
            for z0 in &prior {
                let r2: f64 = (0..2).map(|i| (zt[i] - ab.sqrt() * z0[i]).powi(2)).sum();
                let w = (-r2 / (2.0 * (1.0 - ab))).exp();
                acc[0] += w * z0[0];
                acc[1] += w * z0[1];
                total += w;
            }
            let mc = [acc[0] / total, acc[1] / total];
            let z0_hat = denoiser.denoise_z0(&zt, t, &schedule).unwrap();
            mc_err = mc_err.max((0..2).map(|i| (mc[i] - z0_hat[i]).abs()).fold(0.0, f64::max));

            let fd_score = finite_difference(|z| gmm.log_density(z, ab), &zt, 1e-5);
            let posterior = gmm.posterior(&zt, ab).unwrap();
            score_err = score_err.max(relative_error(&posterior.score, &fd_score));
            let tweedie: Vec<f64> = (0..2).map(|i| (zt[i] + (1.0 - ab) * fd_score[i]) / ab.sqrt()).collect();
            tweedie_err = tweedie_err.max(relative_error(&tweedie, &z0_hat));
        }
    }
    Outcome::new(
        mc_err <= 1e-2 && tweedie_err < 1e-6 && score_err < 1e-6,
        format!(
            "Monte-Carlo max abs err {mc_err:.2e} <= 1e-2; Tweedie rel err {tweedie_err:.2e}, score rel err {score_err:.2e} < 1e-6"
        ),
    )
}

fn prior_sampling() -> Outcome {
    let d = desk();
    let DenoiserModel::Gmm(gmm) = &d.denoiser else { unreachable!() };
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let samples: Vec<Vec<f64>> = (0..n).map(|_| sample_prior(&d.denoiser, &d.schedule, &mut rng).unwrap()).collect();
    let k = gmm.dim();
    let columns = DMatrix::from_fn(k, n, |i, j| samples[j][i]);
    let mean = columns.column_mean();
    let centered = DMatrix::from_fn(k, n, |i, j| columns[(i, j)] - mean[i]);
    let cov = &centered * centered.transpose() / (n as f64 - 1.0);

    let mu = DVector::from_vec(gmm.mean());
    let sigma = gmm.covariance();
    let worst_se = (0..k)
        .map(|i| (mean[i] - mu[i]).abs() / (sigma[(i, i)] / n as f64).sqrt())
        .fold(0.0, f64::max);
    let frob = (&cov - &sigma).norm() / sigma.norm();
    Outcome::new(
        worst_se <= 3.0 && frob <= 0.05,
        format!("worst mean deviation {worst_se:.2} SE <= 3; covariance Frobenius rel err {frob:.4} <= 0.05 ({n} samples, T = {STEPS})"),
    )
}

/// Least-absolute-deviations affine fit by iteratively reweighted least
/// squares, one independent regression per output column.
fn lad_fit(inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> DMatrix<f64> {
    let n = inputs.len();
    let p = inputs[0].len() + 1;
    let x = DMatrix::from_fn(n, p, |i, j| if j + 1 == p { 1.0 } else { inputs[i][j] });
    let mut coef = DMatrix::zeros(p, targets[0].len());
    for c in 0..targets[0].len() {
        let y = DVector::from_fn(n, |i, _| targets[i][c]);
        let mut weights = DVector::from_element(n, 1.0);
        let mut beta = DVector::zeros(p);
        for _ in 0..60 {
            let xw = DMatrix::from_fn(n, p, |i, j| x[(i, j)] * weights[i]);
            let lhs = x.transpose() * &xw + DMatrix::identity(p, p) * 1e-10;
            let rhs = xw.transpose() * &y;
            beta = lhs.cholesky().expect("positive definite normal equations").solve(&rhs);
            let r = &y - &x * &beta;
            weights = r.map(|v| 1.0 / v.abs().max(1e-6));
        }
        coef.set_column(c, &beta);
    }
    coef
}

fn affine_l1(coef: &DMatrix<f64>, samples: &[OperatorSample]) -> f64 {
    let p = coef.nrows();
    samples
        .iter()
        .map(|s| {
            let row = DVector::from_fn(p, |j, _| if j + 1 == p { 1.0 } else { s.input[j] });
            let pred = coef.transpose() * row;
            pred.iter().zip(&s.target).map(|(a, b)| (a - b).abs()).sum::<f64>()
        })
        .sum::<f64>()
        / samples.len() as f64
}

fn operator_learnability() -> Outcome {
    let d = desk();
    let mut pass = true;
    let mut parts = Vec::new();
    for name in ["blur", "sr2", "inpaint"] {
        // The optimum here is linear; a longer schedule than the reconstruction
        // default lets the network settle onto it.
        let cfg = OperatorTrainConfig {
            sigma_ys: vec![0.0],
            clean_only: true,
            steps: 10_000,
            ..Default::default()
        };
        let model = trained_operator(name, cfg);
        let source = SampleSource {
            codec: &d.codec,
            denoiser: &d.denoiser,
            op: op(name),
            schedule: &d.schedule,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let draw = |x: &ImageSample, rng: &mut ChaCha8Rng| source.draw(x, 0, 0.0, false, rng).unwrap();
        let train: Vec<OperatorSample> = d.data.train.iter().map(|x| draw(x, &mut rng)).collect();
        let held_out: Vec<OperatorSample> = (0..500)
            .map(|i| draw(&sample_image(16, 2_000_000 + i), &mut rng))
            .collect();

        let learned = operator_l1(model, &held_out, &d.schedule, false).unwrap();
        let inputs: Vec<Vec<f64>> = train.iter().map(|s| s.input.clone()).collect();
        let targets: Vec<Vec<f64>> = train.iter().map(|s| s.target.clone()).collect();
        let fitted = affine_l1(&lad_fit(&inputs, &targets), &held_out);
        // The composition E·lift·A·D applied to the clean latent.
        let analytic = held_out
            .iter()
            .map(|s| {
                let x = d.codec.decode(&s.input).unwrap();
                let w = d.codec.encode(&op(name).lift(&op(name).apply(&x).unwrap()).unwrap()).unwrap();
                w.iter().zip(&s.target).map(|(a, b)| (a - b).abs()).sum::<f64>()
            })
            .sum::<f64>()
            / held_out.len() as f64;
        let oracle = fitted.min(analytic);
        let ratio = learned / oracle;
        pass &= ratio <= 1.5;
        parts.push(format!(
            "{name}: {learned:.4} / {oracle:.4} = {ratio:.2}x (fit {fitted:.4}, composed {analytic:.4})"
        ));
    }
    Outcome::new(pass, format!("held-out L1 learned/oracle <= 1.5 [{}]", parts.join("; ")))
}

fn structural_counters() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for name in DEGRADATIONS {
        let meas = &measurements(name, 1, DEFAULT_SIGMA_Y)[0];
        let kind = op(name).kind();
        let silo = solve(&models(name, Some(operator(name))), meas, &SolverConfig::defaults(Method::Silo, kind, 0)).unwrap();
        let ok = silo.encoder_calls == 1
            && silo.decoder_calls == 1
            && silo.loop_decoder_calls == 0
            && silo.guidance_encoder_nodes == 0
            && silo.guidance_decoder_nodes == 0;
        pass &= ok;
        let mut part = format!(
            "{name}: silo E={} D={} graph E/D nodes={}/{}",
            silo.encoder_calls, silo.decoder_calls, silo.guidance_encoder_nodes, silo.guidance_decoder_nodes
        );
        let baselines: &[Method] = if op(name).is_linear() { &[Method::Ldps, Method::Psld] } else { &[Method::Ldps] };
        for &method in baselines {
            let tr = solve(&models(name, None), meas, &SolverConfig::defaults(method, kind, 0)).unwrap();
            pass &= tr.loop_decoder_calls == STEPS && tr.guidance_decoder_nodes > 0;
            part.push_str(&format!(", {method} loop D={}", tr.loop_decoder_calls));
        }
        parts.push(part);
    }
    Outcome::new(pass, format!("one E and one D per SILO run, T = {STEPS} decoder calls per baseline [{}]", parts.join("; ")))
}

fn speed() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for name in DEGRADATIONS {
        let kind = op(name).kind();
        let meas = measurements(name, 20, DEFAULT_SIGMA_Y);
        let mut methods = vec![Method::Silo, Method::Ldps];
        if op(name).is_linear() {
            methods.push(Method::Psld);
        }
        let silo_models = models(name, Some(operator(name)));
        let pixel_models = models(name, None);
        let run = |method: Method, m: &Measurement, seed: u64| {
            let mm = if method == Method::Silo { &silo_models } else { &pixel_models };
            let start = Instant::now();
            solve(mm, m, &SolverConfig::defaults(method, kind, seed)).unwrap();
            start.elapsed().as_secs_f64() * 1e3
        };
        for &method in &methods {
            run(method, &meas[0], 0);
        }
        // Interleave methods per image so drift in machine load hits all alike.
        let mut totals = vec![0.0; methods.len()];
        for (i, m) in meas.iter().enumerate() {
            for (j, &method) in methods.iter().enumerate() {
                totals[j] += run(method, m, i as u64);
            }
        }
        let means: Vec<f64> = totals.iter().map(|t| t / meas.len() as f64).collect();
        let ratios: Vec<String> = methods[1..]
            .iter()
            .zip(&means[1..])
            .map(|(m, v)| format!("{m} {:.1} ms ({:.2}x)", v, v / means[0]))
            .collect();
        if name == "blur" {
            pass = means[1..].iter().all(|&v| means[0] < v);
        }
        parts.push(format!("{name}: silo {:.1} ms, {}", means[0], ratios.join(", ")));
    }
    Outcome::new(
        pass,
        format!("blur: silo faster than ldps and psld over 20 images; other degradations reported [{}]", parts.join("; ")),
    )
}

fn restoration_quality() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for name in DEGRADATIONS {
        let meas = measurements(name, 50, DEFAULT_SIGMA_Y);
        let silo = run_method(name, Method::Silo, &meas, Some(operator(name)));
        let base = run_method(name, Method::Unguided, &meas, None);
        let ok = silo.psnr.mean > base.psnr.mean
            && silo.cpsnr.mean > base.cpsnr.mean
            && silo.frechet_proxy.distance < base.frechet_proxy.distance;
        pass &= ok;
        parts.push(format!(
            "{name}: PSNR {:.2} vs {:.2}, CPSNR {:.2} vs {:.2}, Frechet {:.4} vs {:.4}",
            silo.psnr.mean,
            base.psnr.mean,
            silo.cpsnr.mean,
            base.cpsnr.mean,
            silo.frechet_proxy.distance,
            base.frechet_proxy.distance
        ));
    }
    Outcome::new(pass, format!("silo vs unguided over 50 images at sigma_y = {DEFAULT_SIGMA_Y} [{}]", parts.join("; ")))
}

fn high_noise() -> Outcome {
    let name = "sr2";
    let model = trained_operator(
        name,
        OperatorTrainConfig {
            sigma_ys: vec![DEFAULT_SIGMA_Y, HIGH_SIGMA_Y],
            ..Default::default()
        },
    );
    let meas = measurements(name, 50, HIGH_SIGMA_Y);
    let silo = run_method(name, Method::Silo, &meas, Some(model));
    let base = run_method(name, Method::Unguided, &meas, None);
    Outcome::new(
        silo.cpsnr.mean > base.cpsnr.mean,
        format!(
            "{name} at sigma_y = {HIGH_SIGMA_Y}: CPSNR {:.2} vs unguided {:.2} over 50 images",
            silo.cpsnr.mean, base.cpsnr.mean
        ),
    )
}

fn bound_chain() -> Outcome {
    let d = desk();
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for name in DEGRADATIONS {
        let model = operator(name);
        let mut case_worst = 0.0f64;
        for i in 0..500u64 {
            let x = sample_image(16, 3_000_000 + i);
            let y = measure(op(name), &x, DEFAULT_SIGMA_Y, i).unwrap().y;
            let ey = d.codec.encode(&op(name).lift(&y).unwrap()).unwrap();
            let h = model.apply(&d.codec.encode(&x.pixels).unwrap(), 0, DEFAULT_SIGMA_Y, &d.schedule).unwrap();
            let latent = dist(&ey, &h);
            let pixel = dist(&d.codec.decode(&ey).unwrap(), &d.codec.decode(&h).unwrap());
            case_worst = case_worst.max(pixel / latent);
        }
        parts.push(format!("{name} {case_worst:.9}"));
        worst = worst.max(case_worst);
    }
    Outcome::new(
        worst <= 1.000001,
        format!("max pixel/latent distance ratio {worst:.9} <= 1.000001 on 500 held-out samples [{}]", parts.join(", ")),
    )
}

fn degenerate_identities() -> Outcome {
    let d = desk();
    let mut failures = Vec::new();

    // Zero step size reproduces the unguided sampler exactly.
    let meas = measurements("blur", 3, DEFAULT_SIGMA_Y);
    let kind = op("blur").kind();
    for method in [Method::Silo, Method::Ldps, Method::GmlDps, Method::Psld] {
        let operator = (method == Method::Silo).then(|| operator("blur"));
        for (i, m) in meas.iter().enumerate() {
            let mut cfg = SolverConfig::defaults(method, kind, i as u64);
            cfg.eta = 0.0;
            cfg.gamma = 0.0;
            let guided = solve(&models("blur", operator), m, &cfg).unwrap();
            let plain = solve(&models("blur", None), m, &SolverConfig::defaults(Method::Unguided, kind, i as u64)).unwrap();
            if guided.latent != plain.latent || guided.image.pixels != plain.image.pixels {
                failures.push(format!("{method} at eta = 0 differs from unguided"));
            }
        }
    }

    // With an orthonormal codec E(D(z)) = z, so the GML term vanishes.
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let ldps = Guide::new(&models("blur", None), &meas[0], &SolverConfig::defaults(Method::Ldps, kind, 0)).unwrap();
    let mut gml_cfg = SolverConfig::defaults(Method::GmlDps, kind, 0);
    gml_cfg.gamma = 1.0;
    let gml = Guide::new(&models("blur", None), &meas[0], &gml_cfg).unwrap();
    let mut gml_gap = 0.0f64;
    for _ in 0..20 {
        let t = rng.random_range(1..=STEPS);
        let z = standard_normal(LATENT_DIM, &mut rng);
        let (a, b) = (ldps.evaluate(&z, t).unwrap(), gml.evaluate(&z, t).unwrap());
        gml_gap = gml_gap.max((a.loss - b.loss).abs()).max(relative_error(&a.gradient, &b.gradient));
    }
    if gml_gap > 1e-12 {
        failures.push(format!("gml term {gml_gap:.2e} under the orthonormal codec"));
    }

    // With A = I the PSLD anchor is E(y).
    let ident = op("identity");
    let m_id = measure(ident, &d.data.test[0], DEFAULT_SIGMA_Y, 1).unwrap();
    let psld_cfg = SolverConfig::defaults(Method::Psld, ident.kind(), 0);
    let psld = Guide::new(&models("identity", None), &m_id, &psld_cfg).unwrap();
    let ey = d.codec.encode(&m_id.y).unwrap();
    let anchored = |z: &[f64], t: usize| {
        let z0 = d.denoiser.denoise_z0(z, t, &d.schedule).unwrap();
        let x0 = d.codec.decode(&z0).unwrap();
        psld_cfg.eta * dist(&m_id.y, &x0) + psld_cfg.gamma * dist(&z0, &ey).powi(2)
    };
    let mut psld_gap = 0.0f64;
    for _ in 0..20 {
        let t = rng.random_range(1..=STEPS);
        let z = standard_normal(LATENT_DIM, &mut rng);
        let step = psld.evaluate(&z, t).unwrap();
        let fd = finite_difference(|p| anchored(p, t), &z, 1e-5);
        psld_gap = psld_gap
            .max((step.loss - anchored(&z, t)).abs() / step.loss.abs().max(1e-12))
            .max(relative_error(&step.gradient, &fd));
    }
    if psld_gap > 1e-6 {
        failures.push(format!("psld with A = I departs from the E(y) anchor by {psld_gap:.2e}"));
    }

    // PSLD needs a matrix; jpeg has none.
    let jpeg_meas = &measurements("jpeg", 1, DEFAULT_SIGMA_Y)[0];
    let jpeg = solve(&models("jpeg", None), jpeg_meas, &SolverConfig::defaults(Method::Psld, op("jpeg").kind(), 0));
    let jpeg_note = match &jpeg {
        Err(Error::Unsupported(msg)) => msg.clone(),
        other => {
            failures.push(format!("psld on jpeg returned {:?}", other.as_ref().map(|_| "a reconstruction")));
            String::new()
        }
    };
    Outcome::new(
        failures.is_empty(),
        if failures.is_empty() {
            format!("eta = 0 bit-exact for 4 methods; gml gap {gml_gap:.1e}; psld identity gap {psld_gap:.1e}; psld jpeg: \"{jpeg_note}\"")
        } else {
            failures.join("; ")
        },
    )
}

fn seed_diversity() -> Outcome {
    let name = "inpaint";
    let m = models(name, Some(operator(name)));
    let meas = &measurements(name, 1, DEFAULT_SIGMA_Y)[0];
    let x = &desk().data.test[0];
    let hole: Vec<usize> = op(name)
        .observed_mask()
        .unwrap()
        .iter()
        .enumerate()
        .filter_map(|(i, &seen)| (!seen).then_some(i))
        .collect();
    let images: Vec<Vec<f64>> = (0..8)
        .map(|seed| solve(&m, meas, &SolverConfig::defaults(Method::Silo, op(name).kind(), seed)).unwrap().image.pixels)
        .collect();
    let mut min_dist = f64::INFINITY;
    for a in 0..8 {
        for b in a + 1..8 {
            let d: f64 = hole.iter().map(|&i| (images[a][i] - images[b][i]).powi(2)).sum::<f64>().sqrt();
            min_dist = min_dist.min(d);
        }
    }
    let min_cpsnr = images
        .iter()
        .map(|img| cpsnr(&x.pixels, img, op(name)).unwrap())
        .fold(f64::INFINITY, f64::min);
    Outcome::new(
        min_dist > 0.0 && min_cpsnr > DIVERSITY_CPSNR_FLOOR,
        format!("min pairwise in-mask distance {min_dist:.4} > 0; min out-of-mask CPSNR {min_cpsnr:.2} > {DIVERSITY_CPSNR_FLOOR}"),
    )
}

fn diagnostic() -> Outcome {
    let d = desk();
    let name = "blur";
    let meas = &measurements(name, 1, DEFAULT_SIGMA_Y)[0];
    let timesteps = [200, 150, 100, 50, 10, 1];
    let cfg = SolverConfig::defaults(Method::Ldps, op(name).kind(), 0);
    let (_, fields) = decoder_gradient_diagnostic(&models(name, None), meas, &cfg, &timesteps).unwrap();
    let emitted: Vec<usize> = fields.iter().map(|f| f.t).collect();
    let fields_ok = emitted == timesteps
        && fields
            .iter()
            .all(|f| f.norm > 0.0 && f.gradient.iter().chain(&f.pixel_field).all(|v| v.is_finite()));

    let mut rng = ChaCha8Rng::seed_from_u64(121);
    let mut zero_max = 0.0f64;
    let mut analytic_err = 0.0f64;
    for name in ["blur", "sr2", "inpaint", "identity"] {
        for _ in 0..10 {
            let z = standard_normal(LATENT_DIM, &mut rng);
            let y_exact = op(name).apply(&d.codec.decode(&z).unwrap()).unwrap();
            // The tape and the direct operator round differently, so zero is up to round-off.
            let (g, _) = decoder_gradient(&d.codec, op(name), &y_exact, &z).unwrap();
            zero_max = zero_max.max(norm(&g));

            let y = &measure(op(name), &d.data.test[rng.random_range(0..20)], DEFAULT_SIGMA_Y, 7).unwrap().y;
            let (g, _) = decoder_gradient(&d.codec, op(name), y, &z).unwrap();
            let a = decoder_gradient_analytic(&d.codec, op(name), y, &z).unwrap();
            analytic_err = analytic_err.max(relative_error(&g, &a));
        }
    }
    Outcome::new(
        fields_ok && zero_max < 1e-12 && analytic_err < 1e-6,
        format!(
            "fields at t = {emitted:?}; zero-residual field norm {zero_max:.1e} < 1e-12; analytic rel err {analytic_err:.2e} < 1e-6"
        ),
    )
}

struct Criterion {
    number: usize,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() -> ExitCode {
    let minutes = |m: u64| Duration::from_secs(60 * m);
    let criteria = [
        Criterion { number: 1, name: "gradient correctness", budget: minutes(1), run: gradient_correctness },
        Criterion { number: 2, name: "denoiser oracle", budget: minutes(2), run: denoiser_oracle },
        Criterion { number: 3, name: "prior sampling", budget: minutes(5), run: prior_sampling },
        Criterion { number: 4, name: "operator learnability", budget: minutes(10), run: operator_learnability },
        Criterion { number: 5, name: "structural counters", budget: minutes(10), run: structural_counters },
        Criterion { number: 6, name: "speed", budget: minutes(10), run: speed },
        Criterion { number: 7, name: "restoration quality", budget: minutes(20), run: restoration_quality },
        Criterion { number: 8, name: "high-noise robustness", budget: minutes(10), run: high_noise },
        Criterion { number: 9, name: "bound chain", budget: minutes(1), run: bound_chain },
        Criterion { number: 10, name: "degenerate identities", budget: minutes(10), run: degenerate_identities },
        Criterion { number: 11, name: "seed diversity", budget: minutes(2), run: seed_diversity },
        Criterion { number: 12, name: "decoder-gradient diagnostic", budget: minutes(2), run: diagnostic },
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = |c: &Criterion| {
        filters.is_empty() || filters.iter().any(|f| *f == c.number.to_string() || c.name.contains(f.as_str()))
    };

    // Shared models are built once and timed apart from the criteria.
    if criteria.iter().any(|c| selected(c) && c.number != 2) {
        let start = Instant::now();
        desk();
        DEGRADATIONS.iter().for_each(|name| {
            operator(name);
        });
        println!("fixtures: desk models and four operators built in {:.1} s", start.elapsed().as_secs_f64());
    }

    let mut failed = 0;
    let mut ran = 0;
    for c in criteria.iter().filter(|c| selected(c)) {
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let in_time = elapsed <= c.budget;
        let pass = outcome.pass && in_time;
        ran += 1;
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {:>2} {} {}: {} ({:.1} s, budget {} s{})",
            c.number,
            if pass { "PASS" } else { "FAIL" },
            c.name,
            outcome.detail,
            elapsed.as_secs_f64(),
            c.budget.as_secs(),
            if in_time { "" } else { ", over budget" }
        );
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
