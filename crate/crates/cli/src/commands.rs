use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use lfm_rff::io::{
    read_dataset, read_times, write_latent_predictions, write_matrix, write_predictions,
};
use lfm_rff::kernels::{approx_cov, exact_cov_quadrature, CovMatrix};
use lfm_rff::likelihood::{lml_and_gradient, model_feature_matrix, optimize, write_trace_csv, ModelDraws, OptimizerConfig};
use lfm_rff::model::{
    Dataset, HyperParameters, InputKind, LfmSpec, MogpSpec, ModelSpec, Observation, Ode1Params, Ode2Params,
    OdeOperator, OutputOperator, SensitivityMatrix,
};
use lfm_rff::mogp::mogp_exact_cov_quadrature;
use lfm_rff::predict::Predictor;
use serde::{Deserialize, Serialize};

use crate::config::{KernelMode, ModelKind, RunConfig};
use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Fitted model as written by `train`. Contains no timings, so a fixed seed reproduces it exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitFile {
    pub schema_version: u32,
    pub model: ModelKind,
    pub spec: ModelSpec,
    pub seed: u64,
    pub samples: usize,
    pub initial_lml: f64,
    pub final_lml: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub warning: Option<String>,
    pub train_data: Option<PathBuf>,
}

#[derive(Serialize)]
struct Timing {
    evaluations: usize,
    mean_eval_s: f64,
    total_s: f64,
}

#[derive(Serialize)]
struct BenchmarkSummary {
    model: ModelKind,
    outputs: usize,
    forces: usize,
    samples: usize,
    reps: usize,
    sizes: Vec<usize>,
    slope: f64,
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|source| CliError::File { path: path.to_path_buf(), source })
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|source| CliError::File { path: path.to_path_buf(), source })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| CliError::Json { path: path.to_path_buf(), source })?;
    writeln!(w).and_then(|_| w.flush()).map_err(|source| CliError::File { path: path.to_path_buf(), source })
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<(), CliError> {
    w.flush().map_err(|source| CliError::File { path: path.to_path_buf(), source })
}

pub fn load_fit(path: &Path) -> Result<FitFile, CliError> {
    let fit: FitFile =
        serde_json::from_reader(open(path)?).map_err(|source| CliError::Json { path: path.to_path_buf(), source })?;
    if fit.schema_version != SCHEMA_VERSION {
        return Err(CliError::Usage(format!(
            "{}: schema version {} is not supported (expected {SCHEMA_VERSION})",
            path.display(),
            fit.schema_version
        )));
    }
    // re-run constructor validation on the deserialised spec
    fit.spec.unpack(fit.spec.pack().values())?;
    Ok(fit)
}

fn input_kind(model: ModelKind) -> Option<InputKind> {
    match model {
        ModelKind::Mogp => None,
        _ => Some(InputKind::Time),
    }
}

/// Operator `prod_{k=1}^{P} (s + k)`, which has distinct real roots.
fn distinct_root_operator(order: usize) -> Result<OdeOperator, CliError> {
    let mut c = vec![1.0];
    for k in 1..=order {
        let mut next = vec![0.0; c.len() + 1];
        for (i, a) in c.iter().enumerate() {
            next[i] += a;
            next[i + 1] += k as f64 * a;
        }
        c = next;
    }
    Ok(OdeOperator::new(c)?)
}

/// Starting hyperparameters from the config for `d` outputs.
pub fn initial_spec(c: &RunConfig, d: usize, noise: Vec<f64>, input_dim: usize) -> Result<ModelSpec, CliError> {
    let q = c.forces;
    let lengthscales = vec![c.init_lengthscale; q];
    let sens = SensitivityMatrix::filled(d, q, c.init_sensitivity);
    let op = match c.model {
        ModelKind::Ode1 => OutputOperator::Ode1(Ode1Params::new(c.init_gamma)?),
        ModelKind::Ode2 => OutputOperator::Ode2(Ode2Params::new(c.init_mass, c.init_damper, c.init_spring)?),
        ModelKind::OdeP => OutputOperator::General { coeffs: distinct_root_operator(c.order)? },
        ModelKind::Mogp => {
            let widths = vec![c.init_inverse_width; d];
            return Ok(ModelSpec::Mogp(MogpSpec::new(input_dim, widths, lengthscales, sens, noise)?));
        }
    };
    Ok(ModelSpec::Lfm(LfmSpec::new(vec![op; d], lengthscales, sens, noise)?))
}

/// Per-output initial noise: the configured value, or a tenth of the sample variance.
fn initial_noise(c: &RunConfig, data: &Dataset, d: usize) -> Vec<f64> {
    (1..=d)
        .map(|id| {
            if let Some(v) = c.init_noise {
                return v;
            }
            let ys: Vec<f64> = data.entries().iter().filter(|e| e.output_id == id).map(|e| e.y).collect();
            if ys.len() < 2 {
                return 0.1;
            }
            let m = ys.iter().sum::<f64>() / ys.len() as f64;
            let var = ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (ys.len() - 1) as f64;
            (0.1 * var).max(1e-4)
        })
        .collect()
}

pub fn train(c: &RunConfig, data_path: &Path) -> Result<(), CliError> {
    let data = read_dataset(open(data_path)?, input_kind(c.model))?;
    if data.is_empty() {
        return Err(lfm_rff::LfmError::InvalidData { index: 0, reason: "training file has no rows".into() }.into());
    }
    let d = data.entries().iter().map(|e| e.output_id).max().unwrap_or(1);
    let p = data.entries()[0].input.len();
    let init = initial_spec(c, d, initial_noise(c, &data, d), p)?;
    let draws = ModelDraws::sample(&init, c.samples, c.seed)?;
    let opt = OptimizerConfig { max_iters: c.max_iters, grad_tol: c.grad_tol, ..Default::default() };
    let start = Instant::now();
    let fit = optimize(&init, &data, &draws, &opt)?;
    let total_s = start.elapsed().as_secs_f64();
    if let Some(w) = &fit.warning {
        eprintln!("warning: {w}");
    }

    let file = FitFile {
        schema_version: SCHEMA_VERSION,
        model: c.model,
        spec: fit.spec.clone(),
        seed: fit.seed,
        samples: fit.num_samples,
        initial_lml: fit.initial_lml,
        final_lml: fit.final_lml,
        iterations: fit.iterations,
        evaluations: fit.evaluations,
        converged: fit.converged,
        warning: fit.warning.clone(),
        train_data: Some(data_path.to_path_buf()),
    };
    write_json(&c.out_dir.join("fit.json"), &file)?;
    let trace_path = c.out_dir.join("trace.csv");
    let mut w = create(&trace_path)?;
    write_trace_csv(&fit.trace, &mut w).map_err(|source| CliError::File { path: trace_path.clone(), source })?;
    finish(w, &trace_path)?;
    let timing = Timing { evaluations: fit.evaluations, mean_eval_s: fit.mean_eval_s, total_s };
    write_json(&c.out_dir.join("timing.json"), &timing)?;
    eprintln!(
        "lml {:.6} -> {:.6} in {} iteration(s); {:.3e} s per objective+gradient evaluation",
        fit.initial_lml, fit.final_lml, fit.iterations, fit.mean_eval_s
    );
    Ok(())
}

pub fn predict(
    c: &RunConfig,
    fit_path: &Path,
    test_path: &Path,
    train_path: Option<&Path>,
    latent_times: Option<&Path>,
    include_noise: bool,
) -> Result<(), CliError> {
    let fit = load_fit(fit_path)?;
    let kind = fit.spec.input_kind();
    let train_path = train_path
        .map(Path::to_path_buf)
        .or_else(|| fit.train_data.clone())
        .ok_or_else(|| CliError::Usage("no training data given and none recorded in the fit file".into()))?;
    let train = read_dataset(open(&train_path)?, Some(kind))?;
    let test = read_dataset(open(test_path)?, Some(kind))?;
    let draws = ModelDraws::sample(&fit.spec, fit.samples, fit.seed)?;
    let predictor = Predictor::with_draws(fit.spec.clone(), draws, &train)?;
    let post = predictor.outputs(&test, include_noise)?;
    let out = c.out_dir.join("predictions.csv");
    let mut w = create(&out)?;
    write_predictions(&test, kind, &post, &mut w)?;
    finish(w, &out)?;

    if let Some(path) = latent_times {
        let times = read_times(open(path)?)?;
        let out = c.out_dir.join("latent.csv");
        let mut w = create(&out)?;
        for q in 0..fit.spec.num_forces() {
            let u = predictor.latent_force(&times, q)?;
            write_latent_predictions(q + 1, &times, &u, &mut w, q == 0)?;
        }
        finish(w, &out)?;
    }
    Ok(())
}

/// Every output at every time, output-major.
fn grid_dataset(times: &[f64], d: usize) -> Dataset {
    Dataset::new((1..=d).flat_map(|id| times.iter().map(move |&t| Observation::at_time(id, t, 0.0))).collect())
}

fn oracle_cov(spec: &ModelSpec, data: &Dataset, tol: f64) -> Result<CovMatrix, CliError> {
    Ok(match spec {
        ModelSpec::Lfm(s) => exact_cov_quadrature(data, s, tol)?,
        ModelSpec::Mogp(s) => mogp_exact_cov_quadrature(data, s, tol)?,
    })
}

pub fn kernel_eval(c: &RunConfig, times_path: &Path, fit_path: Option<&Path>) -> Result<(), CliError> {
    let times = read_times(open(times_path)?)?;
    let (spec, samples, seed) = match fit_path {
        Some(p) => {
            let f = load_fit(p)?;
            (f.spec, f.samples, f.seed)
        }
        None => {
            let noise = vec![c.init_noise.unwrap_or(0.1); c.outputs];
            (initial_spec(c, c.outputs, noise, 1)?, c.samples, c.seed)
        }
    };
    if spec.input_kind().dim() != 1 {
        return Err(CliError::Usage("kernel-eval needs a model with scalar inputs".into()));
    }
    let data = grid_dataset(&times, spec.num_outputs());
    let draws = ModelDraws::sample(&spec, samples, seed)?;

    let start = Instant::now();
    let rff = approx_cov(&model_feature_matrix(&spec, &data, &draws)?);
    let rff_s = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let oracle = oracle_cov(&spec, &data, c.oracle_tol)?;
    let oracle_s = start.elapsed().as_secs_f64();
    eprintln!("frobenius_distance {:e}", rff.frobenius_distance(&oracle));
    eprintln!("rff {rff_s:.3} s, oracle {oracle_s:.3} s");

    let k = match c.mode {
        KernelMode::Rff => rff,
        KernelMode::Oracle => oracle,
    };
    let out = c.out_dir.join("kernel.csv");
    let mut w = create(&out)?;
    write_matrix(k.matrix(), &mut w)?;
    finish(w, &out)
}

/// Synthetic benchmark observations: `n` per output on `[0, 10]`.
fn benchmark_data(d: usize, n: usize) -> Dataset {
    Dataset::new(
        (1..=d)
            .flat_map(|id| {
                (0..n).map(move |i| {
                    let t = 10.0 * i as f64 / n as f64;
                    Observation::at_time(id, t, (0.7 * t * id as f64).sin() + 0.1 * (13.0 * t).cos())
                })
            })
            .collect(),
    )
}

/// Least-squares slope of `ys` against `xs`.
pub fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

pub fn benchmark(c: &RunConfig, sizes: &[usize], reps: usize) -> Result<(), CliError> {
    if sizes.len() < 2 || sizes.contains(&0) || reps == 0 {
        return Err(CliError::Usage("benchmark needs at least two positive sizes and one repetition".into()));
    }
    if c.model == ModelKind::Mogp {
        return Err(CliError::Usage("benchmark times latent force models; choose ode1, ode2 or odeP".into()));
    }
    let d = c.outputs;
    let spec = initial_spec(c, d, vec![c.init_noise.unwrap_or(0.1); d], 1)?;
    let draws = ModelDraws::sample(&spec, c.samples, c.seed)?;
    let theta = spec.pack().into_values();
    let out = c.out_dir.join("benchmark.csv");
    let mut w = create(&out)?;
    let io_err = |source| CliError::File { path: out.clone(), source };
    writeln!(w, "N,mean_s,std_s").map_err(io_err)?;
    let (mut log_n, mut log_t) = (Vec::new(), Vec::new());
    for &n in sizes {
        let data = benchmark_data(d, n);
        lml_and_gradient(&theta, &spec, &data, &draws)?;
        let mut times = Vec::with_capacity(reps);
        for _ in 0..reps {
            let start = Instant::now();
            lml_and_gradient(&theta, &spec, &data, &draws)?;
            times.push(start.elapsed().as_secs_f64());
        }
        let mean = times.iter().sum::<f64>() / reps as f64;
        let std = if reps > 1 {
            (times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt()
        } else {
            0.0
        };
        writeln!(w, "{n},{mean:e},{std:e}").map_err(io_err)?;
        log_n.push((n as f64).ln());
        log_t.push(mean.ln());
    }
    finish(w, &out)?;
    let s = slope(&log_n, &log_t);
    eprintln!("log-log slope {s:.3}");
    let summary = BenchmarkSummary {
        model: c.model,
        outputs: d,
        forces: c.forces,
        samples: c.samples,
        reps,
        sizes: sizes.to_vec(),
        slope: s,
    };
    write_json(&c.out_dir.join("benchmark_summary.json"), &summary)
}

pub fn sample_features(c: &RunConfig, times_path: &Path) -> Result<(), CliError> {
    let times = read_times(open(times_path)?)?;
    let noise = vec![c.init_noise.unwrap_or(0.1); c.outputs];
    let spec = initial_spec(c, c.outputs, noise, 1)?;
    let draws = ModelDraws::sample(&spec, c.samples, c.seed)?;

    let out = c.out_dir.join("frequencies.csv");
    let mut w = create(&out)?;
    let io_err = |source| CliError::File { path: out.clone(), source };
    writeln!(w, "force,s,z,lambda").map_err(io_err)?;
    match &draws {
        ModelDraws::Lfm(fd) => {
            for q in 0..fd.num_forces() {
                let lam = fd.force_frequencies(q, c.init_lengthscale)?;
                for (s, l) in lam.iter().enumerate() {
                    writeln!(w, "{},{s},{:?},{l:?}", q + 1, fd.base()[(s, q)]).map_err(io_err)?;
                }
            }
        }
        ModelDraws::Mogp(sd) => {
            for q in 0..sd.num_forces() {
                let lam = sd.force(q).frequencies(c.init_lengthscale);
                for s in 0..sd.num_samples() {
                    writeln!(w, "{},{s},{:?},{:?}", q + 1, sd.force(q).base()[(s, 0)], lam[(s, 0)]).map_err(io_err)?;
                }
            }
        }
    }
    finish(w, &out)?;

    let data = grid_dataset(&times, c.outputs);
    let phi = model_feature_matrix(&spec, &data, &draws)?;
    let out = c.out_dir.join("features.csv");
    let mut w = create(&out)?;
    let io_err = |source| CliError::File { path: out.clone(), source };
    let m = phi.ncols();
    let header: Vec<String> = ["output_id".to_string(), "t".to_string()]
        .into_iter()
        .chain((0..m).map(|k| format!("re{k}")))
        .chain((0..m).map(|k| format!("im{k}")))
        .collect();
    writeln!(w, "{}", header.join(",")).map_err(io_err)?;
    for (i, e) in data.entries().iter().enumerate() {
        let row = phi.phi().row(i);
        let fields: Vec<String> = [e.output_id.to_string(), format!("{:?}", e.t())]
            .into_iter()
            .chain(row.iter().map(|v| format!("{:?}", v.re)))
            .chain(row.iter().map(|v| format!("{:?}", v.im)))
            .collect();
        writeln!(w, "{}", fields.join(",")).map_err(io_err)?;
    }
    finish(w, &out)
}
