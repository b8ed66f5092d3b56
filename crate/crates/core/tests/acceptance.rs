//! Acceptance criteria, one PASS/FAIL line each. Runs sequentially so timings are uncontended.

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use lfm_rff::features::{sample_frequencies, OutputResponse};
use lfm_rff::kernels::{
    approx_cov, cross_cov_output_latent_quadrature, exact_cov_quadrature, feature_matrix, response_quadrature,
    CovMatrix,
};
use lfm_rff::likelihood::{
    full_log_marginal, lml_and_gradient, log_marginal, low_rank_log_marginal, optimize, ModelDraws, OptimizerConfig,
};
use lfm_rff::model::{
    Dataset, HyperParameters, LfmSpec, MogpSpec, ModelSpec, Observation, Ode1Params, Ode2Params, OdeOperator,
    OutputOperator, SensitivityMatrix,
};
use lfm_rff::mogp::{mogp_exact_cov_quadrature, mogp_feature_matrix, SpectralDraws};
use lfm_rff::predict::{nlpd, nmse, Predictor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Every approximate Gram matrix assembled by the suite, for the PSD criterion.
#[derive(Default)]
struct Corpus {
    worst: f64,
    count: usize,
}

impl Corpus {
    fn add(&mut self, k: &CovMatrix) {
        let tr = k.trace();
        let ratio = if tr > 0.0 { -k.min_eigenvalue() / tr } else { 0.0 };
        self.worst = self.worst.max(ratio);
        self.count += 1;
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn ode1(gamma: f64) -> OutputOperator {
    OutputOperator::Ode1(Ode1Params::new(gamma).unwrap())
}

fn ode2(m: f64, c: f64, b: f64) -> OutputOperator {
    OutputOperator::Ode2(Ode2Params::new(m, c, b).unwrap())
}

fn time_grid(d: usize, times: &[f64]) -> Dataset {
    Dataset::new((1..=d).flat_map(|id| times.iter().map(move |&t| Observation::at_time(id, t, 0.0))).collect())
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn feature_vs_oracle() -> Outcome {
    let ops = [ode1(0.5), ode1(1.0), ode1(2.0), ode2(1.0, 3.0, 2.0), ode2(1.0, 2.0, 5.0)];
    let mut worst: f64 = 0.0;
    for op in &ops {
        let resp = OutputResponse::new(op).unwrap();
        for t in linspace(0.0, 3.0, 10) {
            for lambda in linspace(-5.0, 5.0, 10) {
                let exact = response_quadrature(t, op, lambda, 1e-12).unwrap();
                worst = worst.max((resp.value(t, lambda) - exact).norm());
            }
        }
    }
    outcome(worst < 1e-8, format!("max |v - quadrature| = {worst:.2e} (tol 1e-8)"))
}

fn two_oscillator_spec() -> LfmSpec {
    LfmSpec::new(
        vec![ode2(1.0, 3.0, 2.0), ode2(1.0, 2.0, 5.0)],
        vec![1.0],
        SensitivityMatrix::filled(2, 1, 1.0),
        vec![0.01, 0.01],
    )
    .unwrap()
}

fn lfm_convergence(corpus: &mut Corpus) -> Outcome {
    let spec = two_oscillator_spec();
    let data = time_grid(2, &linspace(0.0, 3.0, 100));
    let oracle = exact_cov_quadrature(&data, &spec, 1e-9).unwrap();
    let dist = |s: usize, corpus: &mut Corpus| {
        median(
            (0..10)
                .map(|seed| {
                    let draws = sample_frequencies(s, 1, 1000 + seed).unwrap();
                    let k = approx_cov(&feature_matrix(&data, &spec, &draws).unwrap());
                    corpus.add(&k);
                    k.frobenius_distance(&oracle)
                })
                .collect(),
        )
    };
    let (small, large) = (dist(100, corpus), dist(10_000, corpus));
    let ratio = small / large;
    outcome(
        (3.3..=30.0).contains(&ratio),
        format!("median ||K_S - K||_F: S=100 {small:.4}, S=1e4 {large:.5}; ratio {ratio:.2} (need [3.3, 30])"),
    )
}

fn random_lfm(rng: &mut ChaCha8Rng, d: usize, q: usize) -> LfmSpec {
    let outputs = (0..d)
        .map(|_| {
            if rng.random_bool(0.5) {
                ode1(rng.random_range(0.3..3.0))
            } else {
                loop {
                    let (m, c, b): (f64, f64, f64) =
                        (rng.random_range(0.5..2.0), rng.random_range(0.3..3.0), rng.random_range(0.5..5.0));
                    // stay clear of critical damping, where the evaluated spring constant is shifted
                    if (c * c - 4.0 * m * b).abs() > 0.2 {
                        break ode2(m, c, b);
                    }
                }
            }
        })
        .collect();
    let lengthscales = (0..q).map(|_| rng.random_range(0.4..2.5)).collect();
    let sens = SensitivityMatrix::new(d, q, (0..d * q).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap();
    let noise = (0..d).map(|_| rng.random_range(0.01..0.5)).collect();
    LfmSpec::new(outputs, lengthscales, sens, noise).unwrap()
}

fn random_data(rng: &mut ChaCha8Rng, d: usize, n: usize) -> Dataset {
    Dataset::new(
        (0..n)
            .map(|i| Observation::at_time(1 + i % d, rng.random_range(0.0..4.0), normal(rng)))
            .collect(),
    )
}

fn likelihood_identity(corpus: &mut Corpus) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (d, q, s) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=10));
        let n = rng.random_range(d..=50);
        let spec = random_lfm(&mut rng, d, q);
        let data = random_data(&mut rng, d, n);
        let draws = sample_frequencies(s, q, rng.random()).unwrap();
        let phi = feature_matrix(&data, &spec, &draws).unwrap();
        let noise = data.noise_diagonal(spec.noise_vars());
        let y = data.targets();
        let (low, _) = low_rank_log_marginal(&phi, &noise, &y).unwrap();
        let k = approx_cov(&phi);
        corpus.add(&k);
        let full = full_log_marginal(&k, &noise, &y).unwrap();
        worst = worst.max((low - full).abs() / full.abs().max(1.0));
    }
    outcome(worst < 1e-8, format!("50 instances, max relative difference {worst:.2e} (tol 1e-8)"))
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 1e-5;
    let mut worst_excess: f64 = 0.0;
    let mut checked = 0;
    for _ in 0..20 {
        let (d, q) = (rng.random_range(1..=3), rng.random_range(1..=2));
        let template = ModelSpec::Lfm(random_lfm(&mut rng, d, q));
        let n = rng.random_range(10..=30);
        let data = random_data(&mut rng, d, n);
        let draws = ModelDraws::sample(&template, rng.random_range(3..=10), rng.random()).unwrap();
        let theta = template.pack().into_values();
        let eval = lml_and_gradient(&theta, &template, &data, &draws).unwrap();
        for k in 0..theta.len() {
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[k] += h;
            dn[k] -= h;
            let fu = log_marginal(&template.unpack(&up).unwrap(), &data, &draws).unwrap().0;
            let fd_ = log_marginal(&template.unpack(&dn).unwrap(), &data, &draws).unwrap().0;
            let fd = (fu - fd_) / (2.0 * h);
            let allowed = (1e-5 * fd.abs()).max(1e-7);
            worst_excess = worst_excess.max((eval.gradient[k] - fd).abs() / allowed);
            checked += 1;
        }
    }
    outcome(
        worst_excess <= 1.0,
        format!("{checked} components over 20 configurations; worst error / allowance = {worst_excess:.3}"),
    )
}

fn psd_sweep(corpus: &mut Corpus) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..30 {
        let (d, q) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let spec = random_lfm(&mut rng, d, q);
        let data = random_data(&mut rng, d, 60);
        let draws = sample_frequencies(rng.random_range(1..=40), q, rng.random()).unwrap();
        corpus.add(&approx_cov(&feature_matrix(&data, &spec, &draws).unwrap()));
    }
    let general = LfmSpec::new(
        vec![OutputOperator::General { coeffs: OdeOperator::new(vec![1.0, 3.0, 4.0, 2.0]).unwrap() }, ode1(0.7)],
        vec![0.8],
        SensitivityMatrix::filled(2, 1, 1.0),
        vec![0.1, 0.1],
    )
    .unwrap();
    let draws = sample_frequencies(25, 1, 6).unwrap();
    corpus.add(&approx_cov(&feature_matrix(&time_grid(2, &linspace(0.0, 5.0, 40)), &general, &draws).unwrap()));
    for p in 1..=3 {
        let spec = MogpSpec::new(p, vec![0.5, 2.0], vec![1.2], SensitivityMatrix::filled(2, 1, 0.8), vec![0.1, 0.1]).unwrap();
        let data = Dataset::new(
            (0..60).map(|i| Observation::new(1 + i % 2, (0..p).map(|_| rng.random_range(-3.0..3.0)).collect(), 0.0)).collect(),
        );
        let draws = SpectralDraws::sample(30, p, 1, rng.random()).unwrap();
        corpus.add(&approx_cov(&mogp_feature_matrix(&data, &spec, &draws).unwrap()));
    }
}

fn linear_scaling() -> Outcome {
    let spec = ModelSpec::Lfm(LfmSpec::new(
        vec![ode1(1.0), ode2(1.0, 1.0, 3.0)],
        vec![1.0, 0.5],
        SensitivityMatrix::filled(2, 2, 1.0),
        vec![0.1, 0.1],
    )
    .unwrap());
    let draws = ModelDraws::sample(&spec, 50, 7).unwrap();
    let theta = spec.pack().into_values();
    let sizes = [1000usize, 2000, 4000, 8000];
    let mut log_n = Vec::new();
    let mut log_t = Vec::new();
    let mut report = Vec::new();
    for &n in &sizes {
        let data = time_grid(2, &linspace(0.0, 10.0, n)).with_targets(
            &(0..2 * n).map(|i| (0.01 * i as f64).sin()).collect::<Vec<_>>(),
        ).unwrap();
        lml_and_gradient(&theta, &spec, &data, &draws).unwrap();
        let reps = 5;
        let start = Instant::now();
        for _ in 0..reps {
            lml_and_gradient(&theta, &spec, &data, &draws).unwrap();
        }
        let mean = start.elapsed().as_secs_f64() / reps as f64;
        report.push(format!("N={n}: {mean:.3e}s"));
        log_n.push((n as f64).ln());
        log_t.push(mean.ln());
    }
    let mx = log_n.iter().sum::<f64>() / 4.0;
    let my = log_t.iter().sum::<f64>() / 4.0;
    let slope = log_n.iter().zip(&log_t).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / log_n.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    outcome((0.8..=1.3).contains(&slope), format!("slope {slope:.3} (need [0.8, 1.3]); {}", report.join(", ")))
}

fn mogp_convergence(corpus: &mut Corpus) -> Outcome {
    let spec = MogpSpec::new(1, vec![2.0, 0.5], vec![1.0], SensitivityMatrix::new(2, 1, vec![1.0, 0.7]).unwrap(), vec![0.01, 0.01])
        .unwrap();
    let xs = linspace(-3.0, 3.0, 100);
    let data = Dataset::new((1..=2).flat_map(|id| xs.iter().map(move |&x| Observation::new(id, vec![x], 0.0))).collect());
    let oracle = mogp_exact_cov_quadrature(&data, &spec, 1e-9).unwrap();
    let dist = |s: usize, corpus: &mut Corpus| {
        median(
            (0..10)
                .map(|seed| {
                    let draws = SpectralDraws::sample(s, 1, 1, 2000 + seed).unwrap();
                    let k = approx_cov(&mogp_feature_matrix(&data, &spec, &draws).unwrap());
                    corpus.add(&k);
                    k.frobenius_distance(&oracle)
                })
                .collect(),
        )
    };
    let (small, large) = (dist(100, corpus), dist(10_000, corpus));
    let ratio = small / large;
    outcome(
        (3.3..=30.0).contains(&ratio),
        format!("median ||K_S - K||_F: S=100 {small:.4}, S=1e4 {large:.5}; ratio {ratio:.2} (need [3.3, 30])"),
    )
}

/// Joint exact prior over outputs at `data` and the single force at `force_times`.
fn joint_prior(spec: &LfmSpec, data: &Dataset, force_times: &[f64]) -> DMatrix<f64> {
    let n = data.len();
    let m = force_times.len();
    let kff = exact_cov_quadrature(data, spec, 1e-10).unwrap();
    let mut k = DMatrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(kff.matrix());
    for (i, e) in data.entries().iter().enumerate() {
        for (j, &u) in force_times.iter().enumerate() {
            let v = cross_cov_output_latent_quadrature(e.t(), e.output(), u, 0, spec, 1e-12).unwrap();
            k[(i, n + j)] = v;
            k[(n + j, i)] = v;
        }
    }
    let ell2 = spec.lengthscales()[0].powi(2);
    for (a, &u) in force_times.iter().enumerate() {
        for (b, &v) in force_times.iter().enumerate() {
            k[(n + a, n + b)] = (-(u - v).powi(2) / ell2).exp();
        }
    }
    k
}

fn synthetic_end_to_end() -> Outcome {
    let truth = LfmSpec::new(vec![ode1(1.0), ode1(2.0)], vec![1.0], SensitivityMatrix::filled(2, 1, 1.0), vec![0.01, 0.01])
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let horizon = 10.0;
    let train_t: Vec<f64> = (0..100).map(|i| horizon * (i as f64 + 0.5) / 100.0).collect();
    let test_t: Vec<f64> = (0..40).map(|i| horizon * (i as f64 + 0.25) / 40.0).collect();
    let force_t = linspace(0.0, horizon, 60);
    let all = Dataset::new(
        time_grid(2, &train_t).entries().iter().chain(time_grid(2, &test_t).entries()).cloned().collect(),
    );
    let k = joint_prior(&truth, &all, &force_t);
    let dim = k.nrows();
    let jitter = 1e-10 * k.trace() / dim as f64;
    let chol = (k + DMatrix::identity(dim, dim) * jitter).cholesky().expect("joint prior must be positive definite");
    let z = DVector::from_fn(dim, |_, _| normal(&mut rng));
    let joint = chol.l() * z;
    let n_all = all.len();
    let y: Vec<f64> = (0..n_all).map(|i| joint[i] + 0.1 * normal(&mut rng)).collect();
    let u_true: Vec<f64> = (n_all..dim).map(|i| joint[i]).collect();
    let n_train = 2 * train_t.len();
    let labelled = all.with_targets(&y).unwrap();
    let train = Dataset::new(labelled.entries()[..n_train].to_vec());
    let test = Dataset::new(labelled.entries()[n_train..].to_vec());

    let init = ModelSpec::Lfm(
        LfmSpec::new(vec![ode1(0.5), ode1(0.5)], vec![0.7], SensitivityMatrix::filled(2, 1, 0.7), vec![0.1, 0.1]).unwrap(),
    );
    let draws = ModelDraws::sample(&init, 100, 9).unwrap();
    let fit = optimize(&init, &train, &draws, &OptimizerConfig::default()).unwrap();
    let predictor = Predictor::with_draws(fit.spec.clone(), draws, &train).unwrap();
    let post = predictor.outputs(&test, true).unwrap();
    let y_test: Vec<f64> = test.entries().iter().map(|e| e.y).collect();
    let err = nmse(&y_test, post.mean.as_slice()).unwrap();
    let density = nlpd(&y_test, &post).unwrap();
    let u = predictor.latent_force(&force_t, 0).unwrap();
    let u_err = nmse(&u_true, u.mean.as_slice()).unwrap();
    let ModelSpec::Lfm(fitted) = &fit.spec else { unreachable!() };
    let gammas: Vec<f64> = fitted
        .outputs()
        .iter()
        .map(|op| match op {
            OutputOperator::Ode1(p) => p.gamma,
            _ => f64::NAN,
        })
        .collect();
    let gamma_ok = (gammas[0] / 1.0 - 1.0).abs() < 0.25 && (gammas[1] / 2.0 - 1.0).abs() < 0.25;
    let pass = err < 0.2 && density.is_finite() && u_err < 0.3;
    outcome(
        pass,
        format!(
            "held-out NMSE {err:.4} (<0.2), NLPD {density:.3} (finite), latent NMSE {u_err:.4} (<0.3); \
             fitted gamma ({:.3}, {:.3}) vs (1, 2){}; lml {:.2} -> {:.2} in {} iterations",
            gammas[0],
            gammas[1],
            if gamma_ok { ", within 25%" } else { ", NOT within 25%" },
            fit.initial_lml,
            fit.final_lml,
            fit.iterations
        ),
    )
}

fn main() -> ExitCode {
    // honour `cargo test -- --list` style probes without running the suite
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let mut corpus = Corpus::default();
    let mut all_pass = true;
    let mut report = |id: u32, name: &str, run: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = run();
        let secs = start.elapsed().as_secs_f64();
        println!("criterion {id} {}: {name}: {} [{secs:.1}s]", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        all_pass &= o.pass;
    };
    report(1, "feature vs quadrature oracle", &mut feature_vs_oracle);
    report(2, "Monte Carlo convergence of the LFM kernel", &mut || lfm_convergence(&mut corpus));
    report(3, "low-rank likelihood identity", &mut || likelihood_identity(&mut corpus));
    report(4, "analytic gradient vs central differences", &mut gradient_check);
    report(6, "linear scaling of objective and gradient", &mut linear_scaling);
    report(7, "MOGP convergence to the quadrature oracle", &mut || mogp_convergence(&mut corpus));
    report(8, "synthetic end-to-end recovery", &mut synthetic_end_to_end);
    report(5, "approximate Gram matrices are PSD", &mut || {
        psd_sweep(&mut corpus);
        outcome(
            corpus.worst <= 1e-10,
            format!("{} matrices, worst -lambda_min / trace = {:.2e} (tol 1e-10)", corpus.count, corpus.worst),
        )
    });
    if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
