//! Feature matrices, approximate covariances and the quadrature oracles they are checked against.
//!
//! Rows of a [`FeatureMatrix`] follow the dataset order; columns are force-major, so column
//! `q * S + s` holds `S_{d,q} / sqrt(S) * v_d(t, lambda_{s,q})`. With sensitivities and the
//! Monte Carlo normalisation folded in, the approximate covariance is exactly
//! `Re{Phi Phi^H} = Phi_c Phi_c^T` with `Phi_c = [Re Phi, Im Phi]`.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{LfmError, Result};
use crate::features::{latent_feature, FrequencyDraws, OutputResponse};
use crate::model::{validate_dataset, Dataset, LfmSpec, OutputOperator};
use crate::quadrature::{adaptive, adaptive_2d, CompositeRule};

/// Default absolute tolerance of the quadrature oracles.
pub const DEFAULT_ORACLE_TOL: f64 = 1e-9;

/// Complex feature matrix `Phi` (rows: observations, columns: force-major frequency samples).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    phi: DMatrix<Complex64>,
}

impl FeatureMatrix {
    pub fn from_complex(phi: DMatrix<Complex64>) -> Self {
        Self { phi }
    }

    pub fn phi(&self) -> &DMatrix<Complex64> {
        &self.phi
    }

    pub fn nrows(&self) -> usize {
        self.phi.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.phi.ncols()
    }

    /// `Phi_c = [Re Phi, Im Phi]`.
    pub fn realified(&self) -> DMatrix<f64> {
        let (n, m) = self.phi.shape();
        DMatrix::from_fn(n, 2 * m, |i, j| if j < m { self.phi[(i, j)].re } else { self.phi[(i, j - m)].im })
    }

    /// Assemble from per-row builders evaluated in parallel.
    pub(crate) fn from_rows<F>(nrows: usize, ncols: usize, row: F) -> Result<Self>
    where
        F: Fn(usize) -> Result<Vec<Complex64>> + Sync + Send,
    {
        let rows: Vec<Vec<Complex64>> = (0..nrows).into_par_iter().map(row).collect::<Result<_>>()?;
        let mut phi = DMatrix::zeros(nrows, ncols);
        for (i, r) in rows.iter().enumerate() {
            for (j, v) in r.iter().enumerate() {
                phi[(i, j)] = *v;
            }
        }
        Ok(Self { phi })
    }
}

/// Dense symmetric covariance matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CovMatrix(pub DMatrix<f64>);

impl CovMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        if self.dim() == 0 {
            return 0.0;
        }
        SymmetricEigen::new(self.0.clone()).eigenvalues.min()
    }

    /// Largest `|K_ij - K_ji|`.
    pub fn asymmetry(&self) -> f64 {
        (&self.0 - self.0.transpose()).amax()
    }

    pub fn frobenius_distance(&self, other: &CovMatrix) -> f64 {
        (&self.0 - &other.0).norm()
    }
}

pub(crate) fn responses(spec: &LfmSpec) -> Result<Vec<OutputResponse>> {
    spec.outputs().iter().map(OutputResponse::new).collect()
}

fn check_draws(spec: &LfmSpec, draws: &FrequencyDraws) -> Result<()> {
    if draws.num_forces() != spec.num_forces() {
        return Err(LfmError::InvalidSpec(format!(
            "frequency draws cover {} force(s), model has {}",
            draws.num_forces(),
            spec.num_forces()
        )));
    }
    Ok(())
}

/// Per-force frequencies `lambda_{s,q}` for the spec's lengthscales.
pub fn all_frequencies(spec: &LfmSpec, draws: &FrequencyDraws) -> Result<Vec<Vec<f64>>> {
    check_draws(spec, draws)?;
    (0..spec.num_forces()).map(|q| draws.force_frequencies(q, spec.lengthscales()[q])).collect()
}

/// `Phi` for an LFM dataset.
pub fn feature_matrix(data: &Dataset, spec: &LfmSpec, draws: &FrequencyDraws) -> Result<FeatureMatrix> {
    validate_dataset(data, spec)?;
    let lambdas = all_frequencies(spec, draws)?;
    let resp = responses(spec)?;
    let s = draws.num_samples();
    let q_count = spec.num_forces();
    let norm = 1.0 / (s as f64).sqrt();
    let sens = spec.sensitivities();
    FeatureMatrix::from_rows(data.len(), q_count * s, |i| {
        let e = &data.entries()[i];
        let d = e.output();
        let mut row = Vec::with_capacity(q_count * s);
        for (q, lam) in lambdas.iter().enumerate() {
            let w = sens.get(d, q) * norm;
            row.extend(lam.iter().map(|&l| resp[d].value(e.t(), l) * w));
        }
        Ok(row)
    })
}

/// Latent-force features `e^{j lambda t} / sqrt(S)` in the force-`q` block, zero elsewhere.
pub fn latent_feature_matrix(times: &[f64], q: usize, spec: &LfmSpec, draws: &FrequencyDraws) -> Result<FeatureMatrix> {
    if q >= spec.num_forces() {
        return Err(LfmError::InvalidSpec(format!("force index {q} out of range")));
    }
    let lambdas = all_frequencies(spec, draws)?;
    let s = draws.num_samples();
    let norm = 1.0 / (s as f64).sqrt();
    let cols = spec.num_forces() * s;
    FeatureMatrix::from_rows(times.len(), cols, |i| {
        let mut row = vec![Complex64::new(0.0, 0.0); cols];
        for (k, &l) in lambdas[q].iter().enumerate() {
            row[q * s + k] = latent_feature(times[i], l) * norm;
        }
        Ok(row)
    })
}

/// `K = Phi_c Phi_c^T`.
pub fn approx_cov(phi: &FeatureMatrix) -> CovMatrix {
    let pc = phi.realified();
    let k = &pc * pc.transpose();
    // exact symmetry regardless of GEMM blocking
    CovMatrix((&k + k.transpose()) * 0.5)
}

/// `Re{k_{f_d, u_q}(t, t')} = Re[(S_{d,q}/S) sum_s v_d(t, lambda_s) e^{-j lambda_s t'}]`.
pub fn cross_cov_output_latent(
    t: f64,
    d: usize,
    t_prime: f64,
    q: usize,
    spec: &LfmSpec,
    draws: &FrequencyDraws,
) -> Result<f64> {
    if d >= spec.num_outputs() || q >= spec.num_forces() {
        return Err(LfmError::InvalidSpec(format!("output {d} or force {q} out of range")));
    }
    check_draws(spec, draws)?;
    let resp = OutputResponse::new(&spec.outputs()[d])?;
    let lam = draws.force_frequencies(q, spec.lengthscales()[q])?;
    let sum: Complex64 = lam.iter().map(|&l| resp.value(t, l) * latent_feature(t_prime, -l)).sum();
    Ok(spec.sensitivities().get(d, q) * sum.re / lam.len() as f64)
}

/// `int_0^t G(t - tau) e^{j lambda tau} dtau` by adaptive quadrature.
pub fn response_quadrature(t: f64, op: &OutputOperator, lambda: f64, tol: f64) -> Result<Complex64> {
    let resp = OutputResponse::new(op)?;
    let r = adaptive(|tau| latent_feature(tau, lambda) * resp.green(t - tau), 0.0, t, tol)?;
    Ok(r.value)
}

/// `S_{d,q} int_0^t G_d(t - tau) exp(-(tau - t')^2 / l_q^2) dtau`.
pub fn cross_cov_output_latent_quadrature(
    t: f64,
    d: usize,
    t_prime: f64,
    q: usize,
    spec: &LfmSpec,
    tol: f64,
) -> Result<f64> {
    let resp = OutputResponse::new(&spec.outputs()[d])?;
    let ell2 = spec.lengthscales()[q].powi(2);
    let r = adaptive(|tau| resp.green(t - tau) * (-(tau - t_prime).powi(2) / ell2).exp(), 0.0, t, tol)?;
    Ok(spec.sensitivities().get(d, q) * r.value)
}

/// Which independent integration route the exact oracle uses.
#[derive(Clone, Debug)]
pub enum OracleRule {
    /// Nested adaptive Gauss-Kronrod to an absolute tolerance.
    Adaptive { tol: f64 },
    /// Tensor-product composite Gauss-Legendre.
    Product { order: usize, panels: usize },
}

fn exact_entry(
    resp: &[OutputResponse],
    spec: &LfmSpec,
    (d, t): (usize, f64),
    (e, u): (usize, f64),
    rule: &OracleRule,
) -> Result<f64> {
    if t == 0.0 || u == 0.0 {
        return Ok(0.0);
    }
    let sens = spec.sensitivities();
    let active: Vec<usize> = (0..spec.num_forces()).filter(|&q| sens.get(d, q) * sens.get(e, q) != 0.0).collect();
    let mut total = 0.0;
    for &q in &active {
        let w = sens.get(d, q) * sens.get(e, q);
        let ell2 = spec.lengthscales()[q].powi(2);
        let integrand = |tau: f64, tau2: f64| resp[d].green(t - tau) * resp[e].green(u - tau2) * (-(tau - tau2).powi(2) / ell2).exp();
        let value = match *rule {
            OracleRule::Adaptive { tol } => {
                let tol_q = tol / (active.len() as f64 * w.abs());
                adaptive_2d(integrand, 0.0, t, |_| (0.0, u), tol_q)?.value
            }
            OracleRule::Product { order, panels } => {
                CompositeRule::new(order, panels).integrate_2d(integrand, 0.0, t, 0.0, u)
            }
        };
        total += w * value;
    }
    Ok(total)
}

/// Exact LFM covariance by double quadrature of the Green's-function convolutions.
pub fn exact_cov_with(data: &Dataset, spec: &LfmSpec, rule: &OracleRule) -> Result<CovMatrix> {
    validate_dataset(data, spec)?;
    let resp = responses(spec)?;
    let n = data.len();
    let points: Vec<(usize, f64)> = data.entries().iter().map(|e| (e.output(), e.t())).collect();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let values: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| exact_entry(&resp, spec, points[i], points[j], rule))
        .collect::<Result<_>>()?;
    let mut k = DMatrix::zeros(n, n);
    for (&(i, j), v) in pairs.iter().zip(values) {
        k[(i, j)] = v;
        k[(j, i)] = v;
    }
    Ok(CovMatrix(k))
}

/// Exact covariance with nested adaptive quadrature at absolute tolerance `tol`.
pub fn exact_cov_quadrature(data: &Dataset, spec: &LfmSpec, tol: f64) -> Result<CovMatrix> {
    exact_cov_with(data, spec, &OracleRule::Adaptive { tol })
}
