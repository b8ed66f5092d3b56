//! Log marginal likelihoods, their gradients, and hyperparameter fitting.
//!
//! With `K = Phi_c Phi_c^T` the marginal covariance `K + Sigma` has rank-`2QS` structure, so the
//! inversion and determinant lemmas reduce every evaluation to a `2QS x 2QS` Cholesky factor of
//! `A = I + Phi_c^T Sigma^{-1} Phi_c`.

mod gradient;
mod optimizer;

pub use gradient::{lml_and_gradient, lml_gradient, Evaluation};
pub use optimizer::{optimize, write_trace_csv, FitResult, OptimizerConfig, TraceRow};

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{LfmError, Result};
use crate::features::FrequencyDraws;
use crate::kernels::{feature_matrix, CovMatrix, FeatureMatrix};
use crate::model::{Dataset, ModelSpec};
use crate::mogp::{mogp_feature_matrix, SpectralDraws};

/// Frozen frequency samples for either model family.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelDraws {
    Lfm(FrequencyDraws),
    Mogp(SpectralDraws),
}

impl ModelDraws {
    pub fn sample(spec: &ModelSpec, num_samples: usize, seed: u64) -> Result<Self> {
        Ok(match spec {
            ModelSpec::Lfm(s) => ModelDraws::Lfm(FrequencyDraws::sample(num_samples, s.num_forces(), seed)?),
            ModelSpec::Mogp(s) => {
                ModelDraws::Mogp(SpectralDraws::sample(num_samples, s.input_dim(), s.num_forces(), seed)?)
            }
        })
    }

    pub fn num_samples(&self) -> usize {
        match self {
            ModelDraws::Lfm(d) => d.num_samples(),
            ModelDraws::Mogp(d) => d.num_samples(),
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            ModelDraws::Lfm(d) => d.seed(),
            ModelDraws::Mogp(d) => d.seed(),
        }
    }
}

/// Feature matrix of `data` under either family.
pub fn model_feature_matrix(spec: &ModelSpec, data: &Dataset, draws: &ModelDraws) -> Result<FeatureMatrix> {
    match (spec, draws) {
        (ModelSpec::Lfm(s), ModelDraws::Lfm(d)) => feature_matrix(data, s, d),
        (ModelSpec::Mogp(s), ModelDraws::Mogp(d)) => mogp_feature_matrix(data, s, d),
        _ => Err(LfmError::InvalidSpec("frequency draws belong to a different model family".into())),
    }
}

fn check_lengths(n: usize, noise: &DVector<f64>, y: &DVector<f64>) -> Result<()> {
    if noise.len() != n {
        return Err(LfmError::LengthMismatch { expected: n, got: noise.len() });
    }
    if y.len() != n {
        return Err(LfmError::LengthMismatch { expected: n, got: y.len() });
    }
    if let Some((index, &value)) = noise.iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
        return Err(LfmError::InvalidData { index, reason: format!("noise variance {value} is not positive") });
    }
    Ok(())
}

/// Rows per slab when accumulating `Phi_c^T Sigma^{-1} Phi_c`.
const ROW_BLOCK: usize = 512;

fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Dense evaluation `log N(y | 0, K + Sigma)`.
pub fn full_log_marginal(k: &CovMatrix, noise: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
    let n = k.dim();
    check_lengths(n, noise, y)?;
    let mut c = k.matrix().clone();
    for i in 0..n {
        c[(i, i)] += noise[i];
    }
    let chol = Cholesky::new(c).ok_or(LfmError::NotPositiveDefinite)?;
    let quad = y.dot(&chol.solve(y));
    Ok(-0.5 * quad - 0.5 * log_det(&chol) - 0.5 * n as f64 * (2.0 * PI).ln())
}

/// Factorised quantities shared by the likelihood, its gradient and prediction.
#[derive(Clone, Debug)]
pub struct LowRankState {
    /// `I + Phi_c^T Sigma^{-1} Phi_c`.
    pub a: DMatrix<f64>,
    /// `Phi_c^T Sigma^{-1} y`.
    pub alpha: DVector<f64>,
    pub chol_a: Cholesky<f64, Dyn>,
    /// `A^{-1} alpha`, the posterior mean of the feature weights.
    pub weights: DVector<f64>,
    /// `y^T Sigma^{-1} y - alpha^T A^{-1} alpha`.
    pub data_fit: f64,
    /// `log|Sigma| + log|A|`.
    pub log_det: f64,
    pub lml: f64,
}

/// Low-rank evaluation in `O(N (2QS)^2)`.
pub fn low_rank_log_marginal(phi: &FeatureMatrix, noise: &DVector<f64>, y: &DVector<f64>) -> Result<(f64, LowRankState)> {
    low_rank_realified(&phi.realified(), noise, y)
}

pub(crate) fn low_rank_realified(pc: &DMatrix<f64>, noise: &DVector<f64>, y: &DVector<f64>) -> Result<(f64, LowRankState)> {
    let n = pc.nrows();
    check_lengths(n, noise, y)?;
    let m = pc.ncols();
    let inv_sd = noise.map(|s| 1.0 / s.sqrt());
    let y_white = y.component_mul(&inv_sd);
    // row blocks keep the whitened slab in cache, so cost stays linear in N
    let mut a = DMatrix::identity(m, m);
    let mut alpha = DVector::zeros(m);
    let mut start = 0;
    while start < n {
        let rows = ROW_BLOCK.min(n - start);
        let mut block_t = pc.rows(start, rows).transpose();
        for (j, mut col) in block_t.column_iter_mut().enumerate() {
            col *= inv_sd[start + j];
        }
        a.gemm(1.0, &block_t, &block_t.transpose(), 1.0);
        alpha.gemv(1.0, &block_t, &y_white.rows(start, rows), 1.0);
        start += rows;
    }
    a = (&a + a.transpose()) * 0.5;
    let chol_a = Cholesky::new(a.clone()).ok_or(LfmError::NotPositiveDefinite)?;
    let weights = chol_a.solve(&alpha);
    let data_fit = y_white.norm_squared() - alpha.dot(&weights);
    let log_det = noise.iter().map(|s| s.ln()).sum::<f64>() + log_det(&chol_a);
    let lml = -0.5 * data_fit - 0.5 * log_det - 0.5 * n as f64 * (2.0 * PI).ln();
    if !lml.is_finite() {
        return Err(LfmError::Numerical(format!("log marginal evaluated to {lml}")));
    }
    Ok((lml, LowRankState { a, alpha, chol_a, weights, data_fit, log_det, lml }))
}

/// Low-rank log marginal of `data` under `spec` with frozen `draws`.
pub fn log_marginal(spec: &ModelSpec, data: &Dataset, draws: &ModelDraws) -> Result<(f64, LowRankState)> {
    let phi = model_feature_matrix(spec, data, draws)?;
    low_rank_log_marginal(&phi, &data.noise_diagonal(spec.noise_vars()), &data.targets())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use num_complex::Complex64;

    #[test]
    fn full_trivial_values() {
        let half_log_2pi = 0.5 * (2.0 * PI).ln();
        let k = CovMatrix(DMatrix::zeros(1, 1));
        let one = DVector::from_element(1, 1.0);
        let v = full_log_marginal(&k, &one, &DVector::zeros(1)).unwrap();
        assert!((v + half_log_2pi).abs() < 1e-15);
        let v = full_log_marginal(&k, &one, &DVector::from_element(1, 2.0)).unwrap();
        assert!((v + half_log_2pi + 2.0).abs() < 1e-15);
    }

    #[test]
    fn hand_evaluated_low_rank_instance() {
        let phi = FeatureMatrix::from_complex(DMatrix::from_element(1, 1, Complex64::new(1.0, 0.0)));
        let (v, st) =
            low_rank_log_marginal(&phi, &DVector::from_element(1, 1.0), &DVector::from_element(1, 2.0)).unwrap();
        assert_eq!(st.a, dmatrix![2.0, 0.0; 0.0, 1.0]);
        assert_eq!(st.alpha.as_slice(), &[2.0, 0.0]);
        let want = -0.5 * (2.0 * PI).ln() - 0.5 * 2f64.ln() - 1.0;
        assert!((v - want).abs() < 1e-14);
        let k = CovMatrix(DMatrix::from_element(1, 1, 1.0));
        let full = full_log_marginal(&k, &DVector::from_element(1, 1.0), &DVector::from_element(1, 2.0)).unwrap();
        assert!((full - want).abs() < 1e-14);
    }

    #[test]
    fn zero_features_reduce_to_noise_only() {
        let phi = FeatureMatrix::from_complex(DMatrix::zeros(3, 2));
        let noise = DVector::from_vec(vec![0.5, 1.0, 2.0]);
        let y = DVector::from_vec(vec![1.0, -1.0, 0.3]);
        let (v, _) = low_rank_log_marginal(&phi, &noise, &y).unwrap();
        let full = full_log_marginal(&CovMatrix(DMatrix::zeros(3, 3)), &noise, &y).unwrap();
        assert!((v - full).abs() < 1e-13);
    }

    #[test]
    fn cholesky_reproduces_a() {
        let phi = FeatureMatrix::from_complex(DMatrix::from_fn(6, 3, |i, j| {
            Complex64::new((i as f64 * 0.7 + j as f64).sin(), (i as f64 - 2.0 * j as f64).cos())
        }));
        let (_, st) = low_rank_log_marginal(&phi, &DVector::from_element(6, 0.1), &DVector::from_element(6, 1.0)).unwrap();
        let l = st.chol_a.l();
        let back = &l * l.transpose();
        assert!((back - &st.a).norm() <= 1e-10 * st.a.norm());
    }

    #[test]
    fn rejects_bad_inputs() {
        let k = CovMatrix(DMatrix::from_element(2, 2, 1.0));
        let y = DVector::zeros(2);
        assert!(full_log_marginal(&k, &DVector::zeros(2), &y).is_err());
        assert!(full_log_marginal(&k, &DVector::from_element(3, 1.0), &y).is_err());
        let bad = CovMatrix(dmatrix![1.0, 0.0; 0.0, -5.0]);
        assert!(matches!(
            full_log_marginal(&bad, &DVector::from_element(2, 1.0), &y),
            Err(LfmError::NotPositiveDefinite)
        ));
    }
}
