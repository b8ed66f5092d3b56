//! Weight-space posteriors for outputs and latent forces, and the NMSE/NLPD metrics.
//!
//! Under the feature model `f = Phi_c w` with `w ~ N(0, I)`, the weights have posterior
//! `N(A^{-1} alpha, A^{-1})`, so every predictive marginal needs only the Cholesky factor of `A`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{LfmError, Result};
use crate::kernels::latent_feature_matrix;
use crate::likelihood::{log_marginal, model_feature_matrix, FitResult, LowRankState, ModelDraws};
use crate::model::{Dataset, ModelSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub mean: DVector<f64>,
    /// Marginal variances, clamped at zero.
    pub variance: DVector<f64>,
    pub includes_noise: bool,
}

fn weight_space(pc: &DMatrix<f64>, state: &LowRankState) -> Result<(DVector<f64>, DVector<f64>)> {
    if pc.ncols() != state.weights.len() {
        return Err(LfmError::LengthMismatch { expected: state.weights.len(), got: pc.ncols() });
    }
    let mean = pc * &state.weights;
    let mut half = pc.transpose();
    if !state.chol_a.l_dirty().solve_lower_triangular_mut(&mut half) {
        return Err(LfmError::NotPositiveDefinite);
    }
    let mut clamped = 0;
    let var = DVector::from_iterator(
        pc.nrows(),
        half.column_iter().map(|c| {
            let v = c.norm_squared();
            if v < 0.0 {
                clamped += 1;
            }
            v.max(0.0)
        }),
    );
    if clamped > 0 {
        log::warn!("{clamped} predictive variance(s) clamped at zero");
    }
    Ok((mean, var))
}

/// Posterior over outputs at `test`, optionally adding each output's noise variance.
pub fn predict_outputs(
    spec: &ModelSpec,
    draws: &ModelDraws,
    state: &LowRankState,
    test: &Dataset,
    include_noise: bool,
) -> Result<Posterior> {
    let phi = model_feature_matrix(spec, test, draws)?;
    let (mean, mut variance) = weight_space(&phi.realified(), state)?;
    if include_noise {
        variance += test.noise_diagonal(spec.noise_vars());
    }
    Ok(Posterior { mean, variance, includes_noise: include_noise })
}

/// Posterior over latent force `q` at `times`; the prior variance is one everywhere.
pub fn predict_latent_forces(
    spec: &ModelSpec,
    draws: &ModelDraws,
    state: &LowRankState,
    times: &[f64],
    q: usize,
) -> Result<Posterior> {
    let (ModelSpec::Lfm(s), ModelDraws::Lfm(d)) = (spec, draws) else {
        return Err(LfmError::InvalidSpec("latent forces exist only for latent force models".into()));
    };
    let psi = latent_feature_matrix(times, q, s, d)?;
    let (mean, variance) = weight_space(&psi.realified(), state)?;
    Ok(Posterior { mean, variance, includes_noise: false })
}

/// A fitted model conditioned on its training data.
#[derive(Clone, Debug)]
pub struct Predictor {
    pub spec: ModelSpec,
    pub draws: ModelDraws,
    pub state: LowRankState,
}

impl Predictor {
    /// Rebuild the frozen draws from the fit's seed and condition on `train`.
    pub fn new(fit: &FitResult, train: &Dataset) -> Result<Self> {
        let draws = ModelDraws::sample(&fit.spec, fit.num_samples, fit.seed)?;
        Self::with_draws(fit.spec.clone(), draws, train)
    }

    pub fn with_draws(spec: ModelSpec, draws: ModelDraws, train: &Dataset) -> Result<Self> {
        let (_, state) = log_marginal(&spec, train, &draws)?;
        Ok(Self { spec, draws, state })
    }

    pub fn outputs(&self, test: &Dataset, include_noise: bool) -> Result<Posterior> {
        predict_outputs(&self.spec, &self.draws, &self.state, test, include_noise)
    }

    pub fn latent_force(&self, times: &[f64], q: usize) -> Result<Posterior> {
        predict_latent_forces(&self.spec, &self.draws, &self.state, times, q)
    }
}

/// `mean((y - y_hat)^2) / var(y)` with the population variance of `y_true`.
pub fn nmse(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    if y_true.len() != y_pred.len() {
        return Err(LfmError::LengthMismatch { expected: y_true.len(), got: y_pred.len() });
    }
    let n = y_true.len() as f64;
    let mean = y_true.iter().sum::<f64>() / n;
    let var = y_true.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(LfmError::InvalidData { index: 0, reason: "targets have zero variance".into() });
    }
    let mse = y_true.iter().zip(y_pred).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    Ok(mse / var)
}

/// Mean Gaussian negative log predictive density.
pub fn nlpd(y_true: &[f64], post: &Posterior) -> Result<f64> {
    if y_true.len() != post.mean.len() {
        return Err(LfmError::LengthMismatch { expected: post.mean.len(), got: y_true.len() });
    }
    if y_true.is_empty() {
        return Err(LfmError::InvalidData { index: 0, reason: "no test points".into() });
    }
    let mut total = 0.0;
    for (i, (&y, (&mu, &v))) in y_true.iter().zip(post.mean.iter().zip(post.variance.iter())).enumerate() {
        if !(v > 0.0) {
            return Err(LfmError::InvalidData { index: i, reason: format!("predictive variance {v} is not positive") });
        }
        total += 0.5 * (2.0 * PI * v).ln() + (y - mu).powi(2) / (2.0 * v);
    }
    Ok(total / y_true.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::approx_cov;
    use crate::model::{LfmSpec, Observation, Ode1Params, Ode2Params, OutputOperator, SensitivityMatrix};

    fn spec(noise: f64) -> ModelSpec {
        ModelSpec::Lfm(
            LfmSpec::new(
                vec![
                    OutputOperator::Ode1(Ode1Params::new(1.0).unwrap()),
                    OutputOperator::Ode2(Ode2Params::new(1.0, 1.5, 4.0).unwrap()),
                ],
                vec![1.0, 0.6],
                SensitivityMatrix::new(2, 2, vec![1.0, 0.4, -0.7, 1.2]).unwrap(),
                vec![noise, 2.0 * noise],
            )
            .unwrap(),
        )
    }

    fn data(n: usize, shift: f64) -> Dataset {
        Dataset::new(
            (0..n)
                .map(|i| {
                    let t = shift + 4.0 * i as f64 / n as f64;
                    Observation::at_time(1 + i % 2, t, (t + i as f64).sin())
                })
                .collect(),
        )
    }

    #[test]
    fn no_data_gives_prior() {
        let spec = spec(0.1);
        let draws = ModelDraws::sample(&spec, 6, 1).unwrap();
        let p = Predictor::with_draws(spec.clone(), draws.clone(), &Dataset::new(Vec::new())).unwrap();
        let test = data(5, 0.2);
        let post = p.outputs(&test, false).unwrap();
        let prior = approx_cov(&model_feature_matrix(&spec, &test, &draws).unwrap());
        assert!(post.mean.iter().all(|m| *m == 0.0));
        for i in 0..5 {
            assert!((post.variance[i] - prior.0[(i, i)]).abs() < 1e-12);
        }
        let u = p.latent_force(&[0.0, 1.0, 5.0], 1).unwrap();
        assert!(u.mean.iter().all(|m| *m == 0.0));
        assert!(u.variance.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn agrees_with_function_space_formulas() {
        let spec = spec(0.05);
        let draws = ModelDraws::sample(&spec, 8, 2).unwrap();
        let train = data(30, 0.0);
        let test = data(12, 0.13);
        let post = Predictor::with_draws(spec.clone(), draws.clone(), &train).unwrap().outputs(&test, true).unwrap();

        let mut joint = train.entries().to_vec();
        joint.extend(test.entries().iter().cloned());
        let k = approx_cov(&model_feature_matrix(&spec, &Dataset::new(joint), &draws).unwrap()).0;
        let n = train.len();
        let kff = k.view((0, 0), (n, n)).into_owned() + DMatrix::from_diagonal(&train.noise_diagonal(spec.noise_vars()));
        let ksf = k.view((n, 0), (test.len(), n)).into_owned();
        let kss = k.view((n, n), (test.len(), test.len())).into_owned();
        let chol = kff.cholesky().unwrap();
        let mean = &ksf * chol.solve(&train.targets());
        let cov = kss - &ksf * chol.solve(&ksf.transpose());
        let noise = test.noise_diagonal(spec.noise_vars());
        for i in 0..test.len() {
            assert!((post.mean[i] - mean[i]).abs() < 1e-8, "mean {i}");
            assert!((post.variance[i] - cov[(i, i)] - noise[i]).abs() < 1e-8, "var {i}");
        }
    }

    #[test]
    fn mean_is_linear_and_variance_ignores_targets() {
        let spec = spec(0.1);
        let draws = ModelDraws::sample(&spec, 5, 3).unwrap();
        let train = data(20, 0.0);
        let test = data(7, 0.3);
        let y1 = train.targets();
        let y2 = y1.map(|v| v.powi(2) - 0.5);
        let combo = &y1 * 2.0 - &y2 * 0.7;
        let run = |y: &DVector<f64>| {
            Predictor::with_draws(spec.clone(), draws.clone(), &train.with_targets(y.as_slice()).unwrap())
                .unwrap()
                .outputs(&test, true)
                .unwrap()
        };
        let (p1, p2, pc) = (run(&y1), run(&y2), run(&combo));
        assert!((&pc.mean - (&p1.mean * 2.0 - &p2.mean * 0.7)).amax() < 1e-10);
        assert!((&p1.variance - &p2.variance).amax() < 1e-12);
    }

    #[test]
    fn conditioning_shrinks_latent_variance() {
        let spec = spec(0.1);
        let draws = ModelDraws::sample(&spec, 10, 4).unwrap();
        let p = Predictor::with_draws(spec, draws, &data(40, 0.0)).unwrap();
        let times: Vec<f64> = (0..20).map(|i| 0.25 * i as f64).collect();
        for q in 0..2 {
            let u = p.latent_force(&times, q).unwrap();
            assert!(u.variance.iter().all(|v| *v <= 1.0 + 1e-12 && *v >= 0.0));
        }
        assert!(p.latent_force(&times, 2).is_err());
    }

    #[test]
    fn interpolates_with_small_noise() {
        let spec = spec(1e-10);
        let draws = ModelDraws::sample(&spec, 20, 5).unwrap();
        let grid = data(20, 0.1);
        // targets inside the span of the features, so K + Sigma is well conditioned on them
        let pc = model_feature_matrix(&spec, &grid, &draws).unwrap().realified();
        let w = DVector::from_fn(pc.ncols(), |k, _| ((k * 7 % 11) as f64 - 5.0) / 5.0);
        let y = &pc * w;
        let train = grid.with_targets(y.as_slice()).unwrap();
        let post = Predictor::with_draws(spec, draws, &train).unwrap().outputs(&train, false).unwrap();
        let err = (post.mean - &y).amax();
        assert!(err < 1e-4 * y.amax(), "{err}");
    }

    #[test]
    fn metric_values() {
        let y = [0.0, 2.0];
        assert_eq!(nmse(&y, &y).unwrap(), 0.0);
        assert!((nmse(&y, &[1.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(nmse(&[1.0, 1.0], &[0.0, 0.0]).is_err());

        let mean = DVector::from_vec(vec![0.5, -1.0]);
        let at = |v: f64| Posterior { mean: mean.clone(), variance: DVector::from_element(2, v), includes_noise: true };
        assert!(nlpd(&[0.5, -1.0], &at(1.0 / (2.0 * PI))).unwrap().abs() < 1e-15);
        assert!((nlpd(&[0.5, -1.0], &at(1.0)).unwrap() - 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
        let worse = nlpd(&[1.5, -1.0], &at(1.0)).unwrap();
        let worst = nlpd(&[2.5, -1.0], &at(1.0)).unwrap();
        assert!(worst > worse && worse > 0.5 * (2.0 * PI).ln());
        assert!(nlpd(&[0.0, 0.0], &at(0.0)).is_err());
    }
}
