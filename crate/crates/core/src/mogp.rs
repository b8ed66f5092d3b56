//! Random Fourier features for convolved multi-output GPs with Gaussian smoothing kernels.
//!
//! Output `d` smooths each latent EQ process with `exp(-P_d |tau|^2 / 2)` over `R^p`. Convolving
//! the Fourier basis `e^{j lambda^T z}` with that kernel gives the feature
//!
//! ```text
//! phi_{d,s}(x) = (2 pi / P_d)^{p/2} exp(-|lambda_s|^2 / (2 P_d)) exp(j lambda_s^T x)
//! ```
//!
//! with `lambda_s = sqrt(2) z_s / l_q`, `z_s ~ N(0, I_p)`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{LfmError, Result};
use crate::kernels::{CovMatrix, FeatureMatrix};
use crate::model::{validate_dataset, Dataset, MogpSpec};
use crate::quadrature::adaptive_2d;

/// Standard-normal base matrix `Z` (`S x p`) for one latent force.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralMatrix {
    z: DMatrix<f64>,
}

impl SpectralMatrix {
    pub fn new(z: DMatrix<f64>) -> Self {
        Self { z }
    }

    pub fn base(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn num_samples(&self) -> usize {
        self.z.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.z.ncols()
    }

    /// `Lambda_q = sqrt(2) Z / l_q`.
    pub fn frequencies(&self, lengthscale: f64) -> DMatrix<f64> {
        &self.z * (std::f64::consts::SQRT_2 / lengthscale)
    }

    /// Row-wise squared norms of `Lambda_q`.
    pub fn squared_norms(&self, lengthscale: f64) -> Vec<f64> {
        let lam = self.frequencies(lengthscale);
        lam.row_iter().map(|r| r.norm_squared()).collect()
    }
}

/// Independent spectral matrices for every force.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralDraws {
    forces: Vec<SpectralMatrix>,
    seed: u64,
}

impl SpectralDraws {
    pub fn sample(num_samples: usize, input_dim: usize, num_forces: usize, seed: u64) -> Result<Self> {
        if num_samples == 0 || num_forces == 0 || input_dim == 0 {
            return Err(LfmError::InvalidSpec(format!(
                "need S, p, Q >= 1; got S={num_samples}, p={input_dim}, Q={num_forces}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let forces = (0..num_forces)
            .map(|_| {
                let mut z = DMatrix::zeros(num_samples, input_dim);
                for s in 0..num_samples {
                    for k in 0..input_dim {
                        z[(s, k)] = StandardNormal.sample(&mut rng);
                    }
                }
                SpectralMatrix { z }
            })
            .collect();
        Ok(Self { forces, seed })
    }

    pub fn force(&self, q: usize) -> &SpectralMatrix {
        &self.forces[q]
    }

    pub fn num_forces(&self) -> usize {
        self.forces.len()
    }

    pub fn num_samples(&self) -> usize {
        self.forces[0].num_samples()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn check(&self, spec: &MogpSpec) -> Result<()> {
        if self.num_forces() != spec.num_forces() || self.forces[0].input_dim() != spec.input_dim() {
            return Err(LfmError::InvalidSpec(format!(
                "spectral draws have Q={}, p={}; model has Q={}, p={}",
                self.num_forces(),
                self.forces[0].input_dim(),
                spec.num_forces(),
                spec.input_dim()
            )));
        }
        Ok(())
    }
}

/// `(2 pi / P)^{p/2}`, the mass of the smoothing kernel.
pub fn smoothing_constant(inverse_width: f64, input_dim: usize) -> f64 {
    (2.0 * std::f64::consts::PI / inverse_width).powf(input_dim as f64 / 2.0)
}

/// Frequencies, squared norms and the feature row for a fixed force, reused across inputs.
struct ForceFeatures {
    lambda: DMatrix<f64>,
    b: Vec<f64>,
}

impl ForceFeatures {
    fn new(spectral: &SpectralMatrix, lengthscale: f64) -> Self {
        let lambda = spectral.frequencies(lengthscale);
        let b = lambda.row_iter().map(|r| r.norm_squared()).collect();
        Self { lambda, b }
    }

    fn eval<'a>(&'a self, x: &'a [f64], inverse_width: f64) -> impl Iterator<Item = Complex64> + 'a {
        let c = smoothing_constant(inverse_width, x.len());
        (0..self.b.len()).map(move |s| {
            let phase: f64 = x.iter().enumerate().map(|(k, xk)| self.lambda[(s, k)] * xk).sum();
            Complex64::from_polar(c * (-self.b[s] / (2.0 * inverse_width)).exp(), phase)
        })
    }
}

/// Smoothed Fourier feature of one output for the force whose base draws are `spectral`.
pub fn mogp_feature(x: &[f64], inverse_width: f64, spectral: &SpectralMatrix, lengthscale: f64) -> Result<Vec<Complex64>> {
    if !(inverse_width > 0.0 && inverse_width.is_finite()) {
        return Err(LfmError::InvalidSpec(format!("inverse width must be > 0, got {inverse_width}")));
    }
    if x.len() != spectral.input_dim() {
        return Err(LfmError::LengthMismatch { expected: spectral.input_dim(), got: x.len() });
    }
    Ok(ForceFeatures::new(spectral, lengthscale).eval(x, inverse_width).collect())
}

/// `Re sum_q (S_{d,q} S_{d',q} / S) phi_d(x)^T conj(phi_{d'}(x'))`.
pub fn mogp_cross_cov(x: &[f64], x_prime: &[f64], d: usize, d_prime: usize, spec: &MogpSpec, draws: &SpectralDraws) -> Result<f64> {
    draws.check(spec)?;
    let sens = spec.sensitivities();
    let mut total = 0.0;
    for q in 0..spec.num_forces() {
        let l = spec.lengthscales()[q];
        let a = mogp_feature(x, spec.inverse_widths()[d], draws.force(q), l)?;
        let b = mogp_feature(x_prime, spec.inverse_widths()[d_prime], draws.force(q), l)?;
        let dot: Complex64 = a.iter().zip(&b).map(|(u, v)| u * v.conj()).sum();
        total += sens.get(d, q) * sens.get(d_prime, q) * dot.re / a.len() as f64;
    }
    Ok(total)
}

/// `Phi` for a MOGP dataset, laid out as in [`crate::kernels::feature_matrix`].
pub fn mogp_feature_matrix(data: &Dataset, spec: &MogpSpec, draws: &SpectralDraws) -> Result<FeatureMatrix> {
    validate_dataset(data, spec)?;
    draws.check(spec)?;
    let s = draws.num_samples();
    let norm = 1.0 / (s as f64).sqrt();
    let forces: Vec<ForceFeatures> =
        (0..spec.num_forces()).map(|q| ForceFeatures::new(draws.force(q), spec.lengthscales()[q])).collect();
    let sens = spec.sensitivities();
    FeatureMatrix::from_rows(data.len(), spec.num_forces() * s, |i| {
        let e = &data.entries()[i];
        let d = e.output();
        let mut row = Vec::with_capacity(forces.len() * s);
        for (q, f) in forces.iter().enumerate() {
            let w = sens.get(d, q) * norm;
            row.extend(f.eval(&e.input, spec.inverse_widths()[d]).map(|v| v * w));
        }
        Ok(row)
    })
}

/// Half-width beyond which `exp(-P u^2 / 2)` is below `e^{-40}`.
fn smoothing_support(inverse_width: f64) -> f64 {
    (80.0 / inverse_width).sqrt()
}

/// Exact covariance at `p = 1` by nested quadrature over both smoothing integrals.
pub fn mogp_exact_cov_quadrature(data: &Dataset, spec: &MogpSpec, tol: f64) -> Result<CovMatrix> {
    if spec.input_dim() != 1 {
        return Err(LfmError::InvalidSpec("the quadrature oracle supports one input dimension".into()));
    }
    validate_dataset(data, spec)?;
    let n = data.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let values: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let (a, b) = (&data.entries()[i], &data.entries()[j]);
            let (d, e) = (a.output(), b.output());
            let (pd, pe) = (spec.inverse_widths()[d], spec.inverse_widths()[e]);
            let (x, u) = (a.input[0], b.input[0]);
            let (wd, we) = (smoothing_support(pd), smoothing_support(pe));
            let mut total = 0.0;
            for q in 0..spec.num_forces() {
                let s = spec.sensitivities().get(d, q) * spec.sensitivities().get(e, q);
                if s == 0.0 {
                    continue;
                }
                let ell2 = spec.lengthscales()[q].powi(2);
                let f = |z: f64, z2: f64| {
                    (-0.5 * pd * (x - z).powi(2) - 0.5 * pe * (u - z2).powi(2) - (z - z2).powi(2) / ell2).exp()
                };
                let tol_q = tol / (spec.num_forces() as f64 * s.abs());
                total += s * adaptive_2d(f, x - wd, x + wd, |_| (u - we, u + we), tol_q)?.value;
            }
            Ok(total)
        })
        .collect::<Result<_>>()?;
    let mut k = DMatrix::zeros(n, n);
    for (&(i, j), v) in pairs.iter().zip(values) {
        k[(i, j)] = v;
        k[(j, i)] = v;
    }
    Ok(CovMatrix(k))
}
