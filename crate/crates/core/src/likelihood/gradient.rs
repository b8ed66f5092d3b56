//! Analytic gradient of the low-rank log marginal in packed coordinates.
//!
//! With `C = Phi_c Phi_c^T + Sigma` and `beta = C^{-1} y`, the adjoint of the realified features
//! is `G = beta beta^T Phi_c - C^{-1} Phi_c`, and `C^{-1} Phi_c = Sigma^{-1} Phi_c A^{-1}`. Each
//! hyperparameter then contributes `sum Re(conj(G_re + j G_im) dPhi/dtheta)` over feature entries.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;

use super::{low_rank_realified, model_feature_matrix, LowRankState, ModelDraws};
use crate::error::{LfmError, Result};
use crate::features::OutputResponse;
use crate::kernels::{all_frequencies, responses};
use crate::model::{
    Dataset, HyperParamVector, HyperParameters, LfmSpec, MogpSpec, ModelSpec, OdeOperator, OutputOperator, ParamSlot,
    NOISE_FLOOR,
};
use crate::mogp::{smoothing_constant, SpectralDraws};
use crate::features::FrequencyDraws;

/// Relative step for the finite-difference path of general operators.
const FD_STEP: f64 = 1e-6;

/// Objective value, gradient and the state they were computed from.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub lml: f64,
    pub gradient: Vec<f64>,
    pub spec: ModelSpec,
    pub state: LowRankState,
}

/// Positions of the packed blocks.
struct Layout {
    lengthscale: usize,
    noise: usize,
    sensitivity: usize,
    num_forces: usize,
}

impl Layout {
    fn new(slots: &[ParamSlot], num_forces: usize) -> Self {
        let find = |pred: fn(&ParamSlot) -> bool| slots.iter().position(pred).unwrap_or(slots.len());
        Self {
            lengthscale: find(|s| matches!(s, ParamSlot::Lengthscale { .. })),
            noise: find(|s| matches!(s, ParamSlot::NoiseVar { .. })),
            sensitivity: find(|s| matches!(s, ParamSlot::Sensitivity { .. })),
            num_forces,
        }
    }

    fn sens(&self, d: usize, q: usize) -> usize {
        self.sensitivity + d * self.num_forces + q
    }
}

/// `Re(conj(g) x)` for `g = (re, im)`.
#[inline]
fn pair(g: (f64, f64), x: Complex64) -> f64 {
    g.0 * x.re + g.1 * x.im
}

struct Adjoint {
    /// `n x 2QS`.
    g: DMatrix<f64>,
    /// `d lml / d sigma_i^2` per observation.
    noise: DVector<f64>,
}

impl Adjoint {
    fn new(pc: &DMatrix<f64>, noise: &DVector<f64>, y: &DVector<f64>, state: &LowRankState) -> Self {
        let beta = (y - pc * &state.weights).component_div(noise);
        let bp = pc.transpose() * &beta;
        // Phi_c A^{-1}; A is small, so inverting it and using GEMM beats n triangular solves
        let m_mat = pc * state.chol_a.inverse();
        let (n, m) = pc.shape();
        let mut g = m_mat.clone();
        let mut noise_grad = DVector::zeros(n);
        for i in 0..n {
            let inv = 1.0 / noise[i];
            let mut h = 0.0;
            for k in 0..m {
                h += m_mat[(i, k)] * pc[(i, k)];
            }
            let c_inv_ii = inv - h * inv * inv;
            noise_grad[i] = 0.5 * (beta[i] * beta[i] - c_inv_ii);
        }
        for k in 0..m {
            for i in 0..n {
                g[(i, k)] = beta[i] * bp[k] - m_mat[(i, k)] / noise[i];
            }
        }
        Self { g, noise: noise_grad }
    }

    #[inline]
    fn at(&self, i: usize, col: usize, half: usize) -> (f64, f64) {
        (self.g[(i, col)], self.g[(i, col + half)])
    }
}

/// Log marginal and its gradient at packed `theta`, shaped by `template`.
pub fn lml_and_gradient(theta: &[f64], template: &ModelSpec, data: &Dataset, draws: &ModelDraws) -> Result<Evaluation> {
    let spec = template.unpack(theta)?;
    let slots = template.pack().slots().to_vec();
    let phi = model_feature_matrix(&spec, data, draws)?;
    let pc = phi.realified();
    let noise = data.noise_diagonal(spec.noise_vars());
    let y = data.targets();
    let (lml, state) = low_rank_realified(&pc, &noise, &y)?;
    let adj = Adjoint::new(&pc, &noise, &y, &state);
    let layout = Layout::new(&slots, spec.num_forces());

    let mut gradient = match (&spec, draws) {
        (ModelSpec::Lfm(s), ModelDraws::Lfm(d)) => lfm_feature_gradient(s, data, d, &adj, &layout, slots.len())?,
        (ModelSpec::Mogp(s), ModelDraws::Mogp(d)) => mogp_feature_gradient(s, data, d, &adj, &layout, slots.len()),
        _ => return Err(LfmError::InvalidSpec("frequency draws belong to a different model family".into())),
    };

    let floor = NOISE_FLOOR.ln();
    let vars = spec.noise_vars();
    for (i, e) in data.entries().iter().enumerate() {
        let d = e.output();
        // clamped noise is flat in its packed coordinate
        if theta[layout.noise + d] >= floor {
            gradient[layout.noise + d] += adj.noise[i] * vars[d];
        }
    }

    if let Some((index, &value)) = gradient.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(LfmError::NonFinite { index, value });
    }
    Ok(Evaluation { lml, gradient, spec, state })
}

/// Gradient only, for a packed vector carrying its own slot map.
pub fn lml_gradient(theta: &HyperParamVector, template: &ModelSpec, data: &Dataset, draws: &ModelDraws) -> Result<Vec<f64>> {
    if theta.slots() != template.pack().slots() {
        return Err(LfmError::InvalidSpec("packed vector layout does not match the model".into()));
    }
    Ok(lml_and_gradient(theta.values(), template, data, draws)?.gradient)
}

/// Central differences of the response in each raw coefficient of a general operator.
struct CoefficientFd {
    plus: Vec<OutputResponse>,
    minus: Vec<OutputResponse>,
    steps: Vec<f64>,
}

impl CoefficientFd {
    fn new(op: &OdeOperator) -> Result<Self> {
        let mut fd = Self { plus: Vec::new(), minus: Vec::new(), steps: Vec::new() };
        for (k, &a) in op.coeffs().iter().enumerate() {
            let h = FD_STEP * a.abs().max(1.0);
            let shifted = |delta: f64| -> Result<OutputResponse> {
                let mut c = op.coeffs().to_vec();
                c[k] += delta;
                OutputResponse::new(&OutputOperator::General { coeffs: OdeOperator::new(c)? })
            };
            fd.plus.push(shifted(h)?);
            fd.minus.push(shifted(-h)?);
            fd.steps.push(h);
        }
        Ok(fd)
    }

    fn derivatives(&self, t: f64, lambda: f64) -> impl Iterator<Item = Complex64> + '_ {
        (0..self.steps.len()).map(move |k| {
            (self.plus[k].value(t, lambda) - self.minus[k].value(t, lambda)) / (2.0 * self.steps[k])
        })
    }
}

fn lfm_feature_gradient(
    spec: &LfmSpec,
    data: &Dataset,
    draws: &FrequencyDraws,
    adj: &Adjoint,
    layout: &Layout,
    len: usize,
) -> Result<Vec<f64>> {
    let lambdas = all_frequencies(spec, draws)?;
    let resp = responses(spec)?;
    let fds = spec
        .outputs()
        .iter()
        .map(|op| match op {
            OutputOperator::General { coeffs } => CoefficientFd::new(coeffs).map(Some),
            _ => Ok(None),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut theta_start = Vec::with_capacity(spec.num_outputs());
    let mut offset = 0;
    for op in spec.outputs() {
        theta_start.push(offset);
        offset += op.num_params();
    }
    let s_count = draws.num_samples();
    let half = spec.num_forces() * s_count;
    let norm = 1.0 / (s_count as f64).sqrt();
    let sens = spec.sensitivities();

    let grad = (0..data.len())
        .into_par_iter()
        .fold(
            || vec![0.0; len],
            |mut acc, i| {
                let e = &data.entries()[i];
                let (d, t) = (e.output(), e.t());
                let op = &spec.outputs()[d];
                let p0 = theta_start[d];
                for (q, lam) in lambdas.iter().enumerate() {
                    let w = sens.get(d, q) * norm;
                    for (s, &l) in lam.iter().enumerate() {
                        let g = adj.at(i, q * s_count + s, half);
                        let rg = resp[d].value_and_grad(t, l);
                        acc[layout.sens(d, q)] += pair(g, rg.value * norm);
                        if w == 0.0 {
                            continue;
                        }
                        acc[layout.lengthscale + q] += pair(g, rg.d_lambda * (-w * l));
                        match op {
                            OutputOperator::Ode1(p) => acc[p0] += p.gamma * pair(g, rg.d_params[0] * w),
                            OutputOperator::Ode2(p) => {
                                for (k, scale) in [p.mass, p.damper, p.spring].into_iter().enumerate() {
                                    acc[p0 + k] += scale * pair(g, rg.d_params[k] * w);
                                }
                            }
                            OutputOperator::General { .. } => {
                                if let Some(fd) = &fds[d] {
                                    for (k, dv) in fd.derivatives(t, l).enumerate() {
                                        acc[p0 + k] += pair(g, dv * w);
                                    }
                                }
                            }
                        }
                    }
                }
                acc
            },
        )
        .reduce(|| vec![0.0; len], add);
    Ok(grad)
}

fn mogp_feature_gradient(
    spec: &MogpSpec,
    data: &Dataset,
    draws: &SpectralDraws,
    adj: &Adjoint,
    layout: &Layout,
    len: usize,
) -> Vec<f64> {
    let forces: Vec<(DMatrix<f64>, Vec<f64>)> = (0..spec.num_forces())
        .map(|q| {
            let l = spec.lengthscales()[q];
            (draws.force(q).frequencies(l), draws.force(q).squared_norms(l))
        })
        .collect();
    let s_count = draws.num_samples();
    let half = spec.num_forces() * s_count;
    let norm = 1.0 / (s_count as f64).sqrt();
    let p = spec.input_dim() as f64;
    let sens = spec.sensitivities();

    (0..data.len())
        .into_par_iter()
        .fold(
            || vec![0.0; len],
            |mut acc, i| {
                let e = &data.entries()[i];
                let d = e.output();
                let width = spec.inverse_widths()[d];
                let c = smoothing_constant(width, e.input.len());
                for (q, (lam, b)) in forces.iter().enumerate() {
                    let w = sens.get(d, q) * norm;
                    for s in 0..s_count {
                        let phase: f64 = e.input.iter().enumerate().map(|(k, x)| lam[(s, k)] * x).sum();
                        let feat = Complex64::from_polar(c * (-b[s] / (2.0 * width)).exp(), phase);
                        let g = adj.at(i, q * s_count + s, half);
                        acc[layout.sens(d, q)] += pair(g, feat * norm);
                        let v = feat * w;
                        acc[d] += pair(g, v * (-0.5 * p + b[s] / (2.0 * width)));
                        acc[layout.lengthscale + q] += pair(g, v * Complex64::new(b[s] / width, -phase));
                    }
                }
                acc
            },
        )
        .reduce(|| vec![0.0; len], add)
}

fn add(mut a: Vec<f64>, b: Vec<f64>) -> Vec<f64> {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
    a
}
