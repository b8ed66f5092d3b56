//! Random Fourier response features.
//!
//! For an output driven through Green's function `G`, the response to the excitation
//! `e^{j lambda t}` switched on at time zero is
//!
//! ```text
//! v(t, lambda) = int_0^t G(t - tau) e^{j lambda tau} dtau = (1/a_0) sum_p A_p e^{s_p t}
//! ```
//!
//! where `s_1..s_P` are the roots of the operator's characteristic polynomial, `s_{P+1} = j lambda`
//! and `A_p = 1 / prod_{i != p} (s_p - s_i)`. Inner products of these features over frequencies
//! drawn from the EQ spectral density `N(0, 2 / l^2)` approximate the LFM covariance.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{LfmError, Result};
use crate::model::{Ode1Params, Ode2Params, OdeOperator, OutputOperator};

/// Relative separation below which two roots count as coincident.
pub const ROOT_SEPARATION: f64 = 1e-6;

/// Relative shift applied to the spring constant of a critically damped system.
pub const CRITICAL_DAMPING_SHIFT: f64 = 1e-6;

const J: Complex64 = Complex64::new(0.0, 1.0);

fn separation_threshold(roots: &[Complex64]) -> f64 {
    let scale = roots.iter().map(|r| r.norm()).fold(0.0, f64::max);
    ROOT_SEPARATION * (1.0 + scale)
}

fn check_separated(roots: &[Complex64]) -> Result<()> {
    let thr = separation_threshold(roots);
    for (i, a) in roots.iter().enumerate() {
        for b in &roots[i + 1..] {
            if (a - b).norm() < thr {
                return Err(LfmError::RootSeparation(a.to_string(), b.to_string()));
            }
        }
    }
    Ok(())
}

/// Seeded standard-normal base draws `z_{s,q}`, shared by every output.
///
/// Frequencies for force `q` are `lambda_{s,q} = sqrt(2) z_{s,q} / l_q`, so the draws stay fixed
/// while lengthscales move during optimisation.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyDraws {
    base: DMatrix<f64>,
    seed: u64,
}

impl FrequencyDraws {
    pub fn sample(num_samples: usize, num_forces: usize, seed: u64) -> Result<Self> {
        if num_samples == 0 || num_forces == 0 {
            return Err(LfmError::InvalidSpec(format!(
                "need at least one sample and one force, got S={num_samples}, Q={num_forces}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // column-major fill: force 0 first, so draws for force q do not depend on Q
        let mut base = DMatrix::zeros(num_samples, num_forces);
        for q in 0..num_forces {
            for s in 0..num_samples {
                base[(s, q)] = StandardNormal.sample(&mut rng);
            }
        }
        Ok(Self { base, seed })
    }

    /// Wrap externally supplied base draws (rows are samples, columns are forces).
    pub fn from_base(base: DMatrix<f64>, seed: u64) -> Result<Self> {
        if base.nrows() == 0 || base.ncols() == 0 {
            return Err(LfmError::InvalidSpec("empty frequency base".into()));
        }
        Ok(Self { base, seed })
    }

    pub fn base(&self) -> &DMatrix<f64> {
        &self.base
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_samples(&self) -> usize {
        self.base.nrows()
    }

    pub fn num_forces(&self) -> usize {
        self.base.ncols()
    }

    /// `lambda_s = sqrt(2) z_{s,q} / l`.
    pub fn force_frequencies(&self, q: usize, lengthscale: f64) -> Result<Vec<f64>> {
        if !(lengthscale > 0.0 && lengthscale.is_finite()) {
            return Err(LfmError::InvalidSpec(format!("lengthscale must be > 0, got {lengthscale}")));
        }
        if q >= self.num_forces() {
            return Err(LfmError::InvalidSpec(format!("force index {q} out of range")));
        }
        let scale = std::f64::consts::SQRT_2 / lengthscale;
        Ok(self.base.column(q).iter().map(|z| scale * z).collect())
    }
}

pub fn sample_frequencies(num_samples: usize, num_forces: usize, seed: u64) -> Result<FrequencyDraws> {
    FrequencyDraws::sample(num_samples, num_forces, seed)
}

pub fn force_frequencies(draws: &FrequencyDraws, q: usize, lengthscale: f64) -> Result<Vec<f64>> {
    draws.force_frequencies(q, lengthscale)
}

/// Roots of `a_0 s^P + ... + a_P` together with the leading coefficient.
#[derive(Clone, Debug, PartialEq)]
pub struct RootSet {
    pub roots: Vec<Complex64>,
    pub leading: f64,
}

fn horner(coeffs: &[f64], s: Complex64) -> (Complex64, Complex64) {
    let mut p = Complex64::new(0.0, 0.0);
    let mut dp = Complex64::new(0.0, 0.0);
    for &c in coeffs {
        dp = dp * s + p;
        p = p * s + c;
    }
    (p, dp)
}

fn quadratic_roots(a: f64, b: f64, c: f64) -> [Complex64; 2] {
    let disc = b * b - 4.0 * a * c;
    if disc >= 0.0 {
        // cancellation-free pair
        let q = -0.5 * (b + b.signum() * disc.sqrt());
        if q == 0.0 {
            return [Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0)];
        }
        let (r1, r2) = (q / a, c / q);
        let (hi, lo) = if r1 >= r2 { (r1, r2) } else { (r2, r1) };
        [Complex64::new(hi, 0.0), Complex64::new(lo, 0.0)]
    } else {
        let re = -b / (2.0 * a);
        let im = (-disc).sqrt() / (2.0 * a.abs());
        [Complex64::new(re, im), Complex64::new(re, -im)]
    }
}

/// Roots of the characteristic polynomial, verified and checked for separation.
pub fn ode_roots(op: &OdeOperator) -> Result<RootSet> {
    let c = op.coeffs();
    let p = op.order();
    let mut roots = match p {
        1 => vec![Complex64::new(-c[1] / c[0], 0.0)],
        2 => quadratic_roots(c[0], c[1], c[2]).to_vec(),
        _ => {
            // companion matrix of the monic polynomial
            let companion = DMatrix::from_fn(p, p, |i, j| {
                if i == 0 {
                    -c[j + 1] / c[0]
                } else if i == j + 1 {
                    1.0
                } else {
                    0.0
                }
            });
            companion.complex_eigenvalues().iter().copied().collect()
        }
    };
    let monic: Vec<f64> = c.iter().map(|x| x / c[0]).collect();
    for r in &mut roots {
        for _ in 0..3 {
            let (v, dv) = horner(&monic, *r);
            if dv.norm() == 0.0 || v.norm() == 0.0 {
                break;
            }
            *r -= v / dv;
        }
        let (v, _) = horner(&monic, *r);
        let scale: f64 = monic.iter().enumerate().map(|(k, a)| a.abs() * r.norm().powi((p - k) as i32)).sum();
        if !r.is_finite() || v.norm() > 1e-9 * scale.max(1e-300) {
            return Err(LfmError::RootFinding(format!("residual {:e} at root {r}", v.norm())));
        }
    }
    check_separated(&roots)?;
    Ok(RootSet { roots, leading: c[0] })
}

/// Partial-fraction coefficients `A_p = 1 / prod_{i != p} (s_p - s_i)`.
pub fn residue_coeffs(roots: &[Complex64]) -> Result<Vec<Complex64>> {
    check_separated(roots)?;
    Ok(residues_unchecked(roots))
}

fn residues_unchecked(roots: &[Complex64]) -> Vec<Complex64> {
    roots
        .iter()
        .enumerate()
        .map(|(p, sp)| {
            let prod = roots
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != p)
                .fold(Complex64::new(1.0, 0.0), |acc, (_, si)| acc * (sp - si));
            prod.inv()
        })
        .collect()
}

fn pole_response(roots: &[Complex64], leading: f64, t: f64) -> Complex64 {
    let a = residues_unchecked(roots);
    a.iter().zip(roots).map(|(a, s)| a * (s * t).exp()).sum::<Complex64>() / leading
}

/// Response of a general operator to `e^{j lambda t}`; errors when `j lambda` hits a root.
pub fn rfrf_general(t: f64, op: &OdeOperator, lambda: f64) -> Result<Complex64> {
    let set = ode_roots(op)?;
    let mut roots = set.roots;
    roots.push(J * lambda);
    check_separated(&roots)?;
    Ok(pole_response(&roots, set.leading, t))
}

/// `(e^{j lambda t} - e^{-gamma t}) / (gamma + j lambda)`.
pub fn rfrf_ode1(t: f64, params: &Ode1Params, lambda: f64) -> Complex64 {
    let g = params.gamma;
    ((J * lambda * t).exp() - (-g * t).exp()) / Complex64::new(g, lambda)
}

/// Second-order response; a critically damped system is nudged to the underdamped side.
pub fn rfrf_ode2(t: f64, params: &Ode2Params, lambda: f64) -> Complex64 {
    OutputResponse::new(&OutputOperator::Ode2(*params))
        .expect("valid second-order parameters always have separable roots")
        .value(t, lambda)
}

/// Excitation seen by the latent force itself.
pub fn latent_feature(t: f64, lambda: f64) -> Complex64 {
    (J * lambda * t).exp()
}

/// Second-order roots, shifting `b` off critical damping when the pair is not separable.
fn ode2_roots(p: &Ode2Params) -> ([Complex64; 2], f64, bool) {
    let roots = quadratic_roots(p.mass, p.damper, p.spring);
    if check_separated(&roots).is_ok() {
        return (roots, p.spring, false);
    }
    let spring = p.damper * p.damper / (4.0 * p.mass) * (1.0 + CRITICAL_DAMPING_SHIFT);
    log::warn!(
        "critically damped system (m={}, c={}, b={}); evaluating with b={spring}",
        p.mass,
        p.damper,
        p.spring
    );
    (quadratic_roots(p.mass, p.damper, spring), spring, true)
}

#[derive(Clone, Debug)]
enum Form {
    Decay { gamma: f64 },
    Poles { roots: Vec<Complex64>, green: Vec<Complex64>, leading: f64, ode2: Option<(f64, f64, f64)> },
}

/// Feature value and its derivatives at one `(t, lambda)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseGrad {
    pub value: Complex64,
    pub d_lambda: Complex64,
    /// Derivatives with respect to the natural operator parameters
    /// (`gamma` or `(m, c, b)`); empty for general operators.
    pub d_params: Vec<Complex64>,
}

/// An output operator with its roots resolved once, ready for repeated evaluation.
#[derive(Clone, Debug)]
pub struct OutputResponse {
    form: Form,
    perturbed: bool,
}

impl OutputResponse {
    pub fn new(op: &OutputOperator) -> Result<Self> {
        let (form, perturbed) = match op {
            OutputOperator::Ode1(p) => (Form::Decay { gamma: p.gamma }, false),
            OutputOperator::Ode2(p) => {
                let (roots, spring, perturbed) = ode2_roots(p);
                let roots = roots.to_vec();
                let green = residues_unchecked(&roots);
                let ode2 = Some((p.mass, p.damper, spring));
                (Form::Poles { roots, green, leading: p.mass, ode2 }, perturbed)
            }
            OutputOperator::General { coeffs } => {
                let set = ode_roots(coeffs)?;
                let green = residues_unchecked(&set.roots);
                (Form::Poles { roots: set.roots, green, leading: set.leading, ode2: None }, false)
            }
        };
        Ok(Self { form, perturbed })
    }

    /// True when critical damping forced a shift of the spring constant.
    pub fn perturbed(&self) -> bool {
        self.perturbed
    }

    /// Operator roots (the decay rate appears as `-gamma`).
    pub fn roots(&self) -> Vec<Complex64> {
        match &self.form {
            Form::Decay { gamma } => vec![Complex64::new(-gamma, 0.0)],
            Form::Poles { roots, .. } => roots.clone(),
        }
    }

    /// Green's function `G(t)` for `t >= 0`.
    pub fn green(&self, t: f64) -> f64 {
        match &self.form {
            Form::Decay { gamma } => (-gamma * t).exp(),
            Form::Poles { roots, green, leading, .. } => {
                green.iter().zip(roots).map(|(b, s)| (b * (s * t).exp()).re).sum::<f64>() / leading
            }
        }
    }

    /// Frequency nudged away from any operator root it collides with.
    fn safe_lambda(&self, roots: &[Complex64], lambda: f64) -> f64 {
        let probe = J * lambda;
        let scale = roots.iter().map(|r| r.norm()).fold(lambda.abs(), f64::max);
        let thr = ROOT_SEPARATION * (1.0 + scale);
        if roots.iter().any(|r| (r - probe).norm() < thr) {
            let shifted = lambda + ROOT_SEPARATION * (1.0 + lambda.abs());
            log::warn!("frequency {lambda} collides with an operator root; using {shifted}");
            shifted
        } else {
            lambda
        }
    }

    pub fn value(&self, t: f64, lambda: f64) -> Complex64 {
        match &self.form {
            Form::Decay { gamma } => {
                let lambda = self.safe_lambda(&[Complex64::new(-gamma, 0.0)], lambda);
                rfrf_ode1(t, &Ode1Params { gamma: *gamma }, lambda)
            }
            // at rest at t = 0; the pole sum only cancels to rounding there
            Form::Poles { .. } if t == 0.0 => Complex64::new(0.0, 0.0),
            Form::Poles { roots, green, leading, .. } => {
                let lambda = self.safe_lambda(roots, lambda);
                let probe = J * lambda;
                // residues with j lambda appended, built from the precomputed root-only ones
                let mut last = Complex64::new(1.0, 0.0);
                let mut sum = Complex64::new(0.0, 0.0);
                for (g, s) in green.iter().zip(roots) {
                    sum += g * (s * t).exp() / (s - probe);
                    last *= probe - s;
                }
                (sum + (probe * t).exp() / last) / leading
            }
        }
    }

    /// Value plus analytic derivatives in `lambda` and the natural parameters.
    pub fn value_and_grad(&self, t: f64, lambda: f64) -> ResponseGrad {
        match &self.form {
            Form::Decay { gamma } => {
                let g = *gamma;
                let lambda = self.safe_lambda(&[Complex64::new(-g, 0.0)], lambda);
                let denom = Complex64::new(g, lambda);
                let osc = (J * lambda * t).exp();
                let decay = (-g * t).exp();
                let value = (osc - decay) / denom;
                let d_gamma = (t * decay - value) / denom;
                let d_lambda = J * (t * osc - value) / denom;
                ResponseGrad { value, d_lambda, d_params: vec![d_gamma] }
            }
            Form::Poles { ode2, .. } if t == 0.0 => {
                let zero = Complex64::new(0.0, 0.0);
                let d_params = if ode2.is_some() { vec![zero; 3] } else { Vec::new() };
                ResponseGrad { value: zero, d_lambda: zero, d_params }
            }
            Form::Poles { roots, leading, ode2, .. } => {
                let lambda = self.safe_lambda(roots, lambda);
                let mut all = roots.clone();
                all.push(J * lambda);
                let a = residues_unchecked(&all);
                let terms: Vec<Complex64> = a.iter().zip(&all).map(|(a, s)| a * (s * t).exp()).collect();
                let value = terms.iter().sum::<Complex64>() / leading;
                // d v / d s_k for every node, including s_{P+1} = j lambda
                let d_root = |k: usize| -> Complex64 {
                    let sk = all[k];
                    let mut own = Complex64::new(t, 0.0);
                    let mut others = Complex64::new(0.0, 0.0);
                    for (i, si) in all.iter().enumerate() {
                        if i != k {
                            own -= (sk - si).inv();
                            others += terms[i] / (si - sk);
                        }
                    }
                    (terms[k] * own + others) / leading
                };
                let d_lambda = J * d_root(all.len() - 1);
                let d_params = match ode2 {
                    Some((m, c, _b)) => {
                        let mut dm = -value / *m;
                        let mut dc = Complex64::new(0.0, 0.0);
                        let mut db = Complex64::new(0.0, 0.0);
                        for (k, r) in roots.iter().enumerate() {
                            let dq = 2.0 * m * r + c;
                            let dv = d_root(k);
                            dm -= dv * r * r / dq;
                            dc -= dv * r / dq;
                            db -= dv / dq;
                        }
                        vec![dm, dc, db]
                    }
                    None => Vec::new(),
                };
                ResponseGrad { value, d_lambda, d_params }
            }
        }
    }
}
