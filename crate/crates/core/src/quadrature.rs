//! Numerical integration used by the exact-covariance oracles.
//!
//! Two independent routes: globally adaptive Gauss-Kronrod (G7/K15) with bisection, and a
//! composite fixed-order Gauss-Legendre rule that is applied as a tensor product in 2-D.

use std::cell::Cell;
use std::ops::{Add, Mul, Sub};

use num_complex::Complex64;

use crate::error::{LfmError, Result};

/// Values that can be integrated: reals and complex numbers.
pub trait QuadValue: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<f64, Output = Self> {
    fn zero() -> Self;
    fn magnitude(&self) -> f64;
}

impl QuadValue for f64 {
    fn zero() -> Self {
        0.0
    }
    fn magnitude(&self) -> f64 {
        self.abs()
    }
}

impl QuadValue for Complex64 {
    fn zero() -> Self {
        Complex64::new(0.0, 0.0)
    }
    fn magnitude(&self) -> f64 {
        self.norm()
    }
}

#[allow(clippy::excessive_precision)]
const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_838_258_730,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];

#[allow(clippy::excessive_precision)]
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

#[allow(clippy::excessive_precision)]
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];

/// Subinterval budget for [`adaptive`].
pub const MAX_INTERVALS: usize = 4000;

/// One G7/K15 panel: Kronrod estimate and `|K15 - G7|`.
pub fn gauss_kronrod15<T: QuadValue, F: FnMut(f64) -> T>(f: &mut F, a: f64, b: f64) -> (T, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for (j, x) in XGK.iter().take(7).enumerate() {
        let dx = half * x;
        let sum = f(center - dx) + f(center + dx);
        kronrod = kronrod + sum * WGK[j];
        // odd Kronrod nodes coincide with the Gauss nodes
        if j % 2 == 1 {
            gauss = gauss + sum * WG[j / 2];
        }
    }
    let k = kronrod * half;
    let g = gauss * half;
    (k, (k - g).magnitude())
}

/// Result of an adaptive integration.
#[derive(Clone, Copy, Debug)]
pub struct Integral<T> {
    pub value: T,
    pub error: f64,
    pub intervals: usize,
}

/// Globally adaptive integration of `f` over `[a, b]` to absolute tolerance `tol`.
///
/// The interval with the largest error estimate is bisected until the summed estimate is below
/// `tol`; exceeding [`MAX_INTERVALS`] is reported as [`LfmError::Quadrature`].
pub fn adaptive<T: QuadValue, F: FnMut(f64) -> T>(mut f: F, a: f64, b: f64, tol: f64) -> Result<Integral<T>> {
    if a == b {
        return Ok(Integral { value: T::zero(), error: 0.0, intervals: 0 });
    }
    let (v, e) = gauss_kronrod15(&mut f, a, b);
    if !e.is_finite() {
        return Err(LfmError::Quadrature { error: e, tol });
    }
    let mut panels = vec![(a, b, v, e)];
    let mut error = e;
    while error > tol {
        if panels.len() >= MAX_INTERVALS {
            return Err(LfmError::Quadrature { error, tol });
        }
        let worst = panels
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let (lo, hi, _, e_old) = panels.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            // interval exhausted at machine precision
            return Err(LfmError::Quadrature { error, tol });
        }
        let (v1, e1) = gauss_kronrod15(&mut f, lo, mid);
        let (v2, e2) = gauss_kronrod15(&mut f, mid, hi);
        error += e1 + e2 - e_old;
        if !error.is_finite() {
            return Err(LfmError::Quadrature { error, tol });
        }
        panels.push((lo, mid, v1, e1));
        panels.push((mid, hi, v2, e2));
    }
    // re-sum to shed drift from the incremental error updates
    let value = panels.iter().fold(T::zero(), |acc, p| acc + p.2);
    let error = panels.iter().map(|p| p.3).sum();
    Ok(Integral { value, error, intervals: panels.len() })
}

/// Nested adaptive integral `int_a^b int_{c(x)}^{d(x)} f(x, y) dy dx` to absolute tolerance `tol`.
///
/// Half the budget goes to the outer rule; the inner integrals share the remaining half in
/// proportion to the outer interval length.
pub fn adaptive_2d<T, F, R>(f: F, a: f64, b: f64, inner_range: R, tol: f64) -> Result<Integral<T>>
where
    T: QuadValue,
    F: Fn(f64, f64) -> T,
    R: Fn(f64) -> (f64, f64),
{
    let inner_tol = 0.5 * tol / (b - a).abs().max(1.0);
    let failure: Cell<Option<LfmError>> = Cell::new(None);
    let inner_error = Cell::new(0.0f64);
    let outer = adaptive(
        |x| {
            let (c, d) = inner_range(x);
            match adaptive(|y| f(x, y), c, d, inner_tol) {
                Ok(r) => {
                    inner_error.set(inner_error.get().max(r.error));
                    r.value
                }
                Err(e) => {
                    failure.set(Some(e));
                    T::zero()
                }
            }
        },
        a,
        b,
        0.5 * tol,
    )?;
    if let Some(e) = failure.take() {
        return Err(e);
    }
    Ok(Integral { error: outer.error + inner_error.get() * (b - a).abs(), ..outer })
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`; `n >= 1`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            // p1 = P_n(x), p0 = P_{n-1}(x)
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Composite Gauss-Legendre rule with `panels` equal subintervals and `order` nodes each.
#[derive(Clone, Debug)]
pub struct CompositeRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    panels: usize,
}

impl CompositeRule {
    pub fn new(order: usize, panels: usize) -> Self {
        let (nodes, weights) = gauss_legendre(order);
        Self { nodes, weights, panels: panels.max(1) }
    }

    /// Points and weights for `[a, b]`.
    pub fn points(&self, a: f64, b: f64) -> Vec<(f64, f64)> {
        let h = (b - a) / self.panels as f64;
        (0..self.panels)
            .flat_map(|k| {
                let c = a + (k as f64 + 0.5) * h;
                self.nodes.iter().zip(&self.weights).map(move |(x, w)| (c + 0.5 * h * x, 0.5 * h * w))
            })
            .collect()
    }

    pub fn integrate<T: QuadValue, F: FnMut(f64) -> T>(&self, mut f: F, a: f64, b: f64) -> T {
        self.points(a, b).into_iter().fold(T::zero(), |acc, (x, w)| acc + f(x) * w)
    }

    /// Tensor-product rule over `[a, b] x [c, d]`.
    pub fn integrate_2d<T: QuadValue, F: FnMut(f64, f64) -> T>(&self, mut f: F, a: f64, b: f64, c: f64, d: f64) -> T {
        let xs = self.points(a, b);
        let ys = self.points(c, d);
        let mut acc = T::zero();
        for &(x, wx) in &xs {
            for &(y, wy) in &ys {
                acc = acc + f(x, y) * (wx * wy);
            }
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kronrod_panel_is_exact_for_polynomials() {
        let (v, _) = gauss_kronrod15(&mut |x: f64| x.powi(20) - 3.0 * x.powi(7), -1.0, 1.0);
        assert!((v - 2.0 / 21.0).abs() < 1e-14);
    }

    #[test]
    fn adaptive_handles_peaks_and_oscillation() {
        let r = adaptive(|x: f64| (-(x - 0.3).powi(2) / 1e-4).exp(), 0.0, 1.0, 1e-12).unwrap();
        let exact = 0.01 * std::f64::consts::PI.sqrt();
        assert!((r.value - exact).abs() < 1e-12, "{} vs {exact}", r.value);

        let r = adaptive(|x: f64| Complex64::new(0.0, 30.0 * x).exp(), 0.0, 2.0, 1e-12).unwrap();
        let exact = (Complex64::new(0.0, 60.0).exp() - 1.0) / Complex64::new(0.0, 30.0);
        assert!((r.value - exact).norm() < 1e-12);
    }

    #[test]
    fn adaptive_reports_non_convergence() {
        let r = adaptive(|x: f64| 1.0 / x, 0.0, 1.0, 1e-10);
        assert!(matches!(r, Err(LfmError::Quadrature { .. })));
    }

    #[test]
    fn empty_range_is_zero() {
        let r = adaptive(|x: f64| x, 2.0, 2.0, 1e-12).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn legendre_rules() {
        for n in [1, 2, 5, 12, 20] {
            let (x, w) = gauss_legendre(n);
            assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-13);
            // exact to degree 2n - 1
            let deg = 2 * n - 2;
            let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32)).sum();
            assert!((q - 2.0 / (deg as f64 + 1.0)).abs() < 1e-13, "n={n}");
        }
    }

    #[test]
    fn two_routes_agree_in_2d() {
        let f = |x: f64, y: f64| (-(x - y).powi(2)).exp() * (-x).exp() * (-2.0 * y).exp();
        let nested = adaptive_2d(f, 0.0, 1.5, |_| (0.0, 2.0), 1e-12).unwrap();
        let fixed = CompositeRule::new(20, 8).integrate_2d(f, 0.0, 1.5, 0.0, 2.0);
        assert!((nested.value - fixed).abs() < 1e-11, "{} vs {fixed}", nested.value);
    }
}
