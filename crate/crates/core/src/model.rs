//! Model structure, hyperparameters and observed data.
//!
//! A latent force model ([`LfmSpec`]) attaches one linear ODE to every output and drives all of
//! them with `Q` latent forces that carry EQ covariances. A convolved multi-output GP
//! ([`MogpSpec`]) replaces the ODE Green's functions with isotropic Gaussian smoothing kernels
//! over `R^p`. Both shapes pack into a flat [`HyperParamVector`] for optimisation: positive
//! quantities live in log space and sensitivities stay raw.

use std::cmp::Ordering;
use std::fmt;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{LfmError, Result};

/// Smallest noise variance produced by unpacking.
pub const NOISE_FLOOR: f64 = 1e-8;

/// Damping coefficients at or below this value pack to `ln(DAMPER_FLOOR)`.
pub const DAMPER_FLOOR: f64 = 1e-12;

/// Linear operator `a_0 d^P/dt^P + a_1 d^{P-1}/dt^{P-1} + ... + a_P` with constant coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct OdeOperator {
    coeffs: Vec<f64>,
}

impl OdeOperator {
    /// `coeffs` holds `(a_0, ..., a_P)`; at least two entries and a nonzero finite `a_0`.
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() < 2 {
            return Err(LfmError::InvalidSpec(format!(
                "operator needs order >= 1, got {} coefficient(s)",
                coeffs.len()
            )));
        }
        if let Some((i, &c)) = coeffs.iter().enumerate().find(|(_, c)| !c.is_finite()) {
            return Err(LfmError::NonFinite { index: i, value: c });
        }
        if coeffs[0] == 0.0 {
            return Err(LfmError::InvalidSpec("leading coefficient a_0 must be nonzero".into()));
        }
        Ok(Self { coeffs })
    }

    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn leading(&self) -> f64 {
        self.coeffs[0]
    }
}

impl TryFrom<Vec<f64>> for OdeOperator {
    type Error = LfmError;

    fn try_from(coeffs: Vec<f64>) -> Result<Self> {
        Self::new(coeffs)
    }
}

impl From<OdeOperator> for Vec<f64> {
    fn from(op: OdeOperator) -> Self {
        op.coeffs
    }
}

/// First-order system `f' + gamma f = u`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ode1Params {
    pub gamma: f64,
}

impl Ode1Params {
    pub fn new(gamma: f64) -> Result<Self> {
        let p = Self { gamma };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(LfmError::InvalidSpec(format!("decay rate must be > 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Mass-spring-damper system `m f'' + c f' + b f = u`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ode2Params {
    pub mass: f64,
    pub damper: f64,
    pub spring: f64,
}

impl Ode2Params {
    pub fn new(mass: f64, damper: f64, spring: f64) -> Result<Self> {
        let p = Self { mass, damper, spring };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        let ok = self.mass > 0.0
            && self.spring > 0.0
            && self.damper >= 0.0
            && self.mass.is_finite()
            && self.spring.is_finite()
            && self.damper.is_finite();
        if !ok {
            return Err(LfmError::InvalidSpec(format!(
                "need m > 0, c >= 0, b > 0; got m={}, c={}, b={}",
                self.mass, self.damper, self.spring
            )));
        }
        Ok(())
    }

    /// `c^2 - 4 m b`: positive when overdamped, negative when underdamped.
    pub fn discriminant(&self) -> f64 {
        self.damper * self.damper - 4.0 * self.mass * self.spring
    }
}

/// The differential operator attached to one output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutputOperator {
    Ode1(Ode1Params),
    Ode2(Ode2Params),
    General { coeffs: OdeOperator },
}

impl OutputOperator {
    pub fn to_operator(&self) -> OdeOperator {
        match *self {
            OutputOperator::Ode1(p) => OdeOperator { coeffs: vec![1.0, p.gamma] },
            OutputOperator::Ode2(p) => OdeOperator { coeffs: vec![p.mass, p.damper, p.spring] },
            OutputOperator::General { ref coeffs } => coeffs.clone(),
        }
    }

    /// Number of packed slots used by this operator's parameters.
    pub fn num_params(&self) -> usize {
        match self {
            OutputOperator::Ode1(_) => 1,
            OutputOperator::Ode2(_) => 3,
            OutputOperator::General { coeffs } => coeffs.coeffs.len(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            OutputOperator::Ode1(p) => p.validate(),
            OutputOperator::Ode2(p) => p.validate(),
            OutputOperator::General { coeffs } => OdeOperator::new(coeffs.coeffs.clone()).map(|_| ()),
        }
    }
}

/// Dense row-major `D x Q` matrix of sensitivities `S_{d,q}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl SensitivityMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LfmError::LengthMismatch { expected: rows * cols, got: data.len() });
        }
        if let Some((i, &v)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(LfmError::NonFinite { index: i, value: v });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(LfmError::InvalidSpec("ragged sensitivity rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, d: usize, q: usize) -> f64 {
        self.data[d * self.cols + q]
    }

    pub fn set(&mut self, d: usize, q: usize, value: f64) {
        self.data[d * self.cols + q] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

fn check_positive(name: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
        Some(i) => Err(LfmError::InvalidSpec(format!("{name}[{i}] must be > 0, got {}", values[i]))),
        None => Ok(()),
    }
}

fn check_shapes(d: usize, lengthscales: &[f64], sens: &SensitivityMatrix, noise: &[f64]) -> Result<()> {
    if lengthscales.is_empty() {
        return Err(LfmError::InvalidSpec("at least one latent force is required".into()));
    }
    if sens.rows() != d || sens.cols() != lengthscales.len() {
        return Err(LfmError::InvalidSpec(format!(
            "sensitivities are {}x{}, expected {}x{}",
            sens.rows(),
            sens.cols(),
            d,
            lengthscales.len()
        )));
    }
    if noise.len() != d {
        return Err(LfmError::LengthMismatch { expected: d, got: noise.len() });
    }
    check_positive("lengthscale", lengthscales)?;
    check_positive("noise_var", noise)
}

/// Latent force model: one ODE per output, `Q` EQ-distributed forces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LfmSpec {
    outputs: Vec<OutputOperator>,
    lengthscales: Vec<f64>,
    sensitivities: SensitivityMatrix,
    noise_vars: Vec<f64>,
}

impl LfmSpec {
    pub fn new(
        outputs: Vec<OutputOperator>,
        lengthscales: Vec<f64>,
        sensitivities: SensitivityMatrix,
        noise_vars: Vec<f64>,
    ) -> Result<Self> {
        if outputs.is_empty() {
            return Err(LfmError::InvalidSpec("at least one output is required".into()));
        }
        for op in &outputs {
            op.validate()?;
        }
        check_shapes(outputs.len(), &lengthscales, &sensitivities, &noise_vars)?;
        Ok(Self { outputs, lengthscales, sensitivities, noise_vars })
    }

    pub fn outputs(&self) -> &[OutputOperator] {
        &self.outputs
    }

    pub fn num_outputs(&self) -> usize {
        self.outputs.len()
    }

    pub fn num_forces(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    pub fn sensitivities(&self) -> &SensitivityMatrix {
        &self.sensitivities
    }

    pub fn noise_vars(&self) -> &[f64] {
        &self.noise_vars
    }

    /// Copy of this spec with different sensitivities.
    pub fn with_sensitivities(&self, sensitivities: SensitivityMatrix) -> Result<Self> {
        Self::new(self.outputs.clone(), self.lengthscales.clone(), sensitivities, self.noise_vars.clone())
    }

    /// Copy of this spec with different noise variances.
    pub fn with_noise_vars(&self, noise_vars: Vec<f64>) -> Result<Self> {
        Self::new(self.outputs.clone(), self.lengthscales.clone(), self.sensitivities.clone(), noise_vars)
    }
}

/// Convolved multi-output GP with Gaussian smoothing kernels of inverse width `P_d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MogpSpec {
    input_dim: usize,
    inverse_widths: Vec<f64>,
    lengthscales: Vec<f64>,
    sensitivities: SensitivityMatrix,
    noise_vars: Vec<f64>,
}

impl MogpSpec {
    pub fn new(
        input_dim: usize,
        inverse_widths: Vec<f64>,
        lengthscales: Vec<f64>,
        sensitivities: SensitivityMatrix,
        noise_vars: Vec<f64>,
    ) -> Result<Self> {
        if input_dim == 0 {
            return Err(LfmError::InvalidSpec("input dimension must be >= 1".into()));
        }
        if inverse_widths.is_empty() {
            return Err(LfmError::InvalidSpec("at least one output is required".into()));
        }
        check_positive("inverse_width", &inverse_widths)?;
        check_shapes(inverse_widths.len(), &lengthscales, &sensitivities, &noise_vars)?;
        Ok(Self { input_dim, inverse_widths, lengthscales, sensitivities, noise_vars })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn inverse_widths(&self) -> &[f64] {
        &self.inverse_widths
    }

    pub fn num_outputs(&self) -> usize {
        self.inverse_widths.len()
    }

    pub fn num_forces(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    pub fn sensitivities(&self) -> &SensitivityMatrix {
        &self.sensitivities
    }

    pub fn noise_vars(&self) -> &[f64] {
        &self.noise_vars
    }
}

/// Either model family, as stored in fit files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelSpec {
    Lfm(LfmSpec),
    Mogp(MogpSpec),
}

impl ModelSpec {
    pub fn num_outputs(&self) -> usize {
        match self {
            ModelSpec::Lfm(s) => s.num_outputs(),
            ModelSpec::Mogp(s) => s.num_outputs(),
        }
    }

    pub fn num_forces(&self) -> usize {
        match self {
            ModelSpec::Lfm(s) => s.num_forces(),
            ModelSpec::Mogp(s) => s.num_forces(),
        }
    }

    pub fn noise_vars(&self) -> &[f64] {
        match self {
            ModelSpec::Lfm(s) => s.noise_vars(),
            ModelSpec::Mogp(s) => s.noise_vars(),
        }
    }

    pub fn input_kind(&self) -> InputKind {
        match self {
            ModelSpec::Lfm(_) => InputKind::Time,
            ModelSpec::Mogp(s) => InputKind::Space(s.input_dim()),
        }
    }
}

/// What a model expects as the input of each observation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputKind {
    /// Scalar time `t >= 0`.
    Time,
    /// Point in `R^p`.
    Space(usize),
}

impl InputKind {
    pub fn dim(&self) -> usize {
        match *self {
            InputKind::Time => 1,
            InputKind::Space(p) => p,
        }
    }
}

/// Shape information needed to validate data against a model.
pub trait DataShape {
    fn num_outputs(&self) -> usize;
    fn input_kind(&self) -> InputKind;
}

impl DataShape for LfmSpec {
    fn num_outputs(&self) -> usize {
        self.outputs.len()
    }
    fn input_kind(&self) -> InputKind {
        InputKind::Time
    }
}

impl DataShape for MogpSpec {
    fn num_outputs(&self) -> usize {
        self.inverse_widths.len()
    }
    fn input_kind(&self) -> InputKind {
        InputKind::Space(self.input_dim)
    }
}

impl DataShape for ModelSpec {
    fn num_outputs(&self) -> usize {
        ModelSpec::num_outputs(self)
    }
    fn input_kind(&self) -> InputKind {
        ModelSpec::input_kind(self)
    }
}

/// One observation `y` of output `output_id` (1-based) at `input`.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub output_id: usize,
    pub input: Vec<f64>,
    pub y: f64,
}

impl Observation {
    pub fn new(output_id: usize, input: Vec<f64>, y: f64) -> Self {
        Self { output_id, input, y }
    }

    /// Scalar-time observation.
    pub fn at_time(output_id: usize, t: f64, y: f64) -> Self {
        Self { output_id, input: vec![t], y }
    }

    /// Zero-based output index.
    pub fn output(&self) -> usize {
        self.output_id - 1
    }

    /// First input coordinate (the time for LFM data).
    pub fn t(&self) -> f64 {
        self.input[0]
    }
}

/// Stacked multi-output observations. Rows of every feature matrix follow `entries()` order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    entries: Vec<Observation>,
}

impl Dataset {
    pub fn new(entries: Vec<Observation>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[Observation] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn targets(&self) -> DVector<f64> {
        DVector::from_iterator(self.entries.len(), self.entries.iter().map(|e| e.y))
    }

    /// Same inputs with targets replaced by `y`.
    pub fn with_targets(&self, y: &[f64]) -> Result<Self> {
        if y.len() != self.len() {
            return Err(LfmError::LengthMismatch { expected: self.len(), got: y.len() });
        }
        let entries = self
            .entries
            .iter()
            .zip(y)
            .map(|(e, &y)| Observation { y, ..e.clone() })
            .collect();
        Ok(Self { entries })
    }

    /// Copy ordered by output, then lexicographically by input.
    pub fn stacked(&self) -> Self {
        let mut entries = self.entries.clone();
        entries.sort_by(|a, b| {
            a.output_id.cmp(&b.output_id).then_with(|| {
                a.input
                    .iter()
                    .zip(&b.input)
                    .map(|(x, y)| x.partial_cmp(y).unwrap_or(Ordering::Equal))
                    .find(|o| *o != Ordering::Equal)
                    .unwrap_or(Ordering::Equal)
            })
        });
        Self { entries }
    }

    /// Per-observation noise variances `sigma_{d(i)}^2`.
    pub fn noise_diagonal(&self, noise_vars: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.entries.iter().map(|e| noise_vars[e.output()]))
    }
}

/// Check every observation against the model shape.
pub fn validate_dataset<M: DataShape + ?Sized>(data: &Dataset, model: &M) -> Result<()> {
    let d = model.num_outputs();
    let kind = model.input_kind();
    for (index, e) in data.entries().iter().enumerate() {
        let bad = |reason: String| Err(LfmError::InvalidData { index, reason });
        if e.output_id == 0 || e.output_id > d {
            return bad(format!("output_id {} outside 1..={d}", e.output_id));
        }
        if e.input.len() != kind.dim() {
            return bad(format!("input has {} coordinate(s), expected {}", e.input.len(), kind.dim()));
        }
        if e.input.iter().chain(std::iter::once(&e.y)).any(|v| !v.is_finite()) {
            return bad("non-finite value".into());
        }
        if kind == InputKind::Time && e.input[0] < 0.0 {
            return bad(format!("time {} is negative", e.input[0]));
        }
    }
    Ok(())
}

/// Meaning of one packed hyperparameter slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "slot", rename_all = "snake_case")]
pub enum ParamSlot {
    /// `ln gamma_d`.
    Decay { output: usize },
    /// `ln m_d`.
    Mass { output: usize },
    /// `ln c_d`.
    Damper { output: usize },
    /// `ln b_d`.
    Spring { output: usize },
    /// Raw `a_k` of a general operator.
    Coefficient { output: usize, k: usize },
    /// `ln P_d`.
    InverseWidth { output: usize },
    /// `ln l_q`.
    Lengthscale { force: usize },
    /// `ln sigma_d^2`.
    NoiseVar { output: usize },
    /// Raw `S_{d,q}`.
    Sensitivity { output: usize, force: usize },
}

impl fmt::Display for ParamSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ParamSlot::Decay { output } => write!(f, "log_gamma[{output}]"),
            ParamSlot::Mass { output } => write!(f, "log_mass[{output}]"),
            ParamSlot::Damper { output } => write!(f, "log_damper[{output}]"),
            ParamSlot::Spring { output } => write!(f, "log_spring[{output}]"),
            ParamSlot::Coefficient { output, k } => write!(f, "a{k}[{output}]"),
            ParamSlot::InverseWidth { output } => write!(f, "log_inverse_width[{output}]"),
            ParamSlot::Lengthscale { force } => write!(f, "log_lengthscale[{force}]"),
            ParamSlot::NoiseVar { output } => write!(f, "log_noise_var[{output}]"),
            ParamSlot::Sensitivity { output, force } => write!(f, "sensitivity[{output},{force}]"),
        }
    }
}

/// Flat optimisation vector together with its slot map.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperParamVector {
    values: Vec<f64>,
    slots: Vec<ParamSlot>,
}

impl HyperParamVector {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Packing between a spec and its flat log-space vector.
///
/// Layout: operator parameters per output, then `ln l_q`, then `ln sigma_d^2`, then
/// `S_{d,q}` row-major.
pub trait HyperParameters: Sized {
    fn pack(&self) -> HyperParamVector;

    /// Rebuild a spec shaped like `self` from packed `values`.
    fn unpack(&self, values: &[f64]) -> Result<Self>;
}

struct Packer {
    values: Vec<f64>,
    slots: Vec<ParamSlot>,
}

impl Packer {
    fn push(&mut self, slot: ParamSlot, value: f64) {
        self.slots.push(slot);
        self.values.push(value);
    }

    fn push_shared(&mut self, lengthscales: &[f64], noise: &[f64], sens: &SensitivityMatrix) {
        for (q, l) in lengthscales.iter().enumerate() {
            self.push(ParamSlot::Lengthscale { force: q }, l.ln());
        }
        for (d, s2) in noise.iter().enumerate() {
            self.push(ParamSlot::NoiseVar { output: d }, s2.ln());
        }
        for d in 0..sens.rows() {
            for q in 0..sens.cols() {
                self.push(ParamSlot::Sensitivity { output: d, force: q }, sens.get(d, q));
            }
        }
    }

    fn finish(self) -> HyperParamVector {
        HyperParamVector { values: self.values, slots: self.slots }
    }
}

struct Unpacker<'a> {
    values: &'a [f64],
    pos: usize,
}

impl<'a> Unpacker<'a> {
    fn new(values: &'a [f64], expected: usize) -> Result<Self> {
        if values.len() != expected {
            return Err(LfmError::LengthMismatch { expected, got: values.len() });
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(LfmError::NonFinite { index, value });
        }
        Ok(Self { values, pos: 0 })
    }

    fn raw(&mut self) -> f64 {
        let v = self.values[self.pos];
        self.pos += 1;
        v
    }

    fn exp(&mut self) -> Result<f64> {
        let index = self.pos;
        let v = self.raw().exp();
        if !v.is_finite() || v == 0.0 {
            return Err(LfmError::NonFinite { index, value: v });
        }
        Ok(v)
    }

    fn shared(
        &mut self,
        d: usize,
        q: usize,
    ) -> Result<(Vec<f64>, Vec<f64>, SensitivityMatrix)> {
        let lengthscales = (0..q).map(|_| self.exp()).collect::<Result<Vec<_>>>()?;
        let noise = (0..d)
            .map(|_| {
                let index = self.pos;
                let v = self.raw().exp();
                if v.is_finite() {
                    Ok(v.max(NOISE_FLOOR))
                } else {
                    Err(LfmError::NonFinite { index, value: v })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let sens = (0..d * q).map(|_| self.raw()).collect();
        Ok((lengthscales, noise, SensitivityMatrix::new(d, q, sens)?))
    }
}

impl HyperParameters for LfmSpec {
    fn pack(&self) -> HyperParamVector {
        let mut p = Packer { values: Vec::new(), slots: Vec::new() };
        for (d, op) in self.outputs.iter().enumerate() {
            match op {
                OutputOperator::Ode1(o) => p.push(ParamSlot::Decay { output: d }, o.gamma.ln()),
                OutputOperator::Ode2(o) => {
                    p.push(ParamSlot::Mass { output: d }, o.mass.ln());
                    p.push(ParamSlot::Damper { output: d }, o.damper.max(DAMPER_FLOOR).ln());
                    p.push(ParamSlot::Spring { output: d }, o.spring.ln());
                }
                OutputOperator::General { coeffs } => {
                    for (k, &a) in coeffs.coeffs().iter().enumerate() {
                        p.push(ParamSlot::Coefficient { output: d, k }, a);
                    }
                }
            }
        }
        p.push_shared(&self.lengthscales, &self.noise_vars, &self.sensitivities);
        p.finish()
    }

    fn unpack(&self, values: &[f64]) -> Result<Self> {
        let d = self.num_outputs();
        let q = self.num_forces();
        let expected = self.outputs.iter().map(OutputOperator::num_params).sum::<usize>() + q + d + d * q;
        let mut u = Unpacker::new(values, expected)?;
        let outputs = self
            .outputs
            .iter()
            .map(|op| {
                Ok(match op {
                    OutputOperator::Ode1(_) => OutputOperator::Ode1(Ode1Params::new(u.exp()?)?),
                    OutputOperator::Ode2(_) => {
                        let (m, c, b) = (u.exp()?, u.raw().exp(), u.exp()?);
                        OutputOperator::Ode2(Ode2Params::new(m, c, b)?)
                    }
                    OutputOperator::General { coeffs } => OutputOperator::General {
                        coeffs: OdeOperator::new((0..coeffs.coeffs().len()).map(|_| u.raw()).collect())?,
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (lengthscales, noise, sens) = u.shared(d, q)?;
        Self::new(outputs, lengthscales, sens, noise)
    }
}

impl HyperParameters for MogpSpec {
    fn pack(&self) -> HyperParamVector {
        let mut p = Packer { values: Vec::new(), slots: Vec::new() };
        for (d, w) in self.inverse_widths.iter().enumerate() {
            p.push(ParamSlot::InverseWidth { output: d }, w.ln());
        }
        p.push_shared(&self.lengthscales, &self.noise_vars, &self.sensitivities);
        p.finish()
    }

    fn unpack(&self, values: &[f64]) -> Result<Self> {
        let d = self.num_outputs();
        let q = self.num_forces();
        let mut u = Unpacker::new(values, d + q + d + d * q)?;
        let widths = (0..d).map(|_| u.exp()).collect::<Result<Vec<_>>>()?;
        let (lengthscales, noise, sens) = u.shared(d, q)?;
        Self::new(self.input_dim, widths, lengthscales, sens, noise)
    }
}

impl HyperParameters for ModelSpec {
    fn pack(&self) -> HyperParamVector {
        match self {
            ModelSpec::Lfm(s) => s.pack(),
            ModelSpec::Mogp(s) => s.pack(),
        }
    }

    fn unpack(&self, values: &[f64]) -> Result<Self> {
        Ok(match self {
            ModelSpec::Lfm(s) => ModelSpec::Lfm(s.unpack(values)?),
            ModelSpec::Mogp(s) => ModelSpec::Mogp(s.unpack(values)?),
        })
    }
}
