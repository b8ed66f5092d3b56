//! Flat `key = value` run configuration, overridden by command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Ode1,
    Ode2,
    #[value(name = "odeP")]
    #[serde(rename = "odeP")]
    OdeP,
    Mogp,
}

impl FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ode1" => Ok(Self::Ode1),
            "ode2" => Ok(Self::Ode2),
            "odeP" | "odep" => Ok(Self::OdeP),
            "mogp" => Ok(Self::Mogp),
            _ => Err(format!("unknown model {s:?} (expected ode1, ode2, odeP or mogp)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum KernelMode {
    Rff,
    Oracle,
}

impl FromStr for KernelMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rff" => Ok(Self::Rff),
            "oracle" => Ok(Self::Oracle),
            _ => Err(format!("unknown mode {s:?} (expected rff or oracle)")),
        }
    }
}

/// Settings shared by every command after merging the config file and flags.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelKind,
    pub samples: usize,
    pub forces: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub oracle_tol: f64,
    pub mode: KernelMode,
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Operator order for `odeP`.
    pub order: usize,
    /// Number of outputs where it cannot be read off the data.
    pub outputs: usize,
    pub init_lengthscale: f64,
    pub init_sensitivity: f64,
    /// Initial noise variance; defaults to a tenth of each output's sample variance.
    pub init_noise: Option<f64>,
    pub init_gamma: f64,
    pub init_mass: f64,
    pub init_damper: f64,
    pub init_spring: f64,
    pub init_inverse_width: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Ode1,
            samples: 100,
            forces: 1,
            seed: 0,
            out_dir: PathBuf::from("."),
            oracle_tol: 1e-6,
            mode: KernelMode::Rff,
            max_iters: 500,
            grad_tol: 1e-5,
            order: 3,
            outputs: 2,
            init_lengthscale: 1.0,
            init_sensitivity: 1.0,
            init_noise: None,
            init_gamma: 1.0,
            init_mass: 1.0,
            init_damper: 1.0,
            init_spring: 1.0,
            init_inverse_width: 1.0,
        }
    }
}

/// Parse `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Usage(format!("config line {}: expected key=value, got {raw:?}", i + 1)));
        };
        let key = k.trim().replace('-', "_");
        if map.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(CliError::Usage(format!("config line {}: duplicate key {key:?}", i + 1)));
        }
    }
    Ok(map)
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| CliError::Usage(format!("config key {key}: {e}")))
}

impl RunConfig {
    /// Apply config-file entries on top of the defaults.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self, CliError> {
        let mut c = Self::default();
        for (k, v) in map {
            match k.as_str() {
                "model" => c.model = parse(k, v)?,
                "samples" => c.samples = parse(k, v)?,
                "forces" => c.forces = parse(k, v)?,
                "seed" => c.seed = parse(k, v)?,
                "out_dir" => c.out_dir = PathBuf::from(v),
                "oracle_tol" => c.oracle_tol = parse(k, v)?,
                "mode" => c.mode = parse(k, v)?,
                "max_iters" => c.max_iters = parse(k, v)?,
                "grad_tol" => c.grad_tol = parse(k, v)?,
                "order" => c.order = parse(k, v)?,
                "outputs" => c.outputs = parse(k, v)?,
                "init_lengthscale" => c.init_lengthscale = parse(k, v)?,
                "init_sensitivity" => c.init_sensitivity = parse(k, v)?,
                "init_noise" => c.init_noise = Some(parse(k, v)?),
                "init_gamma" => c.init_gamma = parse(k, v)?,
                "init_mass" => c.init_mass = parse(k, v)?,
                "init_damper" => c.init_damper = parse(k, v)?,
                "init_spring" => c.init_spring = parse(k, v)?,
                "init_inverse_width" => c.init_inverse_width = parse(k, v)?,
                _ => return Err(CliError::Usage(format!("unknown config key {k:?}"))),
            }
        }
        Ok(c)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_map(&parse_config(&text)?)
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.samples == 0 {
            return Err(CliError::Usage("samples must be at least 1".into()));
        }
        if self.forces == 0 {
            return Err(CliError::Usage("forces must be at least 1".into()));
        }
        if self.outputs == 0 {
            return Err(CliError::Usage("outputs must be at least 1".into()));
        }
        if self.order == 0 {
            return Err(CliError::Usage("order must be at least 1".into()));
        }
        if !(self.oracle_tol > 0.0) {
            return Err(CliError::Usage("oracle_tol must be positive".into()));
        }
        Ok(())
    }
}
