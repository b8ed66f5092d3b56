//! L-BFGS ascent on the log marginal with a backtracking Armijo line search.

use std::collections::VecDeque;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::gradient::{lml_and_gradient, Evaluation};
use super::ModelDraws;
use crate::error::{LfmError, Result};
use crate::model::{Dataset, HyperParameters, ModelSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub max_iters: usize,
    /// Stop once the Euclidean norm of the packed gradient falls below this.
    pub grad_tol: f64,
    /// Number of curvature pairs kept.
    pub history: usize,
    /// Halvings tried before a line search is declared failed.
    pub max_backtracks: usize,
    /// Sufficient-increase constant.
    pub armijo: f64,
    /// Upper bound on the length of a single step in packed coordinates.
    pub max_step: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { max_iters: 500, grad_tol: 1e-5, history: 10, max_backtracks: 40, armijo: 1e-4, max_step: 2.0 }
    }
}

/// One accepted iterate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub lml: f64,
    pub grad_norm: f64,
    pub elapsed_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub spec: ModelSpec,
    pub initial_lml: f64,
    pub final_lml: f64,
    pub trace: Vec<TraceRow>,
    pub seed: u64,
    pub num_samples: usize,
    pub iterations: usize,
    pub evaluations: usize,
    /// Mean wall time of one objective-plus-gradient evaluation.
    pub mean_eval_s: f64,
    pub converged: bool,
    pub warning: Option<String>,
}

struct Counter<'a> {
    template: &'a ModelSpec,
    data: &'a Dataset,
    draws: &'a ModelDraws,
    calls: usize,
    seconds: f64,
}

impl Counter<'_> {
    fn eval(&mut self, theta: &[f64]) -> Result<Evaluation> {
        let start = Instant::now();
        let r = lml_and_gradient(theta, self.template, self.data, self.draws);
        self.seconds += start.elapsed().as_secs_f64();
        self.calls += 1;
        r
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Ascent direction from the two-loop recursion on `grad` (gradient of the maximised objective).
fn direction(grad: &[f64], memory: &VecDeque<(Vec<f64>, Vec<f64>)>) -> Vec<f64> {
    // works on f = -lml, so y pairs are stored as differences of -grad
    let mut q: Vec<f64> = grad.iter().map(|g| -g).collect();
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y) in memory.iter().rev() {
        let rho = 1.0 / dot(y, s);
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push((a, rho));
    }
    if let Some((s, y)) = memory.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y), (a, rho)) in memory.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter().map(|v| -v).collect()
}

/// Maximise the log marginal over every packed hyperparameter, holding `draws` fixed.
pub fn optimize(init: &ModelSpec, data: &Dataset, draws: &ModelDraws, config: &OptimizerConfig) -> Result<FitResult> {
    if config.grad_tol < 0.0 || !(config.max_step > 0.0) || config.history == 0 {
        return Err(LfmError::InvalidSpec("optimizer settings out of range".into()));
    }
    let start = Instant::now();
    let mut counter = Counter { template: init, data, draws, calls: 0, seconds: 0.0 };
    let mut theta = init.pack().into_values();
    let mut current = counter.eval(&theta)?;
    let initial_lml = current.lml;
    let mut trace = vec![TraceRow { iter: 0, lml: current.lml, grad_norm: norm(&current.gradient), elapsed_s: 0.0 }];
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>)> = VecDeque::new();
    let mut warning = None;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < config.max_iters {
        let gnorm = norm(&current.gradient);
        if gnorm < config.grad_tol {
            converged = true;
            break;
        }
        let mut dir = direction(&current.gradient, &memory);
        let mut slope = dot(&dir, &current.gradient);
        if !(slope > 0.0) {
            memory.clear();
            dir = current.gradient.clone();
            slope = gnorm * gnorm;
        }
        let dnorm = norm(&dir);
        let mut step = if memory.is_empty() { (1.0 / gnorm).min(1.0) } else { 1.0 };
        step = step.min(config.max_step / dnorm);

        let mut accepted = None;
        for _ in 0..config.max_backtracks {
            let trial: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t + step * d).collect();
            if let Ok(e) = counter.eval(&trial) {
                if e.lml >= current.lml + config.armijo * step * slope {
                    accepted = Some((trial, e));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((next_theta, next)) = accepted else {
            if !memory.is_empty() {
                // stale curvature; retry from steepest ascent
                memory.clear();
                continue;
            }
            let msg = format!("line search failed at iteration {iterations}; returning best parameters");
            log::warn!("{msg}");
            warning = Some(msg);
            break;
        };

        let s: Vec<f64> = next_theta.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = current.gradient.iter().zip(&next.gradient).map(|(a, b)| a - b).collect();
        if dot(&s, &y) > 1e-12 * norm(&s) * norm(&y) {
            if memory.len() == config.history {
                memory.pop_front();
            }
            memory.push_back((s, y));
        }
        let change = next.lml - current.lml;
        theta = next_theta;
        current = next;
        iterations += 1;
        trace.push(TraceRow {
            iter: iterations,
            lml: current.lml,
            grad_norm: norm(&current.gradient),
            elapsed_s: start.elapsed().as_secs_f64(),
        });
        if change <= 1e-13 * current.lml.abs().max(1.0) && memory.is_empty() {
            converged = true;
            break;
        }
    }
    if !converged && warning.is_none() && iterations >= config.max_iters {
        warning = Some(format!("stopped after {iterations} iterations without meeting the gradient tolerance"));
    }

    Ok(FitResult {
        spec: current.spec,
        initial_lml,
        final_lml: current.lml,
        trace,
        seed: draws.seed(),
        num_samples: draws.num_samples(),
        iterations,
        evaluations: counter.calls,
        mean_eval_s: counter.seconds / counter.calls as f64,
        converged,
        warning,
    })
}

/// Trace as CSV with header `iter,lml,grad_norm,elapsed_s`.
pub fn write_trace_csv<W: Write>(trace: &[TraceRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "iter,lml,grad_norm,elapsed_s")?;
    for r in trace {
        writeln!(out, "{},{:e},{:e},{:e}", r.iter, r.lml, r.grad_norm, r.elapsed_s)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LfmSpec, Observation, Ode1Params, OutputOperator, SensitivityMatrix};

    fn problem() -> (ModelSpec, Dataset, ModelDraws) {
        let spec = ModelSpec::Lfm(
            LfmSpec::new(
                vec![OutputOperator::Ode1(Ode1Params::new(2.0).unwrap())],
                vec![0.5],
                SensitivityMatrix::filled(1, 1, 0.5),
                vec![0.5],
            )
            .unwrap(),
        );
        let data = Dataset::new(
            (0..30)
                .map(|i| {
                    let t = 0.1 * i as f64;
                    Observation::at_time(1, t, (1.3 * t).sin() + 0.05 * (7.0 * t).cos())
                })
                .collect(),
        );
        let draws = ModelDraws::sample(&spec, 10, 4).unwrap();
        (spec, data, draws)
    }

    #[test]
    fn trace_is_monotone_and_improves() {
        let (spec, data, draws) = problem();
        let fit = optimize(&spec, &data, &draws, &OptimizerConfig { max_iters: 60, ..Default::default() }).unwrap();
        assert!(fit.final_lml > fit.initial_lml);
        for w in fit.trace.windows(2) {
            assert!(w[1].lml >= w[0].lml);
        }
        assert_eq!(fit.trace.len(), fit.iterations + 1);
        assert_eq!(fit.final_lml, fit.trace.last().unwrap().lml);
    }

    #[test]
    fn optimum_returns_immediately() {
        let (spec, data, draws) = problem();
        let first = optimize(&spec, &data, &draws, &OptimizerConfig::default()).unwrap();
        let config = OptimizerConfig { grad_tol: first.trace.last().unwrap().grad_norm * 1.01 + 1e-12, ..Default::default() };
        let again = optimize(&first.spec, &data, &draws, &config).unwrap();
        assert_eq!(again.iterations, 0);
        assert!(again.converged);
    }

    #[test]
    fn deterministic() {
        let (spec, data, draws) = problem();
        let c = OptimizerConfig { max_iters: 20, ..Default::default() };
        let a = optimize(&spec, &data, &draws, &c).unwrap();
        let b = optimize(&spec, &data, &draws, &c).unwrap();
        assert_eq!(a.spec, b.spec);
        assert_eq!(a.final_lml, b.final_lml);
    }

    #[test]
    fn trace_csv_layout() {
        let rows = vec![TraceRow { iter: 0, lml: -1.5, grad_norm: 2.0, elapsed_s: 0.0 }];
        let mut buf = Vec::new();
        write_trace_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("iter,lml,grad_norm,elapsed_s"));
        let fields: Vec<f64> = lines.next().unwrap().split(',').map(|f| f.parse().unwrap()).collect();
        assert_eq!(fields, vec![0.0, -1.5, 2.0, 0.0]);
    }
}
