//! Generic smooth minimization: damped Gauss-Newton for least-squares
//! problems and L-BFGS for large smooth objectives.

mod gauss_newton;
mod lbfgs;

pub use gauss_newton::{gauss_newton, GaussNewtonConfig};
pub use lbfgs::{lbfgs, LbfgsConfig};

use serde::{Deserialize, Serialize};

/// Why an optimizer stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradientTol,
    StepTol,
    MaxIter,
    LineSearchFail,
}

/// Outcome diagnostics for one optimizer run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerReport {
    /// Accepted iterations.
    pub iterations: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
    /// Gradient norm at the returned iterate.
    pub gradient_norm: f64,
    pub stop_reason: StopReason,
    /// Objective value at the initial point and after each accepted step.
    pub trace: Vec<f64>,
}

impl OptimizerReport {
    /// Successful runs never increase the objective across accepted steps.
    pub fn is_monotone(&self) -> bool {
        self.trace.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0))
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
