//! Damped Newton–Raphson for estimating equations `f(ζ) = 0` that are the
//! gradient of a merit function.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iter: usize,
    /// Stopping threshold on `‖f‖∞`.
    pub tolerance: f64,
    pub max_halvings: usize,
    /// Ridge added to the negative Jacobian before the first factorization.
    pub ridge: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tolerance: 1e-8,
            max_halvings: 30,
            ridge: 0.0,
        }
    }
}

/// Relative merit slack below which a trial step counts as non-decreasing.
/// Near the root the true improvement is far smaller than the rounding in a
/// sum over thousands of subjects.
const MERIT_SLACK: f64 = 1e-12;

/// Ridge multipliers of `trace(J) / dim`, tried in order once plain
/// factorizations fail.
const RIDGE_SCHEDULE: [f64; 4] = [1e-8, 1e-6, 1e-4, 1e-2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    Singular,
    MaxIter,
    LineSearch,
}

impl std::fmt::Display for FailureReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FailureReason::Singular => "singular",
            FailureReason::MaxIter => "max_iter",
            FailureReason::LineSearch => "line_search",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOutcome {
    pub solution: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub score_norm: f64,
    /// Merit value at the start and after every accepted step.
    pub objective_trace: Vec<f64>,
}

#[derive(Debug, Clone, Error)]
pub enum SolverError {
    #[error("initial value has a non-finite entry at index {0}")]
    NonFiniteStart(usize),
    #[error("non-convergence ({reason}) after {} iterations, score norm {:e}", .outcome.iterations, .outcome.score_norm)]
    NonConvergence {
        reason: FailureReason,
        outcome: Box<SolveOutcome>,
    },
}

impl SolverError {
    pub fn reason(&self) -> Option<FailureReason> {
        match self {
            SolverError::NonConvergence { reason, .. } => Some(*reason),
            SolverError::NonFiniteStart(_) => None,
        }
    }
}

/// Estimating function, its negative Jacobian and the merit it ascends.
pub struct Linearization {
    pub merit: f64,
    pub value: DVector<f64>,
    pub neg_jacobian: DMatrix<f64>,
}

pub trait EstimatingEquation {
    fn merit(&self, zeta: &DVector<f64>) -> f64;
    fn linearize(&self, zeta: &DVector<f64>) -> Linearization;
}

pub fn newton_solve<E: EstimatingEquation + ?Sized>(
    eq: &E,
    init: DVector<f64>,
    cfg: &SolverConfig,
) -> Result<SolveOutcome, SolverError> {
    if let Some(i) = init.iter().position(|v| !v.is_finite()) {
        return Err(SolverError::NonFiniteStart(i));
    }
    let mut zeta = init;
    let mut lin = eq.linearize(&zeta);
    let mut trace = vec![lin.merit];
    let mut iterations = 0;

    let fail = |reason, zeta: DVector<f64>, iterations, norm, trace| SolverError::NonConvergence {
        reason,
        outcome: Box::new(SolveOutcome {
            solution: zeta,
            converged: false,
            iterations,
            score_norm: norm,
            objective_trace: trace,
        }),
    };

    loop {
        let norm = lin.value.amax();
        if norm <= cfg.tolerance {
            return Ok(SolveOutcome {
                solution: zeta,
                converged: true,
                iterations,
                score_norm: norm,
                objective_trace: trace,
            });
        }
        if !norm.is_finite() || !lin.merit.is_finite() {
            return Err(fail(FailureReason::LineSearch, zeta, iterations, norm, trace));
        }
        if iterations >= cfg.max_iter {
            return Err(fail(FailureReason::MaxIter, zeta, iterations, norm, trace));
        }
        let Some(step) = solve_regularized(&lin.neg_jacobian, &lin.value, cfg.ridge) else {
            return Err(fail(FailureReason::Singular, zeta, iterations, norm, trace));
        };

        let floor = lin.merit - MERIT_SLACK * (1.0 + lin.merit.abs());
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let trial = &zeta + &step * scale;
            let m = eq.merit(&trial);
            if m.is_finite() && m >= floor {
                accepted = Some(trial);
                break;
            }
            scale *= 0.5;
        }
        let Some(next) = accepted else {
            return Err(fail(FailureReason::LineSearch, zeta, iterations, norm, trace));
        };
        zeta = next;
        lin = eq.linearize(&zeta);
        trace.push(lin.merit);
        iterations += 1;
    }
}

/// Solves `J x = f` for a symmetric `J`: Cholesky, then pivoted LU, then an
/// escalating ridge. `None` when every attempt fails.
pub fn solve_regularized(j: &DMatrix<f64>, f: &DVector<f64>, ridge: f64) -> Option<DVector<f64>> {
    if j.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let finite = |x: DVector<f64>| x.iter().all(|v| v.is_finite()).then_some(x);
    let n = j.nrows();
    let base = if ridge > 0.0 {
        j + DMatrix::identity(n, n) * ridge
    } else {
        j.clone()
    };
    if let Some(ch) = base.clone().cholesky() {
        if let Some(x) = finite(ch.solve(f)) {
            return Some(x);
        }
    }
    if let Some(x) = base.clone().lu().solve(f).and_then(finite) {
        return Some(x);
    }
    let scale = j.trace().abs() / n.max(1) as f64;
    if scale == 0.0 || !scale.is_finite() {
        return None;
    }
    for mult in RIDGE_SCHEDULE {
        let a = &base + DMatrix::identity(n, n) * (mult * scale);
        if let Some(ch) = a.clone().cholesky() {
            if let Some(x) = finite(ch.solve(f)) {
                return Some(x);
            }
        }
        if let Some(x) = a.lu().solve(f).and_then(finite) {
            return Some(x);
        }
    }
    None
}
