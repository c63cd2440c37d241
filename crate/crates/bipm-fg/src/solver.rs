//! Types shared by the BIPM and AL solver backends.

use crate::factors::FactorError;
use crate::graph::GraphError;
use crate::linalg::LinalgError;
use nalgebra::DVector;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum SolverError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Factor(#[from] FactorError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("infeasible start: inequality components {0:?} are >= 0")]
    InfeasibleStart(Vec<usize>),
    #[error("line search fell below zeta_min = {zeta_min} (last zeta = {zeta})")]
    LineSearchFailure { zeta: f64, zeta_min: f64 },
    #[error("invalid solver configuration: {0}")]
    BadConfig(String),
}

/// One accepted iteration (one linear solve).
#[derive(Clone, Debug)]
pub struct IterationRecord {
    /// Barrier parameter (BIPM) or penalty parameter (AL) in force.
    pub param: f64,
    /// Accepted step size.
    pub zeta: f64,
    /// l1 norm of the raw Newton step.
    pub dx_norm1: f64,
    /// max(g, 0) infinity norm after the step.
    pub max_g_pos: f64,
    /// |h| infinity norm after the step.
    pub max_h_abs: f64,
    /// Post-step global state, captured only when the config asks for it.
    pub state: Option<DVector<f64>>,
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    /// Final global state including multiplier entries.
    pub solution: DVector<f64>,
    /// Number of linear solves performed (inner iterations summed across
    /// all outer iterations).
    pub total_iterations: usize,
    pub outer_iterations: usize,
    pub converged: bool,
    /// (|dx|_1, |max(g,0)|_inf, |h|_inf) at the final iterate.
    pub final_residuals: (f64, f64, f64),
    pub per_iteration: Vec<IterationRecord>,
    /// Present when the solve stopped for a non-convergence reason.
    pub diagnostic: Option<String>,
}

/// Three-way termination test shared by both solvers: update convergence,
/// inequality feasibility, equality satisfaction. All comparisons strict.
pub fn check_termination(
    dx: &DVector<f64>,
    g_all: &DVector<f64>,
    h_all: &DVector<f64>,
    eps_x: f64,
    eps_g: f64,
    eps_h: f64,
) -> bool {
    norm1(dx) < eps_x && max_g_pos(g_all) < eps_g && max_abs(h_all) < eps_h
}

pub fn norm1(v: &DVector<f64>) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

pub fn max_g_pos(g: &DVector<f64>) -> f64 {
    g.iter().fold(0.0_f64, |m, x| m.max(x.max(0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    #[test]
    fn termination_examples() {
        let (ex, eg, eh) = (1e-2, 1e-2, 1e-2);
        assert!(check_termination(
            &dvector![0.0],
            &dvector![-1.0, -2.0],
            &dvector![0.0],
            ex,
            eg,
            eh
        ));
        // violated inequality: max(g,0) = 2*eps_g
        assert!(!check_termination(
            &dvector![0.0],
            &dvector![-1.0, 2.0 * eg],
            &dvector![0.0],
            ex,
            eg,
            eh
        ));
        // |dx|_1 exactly eps_x fails the strict test
        assert!(!check_termination(
            &dvector![ex],
            &dvector![-1.0],
            &dvector![0.0],
            ex,
            eg,
            eh
        ));
    }
}
