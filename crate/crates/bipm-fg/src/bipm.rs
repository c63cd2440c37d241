//! Barrier interior-point solver: inner Gauss-Newton loop with
//! feasibility-preserving backtracking, outer barrier-parameter continuation,
//! and three-way termination.

use crate::graph::FactorGraph;
use crate::linalg::{assemble, solve as lin_solve, AssembleMode};
use crate::solver::{
    check_termination, max_abs, max_g_pos, norm1, IterationRecord, SolveReport, SolverError,
};
use nalgebra::DVector;
use serde::Deserialize;

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BipmConfig {
    pub kappa0: f64,
    pub kappa_final: f64,
    /// Barrier update factor (> 1).
    pub nu: f64,
    /// Backtracking shrink factor in (0, 1).
    pub alpha: f64,
    pub eps_x: f64,
    pub eps_g: f64,
    pub eps_h: f64,
    pub max_total_iter: usize,
    pub max_inner_iter: usize,
    pub zeta_min: f64,
    /// Capture the post-step state in each iteration record.
    pub record_states: bool,
}

impl Default for BipmConfig {
    fn default() -> Self {
        BipmConfig {
            kappa0: 0.5,
            kappa_final: 1500.0,
            nu: 8.0,
            alpha: 0.5,
            eps_x: 1e-2,
            eps_g: 1e-2,
            eps_h: 1e-2,
            max_total_iter: 300,
            max_inner_iter: 10,
            zeta_min: 1e-12,
            record_states: false,
        }
    }
}

impl BipmConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.kappa0 > 0.0 && self.kappa_final > 0.0 && self.kappa0 <= self.kappa_final) {
            return Err(SolverError::BadConfig(
                "require 0 < kappa0 <= kappa_final".into(),
            ));
        }
        if !(self.nu > 1.0) {
            return Err(SolverError::BadConfig("require nu > 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(SolverError::BadConfig("require alpha in (0,1)".into()));
        }
        if !(self.eps_x > 0.0 && self.eps_g > 0.0 && self.eps_h > 0.0 && self.zeta_min > 0.0) {
            return Err(SolverError::BadConfig("tolerances must be positive".into()));
        }
        if self.max_total_iter == 0 || self.max_inner_iter == 0 {
            return Err(SolverError::BadConfig(
                "iteration budgets must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Largest step size in {1, alpha, alpha^2, ...} keeping every inequality
/// component strictly negative at `x + zeta dx`. The graph state is not
/// modified.
pub fn backtrack(
    graph: &FactorGraph,
    dx: &DVector<f64>,
    alpha: f64,
    zeta_min: f64,
) -> Result<f64, SolverError> {
    let x = graph.state();
    let mut zeta = 1.0;
    loop {
        let candidate = &x + dx * zeta;
        let g = graph.inequality_values_at(&candidate)?;
        if g.iter().all(|&v| v < 0.0) {
            return Ok(zeta);
        }
        zeta *= alpha;
        if zeta < zeta_min {
            return Err(SolverError::LineSearchFailure { zeta, zeta_min });
        }
    }
}

/// Runs the barrier interior-point solver on a strictly feasible graph.
///
/// Inner loop: relinearize, assemble, solve, backtrack to stay interior,
/// step. Outer loop: multiply kappa by nu until it reaches kappa_final, then
/// hold it there and keep iterating until the termination test passes or the
/// total budget runs out. Errors on an infeasible start; iteration-budget
/// exhaustion and line-search failure return `converged = false` with the
/// best iterate and a diagnostic.
pub fn solve(graph: &mut FactorGraph, config: &BipmConfig) -> Result<SolveReport, SolverError> {
    config.validate()?;
    let g0 = graph.inequality_values()?;
    let bad: Vec<usize> = g0
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= 0.0)
        .map(|(k, _)| k)
        .collect();
    if !bad.is_empty() {
        return Err(SolverError::InfeasibleStart(bad));
    }

    let mut kappa = config.kappa0;
    let mut total = 0usize;
    let mut outer = 0usize;
    let mut records: Vec<IterationRecord> = Vec::new();
    let mut diagnostic: Option<String> = None;
    let mut last_dx = DVector::from_element(graph.total_dim().max(1), f64::INFINITY);
    let mut converged = false;

    'outer: loop {
        outer += 1;
        let mut inner_converged = false;
        for _ in 0..config.max_inner_iter {
            if total >= config.max_total_iter {
                diagnostic = Some(format!(
                    "iteration budget of {} exhausted",
                    config.max_total_iter
                ));
                break 'outer;
            }
            let sys = assemble(graph, AssembleMode::Bipm { kappa })?;
            let dx = lin_solve(&sys)?;
            total += 1;
            let zeta = match backtrack(graph, &dx, config.alpha, config.zeta_min) {
                Ok(z) => z,
                Err(e @ SolverError::LineSearchFailure { .. }) => {
                    diagnostic = Some(e.to_string());
                    break 'outer;
                }
                Err(e) => return Err(e),
            };
            graph.apply_increment(&dx, zeta)?;
            let g = graph.inequality_values()?;
            let h = graph.equality_values()?;
            debug_assert!(
                g.iter().all(|&v| v < 0.0),
                "accepted iterate must stay strictly feasible"
            );
            records.push(IterationRecord {
                param: kappa,
                zeta,
                dx_norm1: norm1(&dx),
                max_g_pos: max_g_pos(&g),
                max_h_abs: max_abs(&h),
                state: config.record_states.then(|| graph.state()),
            });
            last_dx = dx;
            if check_termination(&last_dx, &g, &h, config.eps_x, config.eps_g, config.eps_h) {
                inner_converged = true;
                break;
            }
        }
        if kappa >= config.kappa_final {
            if inner_converged {
                converged = true;
                break;
            }
            // Hold kappa at its terminal value and keep taking inner rounds:
            // an unsuccessful run ends only via the total iteration budget or
            // a line-search failure, never by the phase structure itself.
            continue;
        }
        kappa *= config.nu;
    }

    let g = graph.inequality_values()?;
    let h = graph.equality_values()?;
    Ok(SolveReport {
        solution: graph.state(),
        total_iterations: total,
        outer_iterations: outer,
        converged,
        final_residuals: (norm1(&last_dx), max_g_pos(&g), max_abs(&h)),
        per_iteration: records,
        diagnostic,
    })
}
