//! Augmented Lagrangian baseline sharing the graph front-end: inner
//! Gauss-Newton loops on the AL subproblem, outer first-order multiplier and
//! penalty updates.

use crate::graph::{FactorGraph, FactorId, FactorKind};
use crate::linalg::{assemble, solve as lin_solve, AlAssembleState, AssembleMode};
use crate::solver::{
    check_termination, max_abs, max_g_pos, norm1, IterationRecord, SolveReport, SolverError,
};
use nalgebra::DVector;
use serde::Deserialize;
use std::collections::HashMap;

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlConfig {
    pub rho0: f64,
    pub rho_max: f64,
    /// Penalty update factor (> 1).
    pub rho_nu: f64,
    pub eps_x: f64,
    pub eps_g: f64,
    pub eps_h: f64,
    pub max_total_iter: usize,
    pub max_inner_iter: usize,
    pub record_states: bool,
}

impl Default for AlConfig {
    fn default() -> Self {
        AlConfig {
            rho0: 0.5,
            rho_max: 5e5,
            rho_nu: 20.0,
            eps_x: 1e-2,
            eps_g: 1e-2,
            eps_h: 1e-2,
            max_total_iter: 300,
            max_inner_iter: 10,
            record_states: false,
        }
    }
}

impl AlConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.rho0 > 0.0 && self.rho_max > 0.0 && self.rho0 <= self.rho_max) {
            return Err(SolverError::BadConfig("require 0 < rho0 <= rho_max".into()));
        }
        if !(self.rho_nu > 1.0) {
            return Err(SolverError::BadConfig("require rho_nu > 1".into()));
        }
        if !(self.eps_x > 0.0 && self.eps_g > 0.0 && self.eps_h > 0.0) {
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

/// First-order multiplier update: `lambda_h' = lambda_h + rho h`,
/// `lambda_g' = max(0, lambda_g + rho g)` componentwise.
pub fn multiplier_update(
    lambda_h: &DVector<f64>,
    lambda_g: &DVector<f64>,
    h_vals: &DVector<f64>,
    g_vals: &DVector<f64>,
    rho: f64,
) -> (DVector<f64>, DVector<f64>) {
    let new_h = lambda_h + rho * h_vals;
    let new_g = (lambda_g + rho * g_vals).map(|v| v.max(0.0));
    (new_h, new_g)
}

/// Solves the graph with the augmented Lagrangian method. Any start point is
/// accepted; the inner loop takes full Gauss-Newton steps on the AL
/// subproblem, the outer loop updates multipliers and the shared penalty.
pub fn solve_al(graph: &mut FactorGraph, config: &AlConfig) -> Result<SolveReport, SolverError> {
    config.validate()?;

    let mut state = AlAssembleState {
        rho: config.rho0,
        lambda_eq: HashMap::new(),
        lambda_ineq: HashMap::new(),
    };
    let mut eq_factors: Vec<FactorId> = Vec::new();
    let mut ineq_factors: Vec<FactorId> = Vec::new();
    for f in graph.factors() {
        match f.kind {
            FactorKind::Equality { .. } => {
                state.lambda_eq.insert(f.id, DVector::zeros(f.residual_dim));
                eq_factors.push(f.id);
            }
            FactorKind::Inequality => {
                state
                    .lambda_ineq
                    .insert(f.id, DVector::zeros(f.residual_dim));
                ineq_factors.push(f.id);
            }
            FactorKind::Cost { .. } => {}
        }
    }

    let mut total = 0usize;
    let mut outer = 0usize;
    let mut records: Vec<IterationRecord> = Vec::new();
    let mut diagnostic: Option<String> = None;
    let mut converged = false;
    let mut last_dx = DVector::from_element(graph.total_dim().max(1), f64::INFINITY);

    'outer: loop {
        outer += 1;
        for _ in 0..config.max_inner_iter {
            if total >= config.max_total_iter {
                diagnostic = Some(format!(
                    "iteration budget of {} exhausted",
                    config.max_total_iter
                ));
                break 'outer;
            }
            let sys = assemble(graph, AssembleMode::Al(&state))?;
            let dx = lin_solve(&sys)?;
            total += 1;
            graph.apply_increment(&dx, 1.0)?;
            let g = graph.inequality_values()?;
            let h = graph.equality_values()?;
            records.push(IterationRecord {
                param: state.rho,
                zeta: 1.0,
                dx_norm1: norm1(&dx),
                max_g_pos: max_g_pos(&g),
                max_h_abs: max_abs(&h),
                state: config.record_states.then(|| graph.state()),
            });
            last_dx = dx;
            if norm1(&last_dx) < config.eps_x {
                break;
            }
        }
        let g = graph.inequality_values()?;
        let h = graph.equality_values()?;
        if check_termination(&last_dx, &g, &h, config.eps_x, config.eps_g, config.eps_h) {
            converged = true;
            break;
        }
        if total >= config.max_total_iter {
            if diagnostic.is_none() {
                diagnostic = Some(format!(
                    "iteration budget of {} exhausted",
                    config.max_total_iter
                ));
            }
            break;
        }
        // outer update: multipliers first, then the shared penalty
        for fid in &eq_factors {
            let h_val = graph.eval_factor(*fid)?.value;
            let lam = state.lambda_eq.get_mut(fid).unwrap();
            *lam += state.rho * h_val;
        }
        for fid in &ineq_factors {
            let g_val = graph.eval_factor(*fid)?.value;
            let lam = state.lambda_ineq.get_mut(fid).unwrap();
            *lam = (&*lam + state.rho * g_val).map(|v| v.max(0.0));
        }
        state.rho = (state.rho * config.rho_nu).min(config.rho_max);
    }

    // Mirror the equality multiplier estimates into the multiplier nodes so
    // the reported solution matches the BIPM layout.
    for fid in &eq_factors {
        let FactorKind::Equality { multiplier } = graph.factor(*fid).kind else {
            unreachable!()
        };
        let lam = state.lambda_eq[fid].clone();
        let off = graph.offset(multiplier);
        let mut s = graph.state();
        s.rows_mut(off, lam.len()).copy_from(&lam);
        graph.set_state(&s)?;
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
