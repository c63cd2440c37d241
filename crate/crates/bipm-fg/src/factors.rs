//! Per-factor local contributions (H-block, b-block) to the Gauss-Newton
//! linear system.
//!
//! Sign conventions for the global system `H dx = b`:
//! * cost factors:        H = J' W J,  b = -J' W e
//! * equality factors:    KKT blocks with zero diagonal, b = (-J' gamma, -h)
//! * inequality (barrier) factors: H = J' W J with W = diag(1/(kappa g^2)),
//!   b = +J' W g = sum_k J_k' / (kappa g_k). Note the positive sign relative
//!   to cost factors; b is still the negative gradient of the barrier term.

use crate::graph::{FactorGraph, FactorId, FactorKind, GraphError, VarId};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum FactorError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("barrier undefined for g = {0} (requires g < 0)")]
    BarrierDomain(f64),
    #[error("factor {factor:?} infeasible: component {component} has g = {value} >= 0")]
    Infeasible {
        factor: FactorId,
        component: usize,
        value: f64,
    },
    #[error("barrier parameter kappa = {0} must be positive")]
    NonPositiveKappa(f64),
    #[error("penalty rho = {0} must be positive")]
    NonPositiveRho(f64),
    #[error("multiplier estimate has length {got}, expected {expected}")]
    MultiplierLength { expected: usize, got: usize },
    #[error("negative inequality multiplier estimate {0}")]
    NegativeMultiplier(f64),
    #[error("factor {0:?} is not of the expected family")]
    WrongFamily(FactorId),
}

/// A factor's local blocks, addressed by variable id. Off-diagonal blocks
/// are listed once with `offset(row) <= offset(col)`; assembly mirrors the
/// transpose, so the implied global H is symmetric by construction.
pub struct FactorContribution {
    pub h_blocks: Vec<(VarId, VarId, DMatrix<f64>)>,
    pub b_blocks: Vec<(VarId, DVector<f64>)>,
}

/// Logarithmic barrier value `-(1/kappa) ln(-g)`, defined for `g < 0`.
pub fn barrier_value(g: f64, kappa: f64) -> Result<f64, FactorError> {
    if !(kappa > 0.0) {
        return Err(FactorError::NonPositiveKappa(kappa));
    }
    if g >= 0.0 {
        return Err(FactorError::BarrierDomain(g));
    }
    Ok(-(-g).ln() / kappa)
}

/// Gauss-Newton blocks `J' W J` for every connected variable pair, keyed so
/// each unordered pair appears once.
fn weighted_pair_blocks(
    graph: &FactorGraph,
    vars: &[VarId],
    jacs: &[DMatrix<f64>],
    weighted_jacs: &[DMatrix<f64>],
) -> Vec<(VarId, VarId, DMatrix<f64>)> {
    let mut blocks = Vec::new();
    for (a, ja) in vars.iter().zip(jacs) {
        for (b, wjb) in vars.iter().zip(weighted_jacs) {
            if graph.offset(*a) <= graph.offset(*b) {
                blocks.push((*a, *b, ja.transpose() * wjb));
            }
        }
    }
    blocks
}

/// Contribution of a cost factor: `H = J' W J`, `b = -J' W e`.
pub fn cost_contribution(
    graph: &FactorGraph,
    factor: FactorId,
) -> Result<FactorContribution, FactorError> {
    let f = graph.factor(factor);
    let FactorKind::Cost { info } = &f.kind else {
        return Err(FactorError::WrongFamily(factor));
    };
    let eval = graph.eval_factor(factor)?;
    let vars = f.decision_connected();
    let weighted: Vec<DMatrix<f64>> = eval.jacobians.iter().map(|j| info * j).collect();
    let h_blocks = weighted_pair_blocks(graph, vars, &eval.jacobians, &weighted);
    let we = info * &eval.value;
    let b_blocks = vars
        .iter()
        .zip(&eval.jacobians)
        .map(|(v, j)| (*v, -(j.transpose() * &we)))
        .collect();
    Ok(FactorContribution { h_blocks, b_blocks })
}

/// Contribution of an equality factor `h(x) = 0` with attached multiplier
/// `gamma`. Stacking `e = [h; gamma]` with the swap information matrix
/// reduces to the KKT blocks: `H` carries `J_h'` between each decision
/// variable and the multiplier (zero diagonal blocks), and
/// `b = (-J_h' gamma, -h)`.
pub fn equality_contribution(
    graph: &FactorGraph,
    factor: FactorId,
) -> Result<FactorContribution, FactorError> {
    let f = graph.factor(factor);
    let FactorKind::Equality { multiplier } = f.kind else {
        return Err(FactorError::WrongFamily(factor));
    };
    let eval = graph.eval_factor(factor)?;
    let gamma = &graph.var(multiplier).value;
    let vars = f.decision_connected();

    let mut h_blocks = Vec::new();
    let mut b_blocks = Vec::new();
    for (v, j) in vars.iter().zip(&eval.jacobians) {
        if graph.offset(*v) <= graph.offset(multiplier) {
            h_blocks.push((*v, multiplier, j.transpose()));
        } else {
            h_blocks.push((multiplier, *v, j.clone()));
        }
        b_blocks.push((*v, -(j.transpose() * gamma)));
    }
    b_blocks.push((multiplier, -eval.value));
    Ok(FactorContribution { h_blocks, b_blocks })
}

/// Contribution of an inequality factor under the logarithmic barrier with
/// parameter `kappa`. Requires the current point to be strictly interior
/// (every component `g_k < 0`).
pub fn inequality_barrier_contribution(
    graph: &FactorGraph,
    factor: FactorId,
    kappa: f64,
) -> Result<FactorContribution, FactorError> {
    if !(kappa > 0.0) {
        return Err(FactorError::NonPositiveKappa(kappa));
    }
    let f = graph.factor(factor);
    if !matches!(f.kind, FactorKind::Inequality) {
        return Err(FactorError::WrongFamily(factor));
    }
    let eval = graph.eval_factor(factor)?;
    for (k, &g) in eval.value.iter().enumerate() {
        if g >= 0.0 {
            return Err(FactorError::Infeasible {
                factor,
                component: k,
                value: g,
            });
        }
    }
    // W = diag(1/(kappa g_k^2)), recomputed from the current g.
    let omega: Vec<f64> = eval.value.iter().map(|g| 1.0 / (kappa * g * g)).collect();
    let vars = f.decision_connected();
    let weighted: Vec<DMatrix<f64>> = eval
        .jacobians
        .iter()
        .map(|j| {
            let mut wj = j.clone();
            for (k, mut row) in wj.row_iter_mut().enumerate() {
                row *= omega[k];
            }
            wj
        })
        .collect();
    let h_blocks = weighted_pair_blocks(graph, vars, &eval.jacobians, &weighted);
    // b = +J' W g, i.e. sum_k J_k' / (kappa g_k)
    let wg = DVector::from_iterator(
        eval.value.len(),
        eval.value.iter().zip(&omega).map(|(g, w)| w * g),
    );
    let b_blocks = vars
        .iter()
        .zip(&eval.jacobians)
        .map(|(v, j)| (*v, j.transpose() * &wg))
        .collect();
    Ok(FactorContribution { h_blocks, b_blocks })
}

/// Augmented-Lagrangian contribution of a constraint factor given the current
/// multiplier estimate `lambda` and penalty `rho`.
///
/// Equality: Gauss-Newton blocks of `lambda' h + (rho/2) |h|^2`, i.e.
/// `H = rho J' J`, `b = -J'(lambda + rho h)`.
/// Inequality: active-set form; components with `lambda_k + rho g_k > 0`
/// contribute `rho J_k' J_k` and `-J_k'(lambda_k + rho g_k)`, inactive
/// components contribute nothing.
pub fn al_contribution(
    graph: &FactorGraph,
    factor: FactorId,
    lambda: &DVector<f64>,
    rho: f64,
) -> Result<FactorContribution, FactorError> {
    if !(rho > 0.0) {
        return Err(FactorError::NonPositiveRho(rho));
    }
    let f = graph.factor(factor);
    let is_eq = matches!(f.kind, FactorKind::Equality { .. });
    if !is_eq && !matches!(f.kind, FactorKind::Inequality) {
        return Err(FactorError::WrongFamily(factor));
    }
    if lambda.len() != f.residual_dim {
        return Err(FactorError::MultiplierLength {
            expected: f.residual_dim,
            got: lambda.len(),
        });
    }
    let eval = graph.eval_factor(factor)?;
    // Per-row weight: rho everywhere for equalities; rho on active rows only
    // for inequalities. "force" is lambda + rho * residual clipped at zero
    // for inactive inequality rows.
    let mut row_weight = vec![rho; f.residual_dim];
    let mut force = lambda + rho * &eval.value;
    if !is_eq {
        for k in 0..f.residual_dim {
            if lambda[k] < 0.0 {
                return Err(FactorError::NegativeMultiplier(lambda[k]));
            }
            if force[k] <= 0.0 {
                row_weight[k] = 0.0;
                force[k] = 0.0;
            }
        }
    }
    let vars = f.decision_connected();
    let weighted: Vec<DMatrix<f64>> = eval
        .jacobians
        .iter()
        .map(|j| {
            let mut wj = j.clone();
            for (k, mut row) in wj.row_iter_mut().enumerate() {
                row *= row_weight[k];
            }
            wj
        })
        .collect();
    let h_blocks = weighted_pair_blocks(graph, vars, &eval.jacobians, &weighted);
    let b_blocks = vars
        .iter()
        .zip(&eval.jacobians)
        .map(|(v, j)| (*v, -(j.transpose() * &force)))
        .collect();
    Ok(FactorContribution { h_blocks, b_blocks })
}
