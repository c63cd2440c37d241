//! Global system assembly and direct solution of `H dx = b`.
//!
//! H is symmetric but indefinite (the equality KKT blocks have zero
//! diagonals), so the solver is a row-pivoted LU at dense desk scale rather
//! than a Cholesky or CG. Problem sizes here stay well under a few hundred
//! unknowns.

use crate::factors::{
    al_contribution, cost_contribution, equality_contribution, inequality_barrier_contribution,
    FactorContribution, FactorError,
};
use crate::graph::{FactorGraph, FactorId, FactorKind};
use nalgebra::{DMatrix, DVector};
use std::collections::HashMap;
use std::io::Write;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum LinalgError {
    #[error(transparent)]
    Factor(#[from] FactorError),
    #[error("missing multiplier estimate for factor {0:?}")]
    MissingAlMultiplier(FactorId),
    #[error("rank-deficient system: pivot {pivot:e} below threshold at index {index}")]
    RankDeficient { index: usize, pivot: f64 },
    #[error("right-hand side has length {got}, expected {expected}")]
    RhsLength { expected: usize, got: usize },
}

/// Assembled symmetric system `H dx = b` over the graph's global layout.
pub struct SymBlockSystem {
    pub dim: usize,
    pub h: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// Multiplier estimates and shared penalty for augmented-Lagrangian assembly.
pub struct AlAssembleState {
    pub rho: f64,
    pub lambda_eq: HashMap<FactorId, DVector<f64>>,
    pub lambda_ineq: HashMap<FactorId, DVector<f64>>,
}

pub enum AssembleMode<'a> {
    /// Barrier interior-point: cost + KKT equality + barrier inequality
    /// contributions. Requires a strictly interior current point.
    Bipm { kappa: f64 },
    /// Augmented Lagrangian: cost + penalty/multiplier contributions.
    /// Multiplier variable blocks get identity diagonals (their increment is
    /// pinned to zero; AL tracks multipliers outside the state vector).
    Al(&'a AlAssembleState),
}

fn add_contribution(sys: &mut SymBlockSystem, graph: &FactorGraph, c: &FactorContribution) {
    for (row, col, block) in &c.h_blocks {
        let (r0, c0) = (graph.offset(*row), graph.offset(*col));
        sys.h
            .view_mut((r0, c0), (block.nrows(), block.ncols()))
            .zip_apply(block, |h, v| *h += v);
        if r0 != c0 {
            // mirror, never re-derive
            let t = block.transpose();
            sys.h
                .view_mut((c0, r0), (t.nrows(), t.ncols()))
                .zip_apply(&t, |h, v| *h += v);
        }
    }
    for (var, block) in &c.b_blocks {
        let off = graph.offset(*var);
        sys.b.rows_mut(off, block.len()).zip_apply(block, |b, v| *b += v);
    }
}

/// Sums all per-factor contributions into a global system.
pub fn assemble(graph: &FactorGraph, mode: AssembleMode) -> Result<SymBlockSystem, LinalgError> {
    let dim = graph.total_dim();
    let mut sys = SymBlockSystem {
        dim,
        h: DMatrix::zeros(dim, dim),
        b: DVector::zeros(dim),
    };
    for f in graph.factors() {
        let contrib = match (&f.kind, &mode) {
            (FactorKind::Cost { .. }, _) => cost_contribution(graph, f.id)?,
            (FactorKind::Equality { .. }, AssembleMode::Bipm { .. }) => {
                equality_contribution(graph, f.id)?
            }
            (FactorKind::Inequality, AssembleMode::Bipm { kappa }) => {
                inequality_barrier_contribution(graph, f.id, *kappa)?
            }
            (FactorKind::Equality { .. }, AssembleMode::Al(state)) => {
                let lambda = state
                    .lambda_eq
                    .get(&f.id)
                    .ok_or(LinalgError::MissingAlMultiplier(f.id))?;
                al_contribution(graph, f.id, lambda, state.rho)?
            }
            (FactorKind::Inequality, AssembleMode::Al(state)) => {
                let lambda = state
                    .lambda_ineq
                    .get(&f.id)
                    .ok_or(LinalgError::MissingAlMultiplier(f.id))?;
                al_contribution(graph, f.id, lambda, state.rho)?
            }
        };
        add_contribution(&mut sys, graph, &contrib);
    }
    if matches!(mode, AssembleMode::Al(_)) {
        for v in graph.vars() {
            if v.kind == crate::graph::VarKind::Multiplier {
                let off = graph.offset(v.id);
                for k in 0..v.dim() {
                    sys.h[(off + k, off + k)] += 1.0;
                }
            }
        }
    }
    Ok(sys)
}

/// Row-pivoted LU factorization retaining the permutation for reuse.
struct Lu {
    lu: DMatrix<f64>,
    perm: Vec<usize>,
}

impl Lu {
    /// Factors `a`, failing if any pivot falls below `1e-12 * ||a||_inf`.
    fn factor(a: &DMatrix<f64>) -> Result<Self, LinalgError> {
        let n = a.nrows();
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let norm_inf = (0..n)
            .map(|i| a.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0_f64, f64::max);
        let tol = 1e-12 * norm_inf.max(f64::MIN_POSITIVE);
        // Column-major elimination on the raw storage: the trailing update
        // runs down contiguous columns instead of across strided rows.
        let data = lu.as_mut_slice();
        for k in 0..n {
            let col_k = k * n;
            let mut p = k;
            let mut best = data[col_k + k].abs();
            for i in (k + 1)..n {
                let v = data[col_k + i].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best <= tol {
                return Err(LinalgError::RankDeficient {
                    index: k,
                    pivot: best,
                });
            }
            if p != k {
                for j in 0..n {
                    data.swap(j * n + p, j * n + k);
                }
                perm.swap(p, k);
            }
            let pivot = data[col_k + k];
            for i in (k + 1)..n {
                data[col_k + i] /= pivot;
            }
            for j in (k + 1)..n {
                let u_kj = data[j * n + k];
                if u_kj == 0.0 {
                    continue;
                }
                let (head, tail) = data.split_at_mut(j * n);
                let lcol = &head[col_k + k + 1..col_k + n];
                let ucol = &mut tail[k + 1..n];
                for (u, &l) in ucol.iter_mut().zip(lcol) {
                    *u -= u_kj * l;
                }
            }
        }
        Ok(Lu { lu, perm })
    }

    fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.lu.nrows();
        let data = self.lu.as_slice();
        let mut x = DVector::from_iterator(n, self.perm.iter().map(|&p| b[p]));
        // Column-oriented triangular solves: subtract x[j] * column j from
        // the remaining entries.
        for j in 0..n {
            let xj = x[j];
            if xj != 0.0 {
                let col = &data[j * n..(j + 1) * n];
                for i in (j + 1)..n {
                    x[i] -= col[i] * xj;
                }
            }
        }
        for j in (0..n).rev() {
            let xj = x[j] / data[j * n + j];
            x[j] = xj;
            if xj != 0.0 {
                let col = &data[j * n..(j + 1) * n];
                for i in 0..j {
                    x[i] -= col[i] * xj;
                }
            }
        }
        x
    }
}

/// Solves `H dx = b` by pivoted LU with one step of iterative refinement.
///
/// The system is symmetrically equilibrated first (`D H D y = D b`,
/// `dx = D y` with `d_i = 1/sqrt(max_j |H_ij|)`): barrier rows near an
/// active constraint scale like `1/(kappa g^2)` and would otherwise drag
/// the relative pivot threshold far above the well-scaled rows.
pub fn solve(sys: &SymBlockSystem) -> Result<DVector<f64>, LinalgError> {
    if sys.b.len() != sys.dim {
        return Err(LinalgError::RhsLength {
            expected: sys.dim,
            got: sys.b.len(),
        });
    }
    if sys.dim == 0 {
        return Ok(DVector::zeros(0));
    }
    let n = sys.dim;
    let d = DVector::from_iterator(
        n,
        (0..n).map(|i| {
            let r = sys.h.row(i).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            if r > 0.0 {
                1.0 / r.sqrt()
            } else {
                1.0
            }
        }),
    );
    let mut hs = sys.h.clone();
    for i in 0..n {
        for j in 0..n {
            hs[(i, j)] *= d[i] * d[j];
        }
    }
    let bs = sys.b.component_mul(&d);
    let lu = Lu::factor(&hs)?;
    let mut y = lu.solve(&bs);
    let r = &bs - &hs * &y;
    y += lu.solve(&r);
    Ok(y.component_mul(&d))
}

/// Writes (H, b) in Matrix Market coordinate text format. H is emitted as a
/// general coordinate matrix, b as a dense array appendix in a second
/// section separated by a comment line.
pub fn write_matrix_market<W: Write>(sys: &SymBlockSystem, w: &mut W) -> std::io::Result<()> {
    let nnz = sys.h.iter().filter(|v| **v != 0.0).count();
    writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
    writeln!(w, "{} {} {}", sys.dim, sys.dim, nnz)?;
    for j in 0..sys.dim {
        for i in 0..sys.dim {
            let v = sys.h[(i, j)];
            if v != 0.0 {
                writeln!(w, "{} {} {:.17e}", i + 1, j + 1, v)?;
            }
        }
    }
    writeln!(w, "% rhs")?;
    writeln!(w, "%%MatrixMarket matrix array real general")?;
    writeln!(w, "{} 1", sys.dim)?;
    for i in 0..sys.dim {
        writeln!(w, "{:.17e}", sys.b[i])?;
    }
    Ok(())
}
