//! Factor-graph data model: typed variable and factor nodes, global state
//! vector layout, and increment application.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Handle to a variable node.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub struct VarId(pub usize);

/// Handle to a factor node.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub struct FactorId(pub usize);

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum VarKind {
    Decision,
    /// Lagrange multiplier attached to an equality factor. Created only by
    /// [`FactorGraph::add_equality_factor`].
    Multiplier,
}

#[derive(Debug)]
pub struct VariableNode {
    pub id: VarId,
    pub kind: VarKind,
    pub value: DVector<f64>,
}

impl VariableNode {
    pub fn dim(&self) -> usize {
        self.value.len()
    }
}

/// Residual and per-variable Jacobian blocks produced by an evaluator.
///
/// `jacobians[k]` is the `residual_dim x dim(var_k)` block for the k-th
/// connected decision variable.
pub struct FactorEval {
    pub value: DVector<f64>,
    pub jacobians: Vec<DMatrix<f64>>,
}

impl FactorEval {
    pub fn is_finite(&self) -> bool {
        self.value.iter().all(|v| v.is_finite())
            && self.jacobians.iter().all(|j| j.iter().all(|v| v.is_finite()))
    }
}

/// Pure function of the connected decision-variable values.
pub type Evaluator = Box<dyn Fn(&[&DVector<f64>]) -> FactorEval + Send + Sync>;

/// Builds an evaluator for an affine map `r(x) = sum_k J_k x_k + c`.
pub fn affine_evaluator(jacobians: Vec<DMatrix<f64>>, offset: DVector<f64>) -> Evaluator {
    Box::new(move |values: &[&DVector<f64>]| {
        let mut r = offset.clone();
        for (jac, x) in jacobians.iter().zip(values) {
            r += jac * *x;
        }
        FactorEval {
            value: r,
            jacobians: jacobians.clone(),
        }
    })
}

pub enum FactorKind {
    Cost {
        /// Symmetric PSD information matrix, `residual_dim x residual_dim`.
        info: DMatrix<f64>,
    },
    Equality {
        multiplier: VarId,
    },
    Inequality,
}

pub struct FactorNode {
    pub id: FactorId,
    pub kind: FactorKind,
    /// Connected variable ids. For equality factors the list ends with the
    /// auto-created multiplier node.
    pub connected: Vec<VarId>,
    pub residual_dim: usize,
    evaluator: Evaluator,
}

impl FactorNode {
    /// Connected variables excluding the trailing multiplier (if any); the
    /// evaluator is a function of these.
    pub fn decision_connected(&self) -> &[VarId] {
        match self.kind {
            FactorKind::Equality { .. } => &self.connected[..self.connected.len() - 1],
            _ => &self.connected,
        }
    }
}

#[derive(Error, Debug)]
pub enum GraphError {
    #[error("variable dimension must be >= 1")]
    ZeroDimension,
    #[error("non-finite value supplied for variable")]
    NonFiniteValue,
    #[error("initial value has length {got}, expected {expected}")]
    ValueLengthMismatch { expected: usize, got: usize },
    #[error("unknown variable id {0:?}")]
    UnknownVariable(VarId),
    #[error("increment has length {got}, expected total dim {expected}")]
    IncrementLengthMismatch { expected: usize, got: usize },
    #[error("step size {0} outside (0, 1]")]
    StepSizeOutOfRange(f64),
    #[error("residual dimension must be >= 1")]
    ZeroResidualDim,
    #[error("information matrix must be square of size {expected}, got {rows}x{cols}")]
    InfoShape {
        expected: usize,
        rows: usize,
        cols: usize,
    },
    #[error("information matrix is not symmetric positive semi-definite (eigenvalue {0})")]
    InfoNotPsd(f64),
    #[error("factor {factor:?} evaluated to non-finite residual or Jacobian")]
    NonFiniteEval { factor: FactorId },
    #[error(
        "factor {factor:?} Jacobian block {block} has shape {rows}x{cols}, expected {exp_rows}x{exp_cols}"
    )]
    JacobianShape {
        factor: FactorId,
        block: usize,
        rows: usize,
        cols: usize,
        exp_rows: usize,
        exp_cols: usize,
    },
    #[error("factor {factor:?} residual has length {got}, expected {expected}")]
    ResidualLength {
        factor: FactorId,
        expected: usize,
        got: usize,
    },
}

/// Bipartite graph of variable and factor nodes with a contiguous global
/// state layout. Variables occupy disjoint slices of `[0, total_dim)` in
/// insertion order.
#[derive(Default)]
pub struct FactorGraph {
    vars: Vec<VariableNode>,
    factors: Vec<FactorNode>,
    offsets: Vec<usize>,
    total_dim: usize,
}

impl FactorGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_variable(
        &mut self,
        dim: usize,
        kind: VarKind,
        initial_value: &[f64],
    ) -> Result<VarId, GraphError> {
        if dim == 0 {
            return Err(GraphError::ZeroDimension);
        }
        if initial_value.len() != dim {
            return Err(GraphError::ValueLengthMismatch {
                expected: dim,
                got: initial_value.len(),
            });
        }
        if !initial_value.iter().all(|v| v.is_finite()) {
            return Err(GraphError::NonFiniteValue);
        }
        let id = VarId(self.vars.len());
        self.vars.push(VariableNode {
            id,
            kind,
            value: DVector::from_column_slice(initial_value),
        });
        self.offsets.push(self.total_dim);
        self.total_dim += dim;
        Ok(id)
    }

    fn check_connected(&self, connected: &[VarId]) -> Result<(), GraphError> {
        for &v in connected {
            if v.0 >= self.vars.len() {
                return Err(GraphError::UnknownVariable(v));
            }
        }
        Ok(())
    }

    pub fn add_cost_factor(
        &mut self,
        connected: Vec<VarId>,
        residual_dim: usize,
        info: DMatrix<f64>,
        evaluator: Evaluator,
    ) -> Result<FactorId, GraphError> {
        self.check_connected(&connected)?;
        if residual_dim == 0 {
            return Err(GraphError::ZeroResidualDim);
        }
        if info.nrows() != residual_dim || info.ncols() != residual_dim {
            return Err(GraphError::InfoShape {
                expected: residual_dim,
                rows: info.nrows(),
                cols: info.ncols(),
            });
        }
        let asym = (&info - info.transpose()).amax();
        if asym > 1e-12 * (1.0 + info.amax()) {
            return Err(GraphError::InfoNotPsd(f64::NAN));
        }
        let min_eig = info
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -1e-10 * (1.0 + info.amax()) {
            return Err(GraphError::InfoNotPsd(min_eig));
        }
        let id = FactorId(self.factors.len());
        self.factors.push(FactorNode {
            id,
            kind: FactorKind::Cost { info },
            connected,
            residual_dim,
            evaluator,
        });
        Ok(id)
    }

    /// Adds an equality factor `h(x) = 0` of dimension `d_h`. A multiplier
    /// node of the same dimension is created, initialized to zero, and
    /// appended to the factor's connected list.
    pub fn add_equality_factor(
        &mut self,
        connected_decision: Vec<VarId>,
        d_h: usize,
        evaluator: Evaluator,
    ) -> Result<(FactorId, VarId), GraphError> {
        self.check_connected(&connected_decision)?;
        if d_h == 0 {
            return Err(GraphError::ZeroResidualDim);
        }
        let gamma0 = vec![0.0; d_h];
        let mult = self.add_variable(d_h, VarKind::Multiplier, &gamma0)?;
        let mut connected = connected_decision;
        connected.push(mult);
        let id = FactorId(self.factors.len());
        self.factors.push(FactorNode {
            id,
            kind: FactorKind::Equality { multiplier: mult },
            connected,
            residual_dim: d_h,
            evaluator,
        });
        Ok((id, mult))
    }

    pub fn add_inequality_factor(
        &mut self,
        connected: Vec<VarId>,
        d_g: usize,
        evaluator: Evaluator,
    ) -> Result<FactorId, GraphError> {
        self.check_connected(&connected)?;
        if d_g == 0 {
            return Err(GraphError::ZeroResidualDim);
        }
        let id = FactorId(self.factors.len());
        self.factors.push(FactorNode {
            id,
            kind: FactorKind::Inequality,
            connected,
            residual_dim: d_g,
            evaluator,
        });
        Ok(id)
    }

    pub fn var(&self, id: VarId) -> &VariableNode {
        &self.vars[id.0]
    }

    pub fn vars(&self) -> &[VariableNode] {
        &self.vars
    }

    pub fn factor(&self, id: FactorId) -> &FactorNode {
        &self.factors[id.0]
    }

    pub fn factors(&self) -> &[FactorNode] {
        &self.factors
    }

    /// Start index of a variable's slice in the global state vector.
    pub fn offset(&self, id: VarId) -> usize {
        self.offsets[id.0]
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    /// Concatenation of all variable values in offset order.
    pub fn state(&self) -> DVector<f64> {
        let mut s = DVector::zeros(self.total_dim);
        for v in &self.vars {
            s.rows_mut(self.offsets[v.id.0], v.dim()).copy_from(&v.value);
        }
        s
    }

    pub fn set_state(&mut self, state: &DVector<f64>) -> Result<(), GraphError> {
        if state.len() != self.total_dim {
            return Err(GraphError::IncrementLengthMismatch {
                expected: self.total_dim,
                got: state.len(),
            });
        }
        for v in &mut self.vars {
            v.value.copy_from(&state.rows(self.offsets[v.id.0], v.value.len()));
        }
        Ok(())
    }

    /// Advances every variable by `zeta` times its slice of `dx`, atomically.
    pub fn apply_increment(&mut self, dx: &DVector<f64>, zeta: f64) -> Result<(), GraphError> {
        if dx.len() != self.total_dim {
            return Err(GraphError::IncrementLengthMismatch {
                expected: self.total_dim,
                got: dx.len(),
            });
        }
        if !(zeta > 0.0 && zeta <= 1.0) {
            return Err(GraphError::StepSizeOutOfRange(zeta));
        }
        for v in &mut self.vars {
            v.value += dx.rows(self.offsets[v.id.0], v.value.len()) * zeta;
        }
        Ok(())
    }

    fn gather<'a>(&'a self, ids: &[VarId]) -> Vec<&'a DVector<f64>> {
        ids.iter().map(|&v| &self.vars[v.0].value).collect()
    }

    fn validate_eval(&self, f: &FactorNode, eval: &FactorEval) -> Result<(), GraphError> {
        if eval.value.len() != f.residual_dim {
            return Err(GraphError::ResidualLength {
                factor: f.id,
                expected: f.residual_dim,
                got: eval.value.len(),
            });
        }
        let dec = f.decision_connected();
        for (k, jac) in eval.jacobians.iter().enumerate() {
            let expected_cols = self.vars[dec[k].0].dim();
            if jac.nrows() != f.residual_dim || jac.ncols() != expected_cols {
                return Err(GraphError::JacobianShape {
                    factor: f.id,
                    block: k,
                    rows: jac.nrows(),
                    cols: jac.ncols(),
                    exp_rows: f.residual_dim,
                    exp_cols: expected_cols,
                });
            }
        }
        if !eval.is_finite() {
            return Err(GraphError::NonFiniteEval { factor: f.id });
        }
        Ok(())
    }

    /// Evaluates a factor at the current variable values.
    pub fn eval_factor(&self, id: FactorId) -> Result<FactorEval, GraphError> {
        let f = &self.factors[id.0];
        let values = self.gather(f.decision_connected());
        let eval = (f.evaluator)(&values);
        self.validate_eval(f, &eval)?;
        Ok(eval)
    }

    /// Evaluates a factor at a hypothetical global state (current values are
    /// left untouched).
    pub fn eval_factor_at(
        &self,
        id: FactorId,
        state: &DVector<f64>,
    ) -> Result<FactorEval, GraphError> {
        let f = &self.factors[id.0];
        let slices: Vec<DVector<f64>> = f
            .decision_connected()
            .iter()
            .map(|&v| DVector::from(state.rows(self.offsets[v.0], self.vars[v.0].dim()).clone_owned()))
            .collect();
        let refs: Vec<&DVector<f64>> = slices.iter().collect();
        let eval = (f.evaluator)(&refs);
        self.validate_eval(f, &eval)?;
        Ok(eval)
    }

    /// Stacked values of all inequality factors at the current state.
    pub fn inequality_values(&self) -> Result<DVector<f64>, GraphError> {
        self.inequality_values_at(&self.state())
    }

    /// Stacked values of all inequality factors at a hypothetical state.
    pub fn inequality_values_at(&self, state: &DVector<f64>) -> Result<DVector<f64>, GraphError> {
        let mut out = Vec::new();
        for f in &self.factors {
            if matches!(f.kind, FactorKind::Inequality) {
                let eval = self.eval_factor_at(f.id, state)?;
                out.extend(eval.value.iter());
            }
        }
        Ok(DVector::from_vec(out))
    }

    /// Stacked values of all equality factors at the current state.
    pub fn equality_values(&self) -> Result<DVector<f64>, GraphError> {
        let mut out = Vec::new();
        for f in &self.factors {
            if matches!(f.kind, FactorKind::Equality { .. }) {
                let eval = self.eval_factor(f.id)?;
                out.extend(eval.value.iter());
            }
        }
        Ok(DVector::from_vec(out))
    }
}
