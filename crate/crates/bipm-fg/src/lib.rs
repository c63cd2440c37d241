//! Constrained factor-graph optimization.
//!
//! Variable nodes hold decision variables and Lagrange multipliers; factor
//! nodes contribute cost, equality-constraint, and inequality-constraint
//! blocks to a sparse symmetric Gauss-Newton system. Two solver backends
//! share the same graph front-end:
//!
//! * [`bipm`] — a barrier interior-point solver. Inequality constraints are
//!   encoded as dedicated factor nodes carrying a logarithmic barrier through
//!   a state-dependent diagonal information matrix, so the whole problem
//!   stays inside the Gauss-Newton block machinery.
//! * [`al`] — an augmented Lagrangian baseline with first-order multiplier
//!   updates and a shared, capped penalty parameter.
//!
//! The [`macc`] module builds the adaptive-cruise-control MPC benchmark
//! graph, and [`sim`] runs it closed loop against a simple longitudinal
//! plant. The `macc-bench` binary exposes benchmarking, parameter sweeps,
//! and plot-data extraction.

pub mod al;
pub mod bipm;
pub mod factors;
pub mod graph;
pub mod linalg;
pub mod macc;
pub mod sim;
pub mod solver;

pub use graph::{FactorGraph, FactorId, VarId, VarKind};
pub use solver::SolveReport;
