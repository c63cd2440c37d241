//! Adaptive-cruise-control MPC benchmark problem built as a factor graph.
//!
//! Each horizon step carries seven scalar decision variables
//! `[v, d, F_t, F_b, delta_far, delta_Ft, delta_Fb]` (speed and gap at the
//! end of the step, traction/braking forces over the step, and slack
//! magnitudes), two scalar dynamics equality factors, and thirteen scalar
//! inequality constraints: nine plain bounds plus the two absolute-value
//! force-rate constraints split into two linear rows each.

use crate::graph::{
    affine_evaluator, Evaluator, FactorGraph, FactorId, GraphError, VarId, VarKind,
};
use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::Deserialize;
use thiserror::Error;

/// Vehicle, constraint, and cost-weight parameters.
///
/// The shipped defaults are self-consistent placeholders for a mid-size
/// battery-electric vehicle; they are tunable via JSON config and are not
/// calibrated against any particular car.
#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaccParams {
    /// Sampling interval [s].
    #[serde(rename = "Ts")]
    pub ts: f64,
    /// Equivalent vehicle mass [kg].
    pub m_eq: f64,
    /// Traction force bound [N].
    #[serde(rename = "F_t_max")]
    pub f_t_max: f64,
    /// Braking force bound [N].
    #[serde(rename = "F_b_max")]
    pub f_b_max: f64,
    /// Driveline envelope intercept [N].
    pub a20: f64,
    /// Driveline envelope slope [N s/m], typically negative.
    pub a21: f64,
    /// Minimum standstill gap [m].
    pub d_min: f64,
    /// Safety time headway [s].
    pub h_safety: f64,
    /// Tracking time headway [s].
    pub h_track: f64,
    /// Power-map coefficients [W per SI-consistent monomial of v and F_t].
    pub p00: f64,
    pub p10: f64,
    pub p01: f64,
    pub p20: f64,
    pub p11: f64,
    pub p02: f64,
    /// Resistive force model F_resist = c0 + c1 v [N], [N s/m].
    pub c0: f64,
    pub c1: f64,
    /// Braking-cost weight (phi_2).
    pub w1: f64,
    /// Tracking-slack weight (phi_3).
    pub w2: f64,
    /// Traction rate-slack weight (phi_4).
    pub w3: f64,
    /// Braking rate-slack weight (phi_5).
    pub w4: f64,
    /// Scale of the quadratic power cost (phi_1).
    pub omega_p: f64,
}

impl Default for MaccParams {
    fn default() -> Self {
        MaccParams {
            ts: 0.1,
            m_eq: 1600.0,
            f_t_max: 4000.0,
            f_b_max: 6000.0,
            a20: 6000.0,
            a21: -90.0,
            d_min: 5.0,
            h_safety: 1.2,
            h_track: 1.8,
            p00: 500.0,
            p10: -30.0,
            p01: 0.2,
            p20: 2.5,
            p11: 0.02,
            p02: 1e-3,
            c0: 120.0,
            c1: 5.0,
            w1: 3.0,
            w2: 300.0,
            w3: 3.0,
            w4: 3.0,
            omega_p: 0.03,
        }
    }
}

impl MaccParams {
    pub fn from_json_str(s: &str) -> Result<Self, MaccError> {
        serde_json::from_str(s).map_err(|e| MaccError::Config(e.to_string()))
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<Self, MaccError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| MaccError::Config(e.to_string()))?;
        Self::from_json_str(&text)
    }
}

/// Measured state and preview data for one MPC solve.
#[derive(Clone, Debug)]
pub struct Preview {
    /// Preceding-vehicle speeds over the horizon, length >= N+1 [m/s].
    pub v_p: Vec<f64>,
    /// Speed limits over the horizon, length >= N+1 [m/s].
    pub v_max: Vec<f64>,
    /// Forces applied over the previous interval [N].
    pub f_t_prev: f64,
    pub f_b_prev: f64,
    /// Current measured host speed [m/s] and gap [m].
    pub v0: f64,
    pub d0: f64,
}

/// Variable ids of one horizon step.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub v: VarId,
    pub d: VarId,
    pub f_t: VarId,
    pub f_b: VarId,
    pub delta_far: VarId,
    pub delta_f_t: VarId,
    pub delta_f_b: VarId,
}

/// Built MACC graph plus structural bookkeeping.
pub struct MaccGraph {
    pub graph: FactorGraph,
    pub horizon: usize,
    pub steps: Vec<StepVars>,
    pub decision_dim: usize,
    pub equality_count: usize,
    /// Inequality constraint count per the problem statement's q = 13N
    /// accounting (the split |.| rows counted individually).
    pub inequality_family_count: usize,
    /// Scalar inequality rows actually present in the graph. All factors
    /// here are single-row, so this equals the family count (13 per step).
    pub inequality_row_count: usize,
    /// Constraint label per inequality factor, e.g. "12d[i=2]".
    pub ineq_labels: Vec<String>,
}

#[derive(Error, Debug)]
pub enum MaccError {
    #[error("horizon must be >= 1")]
    BadHorizon,
    #[error("preview arrays must hold at least {expected} samples, got {got}")]
    PreviewTooShort { expected: usize, got: usize },
    #[error("invalid preview: {0}")]
    BadPreview(String),
    #[error("guess has length {got}, expected {expected}")]
    GuessLength { expected: usize, got: usize },
    #[error("power-map quadratic is not positive definite (min eigenvalue {0})")]
    QcNotSpd(f64),
    #[error("initial guess infeasible for constraints: {0:?}")]
    InfeasibleGuess(Vec<(String, f64)>),
    #[error("no strictly feasible repair at step {step}: {detail}")]
    NoFeasibleRepair { step: usize, detail: String },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Canonical form of the quadratic power cost: residual center and weight
/// such that phi_1 = |[v; F_t] + center|^2_weight (constant term dropped).
pub fn power_cost_canonical(p: &MaccParams) -> Result<(Vector2<f64>, Matrix2<f64>), MaccError> {
    let q_c = Matrix2::new(2.0 * p.p20, p.p11, p.p11, 2.0 * p.p02);
    let eigs = q_c.symmetric_eigenvalues();
    let min_eig = eigs.min();
    if min_eig <= 0.0 {
        return Err(MaccError::QcNotSpd(min_eig));
    }
    let b_c = Vector2::new(p.p10, p.p01);
    let center = 0.5 * q_c.try_inverse().expect("SPD matrix is invertible") * b_c;
    let weight = p.omega_p * p.ts * q_c;
    Ok((center, weight))
}

/// Previous-interval force reference for a rate constraint: the constant
/// preview value at the first step, the previous step's variable afterwards.
pub enum PrevForce {
    Const(f64),
    Var(VarId),
}

/// Adds the two linear inequality factors equivalent to
/// `|F_curr - F_prev| - delta <= 0`.
pub fn split_abs_rate(
    graph: &mut FactorGraph,
    f_curr: VarId,
    f_prev: PrevForce,
    delta: VarId,
) -> Result<(FactorId, FactorId), GraphError> {
    let build = |sign: f64, prev: &PrevForce| -> (Vec<VarId>, Evaluator) {
        match prev {
            PrevForce::Const(c) => (
                vec![f_curr, delta],
                affine_evaluator(
                    vec![
                        DMatrix::from_element(1, 1, sign),
                        DMatrix::from_element(1, 1, -1.0),
                    ],
                    DVector::from_element(1, -sign * c),
                ),
            ),
            PrevForce::Var(p) => (
                vec![f_curr, *p, delta],
                affine_evaluator(
                    vec![
                        DMatrix::from_element(1, 1, sign),
                        DMatrix::from_element(1, 1, -sign),
                        DMatrix::from_element(1, 1, -1.0),
                    ],
                    DVector::zeros(1),
                ),
            ),
        }
    };
    let (vars, ev) = build(1.0, &f_prev);
    let plus = graph.add_inequality_factor(vars, 1, ev)?;
    let (vars, ev) = build(-1.0, &f_prev);
    let minus = graph.add_inequality_factor(vars, 1, ev)?;
    Ok((plus, minus))
}

fn check_preview(preview: &Preview, n: usize) -> Result<(), MaccError> {
    for (name, arr) in [("v_p", &preview.v_p), ("v_max", &preview.v_max)] {
        if arr.len() < n + 1 {
            return Err(MaccError::PreviewTooShort {
                expected: n + 1,
                got: arr.len(),
            });
        }
        if arr.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(MaccError::BadPreview(format!(
                "{name} must be finite and non-negative"
            )));
        }
    }
    if !(preview.d0 > 0.0) {
        return Err(MaccError::BadPreview("d0 must be positive".into()));
    }
    if !(preview.v0 >= 0.0 && preview.v0.is_finite()) {
        return Err(MaccError::BadPreview("v0 must be finite and >= 0".into()));
    }
    Ok(())
}

/// Builds the horizon-N MACC factor graph at the given (strictly feasible)
/// initial guess, laid out step-major as `[v, d, F_t, F_b, delta_far,
/// delta_Ft, delta_Fb]` per step.
pub fn build_macc_graph(
    params: &MaccParams,
    n: usize,
    preview: &Preview,
    guess: &DVector<f64>,
) -> Result<MaccGraph, MaccError> {
    if n == 0 {
        return Err(MaccError::BadHorizon);
    }
    check_preview(preview, n)?;
    if guess.len() != 7 * n {
        return Err(MaccError::GuessLength {
            expected: 7 * n,
            got: guess.len(),
        });
    }
    let (center, weight) = power_cost_canonical(params)?;

    let mut graph = FactorGraph::new();
    let mut steps = Vec::with_capacity(n);
    for i in 0..n {
        let base = 7 * i;
        let mut add = |k: usize| -> Result<VarId, GraphError> {
            graph.add_variable(1, VarKind::Decision, &[guess[base + k]])
        };
        steps.push(StepVars {
            v: add(0)?,
            d: add(1)?,
            f_t: add(2)?,
            f_b: add(3)?,
            delta_far: add(4)?,
            delta_f_t: add(5)?,
            delta_f_b: add(6)?,
        });
    }

    let ts = params.ts;
    let tm = ts / params.m_eq;
    let weight_dyn = DMatrix::from_row_slice(
        2,
        2,
        &[
            weight[(0, 0)],
            weight[(0, 1)],
            weight[(1, 0)],
            weight[(1, 1)],
        ],
    );
    let scalar_info = |w: f64| DMatrix::from_element(1, 1, w);
    let col = |v: f64| DMatrix::from_element(1, 1, v);

    let mut equality_count = 0usize;
    let mut family_count = 0usize;
    let mut row_count = 0usize;
    let mut ineq_labels: Vec<String> = Vec::new();

    for i in 0..n {
        let s = steps[i];
        let prev_v = (i > 0).then(|| steps[i - 1].v);

        // phi_1: quadratic power cost on (interval-start speed, traction).
        if let Some(pv) = prev_v {
            graph.add_cost_factor(
                vec![pv, s.f_t],
                2,
                weight_dyn.clone(),
                affine_evaluator(
                    vec![
                        DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
                        DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
                    ],
                    DVector::from_column_slice(&[center[0], center[1]]),
                ),
            )?;
        } else {
            graph.add_cost_factor(
                vec![s.f_t],
                2,
                weight_dyn.clone(),
                affine_evaluator(
                    vec![DMatrix::from_column_slice(2, 1, &[0.0, 1.0])],
                    DVector::from_column_slice(&[preview.v0 + center[0], center[1]]),
                ),
            )?;
        }
        // phi_2..phi_5: braking and slack penalties.
        for (var, w) in [
            (s.f_b, params.w1),
            (s.delta_far, params.w2),
            (s.delta_f_t, params.w3),
            (s.delta_f_b, params.w4),
        ] {
            graph.add_cost_factor(
                vec![var],
                1,
                scalar_info(w),
                affine_evaluator(vec![col(1.0)], DVector::zeros(1)),
            )?;
        }

        // 12b: velocity dynamics with affine resistive force at the
        // interval-start speed.
        if let Some(pv) = prev_v {
            graph.add_equality_factor(
                vec![s.v, pv, s.f_t, s.f_b],
                1,
                affine_evaluator(
                    vec![col(1.0), col(-1.0 + tm * params.c1), col(-tm), col(tm)],
                    DVector::from_element(1, tm * params.c0),
                ),
            )?;
        } else {
            let offset = tm * params.c0 + (tm * params.c1 - 1.0) * preview.v0;
            graph.add_equality_factor(
                vec![s.v, s.f_t, s.f_b],
                1,
                affine_evaluator(
                    vec![col(1.0), col(-tm), col(tm)],
                    DVector::from_element(1, offset),
                ),
            )?;
        }
        // 12c: gap dynamics, trapezoidal relative speed.
        let vp_sum = preview.v_p[i] + preview.v_p[i + 1];
        if i > 0 {
            graph.add_equality_factor(
                vec![s.d, steps[i - 1].d, s.v, steps[i - 1].v],
                1,
                affine_evaluator(
                    vec![col(1.0), col(-1.0), col(0.5 * ts), col(0.5 * ts)],
                    DVector::from_element(1, -0.5 * ts * vp_sum),
                ),
            )?;
        } else {
            graph.add_equality_factor(
                vec![s.d, s.v],
                1,
                affine_evaluator(
                    vec![col(1.0), col(0.5 * ts)],
                    DVector::from_element(1, -preview.d0 + 0.5 * ts * preview.v0
                        - 0.5 * ts * vp_sum),
                ),
            )?;
        }
        equality_count += 2;

        let mut label = |tag: &str| ineq_labels.push(format!("{tag}[i={i}]"));

        // 12d: safety gap.
        graph.add_inequality_factor(
            vec![s.v, s.d],
            1,
            affine_evaluator(
                vec![col(params.h_safety), col(-1.0)],
                DVector::from_element(1, params.d_min),
            ),
        )?;
        label("12d");
        // 12e: tracking band with slack.
        graph.add_inequality_factor(
            vec![s.d, s.v, s.delta_far],
            1,
            affine_evaluator(
                vec![col(1.0), col(-params.h_track), col(1.0)],
                DVector::from_element(1, -params.d_min),
            ),
        )?;
        label("12e");
        // 12f/12g: traction bounds.
        graph.add_inequality_factor(
            vec![s.f_t],
            1,
            affine_evaluator(vec![col(-1.0)], DVector::zeros(1)),
        )?;
        label("12f");
        graph.add_inequality_factor(
            vec![s.f_t],
            1,
            affine_evaluator(vec![col(1.0)], DVector::from_element(1, -params.f_t_max)),
        )?;
        label("12g");
        // 12h: driveline envelope at the interval-start speed.
        if let Some(pv) = prev_v {
            graph.add_inequality_factor(
                vec![s.f_t, pv],
                1,
                affine_evaluator(
                    vec![col(1.0), col(-params.a21)],
                    DVector::from_element(1, -params.a20),
                ),
            )?;
        } else {
            graph.add_inequality_factor(
                vec![s.f_t],
                1,
                affine_evaluator(
                    vec![col(1.0)],
                    DVector::from_element(1, -params.a20 - params.a21 * preview.v0),
                ),
            )?;
        }
        label("12h");
        // 12i/12j: braking bounds.
        graph.add_inequality_factor(
            vec![s.f_b],
            1,
            affine_evaluator(vec![col(-1.0)], DVector::zeros(1)),
        )?;
        label("12i");
        graph.add_inequality_factor(
            vec![s.f_b],
            1,
            affine_evaluator(vec![col(1.0)], DVector::from_element(1, -params.f_b_max)),
        )?;
        label("12j");
        // 12k/12l: speed limits on the end-of-interval speed.
        graph.add_inequality_factor(
            vec![s.v],
            1,
            affine_evaluator(vec![col(1.0)], DVector::from_element(1, -preview.v_max[i + 1])),
        )?;
        label("12k");
        graph.add_inequality_factor(
            vec![s.v],
            1,
            affine_evaluator(vec![col(-1.0)], DVector::zeros(1)),
        )?;
        label("12l");
        // 12m/12n: force-rate constraints, split into two rows each.
        let ft_prev = if i > 0 {
            PrevForce::Var(steps[i - 1].f_t)
        } else {
            PrevForce::Const(preview.f_t_prev)
        };
        split_abs_rate(&mut graph, s.f_t, ft_prev, s.delta_f_t)?;
        label("12m+");
        label("12m-");
        let fb_prev = if i > 0 {
            PrevForce::Var(steps[i - 1].f_b)
        } else {
            PrevForce::Const(preview.f_b_prev)
        };
        split_abs_rate(&mut graph, s.f_b, fb_prev, s.delta_f_b)?;
        label("12n+");
        label("12n-");

        family_count += 13;
        row_count += 13;
    }

    let macc = MaccGraph {
        graph,
        horizon: n,
        steps,
        decision_dim: 7 * n,
        equality_count,
        inequality_family_count: family_count,
        inequality_row_count: row_count,
        ineq_labels,
    };

    // Strict-interior check of the supplied guess.
    let g = macc.graph.inequality_values()?;
    let violations: Vec<(String, f64)> = g
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= 0.0)
        .map(|(k, &v)| (macc.ineq_labels[k].clone(), v))
        .collect();
    if !violations.is_empty() {
        return Err(MaccError::InfeasibleGuess(violations));
    }
    Ok(macc)
}

/// Builds a strictly feasible initial guess: shift the previous solution by
/// one step (repeating the last step) or cold-start from held speed, then
/// repair speeds, forces, and slacks with an `eps = 1e-2` interior margin.
///
/// The gap trajectory is taken as given (shifted, or propagated through the
/// gap dynamics on cold start); if no speed in `(eps, ...)` can keep the
/// safety-gap constraint strictly satisfied against it, repair fails.
pub fn warm_start(
    prev: Option<&DVector<f64>>,
    preview: &Preview,
    params: &MaccParams,
    n: usize,
) -> Result<DVector<f64>, MaccError> {
    if n == 0 {
        return Err(MaccError::BadHorizon);
    }
    check_preview(preview, n)?;
    let eps = 1e-2;
    let cold = prev.is_none();

    let mut v = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut ft = vec![eps; n];
    let mut fb = vec![eps; n];
    let mut dfar = vec![0.0; n];
    let mut dft = vec![0.0; n];
    let mut dfb = vec![0.0; n];

    if let Some(sol) = prev {
        if sol.len() != 7 * n {
            return Err(MaccError::GuessLength {
                expected: 7 * n,
                got: sol.len(),
            });
        }
        for i in 0..n {
            let src = 7 * (i + 1).min(n - 1);
            v[i] = sol[src];
            d[i] = sol[src + 1];
            ft[i] = sol[src + 2];
            fb[i] = sol[src + 3];
            dfar[i] = sol[src + 4];
            dft[i] = sol[src + 5];
            dfb[i] = sol[src + 6];
        }
    } else {
        for i in 0..n {
            v[i] = preview.v0;
        }
    }

    let mut v_prev = preview.v0;
    let mut d_prev = preview.d0;
    for i in 0..n {
        // Box part of the speed: strict interior of [0, v_max].
        let v_cap = preview.v_max[i + 1] - eps;
        if v_cap <= eps {
            return Err(MaccError::NoFeasibleRepair {
                step: i,
                detail: format!("speed limit {} leaves no interior", preview.v_max[i + 1]),
            });
        }
        v[i] = v[i].clamp(eps, v_cap);

        // Safety-gap bound on the speed. On cold start the gap is the
        // trapezoidal propagation d = A - (Ts/2) v, which makes the bound
        // (A - d_min - eps) / (h_safety + Ts/2); on warm start the shifted
        // gap is fixed.
        let safety_cap = if cold {
            let a = d_prev + 0.5 * params.ts * (preview.v_p[i] + preview.v_p[i + 1] - v_prev);
            (a - params.d_min - eps) / (params.h_safety + 0.5 * params.ts)
        } else {
            (d[i] - params.d_min - eps) / params.h_safety
        };
        if safety_cap < eps {
            return Err(MaccError::NoFeasibleRepair {
                step: i,
                detail: format!("safety gap (12d) admits no speed above {safety_cap:.4}"),
            });
        }
        v[i] = v[i].min(safety_cap);
        if cold {
            d[i] = d_prev
                + 0.5 * params.ts * (preview.v_p[i] + preview.v_p[i + 1] - v_prev - v[i]);
        }

        // Forces: strict interior of their boxes and the driveline envelope
        // at the interval-start speed.
        let ft_cap = params.f_t_max.min(params.a20 + params.a21 * v_prev) - eps;
        if ft_cap <= eps {
            return Err(MaccError::NoFeasibleRepair {
                step: i,
                detail: "traction envelope (12h) leaves no interior".into(),
            });
        }
        ft[i] = ft[i].clamp(eps, ft_cap);
        let fb_cap = params.f_b_max - eps;
        fb[i] = fb[i].clamp(eps, fb_cap.max(eps));

        // Slacks: inflate rate slacks above the realized force deltas, and
        // pull the tracking slack below its bound (it may go negative).
        let ft_ref = if i > 0 { ft[i - 1] } else { preview.f_t_prev };
        let fb_ref = if i > 0 { fb[i - 1] } else { preview.f_b_prev };
        dft[i] = dft[i].max((ft[i] - ft_ref).abs() + eps);
        dfb[i] = dfb[i].max((fb[i] - fb_ref).abs() + eps);
        let dfar_cap = params.d_min + params.h_track * v[i] - d[i] - eps;
        dfar[i] = dfar[i].min(dfar_cap);

        v_prev = v[i];
        d_prev = d[i];
    }

    let mut guess = DVector::zeros(7 * n);
    for i in 0..n {
        let base = 7 * i;
        guess[base] = v[i];
        guess[base + 1] = d[i];
        guess[base + 2] = ft[i];
        guess[base + 3] = fb[i];
        guess[base + 4] = dfar[i];
        guess[base + 5] = dft[i];
        guess[base + 6] = dfb[i];
    }
    Ok(guess)
}
