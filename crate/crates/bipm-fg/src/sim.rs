//! Closed-loop MPC harness: driving-cycle ingestion, plant rollout, the
//! receding-horizon solve loop with warm starts, and per-step statistics.

use crate::al::{solve_al, AlConfig};
use crate::bipm::{solve, BipmConfig};
use crate::macc::{build_macc_graph, warm_start, MaccError, MaccParams, Preview};
use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write as _;
use std::path::Path;
use thiserror::Error;

/// Preceding-vehicle speed and speed-limit profiles resampled to the MPC
/// grid: sample `i` is at time `i * ts`.
#[derive(Clone, Debug)]
pub struct DrivingCycle {
    pub ts: f64,
    pub v_p: Vec<f64>,
    pub v_max: Vec<f64>,
}

#[derive(Error, Debug)]
pub enum SimError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("cycle parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("cycle holds {got} samples but horizon {n} needs at least {needed}")]
    CycleTooShort { needed: usize, got: usize, n: usize },
    #[error("empty trace")]
    EmptyTrace,
    #[error(transparent)]
    Macc(#[from] MaccError),
}

/// Loads a driving cycle from CSV with header `t_s,v_p_mps[,v_max_mps]` and
/// resamples it to the `ts` grid by linear interpolation. A missing speed
/// limit column falls back to the constant `default_v_max`.
pub fn load_cycle(path: &Path, ts: f64, default_v_max: f64) -> Result<DrivingCycle, SimError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| SimError::Parse {
            line: 1,
            msg: e.to_string(),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| SimError::Parse {
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    let has_vmax = match cols.as_slice() {
        ["t_s", "v_p_mps"] => false,
        ["t_s", "v_p_mps", "v_max_mps"] => true,
        other => {
            return Err(SimError::Parse {
                line: 1,
                msg: format!("unexpected header {other:?}, want t_s,v_p_mps[,v_max_mps]"),
            })
        }
    };

    let mut t = Vec::new();
    let mut v_p = Vec::new();
    let mut v_max = Vec::new();
    for (idx, rec) in reader.records().enumerate() {
        let line = idx + 2; // header is line 1
        let rec = rec.map_err(|e| SimError::Parse {
            line,
            msg: e.to_string(),
        })?;
        let field = |k: usize, name: &str| -> Result<f64, SimError> {
            rec.get(k)
                .ok_or_else(|| SimError::Parse {
                    line,
                    msg: format!("missing column {name}"),
                })?
                .parse::<f64>()
                .map_err(|e| SimError::Parse {
                    line,
                    msg: format!("bad {name}: {e}"),
                })
        };
        let ti = field(0, "t_s")?;
        let vi = field(1, "v_p_mps")?;
        let vm = if has_vmax {
            field(2, "v_max_mps")?
        } else {
            default_v_max
        };
        if !ti.is_finite() || !vi.is_finite() || !vm.is_finite() {
            return Err(SimError::Parse {
                line,
                msg: "non-finite value".into(),
            });
        }
        if let Some(&prev) = t.last() {
            if ti <= prev {
                return Err(SimError::Parse {
                    line,
                    msg: format!("time {ti} not strictly increasing (previous {prev})"),
                });
            }
        }
        if vi < 0.0 || vm < 0.0 {
            return Err(SimError::Parse {
                line,
                msg: "negative speed".into(),
            });
        }
        t.push(ti);
        v_p.push(vi);
        v_max.push(vm);
    }
    if t.is_empty() {
        return Err(SimError::Parse {
            line: 2,
            msg: "cycle has no data rows".into(),
        });
    }

    // Resample onto the grid t[0] + i*ts, inclusive of the final sample.
    let t0 = t[0];
    let span = t[t.len() - 1] - t0;
    let count = (span / ts + 1e-9).floor() as usize + 1;
    let interp = |ys: &[f64], tq: f64| -> f64 {
        let mut j = 1;
        while j < t.len() - 1 && t[j] < tq {
            j += 1;
        }
        if t.len() == 1 {
            return ys[0];
        }
        let (ta, tb) = (t[j - 1], t[j]);
        let w = ((tq - ta) / (tb - ta)).clamp(0.0, 1.0);
        ys[j - 1] * (1.0 - w) + ys[j] * w
    };
    let mut rv_p = Vec::with_capacity(count);
    let mut rv_max = Vec::with_capacity(count);
    for i in 0..count {
        let tq = t0 + i as f64 * ts;
        rv_p.push(interp(&v_p, tq));
        rv_max.push(interp(&v_max, tq));
    }
    Ok(DrivingCycle {
        ts,
        v_p: rv_p,
        v_max: rv_max,
    })
}

/// Generates a seeded synthetic urban stop-and-go cycle of the given
/// duration: piecewise speed targets in [0.5, 18] m/s held for 4–15 s and
/// approached with accelerations within ±2 m/s². The speed limit is a
/// constant 20 m/s.
pub fn synthetic_cycle(seed: u64, ts: f64, duration_s: f64) -> DrivingCycle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = (duration_s / ts).round() as usize + 1;
    let mut v: f64 = rng.gen_range(6.0..12.0);
    let mut target = v;
    let mut hold: f64 = rng.gen_range(4.0..15.0);
    let a_max = 2.0;
    let mut v_p = Vec::with_capacity(count);
    for _ in 0..count {
        v_p.push(v);
        if (v - target).abs() < 0.5 * a_max * ts {
            v = target;
            hold -= ts;
            if hold <= 0.0 {
                target = rng.gen_range(0.5..18.0);
                hold = rng.gen_range(4.0..15.0);
            }
        } else {
            let a = (target - v).clamp(-a_max, a_max);
            v += a * ts;
        }
        v = v.max(0.3);
    }
    DrivingCycle {
        ts,
        v_p,
        v_max: vec![20.0; count],
    }
}

/// One plant step: the MPC's own velocity and trapezoidal gap dynamics,
/// with the speed floored at zero (the plant cannot reverse).
pub fn step_plant(
    v: f64,
    d: f64,
    f_t: f64,
    f_b: f64,
    v_p_now: f64,
    v_p_next: f64,
    params: &MaccParams,
) -> (f64, f64) {
    let v_next =
        (v + params.ts / params.m_eq * (f_t - f_b - (params.c0 + params.c1 * v))).max(0.0);
    let d_next = d + 0.5 * params.ts * ((v_p_now + v_p_next) - (v + v_next));
    (v_next, d_next)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolverChoice {
    Bipm,
    Al,
}

impl SolverChoice {
    pub fn name(&self) -> &'static str {
        match self {
            SolverChoice::Bipm => "bipm",
            SolverChoice::Al => "al",
        }
    }
}

/// Solver backend plus its configuration for one closed-loop run.
#[derive(Clone, Debug)]
pub enum SolverSetup {
    Bipm(BipmConfig),
    Al(AlConfig),
}

impl SolverSetup {
    pub fn choice(&self) -> SolverChoice {
        match self {
            SolverSetup::Bipm(_) => SolverChoice::Bipm,
            SolverSetup::Al(_) => SolverChoice::Al,
        }
    }
}

/// Per-MPC-step record of the closed-loop run.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: usize,
    pub t_s: f64,
    pub solver: SolverChoice,
    pub iters: usize,
    pub wall_ms: f64,
    pub converged: bool,
    pub f_t: f64,
    pub f_b: f64,
    /// Realized plant state after applying the step's controls.
    pub v: f64,
    pub d: f64,
    /// max(0, g) over all inequality rows at the accepted solution.
    pub max_g_viol: f64,
    /// max |h| over all equality rows at the accepted solution.
    pub max_h_viol: f64,
}

#[derive(Clone, Debug)]
pub struct RunTrace {
    pub solver: SolverChoice,
    pub horizon: usize,
    pub steps: Vec<StepRecord>,
}

/// Options for [`run_closed_loop`].
#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Disable warm starting (every solve cold-starts). Default false.
    pub cold_start: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { cold_start: false }
    }
}

fn preview_window(cycle: &DrivingCycle, k: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let last = cycle.v_p.len() - 1;
    let v_p = (0..=n).map(|i| cycle.v_p[(k + i).min(last)]).collect();
    let v_max = (0..=n).map(|i| cycle.v_max[(k + i).min(last)]).collect();
    (v_p, v_max)
}

/// Runs the receding-horizon loop over the whole cycle (one MPC step per
/// grid interval). Each step builds the preview window, warm-starts from
/// the shifted previous solution, solves with the chosen backend, and
/// applies the first control to the plant. Non-converged solves apply the
/// best iterate and are flagged; warm-start repair failures fall back to an
/// emergency braking step and the run continues.
pub fn run_closed_loop(
    cycle: &DrivingCycle,
    params: &MaccParams,
    setup: &SolverSetup,
    n: usize,
    options: &RunOptions,
) -> Result<RunTrace, SimError> {
    if cycle.v_p.len() < n + 1 {
        return Err(SimError::CycleTooShort {
            needed: n + 1,
            got: cycle.v_p.len(),
            n,
        });
    }
    let n_steps = cycle.v_p.len() - 1;
    let mut v = cycle.v_p[0];
    let mut d = params.d_min + params.h_track * v;
    let mut f_t_prev = params.c0 + params.c1 * v;
    let mut f_b_prev = 0.0;
    let mut prev_sol: Option<DVector<f64>> = None;
    let mut steps = Vec::with_capacity(n_steps);

    for k in 0..n_steps {
        let (v_p, v_max) = preview_window(cycle, k, n);
        let preview = Preview {
            v_p,
            v_max,
            f_t_prev,
            f_b_prev,
            v0: v,
            d0: d,
        };
        let started = std::time::Instant::now();
        // (iterations, converged, decision vector, max_g, max_h); None means
        // no usable iterate at all (warm-start repair or build failure).
        let solved: Option<(usize, bool, DVector<f64>, f64, f64)> = (|| {
            let warm = if options.cold_start {
                None
            } else {
                prev_sol.as_ref()
            };
            let guess = warm_start(warm, &preview, params, n).ok()?;
            let mut macc = build_macc_graph(params, n, &preview, &guess).ok()?;
            // A solver error mid-run (e.g. a singular system) still leaves
            // the last accepted iterate in the graph; apply it flagged, like
            // a budget-exhausted solve.
            let (iters, converged) = match setup {
                SolverSetup::Bipm(cfg) => match solve(&mut macc.graph, cfg) {
                    Ok(report) => (report.total_iterations, report.converged),
                    Err(_) => (0, false),
                },
                SolverSetup::Al(cfg) => match solve_al(&mut macc.graph, cfg) {
                    Ok(report) => (report.total_iterations, report.converged),
                    Err(_) => (0, false),
                },
            };
            let g = macc.graph.inequality_values().ok()?;
            let h = macc.graph.equality_values().ok()?;
            let max_g = g.iter().fold(0.0f64, |m, &x| m.max(x));
            let max_h = h.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
            let decisions = DVector::from_iterator(
                7 * n,
                macc.graph.state().iter().take(7 * n).cloned(),
            );
            Some((iters, converged, decisions, max_g, max_h))
        })();
        let wall_ms = started.elapsed().as_secs_f64() * 1e3;

        let (f_t, f_b, iters, converged, max_g_viol, max_h_viol) = match &solved {
            Some((iters, converged, sol, max_g, max_h)) => {
                prev_sol = Some(sol.clone());
                (sol[2], sol[3], *iters, *converged, *max_g, *max_h)
            }
            None => {
                // Emergency fallback: coast and brake, clipping the braking
                // force so the plant stops rather than reversing.
                prev_sol = None;
                let f_b = (params.m_eq / params.ts * v - params.c0 - params.c1 * v)
                    .clamp(0.0, params.f_b_max);
                (0.0, f_b, 0, false, f64::NAN, f64::NAN)
            }
        };

        let (v_next, d_next) = step_plant(
            v,
            d,
            f_t,
            f_b,
            cycle.v_p[k],
            cycle.v_p[(k + 1).min(cycle.v_p.len() - 1)],
            params,
        );
        v = v_next;
        d = d_next;
        f_t_prev = f_t;
        f_b_prev = f_b;

        steps.push(StepRecord {
            step: k,
            t_s: k as f64 * cycle.ts,
            solver: setup.choice(),
            iters,
            wall_ms,
            converged,
            f_t,
            f_b,
            v,
            d,
            max_g_viol,
            max_h_viol,
        });
    }
    Ok(RunTrace {
        solver: setup.choice(),
        horizon: n,
        steps,
    })
}

/// Aggregate statistics over a trace: mean, max, min, and the population
/// standard deviation of iteration counts, plus wall-time mean/max/min.
#[derive(Clone, Copy, Debug)]
pub struct Aggregate {
    pub avg_iters: f64,
    pub max_iters: usize,
    pub min_iters: usize,
    pub sd_iters: f64,
    pub avg_ms: f64,
    pub max_ms: f64,
    pub min_ms: f64,
}

pub fn aggregate(trace: &RunTrace) -> Result<Aggregate, SimError> {
    if trace.steps.is_empty() {
        return Err(SimError::EmptyTrace);
    }
    let count = trace.steps.len() as f64;
    let avg_iters = trace.steps.iter().map(|s| s.iters as f64).sum::<f64>() / count;
    let sd_iters = (trace
        .steps
        .iter()
        .map(|s| (s.iters as f64 - avg_iters).powi(2))
        .sum::<f64>()
        / count)
        .sqrt();
    let avg_ms = trace.steps.iter().map(|s| s.wall_ms).sum::<f64>() / count;
    Ok(Aggregate {
        avg_iters,
        max_iters: trace.steps.iter().map(|s| s.iters).max().unwrap(),
        min_iters: trace.steps.iter().map(|s| s.iters).min().unwrap(),
        sd_iters,
        avg_ms,
        max_ms: trace.steps.iter().map(|s| s.wall_ms).fold(f64::MIN, f64::max),
        min_ms: trace.steps.iter().map(|s| s.wall_ms).fold(f64::MAX, f64::min),
    })
}

pub const TRACE_HEADER: &str =
    "step,t_s,solver,iters,wall_ms,converged,F_t,F_b,v,d,max_g_viol,max_h_viol";

/// Writes a trace as CSV with the canonical column set.
pub fn write_trace(trace: &RunTrace, path: &Path) -> Result<(), SimError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{TRACE_HEADER}")?;
    for s in &trace.steps {
        writeln!(
            f,
            "{},{:.3},{},{},{:.4},{},{:.6},{:.6},{:.6},{:.6},{:.6e},{:.6e}",
            s.step,
            s.t_s,
            s.solver.name(),
            s.iters,
            s.wall_ms,
            s.converged,
            s.f_t,
            s.f_b,
            s.v,
            s.d,
            s.max_g_viol,
            s.max_h_viol
        )?;
    }
    Ok(())
}

/// Reads a trace CSV written by [`write_trace`].
pub fn read_trace(path: &Path) -> Result<RunTrace, SimError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| SimError::Parse {
            line: 1,
            msg: e.to_string(),
        })?;
    let mut steps = Vec::new();
    let mut solver = SolverChoice::Bipm;
    for (idx, rec) in reader.records().enumerate() {
        let line = idx + 2;
        let rec = rec.map_err(|e| SimError::Parse {
            line,
            msg: e.to_string(),
        })?;
        let get = |k: usize| -> Result<&str, SimError> {
            rec.get(k).ok_or_else(|| SimError::Parse {
                line,
                msg: format!("missing column {k}"),
            })
        };
        let parse_f = |k: usize| -> Result<f64, SimError> {
            get(k)?.parse().map_err(|e| SimError::Parse {
                line,
                msg: format!("column {k}: {e}"),
            })
        };
        solver = match get(2)? {
            "al" => SolverChoice::Al,
            _ => SolverChoice::Bipm,
        };
        steps.push(StepRecord {
            step: get(0)?.parse().map_err(|e| SimError::Parse {
                line,
                msg: format!("step: {e}"),
            })?,
            t_s: parse_f(1)?,
            solver,
            iters: get(3)?.parse().map_err(|e| SimError::Parse {
                line,
                msg: format!("iters: {e}"),
            })?,
            wall_ms: parse_f(4)?,
            converged: get(5)? == "true",
            f_t: parse_f(6)?,
            f_b: parse_f(7)?,
            v: parse_f(8)?,
            d: parse_f(9)?,
            max_g_viol: parse_f(10)?,
            max_h_viol: parse_f(11)?,
        });
    }
    Ok(RunTrace {
        solver,
        horizon: 0,
        steps,
    })
}
