//! Closed-loop harness behavior over full synthetic cycles.

use bipm_fg::bipm::BipmConfig;
use bipm_fg::macc::MaccParams;
use bipm_fg::sim::{run_closed_loop, synthetic_cycle, RunOptions, SolverSetup};

/// Warm starting never costs iterations on average versus cold starting.
#[test]
fn warm_start_is_at_least_as_fast_as_cold() {
    let params = MaccParams::default();
    let cycle = synthetic_cycle(7, params.ts, 60.0);
    let setup = SolverSetup::Bipm(BipmConfig::default());
    let warm = run_closed_loop(&cycle, &params, &setup, 6, &RunOptions::default()).unwrap();
    let cold = run_closed_loop(
        &cycle,
        &params,
        &setup,
        6,
        &RunOptions { cold_start: true },
    )
    .unwrap();
    assert_eq!(warm.steps.len(), 600);
    assert_eq!(cold.steps.len(), 600);
    let avg = |t: &bipm_fg::sim::RunTrace| {
        t.steps.iter().map(|s| s.iters as f64).sum::<f64>() / t.steps.len() as f64
    };
    let (aw, ac) = (avg(&warm), avg(&cold));
    assert!(
        aw <= ac,
        "warm-start average {aw:.2} exceeds cold-start average {ac:.2}"
    );
}

/// A 60 s cycle at Ts = 0.1 s produces exactly 600 MPC steps.
#[test]
fn trace_length_matches_cycle() {
    let params = MaccParams::default();
    let cycle = synthetic_cycle(3, params.ts, 60.0);
    let trace = run_closed_loop(
        &cycle,
        &params,
        &SolverSetup::Bipm(BipmConfig::default()),
        3,
        &RunOptions::default(),
    )
    .unwrap();
    assert_eq!(trace.steps.len(), 600);
    // Time stamps lie on the Ts grid.
    for (k, s) in trace.steps.iter().enumerate() {
        assert_eq!(s.step, k);
        assert!((s.t_s - k as f64 * params.ts).abs() < 1e-9);
    }
}
