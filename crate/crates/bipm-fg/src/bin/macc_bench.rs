//! Benchmark front-end for the MACC closed-loop comparison: `bench` runs
//! solver-by-horizon benchmarks and writes traces plus a summary table,
//! `sweep` grids solver parameters and reports iteration statistics per
//! case, and `plot-data` converts traces into aligned long-format series
//! for external plotting.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use bipm_fg::al::AlConfig;
use bipm_fg::bipm::BipmConfig;
use bipm_fg::macc::MaccParams;
use bipm_fg::sim::{
    aggregate, load_cycle, read_trace, run_closed_loop, synthetic_cycle, DrivingCycle, RunOptions,
    RunTrace, SolverSetup,
};

/// Duration of the bundled synthetic urban cycle in seconds.
const DEFAULT_CYCLE_SECONDS: f64 = 420.0;
const DEFAULT_V_MAX: f64 = 20.0;

#[derive(Parser)]
#[command(
    name = "macc-bench",
    version,
    about = "Adaptive-cruise-control MPC solver benchmark"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run closed-loop benchmarks per (solver, horizon) and summarize.
    Bench(BenchArgs),
    /// Grid-sweep solver parameters and report iteration statistics.
    Sweep(SweepArgs),
    /// Convert trace CSVs into aligned long-format plot series.
    PlotData(PlotArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON file with `params`, `bipm`, `al`, and (for sweep) `grid` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Driving-cycle CSV (`t_s,v_p_mps[,v_max_mps]`); default: synthetic cycle.
    #[arg(long)]
    cycle: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "bench_out")]
    out: PathBuf,
    /// Seed for the synthetic cycle when no `--cycle` is given.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Solver selection: bipm, al, or both.
    #[arg(long, default_value = "both")]
    solver: String,
    /// Comma-separated prediction horizons.
    #[arg(long, default_value = "3,6,20")]
    horizon: String,
    /// Exit with code 1 if any MPC step fails to converge.
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Solver to sweep: bipm or al.
    #[arg(long)]
    solver: String,
    /// Prediction horizon for every case.
    #[arg(long, default_value = "6")]
    horizon: String,
}

#[derive(Args)]
struct PlotArgs {
    /// Trace CSVs produced by `bench`; all must share a time base.
    traces: Vec<PathBuf>,
    /// Optional cycle CSV to add a reference-speed series.
    #[arg(long)]
    cycle: Option<PathBuf>,
    /// Output directory for the series files.
    #[arg(long, default_value = "plot_out")]
    out: PathBuf,
}

/// Optional overrides loaded from `--config`.
#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    params: Option<MaccParams>,
    bipm: Option<BipmConfig>,
    al: Option<AlConfig>,
    /// Sweep grid: recognized key -> list of values.
    grid: Option<BTreeMap<String, Vec<f64>>>,
}

/// Usage or I/O problems exit with code 2; strict-mode non-convergence with 1.
enum CliError {
    Usage(String),
    NonConvergence(usize),
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Bench(args) => cmd_bench(&args),
        Cmd::Sweep(args) => cmd_sweep(&args),
        Cmd::PlotData(args) => cmd_plot_data(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::NonConvergence(steps)) => {
            eprintln!("error: {steps} MPC step(s) did not converge (--strict)");
            ExitCode::from(1)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::usage(format!("bad config {}: {e}", path.display())))
}

fn load_or_synthesize_cycle(
    common: &CommonArgs,
    params: &MaccParams,
) -> Result<DrivingCycle, CliError> {
    match &common.cycle {
        Some(path) => load_cycle(path, params.ts, DEFAULT_V_MAX)
            .map_err(|e| CliError::usage(format!("cycle {}: {e}", path.display()))),
        None => Ok(synthetic_cycle(
            common.seed,
            params.ts,
            DEFAULT_CYCLE_SECONDS,
        )),
    }
}

fn parse_horizons(spec: &str) -> Result<Vec<usize>, CliError> {
    let horizons: Vec<usize> = spec
        .split(',')
        .map(|tok| {
            tok.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n >= 1)
                .ok_or_else(|| CliError::usage(format!("bad horizon {tok:?}: want integer >= 1")))
        })
        .collect::<Result<_, _>>()?;
    if horizons.is_empty() {
        return Err(CliError::usage("horizon list is empty"));
    }
    Ok(horizons)
}

fn solver_setups(
    selector: &str,
    cfg: &FileConfig,
) -> Result<Vec<SolverSetup>, CliError> {
    let bipm = SolverSetup::Bipm(cfg.bipm.clone().unwrap_or_default());
    let al = SolverSetup::Al(cfg.al.clone().unwrap_or_default());
    match selector {
        "bipm" => Ok(vec![bipm]),
        "al" => Ok(vec![al]),
        "both" => Ok(vec![bipm, al]),
        other => Err(CliError::usage(format!(
            "unknown solver {other:?}: want bipm, al, or both"
        ))),
    }
}

fn prepare_out_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::usage(format!("cannot create output dir {}: {e}", dir.display())))
}

fn create_file(path: &Path) -> Result<std::io::BufWriter<std::fs::File>, CliError> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::usage(format!("write {}: {e}", path.display()))
}

fn cmd_bench(args: &BenchArgs) -> Result<(), CliError> {
    let cfg = load_config(args.common.config.as_deref())?;
    let params = cfg.params.clone().unwrap_or_default();
    let setups = solver_setups(&args.solver, &cfg)?;
    let horizons = parse_horizons(&args.horizon)?;
    let cycle = load_or_synthesize_cycle(&args.common, &params)?;
    prepare_out_dir(&args.common.out)?;

    let summary_path = args.common.out.join("summary.csv");
    let mut summary = create_file(&summary_path)?;
    writeln!(
        summary,
        "solver,N,steps,nonconverged,avg_iter,max_iter,min_iter,sd_iter,avg_ms,max_ms,min_ms"
    )
    .map_err(|e| io_err(&summary_path, e))?;

    let mut nonconverged_total = 0usize;
    for setup in &setups {
        for &n in &horizons {
            let trace = run_closed_loop(&cycle, &params, setup, n, &RunOptions::default())
                .map_err(|e| CliError::usage(format!("run failed: {e}")))?;
            let name = setup.choice().name();
            let trace_path = args.common.out.join(format!("trace_{name}_N{n}.csv"));
            bipm_fg::sim::write_trace(&trace, &trace_path)
                .map_err(|e| CliError::usage(format!("write {}: {e}", trace_path.display())))?;
            let agg = aggregate(&trace).map_err(|e| CliError::usage(e.to_string()))?;
            let nonconverged = trace.steps.iter().filter(|s| !s.converged).count();
            nonconverged_total += nonconverged;
            writeln!(
                summary,
                "{name},{n},{},{nonconverged},{:.4},{},{},{:.4},{:.4},{:.4},{:.4}",
                trace.steps.len(),
                agg.avg_iters,
                agg.max_iters,
                agg.min_iters,
                agg.sd_iters,
                agg.avg_ms,
                agg.max_ms,
                agg.min_ms
            )
            .map_err(|e| io_err(&summary_path, e))?;
        }
    }
    drop(summary);
    if args.strict && nonconverged_total > 0 {
        return Err(CliError::NonConvergence(nonconverged_total));
    }
    Ok(())
}

/// Canonical sweep-key orders; also the set of recognized keys per solver.
const BIPM_KEYS: [&str; 4] = ["nu", "kappa0", "kappa_final", "max_inner"];
const AL_KEYS: [&str; 4] = ["rho_nu", "rho0", "rho_max", "max_inner"];

fn apply_sweep_value(setup: &mut SolverSetup, key: &str, value: f64) {
    match setup {
        SolverSetup::Bipm(c) => match key {
            "nu" => c.nu = value,
            "kappa0" => c.kappa0 = value,
            "kappa_final" => c.kappa_final = value,
            "max_inner" => c.max_inner_iter = value as usize,
            _ => unreachable!("unrecognized key filtered earlier"),
        },
        SolverSetup::Al(c) => match key {
            "rho_nu" => c.rho_nu = value,
            "rho0" => c.rho0 = value,
            "rho_max" => c.rho_max = value,
            "max_inner" => c.max_inner_iter = value as usize,
            _ => unreachable!("unrecognized key filtered earlier"),
        },
    }
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    let cfg = load_config(args.common.config.as_deref())?;
    let params = cfg.params.clone().unwrap_or_default();
    let base = match args.solver.as_str() {
        "bipm" => SolverSetup::Bipm(cfg.bipm.clone().unwrap_or_default()),
        "al" => SolverSetup::Al(cfg.al.clone().unwrap_or_default()),
        other => {
            return Err(CliError::usage(format!(
                "unknown solver {other:?}: sweep wants bipm or al"
            )))
        }
    };
    let recognized: &[&str] = match base {
        SolverSetup::Bipm(_) => &BIPM_KEYS,
        SolverSetup::Al(_) => &AL_KEYS,
    };
    let grid = cfg
        .grid
        .as_ref()
        .filter(|g| !g.is_empty())
        .ok_or_else(|| CliError::usage("sweep needs a non-empty `grid` in --config"))?;
    for key in grid.keys() {
        if !recognized.contains(&key.as_str()) {
            return Err(CliError::usage(format!(
                "unrecognized grid key {key:?} for solver {}: want one of {recognized:?}",
                args.solver
            )));
        }
    }
    if grid.values().any(|v| v.is_empty()) {
        return Err(CliError::usage("grid value lists must be non-empty"));
    }
    // Cartesian product in canonical key order.
    let keys: Vec<&str> = recognized
        .iter()
        .copied()
        .filter(|k| grid.contains_key(*k))
        .collect();
    let mut cases: Vec<Vec<f64>> = vec![vec![]];
    for key in &keys {
        let values = &grid[*key];
        cases = cases
            .into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |&v| {
                    let mut case = prefix.clone();
                    case.push(v);
                    case
                })
            })
            .collect();
    }

    let horizons = parse_horizons(&args.horizon)?;
    let n = horizons[0];
    let cycle = load_or_synthesize_cycle(&args.common, &params)?;
    prepare_out_dir(&args.common.out)?;

    // Fan cases out across workers; merge results by case index.
    struct CaseResult {
        avg: f64,
        max: usize,
        sd: f64,
        nonconverged: usize,
    }
    let results: Vec<Mutex<Option<Result<CaseResult, String>>>> =
        (0..cases.len()).map(|_| Mutex::new(None)).collect();
    let next_case = AtomicUsize::new(0);
    let workers = std::thread::available_parallelism()
        .map(|p| p.get())
        .unwrap_or(1)
        .min(cases.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next_case.fetch_add(1, Ordering::Relaxed);
                if idx >= cases.len() {
                    break;
                }
                let mut setup = base.clone();
                for (key, &value) in keys.iter().zip(&cases[idx]) {
                    apply_sweep_value(&mut setup, key, value);
                }
                let outcome = run_closed_loop(&cycle, &params, &setup, n, &RunOptions::default())
                    .map(|trace| {
                        let agg = aggregate(&trace).expect("non-empty trace");
                        CaseResult {
                            avg: agg.avg_iters,
                            max: agg.max_iters,
                            sd: agg.sd_iters,
                            nonconverged: trace.steps.iter().filter(|s| !s.converged).count(),
                        }
                    })
                    .map_err(|e| e.to_string());
                *results[idx].lock().unwrap() = Some(outcome);
            });
        }
    });

    let sweep_path = args.common.out.join(format!("sweep_{}.csv", args.solver));
    let mut out = create_file(&sweep_path)?;
    writeln!(
        out,
        "case,{},avg_iter,max_iter,sd_iter,nonconverged",
        keys.join(",")
    )
    .map_err(|e| io_err(&sweep_path, e))?;
    for (idx, case) in cases.iter().enumerate() {
        let slot = results[idx].lock().unwrap().take().expect("worker filled");
        let r = slot.map_err(|e| CliError::usage(format!("case {}: {e}", idx + 1)))?;
        let values: Vec<String> = case.iter().map(|v| format!("{v}")).collect();
        writeln!(
            out,
            "{},{},{:.4},{},{:.4},{}",
            idx + 1,
            values.join(","),
            r.avg,
            r.max,
            r.sd,
            r.nonconverged
        )
        .map_err(|e| io_err(&sweep_path, e))?;
    }
    Ok(())
}

fn cmd_plot_data(args: &PlotArgs) -> Result<(), CliError> {
    if args.traces.is_empty() {
        return Err(CliError::usage("plot-data needs at least one trace CSV"));
    }
    let mut traces: Vec<(String, RunTrace)> = Vec::new();
    for path in &args.traces {
        let trace = read_trace(path)
            .map_err(|e| CliError::usage(format!("trace {}: {e}", path.display())))?;
        if trace.steps.is_empty() {
            return Err(CliError::usage(format!(
                "trace {} has no steps",
                path.display()
            )));
        }
        let mut label = trace.steps[0].solver.name().to_string();
        if traces.iter().any(|(l, _)| *l == label) {
            // Disambiguate repeated solvers by file stem.
            label = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("trace{}", traces.len()));
        }
        traces.push((label, trace));
    }
    // All traces must share a time base.
    let base: Vec<(usize, f64)> = traces[0].1.steps.iter().map(|s| (s.step, s.t_s)).collect();
    for (label, trace) in &traces[1..] {
        let this: Vec<(usize, f64)> = trace.steps.iter().map(|s| (s.step, s.t_s)).collect();
        if this != base {
            return Err(CliError::usage(format!(
                "trace {label} has a different time base than {}",
                traces[0].0
            )));
        }
    }

    let reference = match &args.cycle {
        Some(path) => {
            let ts = if base.len() >= 2 { base[1].1 - base[0].1 } else { 0.1 };
            let cycle = load_cycle(path, ts, DEFAULT_V_MAX)
                .map_err(|e| CliError::usage(format!("cycle {}: {e}", path.display())))?;
            Some(cycle)
        }
        None => None,
    };

    prepare_out_dir(&args.out)?;
    let velocity_path = args.out.join("velocity.csv");
    let mut velocity = create_file(&velocity_path)?;
    writeln!(velocity, "step,t_s,solver,v_mps").map_err(|e| io_err(&velocity_path, e))?;
    let distance_path = args.out.join("distance.csv");
    let mut distance = create_file(&distance_path)?;
    writeln!(distance, "step,t_s,solver,d_m").map_err(|e| io_err(&distance_path, e))?;
    let force_path = args.out.join("force.csv");
    let mut force = create_file(&force_path)?;
    writeln!(force, "step,t_s,solver,f_t_n,f_b_n").map_err(|e| io_err(&force_path, e))?;
    let iter_path = args.out.join("iterations.csv");
    let mut iters = create_file(&iter_path)?;
    writeln!(iters, "step,t_s,solver,iters,converged").map_err(|e| io_err(&iter_path, e))?;

    for (label, trace) in &traces {
        for s in &trace.steps {
            writeln!(velocity, "{},{:.3},{label},{:.6}", s.step, s.t_s, s.v)
                .map_err(|e| io_err(&velocity_path, e))?;
            writeln!(distance, "{},{:.3},{label},{:.6}", s.step, s.t_s, s.d)
                .map_err(|e| io_err(&distance_path, e))?;
            writeln!(
                force,
                "{},{:.3},{label},{:.6},{:.6}",
                s.step, s.t_s, s.f_t, s.f_b
            )
            .map_err(|e| io_err(&force_path, e))?;
            writeln!(
                iters,
                "{},{:.3},{label},{},{}",
                s.step, s.t_s, s.iters, s.converged
            )
            .map_err(|e| io_err(&iter_path, e))?;
        }
    }
    if let Some(cycle) = &reference {
        for &(step, t_s) in &base {
            let idx = step.min(cycle.v_p.len() - 1);
            writeln!(velocity, "{step},{t_s:.3},reference,{:.6}", cycle.v_p[idx])
                .map_err(|e| io_err(&velocity_path, e))?;
        }
    }
    Ok(())
}
