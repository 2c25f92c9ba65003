//! `deep-lcc`: collect platoon trajectory data, analyze the linearized
//! plant, and run seeded closed-loop experiments comparing a data-driven
//! controller against its model-based benchmark and the all-human baseline.

mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};

use clap::{Parser, Subcommand};

use deep_lcc::analysis::{analyze_config, combined_input_controllable, DEFAULT_RANK_TOL};
use deep_lcc::data::{
    build_hankel_set, collect_offline_opts, load_dataset, min_data_length, save_dataset,
    CollectOptions, DataError,
};
use deep_lcc::deepc::DeepcError;
use deep_lcc::experiments::{
    batch_with, decisions_csv, run_experiment, trajectory_csv, ControllerArm, ExperimentError,
    ExperimentRun,
};
use deep_lcc::traffic::{build_continuous_model, linearize_platoon, Equilibrium};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "deep-lcc",
    version,
    about = "Mixed-platoon cruise control: data collection, analysis, and seeded experiments"
)]
struct Cli {
    /// Experiment description (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the first seed from the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads for `batch` (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Overrides the output directory from the config.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Drive the plant around equilibrium and save the trajectory dataset.
    Collect,
    /// Report controllability, stabilizability, and observability.
    Check,
    /// One closed-loop run with the configured controller.
    Run,
    /// Paired comparison of the configured arms across all seeds.
    Batch,
    /// Recompute run metrics from a trajectory CSV.
    Metrics {
        /// Trajectory CSV produced by `run` or `batch`.
        #[arg(value_name = "CSV")]
        trajectory: PathBuf,
    },
}

/// Failures sorted by exit code: bad configuration (2), a run that collided
/// or leaned on the fallback input (3), filesystem trouble (4).
#[derive(Debug)]
enum CliError {
    Config(String),
    Run(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config: {msg}"),
            CliError::Run(msg) => write!(f, "run: {msg}"),
            CliError::Io(msg) => write!(f, "i/o: {msg}"),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(_) | DataError::Parse(_) => CliError::Io(e.to_string()),
            DataError::Collision { .. } => CliError::Run(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Data(d) => d.into(),
            ExperimentError::Sink(msg) => CliError::Io(msg),
            ExperimentError::Deepc(
                DeepcError::Config(_)
                | DeepcError::NotPersistentlyExciting
                | DeepcError::Dimension { .. },
            ) => CliError::Config(e.to_string()),
            ExperimentError::Deepc(_) | ExperimentError::Mpc(_) => CliError::Run(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

fn io_err(what: &str, path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{what} {}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Collect => cmd_collect(&cli),
        Command::Check => cmd_check(&cli),
        Command::Run => cmd_run(&cli),
        Command::Batch => cmd_batch(&cli),
        Command::Metrics { trajectory } => cmd_metrics(&cli, trajectory),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::Config("--config PATH is required".into()))?;
    if !path.exists() {
        return Err(CliError::Config(format!("no such file: {}", path.display())));
    }
    let text = fs::read_to_string(path).map_err(|e| io_err("cannot read", path, e))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    cfg.validate().map_err(CliError::Config)?;
    Ok(cfg)
}

fn pick_seed(cli: &Cli, cfg: &RunConfig) -> u64 {
    cli.seed.unwrap_or(cfg.seeds[0])
}

fn out_dir(cli: &Cli, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = cli.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    fs::create_dir_all(&dir).map_err(|e| io_err("cannot create", &dir, e))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err("cannot write", path, e))
}

fn to_pretty_json<T: serde::Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("report types serialize");
    text.push('\n');
    text
}

fn cmd_collect(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let plant = cfg.plant().map_err(|e| CliError::Config(e.to_string()))?;
    let seed = pick_seed(cli, &cfg);
    let v_base = cfg.scenario.head_profile.base_velocity();

    let ds = collect_offline_opts(
        &plant,
        v_base,
        cfg.collect_length,
        seed,
        cfg.dt,
        &CollectOptions::default(),
    )?;
    if let Some(dir) = cfg.dataset.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err("cannot create", dir, e))?;
    }
    save_dataset(&cfg.dataset, &ds)?;

    println!(
        "collected T={} samples at dt={} around v*={} (seed {seed})",
        ds.t, ds.dt, ds.v_star_collect
    );
    println!("wrote {}", cfg.dataset.display());
    let need = min_data_length(plant.m, cfg.tuning.t_ini, cfg.tuning.horizon, plant.n);
    println!(
        "minimum length for this tuning: {need} — {}",
        if ds.t >= need { "satisfied" } else { "NOT satisfied" }
    );
    match build_hankel_set(&ds, cfg.tuning.t_ini, cfg.tuning.horizon) {
        Ok(h) => println!(
            "persistently exciting of order {}: {}",
            cfg.tuning.t_ini + cfg.tuning.horizon + 2 * plant.n,
            if h.pe_satisfied { "yes" } else { "NO" }
        ),
        Err(e) => println!("excitation check skipped: {e}"),
    }
    Ok(())
}

fn cmd_check(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let plant = cfg.plant().map_err(|e| CliError::Config(e.to_string()))?;
    let v_base = cfg.scenario.head_profile.base_velocity();

    let report = analyze_config(&plant, v_base, DEFAULT_RANK_TOL)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let coeffs =
        linearize_platoon(&plant, v_base).map_err(|e| CliError::Config(e.to_string()))?;
    let model =
        build_continuous_model(&plant, &coeffs).map_err(|e| CliError::Config(e.to_string()))?;
    let eq = Equilibrium::for_config(&plant, v_base)
        .map_err(|e| CliError::Config(e.to_string()))?;

    let out = config::CheckOutput {
        v_star: v_base,
        s_star: eq.s_star,
        controllable: report.controllable,
        controllability_rank: report.controllability_rank,
        uncontrollable_mode_count: report.uncontrollable_mode_count,
        stabilizable: report.stabilizable,
        observable: report.observable,
        combined_input_controllable: combined_input_controllable(&model, DEFAULT_RANK_TOL),
        stability_condition_value: report.stability_condition_value,
    };
    print!("{}", to_pretty_json(&out));
    Ok(())
}

/// Writes the per-run artifact trio and returns the metrics path.
fn write_run_artifacts(
    dir: &Path,
    arm: ControllerArm,
    seed: u64,
    run: &ExperimentRun,
    with_metrics: bool,
) -> Result<(), CliError> {
    let base = format!("{arm}_{seed}");
    write_text(&dir.join(format!("trajectory_{base}.csv")), &trajectory_csv(&run.log))?;
    write_text(
        &dir.join(format!("decisions_{base}.csv")),
        &decisions_csv(&run.decisions, run.log.u.first().map_or(0, |u| u.len())),
    )?;
    if with_metrics {
        write_text(
            &dir.join(format!("metrics_{base}.json")),
            &to_pretty_json(&run.metrics),
        )?;
    }
    Ok(())
}

/// A run that collided, or spent most of its steps on the fallback input,
/// exits nonzero even though its artifacts are already on disk.
fn run_verdict(run: &ExperimentRun) -> Result<(), CliError> {
    let steps = run.log.steps();
    if run.metrics.collision {
        let at = run.log.t.last().copied().unwrap_or(0.0);
        return Err(CliError::Run(format!(
            "collision at t={at:.2}s; partial artifacts written"
        )));
    }
    if 2 * run.metrics.infeasible_steps > steps {
        return Err(CliError::Run(format!(
            "{} of {steps} steps fell back on an infeasible program",
            run.metrics.infeasible_steps
        )));
    }
    Ok(())
}

fn cmd_run(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let plant = cfg.plant().map_err(|e| CliError::Config(e.to_string()))?;
    let seed = pick_seed(cli, &cfg);
    let arm = cfg.controller;

    let dataset = if arm == ControllerArm::Deepc {
        if !cfg.dataset.exists() {
            return Err(CliError::Config(format!(
                "controller {arm} needs the dataset {}; run `deep-lcc collect` first",
                cfg.dataset.display()
            )));
        }
        Some(load_dataset(&cfg.dataset)?)
    } else {
        None
    };

    let run = run_experiment(
        &plant,
        &cfg.scenario,
        arm,
        &cfg.tuning,
        dataset.as_ref(),
        cfg.dt,
        seed,
    )?;

    let dir = out_dir(cli, &cfg)?;
    write_run_artifacts(&dir, arm, seed, &run, true)?;

    let m = &run.metrics;
    println!(
        "{arm} seed={seed}: steps={}, realized_cost={:.4}, fuel_tail={:.4} mL, \
         min_cav_spacing={:.3} m, infeasible={}{}",
        run.log.steps(),
        m.realized_cost,
        m.fuel_tail,
        m.min_cav_spacing,
        m.infeasible_steps,
        if m.collision { ", COLLISION" } else { "" }
    );
    println!("wrote {}", dir.join(format!("trajectory_{arm}_{seed}.csv")).display());
    run_verdict(&run)
}

fn cmd_batch(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let plant = cfg.plant().map_err(|e| CliError::Config(e.to_string()))?;
    let dir = out_dir(cli, &cfg)?;
    let jobs = cli.jobs.unwrap_or_else(|| {
        std::thread::available_parallelism().map_or(1, |p| p.get())
    });

    let collided = AtomicBool::new(false);
    let dominated = AtomicBool::new(false);
    let observer = |seed: u64, arm: ControllerArm, run: &ExperimentRun| -> Result<(), String> {
        if run.metrics.collision {
            collided.store(true, Ordering::Relaxed);
        }
        if 2 * run.metrics.infeasible_steps > run.log.steps() {
            dominated.store(true, Ordering::Relaxed);
        }
        write_run_artifacts(&dir, arm, seed, run, false).map_err(|e| e.to_string())
    };

    let summary = batch_with(
        &plant,
        &cfg.scenario,
        &cfg.arms,
        &cfg.tuning,
        cfg.dt,
        &cfg.seeds,
        cfg.collect_length,
        jobs,
        &observer,
    )?;

    let summary_path = dir.join("batch_summary.json");
    write_text(&summary_path, &to_pretty_json(&summary))?;

    println!(
        "scenario `{}`: {} seeds x {} arms",
        summary.scenario,
        summary.seeds.len(),
        summary.arms.len()
    );
    for a in &summary.arms {
        println!(
            "  {}: cost {:.4} ± {:.4}, fuel tail {:.4} ± {:.4} mL, msve {:.5} ± {:.5}, \
             worst spacing {:.3} m, collisions {}, infeasible {}",
            a.arm,
            a.mean_realized_cost,
            a.std_realized_cost,
            a.mean_fuel_tail,
            a.std_fuel_tail,
            a.mean_msve,
            a.std_msve,
            a.worst_min_cav_spacing,
            a.collisions,
            a.infeasible_steps
        );
    }
    println!("wrote {}", summary_path.display());

    if collided.load(Ordering::Relaxed) {
        return Err(CliError::Run("at least one run collided".into()));
    }
    if dominated.load(Ordering::Relaxed) {
        return Err(CliError::Run(
            "at least one run spent most steps on the fallback input".into(),
        ));
    }
    Ok(())
}

fn cmd_metrics(cli: &Cli, trajectory: &Path) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let plant = cfg.plant().map_err(|e| CliError::Config(e.to_string()))?;
    if !trajectory.exists() {
        return Err(CliError::Config(format!(
            "no such file: {}",
            trajectory.display()
        )));
    }
    let text =
        fs::read_to_string(trajectory).map_err(|e| io_err("cannot read", trajectory, e))?;
    let (log, fuel_cols) = config::parse_trajectory_csv(&text)
        .map_err(|msg| CliError::Io(format!("{}: {msg}", trajectory.display())))?;

    let logged_n = log.velocity.first().map_or(0, |v| v.len());
    let logged_m = log.u.first().map_or(0, |u| u.len());
    if logged_n != plant.n || logged_m != plant.m {
        return Err(CliError::Config(format!(
            "trajectory is for n={logged_n}, m={logged_m} but the config says n={}, m={}",
            plant.n, plant.m
        )));
    }

    let v_ref = cfg.scenario.head_profile.base_velocity();
    let metrics = config::recompute_metrics(&log, &fuel_cols, &plant, &cfg.tuning, v_ref)?;
    print!("{}", to_pretty_json(&metrics));
    Ok(())
}
