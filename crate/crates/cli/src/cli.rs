//! Command-line entry points for `covctl`.

use crate::config::{ConfigError, ExperimentConfig};
use crate::emit;
use clap::{Args, Parser, Subcommand};
use coverage_core::{
    coupling_budget, finite_update_bounds, n_star, run_lloyd_periodic, run_nonperiodic_mpc,
    run_periodic_mpc, RunLog, RunMode, TrackerConstants,
};
use nalgebra::DMatrix;
use std::path::PathBuf;

/// Process exit codes: 0 success, 2 configuration error, 3 run infeasible.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;

#[derive(Parser)]
#[command(name = "covctl", about = "Multi-agent coverage control runner")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Iterative centroidal refinement of the reference plans (no tracking).
    Lloyd(RunArgs),
    /// Closed-loop run with the cyclic reference planner.
    RunPeriodic(RunArgs),
    /// Closed-loop run with the pinned, steady-terminal reference planner.
    RunNonperiodic(RunArgs),
    /// Print the certified horizon, coupling budget, and settling bounds.
    Bounds {
        /// Config file or preset name; defaults to the reference constants.
        #[arg(long)]
        config: Option<String>,
    },
    /// Load, parse, and validate a config, then exit.
    ValidateConfig {
        /// Config file (.toml or .json) or preset name.
        #[arg(long)]
        config: String,
    },
}

#[derive(Args)]
pub struct RunArgs {
    /// Config file (.toml or .json) or preset name.
    #[arg(long)]
    pub config: Option<String>,
    /// Override the RNG seed from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default: config `out_dir`, else `out`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override the number of closed-loop steps (or optimizer iterations).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Skip SVG plot generation.
    #[arg(long)]
    pub no_plots: bool,
}

fn expected_mode(cmd: &Command) -> RunMode {
    match cmd {
        Command::Lloyd(_) => RunMode::LloydPeriodic,
        Command::RunPeriodic(_) => RunMode::PeriodicMpc,
        Command::RunNonperiodic(_) => RunMode::NonperiodicMpc,
        _ => unreachable!(),
    }
}

fn default_preset(cmd: &Command) -> &'static str {
    match cmd {
        Command::Lloyd(_) => "lloyd_desk",
        Command::RunPeriodic(_) => "periodic_desk",
        Command::RunNonperiodic(_) => "nonperiodic_desk",
        _ => unreachable!(),
    }
}

/// Run one parsed command; returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    match &cli.command {
        Command::Lloyd(_) | Command::RunPeriodic(_) | Command::RunNonperiodic(_) => {
            let mode = expected_mode(&cli.command);
            let preset = default_preset(&cli.command);
            let args = match &cli.command {
                Command::Lloyd(a) | Command::RunPeriodic(a) | Command::RunNonperiodic(a) => a,
                _ => unreachable!(),
            };
            match run_command(args, mode, preset) {
                Ok(()) => EXIT_OK,
                Err(CommandError::Config(msg)) => {
                    eprintln!("config error: {msg}");
                    EXIT_CONFIG
                }
                Err(CommandError::Run(msg)) => {
                    eprintln!("run aborted: {msg}");
                    EXIT_INFEASIBLE
                }
            }
        }
        Command::Bounds { config } => match bounds_report(config.as_deref()) {
            Ok(text) => {
                print!("{text}");
                EXIT_OK
            }
            Err(msg) => {
                eprintln!("config error: {msg}");
                EXIT_CONFIG
            }
        },
        Command::ValidateConfig { config } => match validate_config(config) {
            Ok(summary) => {
                println!("{summary}");
                EXIT_OK
            }
            Err(msg) => {
                eprintln!("config error: {msg}");
                EXIT_CONFIG
            }
        },
    }
}

#[derive(Debug)]
pub enum CommandError {
    Config(String),
    Run(String),
}

impl From<ConfigError> for CommandError {
    fn from(e: ConfigError) -> Self {
        CommandError::Config(e.to_string())
    }
}

fn load_with_overrides(
    args: &RunArgs,
    mode: RunMode,
    preset: &str,
) -> Result<ExperimentConfig, CommandError> {
    let spec = args.config.as_deref().unwrap_or(preset);
    let mut cfg = ExperimentConfig::load(spec)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = args.steps {
        cfg.max_steps = steps;
    }
    if args.no_plots {
        cfg.plots = false;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = Some(out.to_string_lossy().into_owned());
    }
    if cfg.run_mode()? != mode {
        return Err(CommandError::Config(format!(
            "config mode `{}` does not match this subcommand",
            cfg.mode
        )));
    }
    Ok(cfg)
}

/// Load a config, run it, and write CSV/JSON/plots. Exposed for tests.
pub fn run_command(args: &RunArgs, mode: RunMode, preset: &str) -> Result<(), CommandError> {
    let cfg = load_with_overrides(args, mode, preset)?;
    let fleet = cfg.to_fleet()?;
    fleet
        .validate()
        .map_err(|e| CommandError::Config(e.to_string()))?;
    let log: RunLog = match mode {
        RunMode::LloydPeriodic => run_lloyd_periodic(&fleet),
        RunMode::PeriodicMpc => run_periodic_mpc(&fleet),
        RunMode::NonperiodicMpc => run_nonperiodic_mpc(&fleet),
    }
    .map_err(|e| CommandError::Run(e.to_string()))?;

    let dir = PathBuf::from(cfg.out_dir.as_deref().unwrap_or("out"));
    std::fs::create_dir_all(&dir).map_err(|e| CommandError::Run(e.to_string()))?;
    emit::write_csv(&log, &dir.join("steps.csv")).map_err(|e| CommandError::Run(e.to_string()))?;
    emit::write_summary(&cfg, &log, &dir.join("summary.json"))
        .map_err(|e| CommandError::Run(e.to_string()))?;
    if cfg.plots {
        emit::emit_plots(&log, &dir, cfg.arena, cfg.plan_horizon)
            .map_err(|e| CommandError::Run(e.to_string()))?;
    }
    let last = log.steps.last().unwrap();
    println!(
        "{} steps, final coverage cost {:.6}, min pairwise distance {:.4}, {} plan swaps; results in {}",
        log.steps.len(),
        last.coverage_cost,
        log.steps
            .iter()
            .map(|r| r.min_distance)
            .fold(f64::INFINITY, f64::min),
        log.swap_times.len(),
        dir.display()
    );
    Ok(())
}

/// Reference constants used when `bounds` is called without a config.
fn reference_constants() -> TrackerConstants {
    TrackerConstants {
        q: DMatrix::identity(2, 2),
        r: DMatrix::identity(2, 2),
        gamma_bar: 2.0,
        alpha_n: 0.1,
        v_max: 70.0,
        l_v: 180.0,
        l_f: 1.0,
        horizon: 20,
        planner_interval: 30,
    }
}

/// Text report of the certified bounds for one set of constants.
pub fn bounds_report(config: Option<&str>) -> Result<String, String> {
    let (consts, epsilon) = match config {
        Some(spec) => {
            let cfg = ExperimentConfig::load(spec).map_err(|e| e.to_string())?;
            let fleet = cfg.to_fleet().map_err(|e| e.to_string())?;
            (fleet.agents[0].consts.clone(), cfg.epsilon)
        }
        None => (reference_constants(), 3f64.sqrt()),
    };
    consts.validate().map_err(|e| e.to_string())?;
    let ns = n_star(&consts).map_err(|e| e.to_string())?;
    let budget = coupling_budget(consts.v_max, &consts).map_err(|e| e.to_string())?;
    let (v_eps, tau) =
        finite_update_bounds(&[&consts], epsilon, 1.0).map_err(|e| e.to_string())?;
    let mut out = String::new();
    out.push_str(&format!("minimal certified tracking horizon N* = {ns}\n"));
    out.push_str(&format!(
        "value decay factor lambda = {:.5}\n",
        consts.decay()
    ));
    out.push_str(&format!(
        "coupling budget C(V = {}) = {:.5}\n",
        consts.v_max, budget.value
    ));
    out.push_str(&format!(
        "settling threshold V_eps = {v_eps:.5}, settling horizon tau = {tau}\n"
    ));
    Ok(out)
}

/// Parse and validate a config end to end; returns a one-line summary.
pub fn validate_config(spec: &str) -> Result<String, String> {
    let cfg = ExperimentConfig::load(spec).map_err(|e| e.to_string())?;
    let fleet = cfg.to_fleet().map_err(|e| e.to_string())?;
    fleet.validate().map_err(|e| e.to_string())?;
    Ok(format!(
        "config OK: mode {}, {} agents, plan horizon {}, planner interval {}, tracking horizon {}",
        cfg.mode,
        cfg.agents.len(),
        cfg.plan_horizon,
        cfg.planner_interval,
        cfg.tracking_horizon
    ))
}
