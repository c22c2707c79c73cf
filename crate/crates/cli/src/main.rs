//! `gridrl`: map generation, training, evaluation, trace replay, and
//! gradient checking for the grid path-planning workbench.
//!
//! Exit codes: 0 success, 1 configuration error, 2 run failure.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use gridrl_core::benchrun::{
    multi_summary_table, run_multi_benchmark, run_single_benchmark_observed,
    single_summary_table, trace_rows, write_jsonl, MultiBenchArgs, PlannerKind, SingleBenchArgs,
};
use gridrl_core::config::{output_dir, RunConfig};
use gridrl_core::grid::{generate_map, MapKind};
use gridrl_core::learner::{train, TrainSetup};
use gridrl_core::net::NetConfig;

mod replay_cmd;

#[derive(Parser)]
#[command(name = "gridrl", version, about = "Grid path-planning workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a map and write it in the text map format.
    GenMap(GenMapArgs),
    /// Train the value-learning planner per the run configuration.
    Train(TrainArgs),
    /// Single-robot benchmark: seeded instances at a fixed Manhattan
    /// distance, identical obstacle trajectories across planners.
    EvalSingle(EvalSingleArgs),
    /// Multi-robot benchmark: success rate, flowtime, arrival curves.
    EvalMulti(EvalMultiArgs),
    /// Audit a recorded trace file and recompute its metrics.
    Replay(replay_cmd::ReplayArgs),
    /// Check analytic gradients against central finite differences on a
    /// reduced double-precision network.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenMapArgs {
    #[arg(long)]
    kind: MapKind,
    #[arg(long)]
    height: usize,
    #[arg(long)]
    width: usize,
    #[arg(long, default_value_t = 0.0)]
    density: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output file (defaults to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (TOML). Omitted sections use reference defaults.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory (defaults to $GRIDRL_OUT_DIR or ./out).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalSingleArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated planners: learned, global-replan, local-replan.
    #[arg(long, value_delimiter = ',', default_values_t = [String::from("global-replan")])]
    planners: Vec<String>,
    /// Checkpoint for the learned planner.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manhattan: Option<usize>,
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Also record full per-tick traces for `gridrl replay`.
    #[arg(long)]
    traces: bool,
}

#[derive(Args)]
struct EvalMultiArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated planners: learned, global-replan, local-replan, hca.
    #[arg(long, value_delimiter = ',', default_values_t = [String::from("hca")])]
    planners: Vec<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    robots: Option<usize>,
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    fov: usize,
    #[arg(long, default_value_t = 2)]
    seq_len: usize,
    #[arg(long, default_value_t = 1)]
    blocks: usize,
    #[arg(long, default_value_t = 4)]
    base_channels: usize,
    #[arg(long, default_value_t = 16)]
    lstm: usize,
    #[arg(long, default_value_t = 16)]
    dense: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems are configuration errors; --help/--version are
            // not errors at all.
            let benign = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if benign {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Run(msg)) => {
            eprintln!("run failure: {msg}");
            ExitCode::from(2)
        }
    }
}

enum CliError {
    Config(String),
    Run(String),
}

impl CliError {
    fn config(e: impl std::fmt::Display) -> Self {
        CliError::Config(e.to_string())
    }
    fn run(e: impl std::fmt::Display) -> Self {
        CliError::Run(e.to_string())
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenMap(args) => gen_map(args),
        Command::Train(args) => train_cmd(args),
        Command::EvalSingle(args) => eval_single(args),
        Command::EvalMulti(args) => eval_multi(args),
        Command::Replay(args) => replay_cmd::run(args).map_err(CliError::run),
        Command::Gradcheck(args) => gradcheck(args),
    }
}

fn resolve_out_dir(flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
    let dir = flag.unwrap_or_else(output_dir);
    std::fs::create_dir_all(&dir).map_err(CliError::config)?;
    Ok(dir)
}

fn gen_map(args: GenMapArgs) -> Result<(), CliError> {
    let map = generate_map(args.kind, args.height, args.width, args.density, args.seed)
        .map_err(CliError::config)?;
    match args.out {
        Some(path) => map.save(&path).map_err(CliError::run)?,
        None => print!("{}", map.to_text()),
    }
    eprintln!(
        "{} {}x{} map: {} static obstacles, free space connected: {}",
        args.kind,
        args.height,
        args.width,
        map.n_static(),
        map.free_space_connected()
    );
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(&args.config).map_err(CliError::config)?;
    let out_dir = resolve_out_dir(args.out_dir)?;
    let map = cfg.map.build().map_err(CliError::config)?;
    let setup = TrainSetup {
        n_obstacles: cfg.obstacle_count(&map),
        map,
        reward_params: cfg.reward.params(),
        reward_mode: cfg.reward.mode,
        net: cfg.net_config(),
    };
    let log_path = out_dir.join("training_log.csv");
    let mut log = std::fs::File::create(&log_path).map_err(CliError::run)?;
    eprintln!(
        "training: {} steps on {:?}, {} obstacles, reward mode {:?}, seed {}",
        cfg.train.total_steps, setup.map, setup.n_obstacles, setup.reward_mode, args.seed
    );
    let result = train(&setup, &cfg.train, args.seed, Some(&mut log), Some(&out_dir))
        .map_err(CliError::run)?;
    let reached = result
        .episodes
        .iter()
        .filter(|e| matches!(e.outcome, gridrl_core::reward::EpisodeStatus::ReachedGoal))
        .count();
    eprintln!(
        "done: {} episodes ({} reached goal), {} env steps, {} optimizer steps",
        result.episodes.len(),
        reached,
        result.env_steps,
        result.train_steps
    );
    eprintln!("log: {}", log_path.display());
    eprintln!("checkpoint: {}", out_dir.join("model_final.ckpt").display());
    Ok(())
}

fn parse_planners(
    names: &[String],
    checkpoint: &Option<PathBuf>,
    allow_hca: bool,
) -> Result<Vec<PlannerKind>, CliError> {
    let mut planners = Vec::new();
    for name in names {
        let kind = match name.as_str() {
            "learned" => {
                let path = checkpoint.as_ref().ok_or_else(|| {
                    CliError::Config("planner `learned` needs --checkpoint".into())
                })?;
                let (net, _echo) = gridrl_core::checkpoint::load(path).map_err(CliError::config)?;
                PlannerKind::Learned(Arc::new(net))
            }
            "global-replan" | "global_replan" => PlannerKind::GlobalReplan,
            "local-replan" | "local_replan" => PlannerKind::LocalReplan,
            "hca" if allow_hca => PlannerKind::Hca,
            other => {
                return Err(CliError::Config(format!(
                    "unknown planner {other:?} (learned|global-replan|local-replan{})",
                    if allow_hca { "|hca" } else { "" }
                )))
            }
        };
        planners.push(kind);
    }
    Ok(planners)
}

fn eval_single(args: EvalSingleArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(&args.config).map_err(CliError::config)?;
    let out_dir = resolve_out_dir(args.out_dir)?;
    let map = cfg.map.build().map_err(CliError::config)?;
    let planners = parse_planners(&args.planners, &args.checkpoint, false)?;
    let bench = SingleBenchArgs {
        manhattan: args.manhattan.unwrap_or(cfg.eval.manhattan),
        instances: args.instances.unwrap_or(cfg.eval.instances),
        n_obstacles: cfg.obstacle_count(&map),
        fov: cfg.env.fov,
        seed: args.seed.unwrap_or(cfg.eval.seed),
        reward_params: cfg.reward.params(),
    };
    let mut all_traces = Vec::new();
    let reports = run_single_benchmark_observed(&map, &planners, &bench, |planner, i, (s, g), run| {
        if args.traces {
            all_traces.extend(trace_rows(planner, i, s, g, run));
        }
    })
    .map_err(CliError::run)?;
    if args.traces {
        let trace_path = out_dir.join("eval_single_traces.jsonl");
        write_jsonl(&trace_path, all_traces.iter()).map_err(CliError::run)?;
        eprintln!("traces: {}", trace_path.display());
    }
    let rows = reports.iter().flat_map(|r| r.records.iter());
    let rows_path = out_dir.join("eval_single.jsonl");
    write_jsonl(&rows_path, rows).map_err(CliError::run)?;
    let table = single_summary_table(&reports);
    print!("{table}");
    std::fs::write(out_dir.join("eval_single_summary.txt"), &table).map_err(CliError::run)?;
    eprintln!("records: {}", rows_path.display());
    Ok(())
}

fn eval_multi(args: EvalMultiArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(&args.config).map_err(CliError::config)?;
    let out_dir = resolve_out_dir(args.out_dir)?;
    let map = cfg.map.build().map_err(CliError::config)?;
    let planners = parse_planners(&args.planners, &args.checkpoint, true)?;
    let bench = MultiBenchArgs {
        robots: args.robots.unwrap_or(cfg.multi.robots),
        instances: args.instances.unwrap_or(cfg.multi.instances),
        fov: cfg.env.fov,
        timeout: cfg.multi.timeout,
        seed: args.seed.unwrap_or(cfg.multi.seed),
    };
    let reports = run_multi_benchmark(&map, &planners, &bench).map_err(CliError::run)?;
    write_jsonl(
        out_dir.join("eval_multi.jsonl"),
        reports.iter().flat_map(|r| r.records.iter()),
    )
    .map_err(CliError::run)?;
    // Arrival-curve rows back the reached-robots-over-time plots.
    #[derive(serde::Serialize)]
    struct CurveRow<'a> {
        planner: &'a str,
        tick: usize,
        mean_arrived: f64,
        std_arrived: f64,
    }
    let mut curve_rows = Vec::new();
    for r in &reports {
        for (t, (&m, &s)) in r
            .arrival_curve_mean
            .iter()
            .zip(&r.arrival_curve_std)
            .enumerate()
        {
            curve_rows.push(CurveRow {
                planner: &r.planner,
                tick: t,
                mean_arrived: m,
                std_arrived: s,
            });
        }
    }
    write_jsonl(out_dir.join("eval_multi_arrivals.jsonl"), curve_rows).map_err(CliError::run)?;
    let table = multi_summary_table(&reports);
    print!("{table}");
    std::fs::write(out_dir.join("eval_multi_summary.txt"), &table).map_err(CliError::run)?;
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    let cfg = NetConfig {
        fov: args.fov,
        seq_len: args.seq_len,
        conv_blocks: args.blocks,
        base_channels: args.base_channels,
        lstm_units: args.lstm,
        dense_units: args.dense,
    };
    cfg.validate().map_err(CliError::config)?;
    let report = gridrl_core::gradcheck::run_gradcheck(cfg, args.batch, args.seed);
    println!(
        "{} parameters, {} batch items: max relative error {:.3e} (tolerance {:.1e})",
        report.n_params, args.batch, report.max_rel_error, args.tolerance
    );
    if report.max_rel_error <= args.tolerance {
        println!("gradcheck PASS");
        Ok(())
    } else {
        Err(CliError::Run(format!(
            "gradient mismatch: {:.3e} > {:.1e}",
            report.max_rel_error, args.tolerance
        )))
    }
}
