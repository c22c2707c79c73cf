//! Benchmark drivers: seeded instance generation, single-robot and
//! multi-robot evaluation protocols, aggregation, and line-oriented result
//! emission.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{audit_paths, audit_trace, TraceTick};
use crate::baselines::{default_horizon, hca_star};
use crate::grid::{Cell, GridMap, MoveOutcome};
use crate::guidance::GuidancePath;
use crate::metrics::{aggregate, Aggregate, MetricsRecord, RunOutcome};
use crate::multi::{run_multi, GlobalReplanPolicy, LocalReplanPolicy, NetPolicy, RobotPolicy};
use crate::net::QNetwork;
use crate::observation::observe;
use crate::reward::{reward, RewardParams, TEST_TIMEOUT_FACTOR};
use crate::world::{spawn_obstacles, WorldState};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("could not sample an instance at Manhattan distance {manhattan} after {tries} tries")]
    InstanceExhaustion { manhattan: usize, tries: usize },
    #[error(transparent)]
    Spawn(#[from] crate::world::SpawnError),
    #[error(transparent)]
    Multi(#[from] crate::multi::MultiError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Planner under evaluation.
#[derive(Clone)]
pub enum PlannerKind {
    /// Greedy trained policy.
    Learned(Arc<QNetwork<f32>>),
    GlobalReplan,
    LocalReplan,
    /// Centralized prioritized space-time planning (multi-robot only).
    Hca,
}

impl PlannerKind {
    pub fn name(&self) -> &'static str {
        match self {
            PlannerKind::Learned(_) => "learned",
            PlannerKind::GlobalReplan => "global_replan",
            PlannerKind::LocalReplan => "local_replan",
            PlannerKind::Hca => "hca",
        }
    }

    fn make_policy(&self, guidance: &GuidancePath, fov: usize) -> Box<dyn RobotPolicy> {
        match self {
            PlannerKind::Learned(net) => Box::new(NetPolicy::new(net.clone())),
            PlannerKind::GlobalReplan => Box::new(GlobalReplanPolicy::new(guidance)),
            PlannerKind::LocalReplan => Box::new(LocalReplanPolicy::new(guidance, fov)),
            PlannerKind::Hca => unreachable!("hca does not run per-step"),
        }
    }
}

const SAMPLE_TRIES: usize = 20_000;

/// Sample a start/goal pair of free cells at an exact Manhattan distance
/// with a static-map path between them.
pub fn sample_pair_at_manhattan(
    map: &GridMap,
    manhattan: usize,
    rng: &mut impl Rng,
) -> Result<(Cell, Cell), BenchError> {
    let free: Vec<Cell> = map.free_cells().collect();
    for _ in 0..SAMPLE_TRIES {
        let start = free[rng.gen_range(0..free.len())];
        // Random offset of exact L1 length.
        let dr_abs = rng.gen_range(0..=manhattan) as isize;
        let dc_abs = manhattan as isize - dr_abs;
        let dr = if rng.gen::<bool>() { dr_abs } else { -dr_abs };
        let dc = if rng.gen::<bool>() { dc_abs } else { -dc_abs };
        let goal = match start.offset(dr, dc, map.height(), map.width()) {
            Some(c) => c,
            None => continue,
        };
        if goal == start || !map.is_free(goal) {
            continue;
        }
        if GuidancePath::compute(map, start, goal).is_ok() {
            return Ok((start, goal));
        }
    }
    Err(BenchError::InstanceExhaustion {
        manhattan,
        tries: SAMPLE_TRIES,
    })
}

/// One resolved step of an evaluated run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRow {
    pub tick: usize,
    pub action: usize,
    pub outcome: MoveOutcome,
    pub reward: f64,
    pub n_e: usize,
}

/// One evaluated single-robot run.
pub struct SingleRunResult {
    pub metrics: MetricsRecord,
    pub trace: Vec<TraceTick>,
    pub steps_log: Vec<StepRow>,
    pub final_position: Cell,
}

/// Execute one planner on one instance: the robot acts once per tick,
/// obstacles move after the decision, the move resolves against the
/// post-move world, and consumed guidance disappears from later frames.
/// Per-step compute time covers only the action computation. Rewards are
/// logged for the trace; nothing learns from them here.
#[allow(clippy::too_many_arguments)]
pub fn run_single_instance(
    map: &GridMap,
    start: Cell,
    goal: Cell,
    n_obstacles: usize,
    obstacle_seed: u64,
    world_seed: u64,
    planner: &PlannerKind,
    fov: usize,
    reward_params: &RewardParams,
) -> Result<SingleRunResult, BenchError> {
    let mut world = WorldState::new(map.clone());
    let mut occupied = HashSet::new();
    occupied.insert(start);
    world.set_obstacles(spawn_obstacles(map, n_obstacles, obstacle_seed, &occupied)?);
    let robot = world.add_robot(start, goal).expect("free start");
    let mut guidance = GuidancePath::compute(map, start, goal).expect("sampled solvable pair");
    let astar_moves = guidance.len() - 1;
    guidance.remove_through(start).expect("start on guidance");
    let mut policy = planner.make_policy(&guidance, fov);

    let timeout = TEST_TIMEOUT_FACTOR * start.manhattan(goal);
    let mut world_rng = ChaCha8Rng::seed_from_u64(world_seed);
    let mut decision_seconds = 0.0;
    let mut trace = vec![single_snapshot(&world, robot, 0)];
    let mut steps_log = Vec::new();
    let mut steps = 0usize;
    let mut outcome = RunOutcome::Timeout;

    for tick in 1..=timeout {
        let frame = observe(&world, robot, &guidance, fov, fov).expect("odd fov");
        let ctx = crate::multi::StepContext {
            world: &world,
            robot_id: robot,
            position: world.robots()[robot].position,
            goal,
            guidance: &guidance,
            frame: &frame,
        };
        let t0 = Instant::now();
        let action = policy.act(&ctx);
        decision_seconds += t0.elapsed().as_secs_f64();

        world.step_obstacles(&mut world_rng);
        let move_outcome = world
            .apply_robot_action(robot, action)
            .expect("active robot");
        let pos = world.robots()[robot].position;
        let (r, n_e) = reward(reward_params, move_outcome, pos, &mut guidance);
        world.advance_tick();
        steps = tick;
        trace.push(single_snapshot(&world, robot, tick));
        steps_log.push(StepRow {
            tick,
            action: action.index(),
            outcome: move_outcome,
            reward: r,
            n_e,
        });
        if pos == goal {
            outcome = RunOutcome::Success;
            break;
        }
    }

    let final_position = world.robots()[robot].position;
    let metrics = MetricsRecord::new(
        steps,
        start,
        goal,
        astar_moves,
        decision_seconds / steps.max(1) as f64,
        outcome,
    )?;
    Ok(SingleRunResult {
        metrics,
        trace,
        steps_log,
        final_position,
    })
}

fn single_snapshot(world: &WorldState, robot: usize, tick: usize) -> TraceTick {
    let mut positions: Vec<(usize, Cell)> = world
        .obstacles()
        .iter()
        .map(|o| (1000 + o.id, o.position()))
        .collect();
    if !world.robots()[robot].done {
        positions.push((robot, world.robots()[robot].position));
    }
    TraceTick { tick, positions }
}

/// One line of the single-robot result file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SingleRecord {
    pub instance: usize,
    pub planner: String,
    #[serde(flatten)]
    pub metrics: MetricsRecord,
}

#[derive(Clone, Debug, Serialize)]
pub struct SingleReport {
    pub planner: String,
    pub instances: usize,
    pub success_rate: f64,
    /// Aggregates over successful runs only.
    pub moving_cost: Aggregate,
    pub detour_pct: Aggregate,
    pub compute_per_step: Aggregate,
    #[serde(skip)]
    pub records: Vec<SingleRecord>,
}

/// Arguments of the single-robot protocol: `instances` start/goal pairs at
/// the exact Manhattan distance, identical obstacle trajectories across
/// planners, timeout twice the Manhattan distance.
#[derive(Clone, Copy, Debug)]
pub struct SingleBenchArgs {
    pub manhattan: usize,
    pub instances: usize,
    pub n_obstacles: usize,
    pub fov: usize,
    pub seed: u64,
    pub reward_params: RewardParams,
}

/// One line of a recorded run trace file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceRow {
    Header {
        instance: usize,
        planner: String,
        start: Cell,
        goal: Cell,
        astar_moves: usize,
        initial_positions: Vec<(usize, Cell)>,
    },
    Step {
        instance: usize,
        #[serde(flatten)]
        step: StepRow,
        positions: Vec<(usize, Cell)>,
    },
    End {
        instance: usize,
        steps: usize,
        outcome: RunOutcome,
        moving_cost: f64,
        detour_pct: f64,
    },
}

/// Flatten one run into trace-file rows.
pub fn trace_rows(planner: &str, instance: usize, start: Cell, goal: Cell, run: &SingleRunResult) -> Vec<TraceRow> {
    let mut rows = Vec::with_capacity(run.steps_log.len() + 2);
    rows.push(TraceRow::Header {
        instance,
        planner: planner.to_string(),
        start,
        goal,
        astar_moves: run.metrics.astar_moves,
        initial_positions: run.trace[0].positions.clone(),
    });
    for (step, tick) in run.steps_log.iter().zip(run.trace.iter().skip(1)) {
        rows.push(TraceRow::Step {
            instance,
            step: step.clone(),
            positions: tick.positions.clone(),
        });
    }
    rows.push(TraceRow::End {
        instance,
        steps: run.metrics.steps,
        outcome: run.metrics.outcome,
        moving_cost: run.metrics.moving_cost,
        detour_pct: run.metrics.detour_pct,
    });
    rows
}

pub fn run_single_benchmark(
    map: &GridMap,
    planners: &[PlannerKind],
    args: &SingleBenchArgs,
) -> Result<Vec<SingleReport>, BenchError> {
    run_single_benchmark_observed(map, planners, args, |_, _, _, _| {})
}

/// As [`run_single_benchmark`], invoking `on_run` with every finished run
/// (for trace capture).
pub fn run_single_benchmark_observed(
    map: &GridMap,
    planners: &[PlannerKind],
    args: &SingleBenchArgs,
    mut on_run: impl FnMut(&str, usize, (Cell, Cell), &SingleRunResult),
) -> Result<Vec<SingleReport>, BenchError> {
    let mut pair_rng = ChaCha8Rng::seed_from_u64(args.seed ^ 0x7061_6972);
    let mut instances = Vec::with_capacity(args.instances);
    for i in 0..args.instances {
        let (start, goal) = sample_pair_at_manhattan(map, args.manhattan, &mut pair_rng)?;
        let obstacle_seed = args.seed.wrapping_mul(0x9e37_79b9).wrapping_add(i as u64);
        let world_seed = obstacle_seed ^ 0x5555_5555;
        instances.push((start, goal, obstacle_seed, world_seed));
    }

    let mut reports = Vec::new();
    for planner in planners {
        let mut records = Vec::with_capacity(args.instances);
        for (i, &(start, goal, obstacle_seed, world_seed)) in instances.iter().enumerate() {
            let run = run_single_instance(
                map,
                start,
                goal,
                args.n_obstacles,
                obstacle_seed,
                world_seed,
                planner,
                args.fov,
                &args.reward_params,
            )?;
            debug_assert!(audit_trace(&run.trace).is_clean());
            on_run(planner.name(), i, (start, goal), &run);
            records.push(SingleRecord {
                instance: i,
                planner: planner.name().to_string(),
                metrics: run.metrics,
            });
        }
        reports.push(summarize_single(planner.name(), records));
    }
    Ok(reports)
}

fn summarize_single(planner: &str, records: Vec<SingleRecord>) -> SingleReport {
    let successes: Vec<&SingleRecord> = records
        .iter()
        .filter(|r| r.metrics.outcome == RunOutcome::Success)
        .collect();
    SingleReport {
        planner: planner.to_string(),
        instances: records.len(),
        success_rate: successes.len() as f64 / records.len().max(1) as f64,
        moving_cost: aggregate(successes.iter().map(|r| r.metrics.moving_cost)),
        detour_pct: aggregate(successes.iter().map(|r| r.metrics.detour_pct)),
        compute_per_step: aggregate(successes.iter().map(|r| r.metrics.compute_time_per_step)),
        records,
    }
}

/// One line of the multi-robot result file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiRecord {
    pub instance: usize,
    pub planner: String,
    pub robots: usize,
    pub success: bool,
    pub flowtime: usize,
    pub arrivals: Vec<Option<usize>>,
    /// Decision (or planning) wall-clock divided by the instance flowtime.
    pub compute_norm: f64,
    pub conflicts: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct MultiReport {
    pub planner: String,
    pub robots: usize,
    pub instances: usize,
    pub success_rate: f64,
    /// Raw per-instance flowtimes: the histogram data.
    pub flowtimes: Vec<usize>,
    /// Mean number of arrived robots at each tick (index = tick).
    pub arrival_curve_mean: Vec<f64>,
    pub arrival_curve_std: Vec<f64>,
    pub compute_norm: Aggregate,
    pub total_conflicts: usize,
    #[serde(skip)]
    pub records: Vec<MultiRecord>,
}

#[derive(Clone, Copy, Debug)]
pub struct MultiBenchArgs {
    pub robots: usize,
    pub instances: usize,
    pub fov: usize,
    pub timeout: usize,
    pub seed: u64,
}

/// Sample `n` robots with distinct free starts, distinct goals, and an
/// individually solvable static path each.
pub fn sample_robot_set(
    map: &GridMap,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(Cell, Cell)>, BenchError> {
    let free: Vec<Cell> = map.free_cells().collect();
    let mut starts = HashSet::new();
    let mut goals = HashSet::new();
    let mut robots = Vec::with_capacity(n);
    let mut tries = 0;
    while robots.len() < n {
        tries += 1;
        if tries > SAMPLE_TRIES {
            return Err(BenchError::InstanceExhaustion {
                manhattan: 0,
                tries: SAMPLE_TRIES,
            });
        }
        let start = free[rng.gen_range(0..free.len())];
        let goal = free[rng.gen_range(0..free.len())];
        if start == goal || starts.contains(&start) || goals.contains(&goal) {
            continue;
        }
        if GuidancePath::compute(map, start, goal).is_err() {
            continue;
        }
        starts.insert(start);
        goals.insert(goal);
        robots.push((start, goal));
    }
    Ok(robots)
}

pub fn run_multi_benchmark(
    map: &GridMap,
    planners: &[PlannerKind],
    args: &MultiBenchArgs,
) -> Result<Vec<MultiReport>, BenchError> {
    let mut instance_rng = ChaCha8Rng::seed_from_u64(args.seed ^ 0x6d75_6c74);
    let mut instances = Vec::with_capacity(args.instances);
    for _ in 0..args.instances {
        instances.push(sample_robot_set(map, args.robots, &mut instance_rng)?);
    }

    let mut reports = Vec::new();
    for planner in planners {
        let mut records = Vec::with_capacity(args.instances);
        for (i, robots) in instances.iter().enumerate() {
            let record = match planner {
                PlannerKind::Hca => run_hca_instance(map, robots, i, args),
                _ => {
                    let result = run_multi(
                        map,
                        robots,
                        |_, g| planner.make_policy(g, args.fov),
                        args.fov,
                        args.timeout,
                    )?;
                    let conflicts = audit_trace(&result.trace).total();
                    MultiRecord {
                        instance: i,
                        planner: planner.name().to_string(),
                        robots: robots.len(),
                        success: result.success,
                        flowtime: result.flowtime,
                        arrivals: result.arrivals,
                        compute_norm: result.decision_seconds / result.flowtime.max(1) as f64,
                        conflicts,
                    }
                }
            };
            records.push(record);
        }
        reports.push(summarize_multi(planner.name(), args, records));
    }
    Ok(reports)
}

fn run_hca_instance(
    map: &GridMap,
    robots: &[(Cell, Cell)],
    instance: usize,
    args: &MultiBenchArgs,
) -> MultiRecord {
    let t0 = Instant::now();
    let result = hca_star(map, robots, args.seed.wrapping_add(instance as u64), {
        default_horizon(map).max(args.timeout)
    });
    let plan_seconds = t0.elapsed().as_secs_f64();
    let (arrivals, conflicts, success): (Vec<Option<usize>>, usize, bool) = match &result {
        Ok(paths) => {
            let conflicts = audit_paths(paths).total();
            let arrivals = paths
                .iter()
                .map(|p| {
                    let t = p.len() - 1;
                    (t <= args.timeout).then_some(t)
                })
                .collect::<Vec<_>>();
            let success = arrivals.iter().all(|a| a.is_some());
            (arrivals, conflicts, success)
        }
        Err(failure) => {
            let arrivals = failure
                .partial
                .iter()
                .map(|p| p.as_ref().map(|p| p.len() - 1).filter(|&t| t <= args.timeout))
                .collect();
            (arrivals, 0, false)
        }
    };
    let flowtime: usize = arrivals
        .iter()
        .map(|a| a.unwrap_or(args.timeout))
        .sum();
    MultiRecord {
        instance,
        planner: "hca".to_string(),
        robots: robots.len(),
        success,
        flowtime,
        arrivals,
        compute_norm: plan_seconds / flowtime.max(1) as f64,
        conflicts,
    }
}

fn summarize_multi(planner: &str, args: &MultiBenchArgs, records: Vec<MultiRecord>) -> MultiReport {
    let n = records.len().max(1);
    let mut curve_samples: Vec<Vec<f64>> = vec![Vec::new(); args.timeout + 1];
    for rec in &records {
        for (t, sample) in curve_samples.iter_mut().enumerate() {
            let arrived = rec
                .arrivals
                .iter()
                .filter(|a| a.map(|x| x <= t).unwrap_or(false))
                .count();
            sample.push(arrived as f64);
        }
    }
    let mut mean = Vec::with_capacity(curve_samples.len());
    let mut std = Vec::with_capacity(curve_samples.len());
    for sample in &curve_samples {
        let agg = aggregate(sample.iter().copied());
        mean.push(agg.mean);
        std.push(agg.std);
    }
    MultiReport {
        planner: planner.to_string(),
        robots: records.first().map(|r| r.robots).unwrap_or(0),
        instances: records.len(),
        success_rate: records.iter().filter(|r| r.success).count() as f64 / n as f64,
        flowtimes: records.iter().map(|r| r.flowtime).collect(),
        arrival_curve_mean: mean,
        arrival_curve_std: std,
        compute_norm: aggregate(records.iter().map(|r| r.compute_norm)),
        total_conflicts: records.iter().map(|r| r.conflicts).sum(),
        records,
    }
}

/// Write serializable rows as one JSON object per line.
pub fn write_jsonl<T: Serialize>(
    path: impl AsRef<Path>,
    rows: impl IntoIterator<Item = T>,
) -> Result<(), BenchError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut file, &row).map_err(std::io::Error::other)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

/// Plain-text summary table for single-robot reports.
pub fn single_summary_table(reports: &[SingleReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<15} {:>8} {:>18} {:>18} {:>14}\n",
        "planner", "success", "moving_cost", "detour_pct", "ms/step"
    ));
    for r in reports {
        out.push_str(&format!(
            "{:<15} {:>7.1}% {:>10.3}({:.3}) {:>11.1}({:.1})% {:>14.3}\n",
            r.planner,
            r.success_rate * 100.0,
            r.moving_cost.mean,
            r.moving_cost.std,
            r.detour_pct.mean,
            r.detour_pct.std,
            r.compute_per_step.mean * 1e3,
        ));
    }
    out
}

/// Plain-text summary table for multi-robot reports.
pub fn multi_summary_table(reports: &[MultiReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<15} {:>7} {:>8} {:>12} {:>16} {:>10}\n",
        "planner", "robots", "success", "mean_flow", "compute/flow(s)", "conflicts"
    ));
    for r in reports {
        let flow = aggregate(r.flowtimes.iter().map(|&f| f as f64));
        out.push_str(&format!(
            "{:<15} {:>7} {:>7.1}% {:>12.1} {:>16.6} {:>10}\n",
            r.planner,
            r.robots,
            r.success_rate * 100.0,
            flow.mean,
            r.compute_norm.mean,
            r.total_conflicts
        ));
    }
    out
}
