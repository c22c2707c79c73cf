//! `gridrl replay`: load a recorded trace file, audit it for conflicts,
//! and recompute its metrics from the raw rows.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::Args;

use gridrl_core::audit::{audit_trace, TraceTick};
use gridrl_core::benchrun::TraceRow;
use gridrl_core::grid::Cell;
use gridrl_core::metrics::{detour_percentage, moving_cost};

#[derive(Args)]
pub struct ReplayArgs {
    /// Trace file (one JSON row per line, as written by eval-single).
    #[arg(long)]
    trace: PathBuf,
}

struct InstanceTrace {
    start: Cell,
    goal: Cell,
    astar_moves: usize,
    ticks: Vec<TraceTick>,
    end: Option<(usize, f64, f64)>,
}

/// Rows stream in blocks (Header, Step..., End); the reader attaches each
/// row to the block its header opened.
pub fn run(args: ReplayArgs) -> Result<(), String> {
    let text = std::fs::read_to_string(&args.trace)
        .map_err(|e| format!("{}: {e}", args.trace.display()))?;
    let mut instances: BTreeMap<(String, usize), InstanceTrace> = BTreeMap::new();
    let mut open: Option<(String, usize)> = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: TraceRow =
            serde_json::from_str(line).map_err(|e| format!("line {}: {e}", lineno + 1))?;
        match row {
            TraceRow::Header {
                instance,
                planner,
                start,
                goal,
                astar_moves,
                initial_positions,
            } => {
                let key = (planner, instance);
                instances.insert(
                    key.clone(),
                    InstanceTrace {
                        start,
                        goal,
                        astar_moves,
                        ticks: vec![TraceTick {
                            tick: 0,
                            positions: initial_positions,
                        }],
                        end: None,
                    },
                );
                open = Some(key);
            }
            TraceRow::Step {
                instance,
                step,
                positions,
            } => {
                let key = open
                    .clone()
                    .filter(|k| k.1 == instance)
                    .ok_or_else(|| format!("line {}: step row without header", lineno + 1))?;
                instances.get_mut(&key).unwrap().ticks.push(TraceTick {
                    tick: step.tick,
                    positions,
                });
            }
            TraceRow::End {
                instance,
                steps,
                outcome: _,
                moving_cost,
                detour_pct,
            } => {
                let key = open
                    .clone()
                    .filter(|k| k.1 == instance)
                    .ok_or_else(|| format!("line {}: end row without header", lineno + 1))?;
                instances.get_mut(&key).unwrap().end = Some((steps, moving_cost, detour_pct));
                open = None;
            }
        }
    }

    let mut total_conflicts = 0usize;
    let mut mismatches = 0usize;
    for ((planner, idx), inst) in &instances {
        let report = audit_trace(&inst.ticks);
        total_conflicts += report.total();
        let mut note = String::new();
        if let Some((steps, mc, dp)) = inst.end {
            let mc_check = moving_cost(steps, inst.start, inst.goal).map_err(|e| e.to_string())?;
            let dp_check = detour_percentage(steps, inst.astar_moves);
            if (mc_check - mc).abs() > 1e-9 || (dp_check - dp).abs() > 1e-9 {
                mismatches += 1;
                note = format!(
                    " METRIC MISMATCH (recomputed mc {mc_check:.6} dp {dp_check:.3}, emitted mc {mc:.6} dp {dp:.3})"
                );
            }
        }
        println!(
            "{planner} instance {idx}: {} ticks, conflicts: {} vertex / {} swap / {} jump{note}",
            inst.ticks.len(),
            report.vertex.len(),
            report.swaps.len(),
            report.jumps.len(),
        );
    }
    println!(
        "{} instances, {} conflicts, {} metric mismatches",
        instances.len(),
        total_conflicts,
        mismatches
    );
    if total_conflicts > 0 || mismatches > 0 {
        return Err("trace failed the audit".into());
    }
    Ok(())
}
