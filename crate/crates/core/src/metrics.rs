//! Evaluation metrics: moving cost, detour percentage, per-step compute
//! time, and their aggregation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Cell;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("moving cost is undefined for coincident start and goal")]
    ZeroManhattan,
    #[error("moving cost needs at least one step")]
    ZeroSteps,
}

/// Ratio of steps taken to the start/goal Manhattan distance.
pub fn moving_cost(steps: usize, start: Cell, goal: Cell) -> Result<f64, MetricsError> {
    let manhattan = start.manhattan(goal);
    if manhattan == 0 {
        return Err(MetricsError::ZeroManhattan);
    }
    if steps == 0 {
        return Err(MetricsError::ZeroSteps);
    }
    Ok(steps as f64 / manhattan as f64)
}

/// Relative excess of steps over the static-only shortest path length (in
/// moves), as a percentage.
pub fn detour_percentage(steps: usize, astar_moves: usize) -> f64 {
    assert!(astar_moves >= 1, "shortest path must have at least one move");
    (steps as f64 - astar_moves as f64) / astar_moves as f64 * 100.0
}

/// On a 4-connected grid no route can beat the Manhattan distance; fewer
/// steps than that marks a measurement or bookkeeping defect.
pub fn is_sub_manhattan(steps: usize, start: Cell, goal: Cell) -> bool {
    steps < start.manhattan(goal)
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunOutcome {
    Success,
    Timeout,
}

/// Metrics of one evaluated run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub steps: usize,
    pub manhattan: usize,
    /// Static-only shortest path length in moves.
    pub astar_moves: usize,
    pub moving_cost: f64,
    pub detour_pct: f64,
    pub compute_time_per_step: f64,
    pub outcome: RunOutcome,
    /// True when the step count is impossibly small for a 4-grid.
    pub anomaly: bool,
}

impl MetricsRecord {
    pub fn new(
        steps: usize,
        start: Cell,
        goal: Cell,
        astar_moves: usize,
        compute_time_per_step: f64,
        outcome: RunOutcome,
    ) -> Result<Self, MetricsError> {
        let mc = moving_cost(steps, start, goal)?;
        Ok(MetricsRecord {
            steps,
            manhattan: start.manhattan(goal),
            astar_moves,
            moving_cost: mc,
            detour_pct: detour_percentage(steps, astar_moves),
            compute_time_per_step,
            outcome,
            anomaly: is_sub_manhattan(steps, start, goal),
        })
    }
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn aggregate(values: impl IntoIterator<Item = f64>) -> Aggregate {
    let values: Vec<f64> = values.into_iter().collect();
    let n = values.len();
    if n == 0 {
        return Aggregate::default();
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    Aggregate {
        mean,
        std: var.sqrt(),
        n,
    }
}
