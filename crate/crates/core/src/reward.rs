//! The per-step reward, its strict-following ablation, and the episode
//! lifecycle rules (termination conditions and timeouts).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Cell, MoveOutcome};
use crate::guidance::GuidancePath;

/// Single-robot test timeout factor: twice the start/goal Manhattan
/// distance, counted in ticks.
pub const TEST_TIMEOUT_FACTOR: usize = 2;

/// Multi-robot test timeout in ticks.
pub const MULTI_ROBOT_TIMEOUT: usize = 100;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("reward parameters violate r2 < r1 < 0: r1={r1}, r2={r2}")]
    BadPenalties { r1: f64, r2: f64 },
    #[error("guidance bonus must exceed |r1|: r1={r1}, r3={r3}")]
    BadBonus { r1: f64, r3: f64 },
}

/// Reward constants. Defaults follow the reference configuration:
/// r1 = -0.01 (step), r2 = -0.1 (collision surcharge), r3 = 0.1 (per
/// consumed guidance cell), r4 = -0.03 (strict-mode distance penalty),
/// +0.01 for on-guidance steps in strict mode.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RewardParams {
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub r4: f64,
    pub strict_on_guidance: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams {
            r1: -0.01,
            r2: -0.1,
            r3: 0.1,
            r4: -0.03,
            strict_on_guidance: 0.01,
        }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<(), RewardError> {
        if !(self.r2 < self.r1 && self.r1 < 0.0) {
            return Err(RewardError::BadPenalties {
                r1: self.r1,
                r2: self.r2,
            });
        }
        if !(self.r3 > self.r1.abs()) {
            return Err(RewardError::BadBonus {
                r1: self.r1,
                r3: self.r3,
            });
        }
        Ok(())
    }
}

/// Which reward the training loop uses.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Detour-tolerant reward: pays per consumed guidance cell on rejoin.
    Guidance,
    /// Strict-following ablation: flat bonus on guidance, distance penalty
    /// off it.
    Strict,
}

/// Score one resolved step. Exactly one case fires:
/// 1. moved to a free cell off the active guidance: `r1`;
/// 2. blocked (static, dynamic, or off-grid attempt): `r1 + r2`;
/// 3. moved onto an active guidance cell: `r1 + N_e * r3`, consuming the
///    guidance prefix through that cell as a side effect.
///
/// A blocked attempt never consumes guidance, even when the attempted cell
/// was an active guidance cell: case 2 takes priority because the robot
/// did not actually reach it.
pub fn reward(
    params: &RewardParams,
    outcome: MoveOutcome,
    next_cell: Cell,
    guidance: &mut GuidancePath,
) -> (f64, usize) {
    if outcome.is_blocked() {
        return (params.r1 + params.r2, 0);
    }
    match guidance.remove_through(next_cell) {
        Ok(n_e) => (params.r1 + n_e as f64 * params.r3, n_e),
        Err(_) => (params.r1, 0),
    }
}

/// The strict-following ablation reward. On an active guidance cell the
/// robot earns a flat bonus (the cell is consumed, mirroring the main
/// reward's bookkeeping so observations render consumed cells as free);
/// otherwise it pays `r1 + D_r * r4` where `D_r` is the Manhattan distance
/// from `next_cell` to the nearest active guidance cell.
pub fn strict_reward(params: &RewardParams, next_cell: Cell, guidance: &mut GuidancePath) -> f64 {
    if guidance.remove_through(next_cell).is_ok() {
        return params.strict_on_guidance;
    }
    let d_r = guidance
        .active_cells()
        .iter()
        .map(|c| c.manhattan(next_cell))
        .min()
        .unwrap_or(0);
    params.r1 + d_r as f64 * params.r4
}

/// Why an episode may stop.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum EpisodeStatus {
    Continue,
    ReachedGoal,
    MaxSteps,
    LostGuidance,
    Timeout,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Phase {
    Train,
    Test,
}

/// Episode lifecycle limits. `max_steps` is the training cap
/// (50 + 10 x guidance length); `timeout` is the test cap.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpisodeRules {
    pub max_steps: usize,
    pub fov_guidance_stop: bool,
    pub timeout: usize,
}

impl EpisodeRules {
    /// Training rules for an episode whose guidance has `guidance_len`
    /// cells: cap at 50 + 10 x guidance length, stop on lost guidance.
    pub fn train(guidance_len: usize) -> Self {
        EpisodeRules {
            max_steps: 50 + 10 * guidance_len,
            fov_guidance_stop: true,
            timeout: usize::MAX,
        }
    }

    /// Single-robot test rules: run until goal or twice the start/goal
    /// Manhattan distance.
    pub fn test_single(start: Cell, goal: Cell) -> Self {
        EpisodeRules {
            max_steps: usize::MAX,
            fov_guidance_stop: false,
            timeout: TEST_TIMEOUT_FACTOR * start.manhattan(goal),
        }
    }

    /// Multi-robot test rules: fixed 100-tick timeout.
    pub fn test_multi() -> Self {
        EpisodeRules {
            max_steps: usize::MAX,
            fov_guidance_stop: false,
            timeout: MULTI_ROBOT_TIMEOUT,
        }
    }
}

/// Decide whether the episode ends after `steps_taken` resolved steps.
/// Training stops on goal, lost guidance, or the step cap; testing stops
/// only on goal or timeout.
pub fn episode_should_end(
    rules: &EpisodeRules,
    phase: Phase,
    steps_taken: usize,
    robot_cell: Cell,
    goal: Cell,
    fov_has_guidance: bool,
) -> EpisodeStatus {
    if robot_cell == goal {
        return EpisodeStatus::ReachedGoal;
    }
    match phase {
        Phase::Train => {
            if rules.fov_guidance_stop && !fov_has_guidance {
                EpisodeStatus::LostGuidance
            } else if steps_taken >= rules.max_steps {
                EpisodeStatus::MaxSteps
            } else {
                EpisodeStatus::Continue
            }
        }
        Phase::Test => {
            if steps_taken >= rules.timeout {
                EpisodeStatus::Timeout
            } else {
                EpisodeStatus::Continue
            }
        }
    }
}
