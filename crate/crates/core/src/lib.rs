//! Discrete-grid path planning workbench: a static-map global guidance
//! layer, a locally-observing value-learning planner trained against a
//! detour-tolerant guidance reward, re-planning and cooperative search
//! baselines, and a benchmark harness with conflict auditing.

pub mod audit;
pub mod baselines;
pub mod benchrun;
pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod grid;
pub mod guidance;
pub mod learner;
pub mod metrics;
pub mod multi;
pub mod net;
pub mod observation;
pub mod replay;
pub mod reward;
pub mod world;

pub use grid::{generate_map, Action, Cell, GridMap, MapError, MapKind, MoveOutcome};
pub use guidance::{astar, astar_with, GuidancePath, PathError, TieBreak};
pub use observation::{observe, InputSequence, ObservationFrame};
pub use reward::{
    episode_should_end, reward, strict_reward, EpisodeRules, EpisodeStatus, Phase, RewardMode,
    RewardParams,
};
pub use world::{spawn_obstacles, ConflictStats, DynamicObstacle, RobotState, WorldState};
