//! Dynamic world state: scripted obstacles with the wait-or-reverse
//! behavior model, robots, occupancy tracking, and single-step transition
//! semantics.
//!
//! Occupancy axioms maintained by every mutation:
//! - no two occupants (obstacle or active robot) ever share a cell,
//! - no swap: occupants never exchange cells between consecutive ticks,
//! - every per-tick displacement has L1 norm <= 1.

use std::collections::HashSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grid::{Action, Cell, GridMap, MoveOutcome};
use crate::guidance::astar;

/// Probability that a blocked obstacle waits in place; otherwise it
/// reverses direction.
pub const OBSTACLE_WAIT_PROB: f64 = 0.9;

const SPAWN_RETRIES: usize = 40;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("unknown robot id {0}")]
    UnknownRobot(usize),
    #[error("robot {0} has already reached its goal")]
    RobotDone(usize),
    #[error("cell {0:?} is not a free, unoccupied cell")]
    CellUnavailable(Cell),
}

#[derive(Debug, Error)]
pub enum SpawnError {
    #[error("requested {count} obstacles but only {available} free cells are unoccupied")]
    TooMany { count: usize, available: usize },
    #[error("could not place obstacle {id} after {retries} retries")]
    NoPlacement { id: usize, retries: usize },
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ObstacleMode {
    /// Traveling from start toward goal.
    Forward,
    /// Traveling back toward its start cell after a reversal.
    Reversing,
}

/// A scripted moving obstacle. It follows `desired_path` one cell per tick;
/// on conflict it waits with probability 0.9, otherwise it reverses: a new
/// path is planned from its current cell back to the opposite endpoint and
/// followed instead.
#[derive(Clone, Debug)]
pub struct DynamicObstacle {
    pub id: usize,
    pub start: Cell,
    pub goal: Cell,
    desired_path: Vec<Cell>,
    cursor: usize,
    mode: ObstacleMode,
    position: Cell,
}

impl DynamicObstacle {
    pub fn position(&self) -> Cell {
        self.position
    }

    pub fn mode(&self) -> ObstacleMode {
        self.mode
    }

    pub fn desired_path(&self) -> &[Cell] {
        &self.desired_path
    }

    /// True when the obstacle has exhausted its current path and parks on
    /// its final cell until obstacles are re-randomized or the run ends.
    pub fn is_parked(&self) -> bool {
        self.cursor + 1 >= self.desired_path.len()
    }

    fn next_cell(&self) -> Option<Cell> {
        self.desired_path.get(self.cursor + 1).copied()
    }

    /// Endpoint the obstacle would head to after a reversal.
    fn reversal_target(&self) -> Cell {
        match self.mode {
            ObstacleMode::Forward => self.start,
            ObstacleMode::Reversing => self.goal,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RobotState {
    pub id: usize,
    pub position: Cell,
    pub goal: Cell,
    pub done: bool,
}

/// Conflict decisions drawn by blocked obstacles, for behavior audits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConflictStats {
    pub waits: u64,
    pub reversals: u64,
}

impl ConflictStats {
    pub fn total(&self) -> u64 {
        self.waits + self.reversals
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Occupant {
    None,
    Obstacle(usize),
    Robot(usize),
}

/// The full mutable world: static map, scripted obstacles, robots, and a
/// per-cell occupancy index. Mutation is single-threaded per world; rng
/// streams are explicit arguments.
#[derive(Clone, Debug)]
pub struct WorldState {
    map: GridMap,
    obstacles: Vec<DynamicObstacle>,
    robots: Vec<RobotState>,
    tick: u64,
    occ: Vec<Occupant>,
    pub conflict_stats: ConflictStats,
}

impl WorldState {
    pub fn new(map: GridMap) -> Self {
        let occ = vec![Occupant::None; map.height() * map.width()];
        WorldState {
            map,
            obstacles: Vec::new(),
            robots: Vec::new(),
            tick: 0,
            occ,
            conflict_stats: ConflictStats::default(),
        }
    }

    pub fn map(&self) -> &GridMap {
        &self.map
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn advance_tick(&mut self) {
        self.tick += 1;
    }

    pub fn obstacles(&self) -> &[DynamicObstacle] {
        &self.obstacles
    }

    pub fn robots(&self) -> &[RobotState] {
        &self.robots
    }

    pub fn robot(&self, id: usize) -> Result<&RobotState, WorldError> {
        self.robots.get(id).ok_or(WorldError::UnknownRobot(id))
    }

    /// True when the cell holds an obstacle or an active robot.
    pub fn is_occupied(&self, cell: Cell) -> bool {
        self.map.in_bounds(cell) && self.occ[self.map.idx(cell)] != Occupant::None
    }

    pub fn occupied_by_obstacle(&self, cell: Cell) -> bool {
        self.map.in_bounds(cell)
            && matches!(self.occ[self.map.idx(cell)], Occupant::Obstacle(_))
    }

    pub fn occupied_by_robot(&self, cell: Cell) -> bool {
        self.map.in_bounds(cell) && matches!(self.occ[self.map.idx(cell)], Occupant::Robot(_))
    }

    /// All currently occupied cells (obstacles plus active robots).
    pub fn occupied_cells(&self) -> HashSet<Cell> {
        let mut set: HashSet<Cell> =
            self.obstacles.iter().map(|o| o.position).collect();
        set.extend(self.robots.iter().filter(|r| !r.done).map(|r| r.position));
        set
    }

    /// Add a robot at a free, unoccupied cell. Returns its id.
    pub fn add_robot(&mut self, position: Cell, goal: Cell) -> Result<usize, WorldError> {
        if !self.map.is_free(position) || self.is_occupied(position) {
            return Err(WorldError::CellUnavailable(position));
        }
        if !self.map.is_free(goal) {
            return Err(WorldError::CellUnavailable(goal));
        }
        let id = self.robots.len();
        self.robots.push(RobotState {
            id,
            position,
            goal,
            done: position == goal,
        });
        if position != goal {
            let idx = self.map.idx(position);
            self.occ[idx] = Occupant::Robot(id);
        }
        Ok(id)
    }

    /// Remove every robot (between training episodes). Obstacles keep
    /// their positions and plans.
    pub fn clear_robots(&mut self) {
        for r in &self.robots {
            if !r.done {
                let idx = self.map.idx(r.position);
                self.occ[idx] = Occupant::None;
            }
        }
        self.robots.clear();
    }

    /// Install a freshly spawned obstacle population, replacing any
    /// previous one.
    pub fn set_obstacles(&mut self, obstacles: Vec<DynamicObstacle>) {
        for o in &self.obstacles {
            let idx = self.map.idx(o.position);
            if matches!(self.occ[idx], Occupant::Obstacle(_)) {
                self.occ[idx] = Occupant::None;
            }
        }
        self.obstacles = obstacles;
        for (i, o) in self.obstacles.iter().enumerate() {
            debug_assert!(!self.is_occupied(o.position));
            let idx = self.map.idx(o.position);
            self.occ[idx] = Occupant::Obstacle(i);
        }
    }

    /// Advance every obstacle one tick, in ascending id order. A blocked
    /// obstacle draws from `rng`: with probability 0.9 it waits, otherwise
    /// it reverses direction (re-planning a path to the opposite endpoint
    /// around the cells occupied at that moment).
    pub fn step_obstacles(&mut self, rng: &mut impl Rng) {
        for i in 0..self.obstacles.len() {
            if self.obstacles[i].is_parked() {
                continue;
            }
            let next = self.obstacles[i].next_cell().expect("non-parked obstacle");
            if !self.is_occupied(next) {
                let from = self.obstacles[i].position;
                self.occ[self.map.idx(from)] = Occupant::None;
                self.occ[self.map.idx(next)] = Occupant::Obstacle(i);
                self.obstacles[i].position = next;
                self.obstacles[i].cursor += 1;
            } else if rng.gen::<f64>() < OBSTACLE_WAIT_PROB {
                self.conflict_stats.waits += 1;
            } else {
                self.conflict_stats.reversals += 1;
                self.reverse_obstacle(i);
            }
        }
    }

    fn reverse_obstacle(&mut self, i: usize) {
        let position = self.obstacles[i].position;
        let target = self.obstacles[i].reversal_target();
        let mut blocked = self.occupied_cells();
        blocked.remove(&position);
        blocked.remove(&target);
        match astar(&self.map, position, target, &blocked) {
            Ok(path) => {
                let ob = &mut self.obstacles[i];
                ob.mode = match ob.mode {
                    ObstacleMode::Forward => ObstacleMode::Reversing,
                    ObstacleMode::Reversing => ObstacleMode::Forward,
                };
                ob.desired_path = path;
                ob.cursor = 0;
            }
            Err(_) => {
                // Nowhere to retreat; keep waiting on the current plan.
            }
        }
    }

    /// Attempt a robot action. Blocked and off-grid attempts leave the
    /// position unchanged. A robot that reaches its goal is flagged done
    /// and removed from occupancy.
    pub fn apply_robot_action(
        &mut self,
        robot_id: usize,
        action: Action,
    ) -> Result<MoveOutcome, WorldError> {
        let robot = *self
            .robots
            .get(robot_id)
            .ok_or(WorldError::UnknownRobot(robot_id))?;
        if robot.done {
            return Err(WorldError::RobotDone(robot_id));
        }
        if action == Action::Idle {
            return Ok(MoveOutcome::Moved);
        }
        let (dr, dc) = action.delta();
        let target = match robot
            .position
            .offset(dr, dc, self.map.height(), self.map.width())
        {
            Some(c) => c,
            None => return Ok(MoveOutcome::OffGrid),
        };
        if self.map.is_static(target) {
            return Ok(MoveOutcome::BlockedStatic);
        }
        if self.is_occupied(target) {
            return Ok(MoveOutcome::BlockedDynamic);
        }
        let from_idx = self.map.idx(robot.position);
        self.occ[from_idx] = Occupant::None;
        self.robots[robot_id].position = target;
        if target == robot.goal {
            self.robots[robot_id].done = true;
        } else {
            self.occ[self.map.idx(target)] = Occupant::Robot(robot_id);
        }
        Ok(MoveOutcome::Moved)
    }

    /// Directly place an active robot at `target` (used by the multi-robot
    /// arbiter after it has validated the joint move). Target must be free
    /// and unoccupied.
    pub(crate) fn commit_robot_move(&mut self, robot_id: usize, target: Cell) {
        let robot = self.robots[robot_id];
        debug_assert!(!robot.done);
        debug_assert!(self.map.is_free(target));
        debug_assert!(!self.is_occupied(target) || robot.position == target);
        if robot.position == target {
            return;
        }
        self.occ[self.map.idx(robot.position)] = Occupant::None;
        self.robots[robot_id].position = target;
        if target == robot.goal {
            self.robots[robot_id].done = true;
        } else {
            self.occ[self.map.idx(target)] = Occupant::Robot(robot_id);
        }
    }

    /// Exhaustive occupancy-index consistency check, for tests.
    pub fn check_occupancy(&self) -> bool {
        let mut expect = vec![Occupant::None; self.map.height() * self.map.width()];
        for (i, o) in self.obstacles.iter().enumerate() {
            let idx = self.map.idx(o.position);
            if expect[idx] != Occupant::None {
                return false;
            }
            expect[idx] = Occupant::Obstacle(i);
        }
        for r in self.robots.iter().filter(|r| !r.done) {
            let idx = self.map.idx(r.position);
            if expect[idx] != Occupant::None {
                return false;
            }
            expect[idx] = Occupant::Robot(r.id);
        }
        expect == self.occ
    }
}

/// Spawn `count` obstacles with distinct random start cells and distinct
/// goals. Each desired path is planned on the static map treating the other
/// occupants' current cells as blocked at plan time. Obstacles whose
/// start/goal pair admits no path are re-sampled up to a bounded retry
/// count.
pub fn spawn_obstacles(
    map: &GridMap,
    count: usize,
    seed: u64,
    occupied: &HashSet<Cell>,
) -> Result<Vec<DynamicObstacle>, SpawnError> {
    let free: Vec<Cell> = map
        .free_cells()
        .filter(|c| !occupied.contains(c))
        .collect();
    if count > free.len() {
        return Err(SpawnError::TooMany {
            count,
            available: free.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken: HashSet<Cell> = occupied.clone();
    let mut goals: HashSet<Cell> = HashSet::new();
    let mut obstacles = Vec::with_capacity(count);
    for id in 0..count {
        let mut placed = false;
        for _ in 0..SPAWN_RETRIES {
            let start = free[rng.gen_range(0..free.len())];
            if taken.contains(&start) {
                continue;
            }
            let goal = free[rng.gen_range(0..free.len())];
            if goal == start || goals.contains(&goal) {
                continue;
            }
            let mut blocked = taken.clone();
            blocked.remove(&goal);
            let path = match astar(map, start, goal, &blocked) {
                Ok(p) => p,
                Err(_) => continue,
            };
            taken.insert(start);
            goals.insert(goal);
            obstacles.push(DynamicObstacle {
                id,
                start,
                goal,
                desired_path: path,
                cursor: 0,
                mode: ObstacleMode::Forward,
                position: start,
            });
            placed = true;
            break;
        }
        if !placed {
            return Err(SpawnError::NoPlacement {
                id,
                retries: SPAWN_RETRIES,
            });
        }
    }
    Ok(obstacles)
}

/// Build a parked obstacle pinned to one cell, for scripted scenarios.
pub fn scripted_obstacle(id: usize, cell: Cell) -> DynamicObstacle {
    DynamicObstacle {
        id,
        start: cell,
        goal: cell,
        desired_path: vec![cell],
        cursor: 0,
        mode: ObstacleMode::Forward,
        position: cell,
    }
}

/// Build an obstacle that wants to walk the given path, for scripted
/// scenarios. The path must be non-empty with 4-adjacent consecutive cells.
pub fn scripted_obstacle_with_path(id: usize, path: Vec<Cell>) -> DynamicObstacle {
    assert!(!path.is_empty());
    for i in 1..path.len() {
        assert_eq!(path[i - 1].manhattan(path[i]), 1);
    }
    DynamicObstacle {
        id,
        start: path[0],
        goal: *path.last().unwrap(),
        position: path[0],
        desired_path: path,
        cursor: 0,
        mode: ObstacleMode::Forward,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{generate_map, MapKind};

    fn free_map(h: usize, w: usize) -> GridMap {
        GridMap::build(h, w, std::iter::empty()).unwrap()
    }

    #[test]
    fn spawn_zero_is_empty() {
        let map = free_map(5, 5);
        let obs = spawn_obstacles(&map, 0, 1, &HashSet::new()).unwrap();
        assert!(obs.is_empty());
    }

    #[test]
    fn spawn_has_distinct_starts() {
        let map = free_map(10, 10);
        let obs = spawn_obstacles(&map, 5, 3, &HashSet::new()).unwrap();
        assert_eq!(obs.len(), 5);
        let starts: HashSet<Cell> = obs.iter().map(|o| o.start).collect();
        assert_eq!(starts.len(), 5);
    }

    #[test]
    fn spawn_density_on_random_map() {
        let map = generate_map(MapKind::Random, 100, 100, 0.15, 11).unwrap();
        let obs = spawn_obstacles(&map, 500, 12, &HashSet::new()).unwrap();
        assert_eq!(obs.len(), 500);
    }

    #[test]
    fn spawn_too_many_is_rejected() {
        let map = free_map(3, 3);
        assert!(matches!(
            spawn_obstacles(&map, 10, 1, &HashSet::new()),
            Err(SpawnError::TooMany { .. })
        ));
    }

    #[test]
    fn obstacle_advances_when_clear() {
        let map = free_map(1, 4);
        let mut world = WorldState::new(map);
        let path: Vec<Cell> = (0..4).map(|c| Cell::new(0, c)).collect();
        world.set_obstacles(vec![scripted_obstacle_with_path(0, path)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        world.step_obstacles(&mut rng);
        assert_eq!(world.obstacles()[0].position(), Cell::new(0, 1));
        assert_eq!(world.conflict_stats.total(), 0);
    }

    #[test]
    fn contended_cell_goes_to_ascending_id() {
        // Two obstacles on a 1x3 strip both want the middle cell; the one
        // with the lower id moves first and wins regardless of insertion
        // order of intents.
        let map = free_map(1, 3);
        let mut world = WorldState::new(map);
        world.set_obstacles(vec![
            scripted_obstacle_with_path(0, vec![Cell::new(0, 0), Cell::new(0, 1)]),
            scripted_obstacle_with_path(1, vec![Cell::new(0, 2), Cell::new(0, 1)]),
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        world.step_obstacles(&mut rng);
        assert_eq!(world.obstacles()[0].position(), Cell::new(0, 1));
        assert_eq!(world.obstacles()[1].position(), Cell::new(0, 2));
        assert!(world.check_occupancy());
        // The loser registered exactly one conflict decision.
        assert_eq!(world.conflict_stats.total(), 1);
    }

    #[test]
    fn blocked_obstacle_eventually_reverses_and_retraces() {
        // Obstacle 0 wants to advance into a permanently parked obstacle.
        // Force the reversal branch by scanning seeds until one fires, then
        // check the retreat.
        let map = free_map(1, 5);
        for seed in 0..200u64 {
            let mut world = WorldState::new(map.clone());
            world.set_obstacles(vec![
                scripted_obstacle_with_path(0, (0..5).map(|c| Cell::new(0, c)).collect()),
                scripted_obstacle(1, Cell::new(0, 3)),
            ]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Two free advances bring it to (0,2), adjacent to the blocker.
            world.step_obstacles(&mut rng);
            world.step_obstacles(&mut rng);
            assert_eq!(world.obstacles()[0].position(), Cell::new(0, 2));
            world.step_obstacles(&mut rng);
            if world.conflict_stats.reversals == 1 {
                assert_eq!(world.obstacles()[0].mode(), ObstacleMode::Reversing);
                // Position unchanged on the reversal tick.
                assert_eq!(world.obstacles()[0].position(), Cell::new(0, 2));
                // Next tick it retraces toward its start.
                world.step_obstacles(&mut rng);
                assert_eq!(world.obstacles()[0].position(), Cell::new(0, 1));
                return;
            }
        }
        panic!("no reversal drawn in 200 seeds");
    }

    #[test]
    fn robot_moves_and_outcomes() {
        let map = GridMap::build(3, 3, vec![Cell::new(0, 1)]).unwrap();
        let mut world = WorldState::new(map);
        let id = world
            .add_robot(Cell::new(0, 0), Cell::new(2, 2))
            .unwrap();
        // Idle counts as a trivial move.
        assert_eq!(
            world.apply_robot_action(id, Action::Idle).unwrap(),
            MoveOutcome::Moved
        );
        assert_eq!(world.robot(id).unwrap().position, Cell::new(0, 0));
        // Static obstacle blocks; position unchanged.
        assert_eq!(
            world.apply_robot_action(id, Action::Right).unwrap(),
            MoveOutcome::BlockedStatic
        );
        assert_eq!(world.robot(id).unwrap().position, Cell::new(0, 0));
        // Off-grid blocks.
        assert_eq!(
            world.apply_robot_action(id, Action::Up).unwrap(),
            MoveOutcome::OffGrid
        );
        // Normal move.
        assert_eq!(
            world.apply_robot_action(id, Action::Down).unwrap(),
            MoveOutcome::Moved
        );
        assert_eq!(world.robot(id).unwrap().position, Cell::new(1, 0));
    }

    #[test]
    fn robot_blocked_by_obstacle() {
        let map = free_map(1, 3);
        let mut world = WorldState::new(map);
        world.set_obstacles(vec![scripted_obstacle(0, Cell::new(0, 1))]);
        let id = world.add_robot(Cell::new(0, 0), Cell::new(0, 2)).unwrap();
        assert_eq!(
            world.apply_robot_action(id, Action::Right).unwrap(),
            MoveOutcome::BlockedDynamic
        );
        assert_eq!(world.robot(id).unwrap().position, Cell::new(0, 0));
    }

    #[test]
    fn reaching_goal_flags_done_and_frees_cell() {
        let map = free_map(1, 3);
        let mut world = WorldState::new(map);
        let id = world.add_robot(Cell::new(0, 0), Cell::new(0, 1)).unwrap();
        assert_eq!(
            world.apply_robot_action(id, Action::Right).unwrap(),
            MoveOutcome::Moved
        );
        let robot = *world.robot(id).unwrap();
        assert!(robot.done);
        assert_eq!(robot.position, Cell::new(0, 1));
        assert!(!world.is_occupied(Cell::new(0, 1)));
        assert!(world.apply_robot_action(id, Action::Left).is_err());
    }

    #[test]
    fn unknown_robot_is_an_error() {
        let map = free_map(2, 2);
        let mut world = WorldState::new(map);
        assert!(world.apply_robot_action(7, Action::Idle).is_err());
    }

    #[test]
    fn occupancy_and_no_swap_hold_under_random_stepping() {
        let map = generate_map(MapKind::Random, 20, 20, 0.15, 21).unwrap();
        let mut world = WorldState::new(map.clone());
        let obs = spawn_obstacles(&map, 30, 22, &HashSet::new()).unwrap();
        world.set_obstacles(obs);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut prev: Vec<Cell> = world.obstacles().iter().map(|o| o.position()).collect();
        for _ in 0..2000 {
            world.step_obstacles(&mut rng);
            assert!(world.check_occupancy());
            let cur: Vec<Cell> = world.obstacles().iter().map(|o| o.position()).collect();
            for i in 0..cur.len() {
                assert!(prev[i].manhattan(cur[i]) <= 1, "adjacency violated");
                for j in 0..cur.len() {
                    if i != j {
                        assert!(
                            !(cur[i] == prev[j] && cur[j] == prev[i]),
                            "swap between {i} and {j}"
                        );
                    }
                }
            }
            prev = cur;
        }
    }

    #[test]
    fn obstacle_trajectories_are_seed_deterministic() {
        let map = generate_map(MapKind::Random, 15, 15, 0.1, 4).unwrap();
        let run = |seed: u64| -> Vec<Cell> {
            let mut world = WorldState::new(map.clone());
            world.set_obstacles(spawn_obstacles(&map, 10, 99, &HashSet::new()).unwrap());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut log = Vec::new();
            for _ in 0..200 {
                world.step_obstacles(&mut rng);
                log.extend(world.obstacles().iter().map(|o| o.position()));
            }
            log
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }
}
