//! Manual learning pilots: `cargo test --test pilot -- --ignored --nocapture`

use std::collections::HashSet;
use std::time::Instant;

use gridrl_core::grid::{generate_map, Action, Cell, MapKind};
use gridrl_core::guidance::GuidancePath;
use gridrl_core::learner::{act_greedy, train, TrainConfig, TrainSetup};
use gridrl_core::net::{NetConfig, QNetwork};
use gridrl_core::observation::{observe, InputSequence};
use gridrl_core::reward::{RewardMode, RewardParams};
use gridrl_core::world::{spawn_obstacles, WorldState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn desk_net() -> NetConfig {
    NetConfig {
        fov: 9,
        seq_len: 4,
        conv_blocks: 3,
        base_channels: 4,
        lstm_units: 64,
        dense_units: 64,
    }
}

/// Greedy rollout of the trained policy on one instance; returns steps on
/// success.
fn rollout(
    net: &QNetwork<f32>,
    map: &gridrl_core::grid::GridMap,
    start: Cell,
    goal: Cell,
    n_obstacles: usize,
    obstacle_seed: u64,
    world_seed: u64,
) -> Option<usize> {
    let fov = net.cfg().fov;
    let n_t = net.cfg().seq_len;
    let mut world = WorldState::new(map.clone());
    let mut occupied = HashSet::new();
    occupied.insert(start);
    world.set_obstacles(spawn_obstacles(map, n_obstacles, obstacle_seed, &occupied).unwrap());
    let robot = world.add_robot(start, goal).unwrap();
    let mut guidance = GuidancePath::compute(map, start, goal).unwrap();
    guidance.remove_through(start).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(world_seed);
    let timeout = 2 * start.manhattan(goal);
    let mut seq = InputSequence::empty(n_t, fov, fov)
        .push(observe(&world, robot, &guidance, fov, fov).unwrap());
    for step in 1..=timeout {
        let input = net.input_from_sequence(&seq);
        let a = act_greedy(net, &input);
        world.step_obstacles(&mut rng);
        let _ = world
            .apply_robot_action(robot, Action::from_index(a).unwrap())
            .unwrap();
        let pos = world.robots()[robot].position;
        let _ = guidance.remove_through(pos);
        if pos == goal {
            return Some(step);
        }
        seq = seq.push(observe(&world, robot, &guidance, fov, fov).unwrap());
    }
    None
}

fn eval_net(net: &QNetwork<f32>, map: &gridrl_core::grid::GridMap, n: usize) -> (f64, f64) {
    let free: Vec<Cell> = map.free_cells().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(777);
    let mut successes = 0usize;
    let mut cost_sum = 0.0;
    let mut done = 0usize;
    while done < n {
        let s = free[rng.gen_range(0..free.len())];
        let g = free[rng.gen_range(0..free.len())];
        if s.manhattan(g) != 20 || GuidancePath::compute(map, s, g).is_err() {
            continue;
        }
        let inst = done as u64;
        done += 1;
        if let Some(steps) = rollout(net, map, s, g, 20, 9000 + inst, 500 + inst) {
            successes += 1;
            cost_sum += steps as f64 / 20.0;
        }
    }
    (
        successes as f64 / n as f64,
        if successes > 0 { cost_sum / successes as f64 } else { f64::NAN },
    )
}

#[test]
#[ignore]
fn pilot_lr_sweep() {
    let map = generate_map(MapKind::Random, 20, 20, 0.15, 1).unwrap();
    for (name, lr, steps, eps_decay) in [
        ("lr3e-4/40k", 3e-4, 40_000usize, 40_000usize),
        ("lr3e-5/40k", 3e-5, 40_000, 40_000),
    ] {
        let setup = TrainSetup {
            map: map.clone(),
            n_obstacles: 20,
            reward_params: RewardParams::default(),
            reward_mode: RewardMode::Guidance,
            net: desk_net(),
        };
        let cfg = TrainConfig {
            total_steps: steps,
            eps_decay_steps: eps_decay,
            learning_rate: lr,
            prefill: 2_000,
            buffer_capacity: 50_000,
            train_freq: 4,
            ..Default::default()
        };
        let t0 = Instant::now();
        let res = train(&setup, &cfg, 11, None, None).unwrap();
        let reached = res
            .episodes
            .iter()
            .rev()
            .take(100)
            .filter(|e| format!("{:?}", e.outcome) == "ReachedGoal")
            .count();
        let (sr, mc) = eval_net(&res.net, &map, 30);
        println!(
            "{name}: {:.1?} train, {} eps, last100 reached {reached}; eval success {sr:.2} mc {mc:.3}",
            t0.elapsed(),
            res.episodes.len()
        );
    }
}
