//! Manual full-profile pilots: `cargo test --test pilot2 -- --ignored --nocapture`

use std::sync::Arc;
use std::time::Instant;

use gridrl_core::benchrun::{run_single_benchmark, PlannerKind, SingleBenchArgs};
use gridrl_core::grid::{generate_map, MapKind};
use gridrl_core::learner::{train, TrainConfig, TrainSetup};
use gridrl_core::net::NetConfig;
use gridrl_core::reward::{RewardMode, RewardParams};

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

#[test]
#[ignore]
fn pilot_schedule_sweep() {
    let map = generate_map(MapKind::Random, 20, 20, 0.15, 1).unwrap();
    for (name, steps, decay, freq, gamma) in [
        ("A:100k/decay100k/f4/g.99", 100_000usize, 100_000usize, 4usize, 0.99),
        ("B:100k/decay75k/f2/g.95", 100_000, 75_000, 2, 0.95),
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
            eps_decay_steps: decay,
            learning_rate: 3e-4,
            gamma,
            prefill: 3_000,
            buffer_capacity: 50_000,
            train_freq: freq,
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
        let args = SingleBenchArgs {
            manhattan: 20,
            instances: 50,
            n_obstacles: 20,
            fov: 9,
            seed: 4242,
            reward_params: RewardParams::default(),
        };
        let reports = run_single_benchmark(
            &map,
            &[
                PlannerKind::Learned(Arc::new(res.net)),
                PlannerKind::LocalReplan,
            ],
            &args,
        )
        .unwrap();
        println!(
            "{name}: {:.0?} train, {} eps, last100 {reached} | learned sr {:.2} mc {:.3} | local sr {:.2} mc {:.3}",
            t0.elapsed(),
            res.episodes.len(),
            reports[0].success_rate,
            reports[0].moving_cost.mean,
            reports[1].success_rate,
            reports[1].moving_cost.mean,
        );
    }
}
