//! Double-Q learning on the value network: target computation, the
//! prioritized-replay training step, the epsilon-greedy schedule, and the
//! single-robot training loop.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Action, Cell, GridMap};
use crate::guidance::GuidancePath;
use crate::net::{NetConfig, QNetwork, Real};
use crate::observation::{observe, InputSequence};
use crate::replay::{ReplayBuffer, ReplayError, Transition};
use crate::reward::{
    episode_should_end, reward, strict_reward, EpisodeRules, EpisodeStatus, Phase, RewardMode,
    RewardParams,
};
use crate::world::{spawn_obstacles, SpawnError, WorldState};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("could not sample a solvable start/goal pair after {0} tries")]
    NoInstance(usize),
    #[error(transparent)]
    Spawn(#[from] SpawnError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Net(#[from] crate::net::NetError),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Training hyperparameters. Defaults are the reference protocol: batch 32,
/// learning rate 3e-5 under an RMS-style adaptive optimizer, epsilon from
/// 1.0 to 0.1 over 200k steps.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    pub rms_decay: f64,
    pub rms_eps: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_decay_steps: usize,
    pub batch_size: usize,
    pub target_sync_period: usize,
    pub buffer_capacity: usize,
    pub total_steps: usize,
    /// Run one optimizer step every `train_freq` environment steps.
    pub train_freq: usize,
    /// Random-policy transitions collected before learning starts.
    pub prefill: usize,
    pub per_alpha: f64,
    pub per_beta_start: f64,
    pub per_beta_end: f64,
    pub per_eps: f64,
    /// Re-randomize all obstacle start/goal cells every this many episodes.
    pub rerandomize_episodes: usize,
    /// Save a checkpoint every this many environment steps (0 = only final).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.99,
            learning_rate: 3e-5,
            rms_decay: 0.9,
            rms_eps: 1e-8,
            eps_start: 1.0,
            eps_end: 0.1,
            eps_decay_steps: 200_000,
            batch_size: 32,
            target_sync_period: 1_000,
            buffer_capacity: 100_000,
            total_steps: 200_000,
            train_freq: 4,
            prefill: 10_000,
            per_alpha: 0.6,
            per_beta_start: 0.4,
            per_beta_end: 1.0,
            per_eps: 1e-6,
            rerandomize_episodes: 50,
            checkpoint_every: 0,
        }
    }
}

/// Linear exploration schedule: `eps_start` at step 0 down to `eps_end` at
/// `eps_decay_steps`, constant afterwards.
pub fn epsilon_at(cfg: &TrainConfig, step: usize) -> f64 {
    if cfg.eps_decay_steps == 0 {
        return cfg.eps_end;
    }
    let frac = (step as f64 / cfg.eps_decay_steps as f64).min(1.0);
    cfg.eps_start + (cfg.eps_end - cfg.eps_start) * frac
}

/// Importance-sampling exponent annealed linearly over training.
pub fn beta_at(cfg: &TrainConfig, step: usize) -> f64 {
    if cfg.total_steps == 0 {
        return cfg.per_beta_end;
    }
    let frac = (step as f64 / cfg.total_steps as f64).min(1.0);
    cfg.per_beta_start + (cfg.per_beta_end - cfg.per_beta_start) * frac
}

/// Index of the maximum value; ties resolve to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Epsilon-greedy action selection over the network's action values.
pub fn select_action<T: Real>(
    net: &QNetwork<T>,
    input: &[T],
    epsilon: f64,
    rng: &mut impl Rng,
) -> usize {
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        rng.gen_range(0..Action::ALL.len())
    } else {
        argmax(&net.forward(input))
    }
}

/// Greedy action: `select_action` with epsilon 0.
pub fn act_greedy<T: Real>(net: &QNetwork<T>, input: &[T]) -> usize {
    argmax(&net.forward(input))
}

/// Double-Q target from precomputed next-state values: the online network
/// chooses the action, the target network evaluates it.
pub fn ddqn_target_from_q<T: Real>(
    reward: f64,
    terminal: bool,
    gamma: f64,
    q_next_online: &[T],
    q_next_target: &[T],
) -> f64 {
    if terminal {
        return reward;
    }
    let best = argmax(q_next_online);
    reward + gamma * q_next_target[best].to_f64()
}

/// Double-Q target for a stored transition.
pub fn ddqn_target<T: Real>(
    online: &QNetwork<T>,
    target: &QNetwork<T>,
    tr: &Transition,
    gamma: f64,
) -> f64 {
    if tr.terminal {
        return tr.reward;
    }
    let input = online.input_from_sequence(&tr.next_state);
    let q_online = online.forward(&input);
    let q_target = target.forward(&input);
    ddqn_target_from_q(tr.reward, false, gamma, &q_online, &q_target)
}

/// RMS-style adaptive optimizer: per-parameter running mean square of the
/// gradient normalizes the step.
#[derive(Clone, Debug)]
pub struct RmsProp<T> {
    v: Vec<T>,
    decay: f64,
    eps: f64,
}

impl<T: Real> RmsProp<T> {
    pub fn new(n_params: usize, decay: f64, eps: f64) -> Self {
        RmsProp {
            v: vec![T::zero(); n_params],
            decay,
            eps,
        }
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T], lr: f64) {
        let decay = T::from_f64(self.decay);
        let one_minus = T::from_f64(1.0 - self.decay);
        let eps = T::from_f64(self.eps);
        let lr = T::from_f64(lr);
        for ((p, &g), v) in params.iter_mut().zip(grad).zip(&mut self.v) {
            *v = decay * *v + one_minus * g * g;
            *p = *p - lr * g / (v.sqrt() + eps);
        }
    }
}

/// One item of a training batch: network input, taken action, frozen
/// target, and importance weight.
pub struct BatchItem<T> {
    pub input: Vec<T>,
    pub action: usize,
    pub target: f64,
    pub weight: f64,
}

/// Mean weighted squared TD error over the batch with fixed targets.
pub fn batch_loss<T: Real>(net: &QNetwork<T>, items: &[BatchItem<T>]) -> f64 {
    let n = items.len() as f64;
    let mut loss = 0.0;
    for item in items {
        let q = net.forward(&item.input);
        let td = item.target - q[item.action].to_f64();
        loss += item.weight * td * td;
    }
    loss / n
}

/// Mean weighted squared TD error over the batch, with the gradient
/// accumulated into `grad` (which must be zeroed by the caller). Targets
/// are fixed constants: this is the semi-gradient loss. Returns the loss
/// and the per-item TD errors.
pub fn batch_loss_and_grad<T: Real>(
    net: &QNetwork<T>,
    items: &[BatchItem<T>],
    grad: &mut [T],
) -> (f64, Vec<f64>) {
    let n = items.len() as f64;
    let mut loss = 0.0;
    let mut tds = Vec::with_capacity(items.len());
    let mut dq = vec![T::zero(); net.cfg().actions()];
    for item in items {
        let (q, trace) = net.forward_traced(&item.input);
        let td = item.target - q[item.action].to_f64();
        loss += item.weight * td * td;
        tds.push(td);
        for d in dq.iter_mut() {
            *d = T::zero();
        }
        dq[item.action] = T::from_f64(-2.0 * item.weight * td / n);
        net.backward(&trace, &dq, grad);
    }
    (loss / n, tds)
}

/// One optimizer step: sample a prioritized batch, build double-Q targets,
/// descend the weighted squared TD error, refresh the sampled priorities
/// from the new TD magnitudes.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Real>(
    net: &mut QNetwork<T>,
    target: &QNetwork<T>,
    buffer: &mut ReplayBuffer,
    opt: &mut RmsProp<T>,
    cfg: &TrainConfig,
    beta: f64,
    rng: &mut impl Rng,
    grad: &mut Vec<T>,
) -> Result<f64, ReplayError> {
    let samples = buffer.sample(cfg.batch_size, beta, rng)?;
    let mut items = Vec::with_capacity(samples.len());
    for s in &samples {
        let tr = buffer.get(s.index);
        let y = ddqn_target(net, target, tr, cfg.gamma);
        items.push(BatchItem {
            input: net.input_from_sequence(&tr.state),
            action: tr.action,
            target: y,
            weight: s.weight,
        });
    }
    grad.clear();
    grad.resize(net.num_params(), T::zero());
    let (loss, tds) = batch_loss_and_grad(net, &items, grad);
    // Refresh priorities from the pre-update TD errors.
    for (s, td) in samples.iter().zip(&tds) {
        buffer.update_priority(s.index, td.abs());
    }
    opt.step(net.params_mut(), grad, cfg.learning_rate);
    Ok(loss)
}

/// Environment bundle the training loop runs against.
#[derive(Clone, Debug)]
pub struct TrainSetup {
    pub map: GridMap,
    pub n_obstacles: usize,
    pub reward_params: RewardParams,
    pub reward_mode: RewardMode,
    pub net: NetConfig,
}

/// Per-episode statistics; these rows form the training log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpisodeStat {
    pub episode: usize,
    pub steps: usize,
    pub ret: f64,
    pub outcome: EpisodeStatus,
    pub epsilon: f64,
    pub loss_mean: f64,
}

impl EpisodeStat {
    pub fn log_header() -> &'static str {
        "episode,steps,return,outcome,epsilon,loss_mean"
    }

    pub fn log_line(&self) -> String {
        format!(
            "{},{},{:.6},{:?},{:.4},{:.8}",
            self.episode, self.steps, self.ret, self.outcome, self.epsilon, self.loss_mean
        )
    }
}

pub struct TrainResult {
    pub net: QNetwork<f32>,
    pub episodes: Vec<EpisodeStat>,
    pub env_steps: usize,
    pub train_steps: usize,
}

struct EpisodeState {
    robot: usize,
    guidance: GuidancePath,
    rules: EpisodeRules,
    seq: InputSequence,
    steps: usize,
    ret: f64,
    losses: f64,
    n_losses: usize,
}

const INSTANCE_TRIES: usize = 200;

/// Sample a start/goal pair of free, currently unoccupied cells with a
/// computable guidance path.
fn sample_instance(
    world: &WorldState,
    rng: &mut impl Rng,
) -> Result<(Cell, Cell, GuidancePath), TrainError> {
    let map = world.map();
    let free: Vec<Cell> = map.free_cells().collect();
    for _ in 0..INSTANCE_TRIES {
        let start = free[rng.gen_range(0..free.len())];
        let goal = free[rng.gen_range(0..free.len())];
        if start == goal || world.is_occupied(start) || world.is_occupied(goal) {
            continue;
        }
        if let Ok(g) = GuidancePath::compute(map, start, goal) {
            return Ok((start, goal, g));
        }
    }
    Err(TrainError::NoInstance(INSTANCE_TRIES))
}

fn begin_episode(
    world: &mut WorldState,
    fov: usize,
    n_t: usize,
    rng: &mut impl Rng,
) -> Result<EpisodeState, TrainError> {
    let (start, goal, mut guidance) = sample_instance(world, rng)?;
    world.clear_robots();
    let robot = world.add_robot(start, goal).expect("sampled cell is free");
    guidance.remove_through(start).expect("start is on guidance");
    let rules = EpisodeRules::train(guidance.len());
    let frame = observe(world, robot, &guidance, fov, fov).expect("odd fov");
    let seq = InputSequence::empty(n_t, fov, fov).push(frame);
    Ok(EpisodeState {
        robot,
        guidance,
        rules,
        seq,
        steps: 0,
        ret: 0.0,
        losses: 0.0,
        n_losses: 0,
    })
}

/// Advance the world by one tick for the training robot: the action is
/// chosen from the current frame stack, obstacles move, then the robot's
/// move resolves against the post-move world. Returns the stored
/// transition's terminal flag and the episode status.
#[allow(clippy::too_many_arguments)]
fn env_step(
    world: &mut WorldState,
    ep: &mut EpisodeState,
    action: usize,
    setup: &TrainSetup,
    world_rng: &mut ChaCha8Rng,
) -> (Transition, EpisodeStatus) {
    let fov = setup.net.fov;
    world.step_obstacles(world_rng);
    let outcome = world
        .apply_robot_action(ep.robot, Action::from_index(action).unwrap())
        .expect("active robot");
    let pos = world.robots()[ep.robot].position;
    let (r, _n_e) = match setup.reward_mode {
        RewardMode::Guidance => reward(&setup.reward_params, outcome, pos, &mut ep.guidance),
        // Strict mode scores the post-move location directly; a blocked
        // attempt leaves the robot where it was and is scored there.
        RewardMode::Strict => (
            strict_reward(&setup.reward_params, pos, &mut ep.guidance),
            0,
        ),
    };
    world.advance_tick();
    ep.steps += 1;
    ep.ret += r;

    let goal = world.robots()[ep.robot].goal;
    let frame = observe(world, ep.robot, &ep.guidance, fov, fov).expect("odd fov");
    let fov_has_guidance = ep.guidance.has_active_in_window(pos, fov, fov);
    let status = episode_should_end(
        &ep.rules,
        Phase::Train,
        ep.steps,
        pos,
        goal,
        fov_has_guidance,
    );
    let terminal = status == EpisodeStatus::ReachedGoal;
    let next_seq = ep.seq.push(frame);
    let transition = Transition {
        state: ep.seq.clone(),
        action,
        reward: r,
        next_state: next_seq.clone(),
        terminal,
    };
    ep.seq = next_seq;
    (transition, status)
}

/// Full training run. Deterministic for a fixed seed: all randomness flows
/// from per-purpose streams derived from `seed`.
pub fn train(
    setup: &TrainSetup,
    cfg: &TrainConfig,
    seed: u64,
    mut log: Option<&mut dyn Write>,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainResult, TrainError> {
    setup.net.validate()?;
    let fov = setup.net.fov;
    let n_t = setup.net.seq_len;

    let mut net = QNetwork::<f32>::new(setup.net, seed ^ 0x6e65_7477)?;
    let mut target = net.clone();
    let mut opt = RmsProp::<f32>::new(net.num_params(), cfg.rms_decay, cfg.rms_eps);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity, cfg.per_alpha, cfg.per_eps);

    let mut world_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x776f_726c);
    let mut action_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6163_7469);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7361_6d70);
    let mut instance_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x696e_7374);
    let mut spawn_seed = seed ^ 0x7370_6177;

    let mut world = WorldState::new(setup.map.clone());
    world.set_obstacles(spawn_obstacles(
        &setup.map,
        setup.n_obstacles,
        spawn_seed,
        &HashSet::new(),
    )?);

    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{}", EpisodeStat::log_header())?;
    }

    let mut episodes: Vec<EpisodeStat> = Vec::new();
    let mut grad: Vec<f32> = Vec::new();
    let mut env_steps = 0usize; // steps counted against the training budget
    let mut train_steps = 0usize;
    let mut episode_idx = 0usize;
    let mut prefilling = cfg.prefill > 0;
    let mut next_checkpoint = cfg.checkpoint_every;

    'outer: loop {
        if episode_idx > 0 && episode_idx % cfg.rerandomize_episodes == 0 {
            spawn_seed = spawn_seed.wrapping_add(1);
            world.clear_robots();
            world.set_obstacles(spawn_obstacles(
                &setup.map,
                setup.n_obstacles,
                spawn_seed,
                &HashSet::new(),
            )?);
        }
        let mut ep = begin_episode(&mut world, fov, n_t, &mut instance_rng)?;
        let mut epsilon;

        loop {
            if prefilling && buffer.len() >= cfg.prefill {
                prefilling = false;
            }
            epsilon = if prefilling {
                1.0
            } else {
                epsilon_at(cfg, env_steps)
            };
            let input = net.input_from_sequence(&ep.seq);
            let action = select_action(&net, &input, epsilon, &mut action_rng);
            let (transition, status) = env_step(&mut world, &mut ep, action, setup, &mut world_rng);
            buffer.push(transition);

            if !prefilling {
                env_steps += 1;
                if env_steps % cfg.train_freq == 0 && buffer.len() >= cfg.batch_size {
                    let beta = beta_at(cfg, env_steps);
                    let loss = train_step(
                        &mut net,
                        &target,
                        &mut buffer,
                        &mut opt,
                        cfg,
                        beta,
                        &mut sample_rng,
                        &mut grad,
                    )?;
                    ep.losses += loss;
                    ep.n_losses += 1;
                    train_steps += 1;
                    if train_steps % cfg.target_sync_period == 0 {
                        target.sync_from(&net);
                    }
                }
                if let Some(dir) = checkpoint_dir {
                    if cfg.checkpoint_every > 0 && env_steps >= next_checkpoint {
                        next_checkpoint += cfg.checkpoint_every;
                        let path = dir.join(format!("model_{env_steps}.ckpt"));
                        crate::checkpoint::save(&path, &net, serde_json::json!(null))?;
                    }
                }
            }

            let budget_done = !prefilling && env_steps >= cfg.total_steps;
            if status != EpisodeStatus::Continue || budget_done {
                if !prefilling {
                    let stat = EpisodeStat {
                        episode: episode_idx,
                        steps: ep.steps,
                        ret: ep.ret,
                        outcome: status,
                        epsilon,
                        loss_mean: if ep.n_losses > 0 {
                            ep.losses / ep.n_losses as f64
                        } else {
                            0.0
                        },
                    };
                    if let Some(w) = log.as_deref_mut() {
                        writeln!(w, "{}", stat.log_line())?;
                    }
                    episodes.push(stat);
                }
                episode_idx += 1;
                if budget_done {
                    break 'outer;
                }
                break;
            }
        }
    }

    if let Some(dir) = checkpoint_dir {
        let path = dir.join("model_final.ckpt");
        crate::checkpoint::save(&path, &net, serde_json::json!(null))?;
    }

    Ok(TrainResult {
        net,
        episodes,
        env_steps,
        train_steps,
    })
}
