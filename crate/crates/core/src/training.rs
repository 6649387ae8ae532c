//! Policy-gradient training with experience replay and guided samples.
//!
//! Each round rolls out one episode under the current policy (or, on a
//! configurable fraction of rounds, under the receding-horizon planner,
//! whose actions enter the batch with clipped importance weights), scores
//! it with the episode reward, spreads that reward over the episode's
//! steps with a per-step discount, pads the batch from the replay buffer,
//! and ascends the score-function gradient estimate
//! `mean(weight · Q̂ · ∇ log π)`.

use std::sync::Arc;

use nalgebra::Vector2;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::dynamics::{self, Trajectory};
use crate::episode::{EnvSpec, EpisodeError};
use crate::ilqr::{ILQRConfig, IlqrError, RecedingHorizonController};
use crate::policy::{
    self, action_to_control, backward_into, forward_cached, PolicyConfig, PolicyError,
    PolicyWeights, SliceHistory,
};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Ilqr(#[from] IlqrError),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = TrainingError> = std::result::Result<T, E>;

/// One stored (state sequence, action, reward) tuple. `reward` already
/// carries the per-step discounted share of the episode reward; guided
/// samples additionally carry a clipped importance weight.
#[derive(Debug, Clone)]
pub struct Experience {
    pub obs: Arc<policy::Observation>,
    pub action: usize,
    pub reward: f64,
    pub step_index: usize,
    pub episode_len: usize,
    pub is_weight: f64,
}

/// Bounded FIFO store of experiences; the oldest entries are evicted first.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    store: std::collections::VecDeque<Experience>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            store: std::collections::VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Experience> {
        self.store.iter()
    }

    /// Appends experiences in order, evicting the oldest past capacity.
    pub fn push(&mut self, experiences: Vec<Experience>) {
        for e in experiences {
            if self.store.len() == self.capacity {
                self.store.pop_front();
            }
            self.store.push_back(e);
        }
    }
}

/// Training hyperparameters. Defaults follow the full-scale setup; the
/// desk-scale configs in the repo override the rate and batch size.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub episode_cap: usize,
    /// Blend between path quality and closest-approach penalty on failures.
    pub alpha: f64,
    /// Per-step discount applied backwards from the episode end.
    pub gamma: f64,
    pub rounds: u64,
    /// Fraction of episodes generated by the planner instead of the policy.
    pub guided_fraction: f64,
    pub replay_capacity: usize,
    /// Cap on the path-quality reward when the distance sum degenerates.
    pub r_max: f64,
    pub seed: u64,
    pub workers: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-6,
            batch_size: 500,
            episode_cap: 300,
            alpha: 0.9,
            gamma: 0.99,
            rounds: 1000,
            guided_fraction: 0.1,
            replay_capacity: 10_000,
            r_max: 10.0,
            seed: 0,
            workers: 1,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(TrainingError::InvalidConfig("alpha must be in [0,1]".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(TrainingError::InvalidConfig("gamma must be in (0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.guided_fraction) {
            return Err(TrainingError::InvalidConfig(
                "guided_fraction must be in [0,1]".into(),
            ));
        }
        if self.learning_rate <= 0.0 || self.batch_size == 0 || self.episode_cap == 0 {
            return Err(TrainingError::InvalidConfig(
                "learning_rate, batch_size, episode_cap must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Episode reward: `r_s = 1 / Σ_t π(s_t,a_t)·‖p_t − p_G‖` on success,
/// `−(α r_s + (1−α) r_d)` with `r_d = 1 − e^(−D_min)` on failure. Distances
/// are taken at the decision states; `D_min` over the whole path.
pub fn episode_reward(
    path: &Trajectory,
    probs_taken: &[f64],
    goal: Vector2<f64>,
    succeeded: bool,
    alpha: f64,
    r_max: f64,
) -> f64 {
    assert_eq!(
        probs_taken.len(),
        path.len(),
        "one probability per control step"
    );
    let mut denom = 0.0;
    for (s, p) in path.states.iter().zip(probs_taken) {
        denom += p * s.distance_to(goal);
    }
    let r_s = if denom > 0.0 {
        (1.0 / denom).min(r_max)
    } else {
        r_max
    };
    if succeeded {
        r_s
    } else {
        let d_min = path
            .states
            .iter()
            .map(|s| s.distance_to(goal))
            .fold(f64::INFINITY, f64::min);
        let r_d = 1.0 - (-d_min).exp();
        -(alpha * r_s + (1.0 - alpha) * r_d)
    }
}

/// One decision point of a rolled-out episode, before reward assignment.
#[derive(Debug, Clone)]
pub struct EpisodeStep {
    pub obs: Arc<policy::Observation>,
    pub action: usize,
    /// π(a|s) under the current policy at rollout time.
    pub prob: f64,
    /// Importance weight (1 for on-policy steps).
    pub is_weight: f64,
}

/// A finished rollout ready for reward assignment.
#[derive(Debug, Clone)]
pub struct EpisodeRecord {
    pub steps: Vec<EpisodeStep>,
    pub path: Trajectory,
    pub succeeded: bool,
    pub goal: Vector2<f64>,
}

/// Spreads the episode reward over its steps: step `t` of a `T`-step
/// episode receives `γ^(T−1−t) · r`, so later actions carry credit closer
/// to the episode outcome.
pub fn assign_rewards(steps: &[EpisodeStep], r: f64, gamma: f64) -> Vec<Experience> {
    let t_last = steps.len().saturating_sub(1);
    steps
        .iter()
        .enumerate()
        .map(|(t, s)| Experience {
            obs: s.obs.clone(),
            action: s.action,
            reward: gamma.powi((t_last - t) as i32) * r,
            step_index: t,
            episode_len: steps.len(),
            is_weight: s.is_weight,
        })
        .collect()
}

/// A training batch: the whole latest episode padded up to `batch_size`
/// with uniform draws from the buffer, then shuffled.
#[derive(Debug, Clone)]
pub struct Batch {
    pub experiences: Vec<Experience>,
    /// Set when buffer + latest could not fill `batch_size`.
    pub small: bool,
}

pub fn make_batch(
    buffer: &ReplayBuffer,
    latest: &[Experience],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Batch {
    let mut experiences: Vec<Experience> = if latest.len() >= batch_size {
        latest[latest.len() - batch_size..].to_vec()
    } else {
        let mut batch: Vec<Experience> = latest.to_vec();
        let need = batch_size - batch.len();
        let have = buffer.len();
        if have > 0 {
            let picks: Vec<usize> = if have <= need {
                (0..have).collect()
            } else {
                rand::seq::index::sample(rng, have, need).into_vec()
            };
            let store: Vec<&Experience> = buffer.iter().collect();
            batch.extend(picks.into_iter().map(|i| store[i].clone()));
        }
        batch
    };
    let small = experiences.len() < batch_size;
    experiences.shuffle(rng);
    Batch { experiences, small }
}

/// Outcome of one gradient step.
#[derive(Debug, Clone, Copy)]
pub struct UpdateStats {
    /// Surrogate loss `−mean(weight · Q̂ · log π)`.
    pub loss: f64,
    pub grad_norm: f64,
    /// Set when a non-finite gradient forced the step to be skipped.
    pub skipped: bool,
}

const GRAD_CHUNK: usize = 16;

fn experience_mask_seed(base: u64, e: &Experience) -> u64 {
    // content hash, so duplicated experiences get identical dropout masks
    // and batch duplication cannot change the mean gradient
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ base;
    let mut mix = |v: u64| {
        h ^= v;
        h = h.wrapping_mul(0x100_0000_01b3);
    };
    mix(e.action as u64);
    mix(e.step_index as u64);
    mix(e.episode_len as u64);
    mix(e.reward.to_bits());
    mix(e.is_weight.to_bits());
    for v in e.obs.vehicle {
        mix(v.to_bits());
    }
    h
}

/// One ascent step on `mean(weight · Q̂ · ∇ log π)`. Gradients accumulate
/// in fixed-size chunks combined in order, so the result is bit-identical
/// for any worker count.
pub fn update(
    weights: &mut PolicyWeights,
    batch: &Batch,
    learning_rate: f64,
    mask_seed: u64,
    workers: usize,
) -> Result<UpdateStats> {
    if batch.experiences.is_empty() {
        return Ok(UpdateStats {
            loss: 0.0,
            grad_norm: 0.0,
            skipped: false,
        });
    }
    let n = batch.experiences.len() as f64;
    let cfg = weights.cfg.clone();
    let w_ref = &*weights;
    let chunk_grad = |chunk: &[Experience]| -> Result<(PolicyWeights, f64)> {
        let mut grad = PolicyWeights::zeros(&cfg);
        let mut loss = 0.0;
        for e in chunk {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(experience_mask_seed(mask_seed, e));
            let mask = policy::sample_dropout_mask(&cfg, &mut mask_rng);
            let (dist, cache) = forward_cached(w_ref, &e.obs, Some(&mask))?;
            let coeff = e.is_weight * e.reward / n;
            backward_into(w_ref, &cache, e.action, coeff, &mut grad);
            loss -= coeff * dist.probs[e.action].max(1e-300).ln();
        }
        Ok((grad, loss))
    };

    let chunks: Vec<&[Experience]> = batch.experiences.chunks(GRAD_CHUNK).collect();
    let partials: Vec<(PolicyWeights, f64)> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| TrainingError::InvalidConfig(e.to_string()))?;
        pool.install(|| chunks.par_iter().map(|c| chunk_grad(c)).collect::<Result<Vec<_>>>())?
    } else {
        chunks
            .iter()
            .map(|c| chunk_grad(c))
            .collect::<Result<Vec<_>>>()?
    };

    let mut grad = PolicyWeights::zeros(&cfg);
    let mut loss = 0.0;
    for (g, l) in partials {
        grad.add_scaled(&g, 1.0);
        loss += l;
    }
    let grad_norm = grad.l2_norm();
    if !grad_norm.is_finite() {
        return Ok(UpdateStats {
            loss,
            grad_norm,
            skipped: true,
        });
    }
    weights.add_scaled(&grad, learning_rate);
    Ok(UpdateStats {
        loss,
        grad_norm,
        skipped: false,
    })
}

/// Per-round entry of the learning curve.
#[derive(Debug, Clone, Copy)]
pub struct RoundStats {
    pub round: u64,
    pub reward: f64,
    pub success: bool,
    pub loss: f64,
    pub steps: usize,
}

/// Final state of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: PolicyWeights,
    pub curve: Vec<RoundStats>,
    /// ChaCha word position of the training rng, for resumable checkpoints.
    pub rng_word_pos: u128,
}

/// Rolls one episode under the current policy (eval-mode forwards,
/// sampled actions).
pub fn rollout_policy(
    env: &EnvSpec,
    weights: &PolicyWeights,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeRecord> {
    let obstacles = env.obstacle_map();
    let (start, goal) = env.place(&obstacles, rng)?;
    let mut history = SliceHistory::new();
    let mut steps = Vec::new();
    let mut states = vec![start];
    let mut controls = Vec::new();
    let mut s = start;
    let mut succeeded = s.distance_to(goal) < env.success_radius;
    let mut tick = 0usize;
    while !succeeded && tick < env.episode_cap_or_default() {
        let t = tick as f64 * env.motion.dt;
        let obs = policy::encode(&env.field, &s, goal, &obstacles, t, &env.motion, &history);
        history.push(obs.latest_slice());
        let (dist, _) = forward_cached(weights, &obs, None)?;
        let action = dist.sample(rng);
        steps.push(EpisodeStep {
            obs: Arc::new(obs),
            action,
            prob: dist.probs[action],
            is_weight: 1.0,
        });
        let u = action_to_control(action, weights.cfg.n_actions, env.motion.u_max)?;
        s = dynamics::step(&s, u, &env.field, t, &env.motion);
        states.push(s);
        controls.push(u);
        tick += 1;
        let cell = env.cell_of(s.x, s.y);
        if obstacles.blocked(cell.0, cell.1) {
            break;
        }
        if s.distance_to(goal) < env.success_radius {
            succeeded = true;
        }
    }
    Ok(EpisodeRecord {
        steps,
        path: Trajectory {
            states,
            controls,
            t0: 0.0,
            dt: env.motion.dt,
        },
        succeeded,
        goal,
    })
}

/// Probability mass the guided sampler puts on the planner's action.
const GUIDED_Q: f64 = 0.9;
/// Importance-weight clip for guided samples.
const IS_CLIP: f64 = 5.0;

/// Rolls one episode driven by the receding-horizon planner. Continuous
/// plans are snapped to the nearest discrete action, and each step carries
/// the clipped importance weight `min(π(a|s)/q(a|s), 5)` with `q` putting
/// 0.9 on the planner's action.
pub fn rollout_guided(
    env: &EnvSpec,
    weights: &PolicyWeights,
    planner: &mut RecedingHorizonController,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeRecord> {
    let obstacles = env.obstacle_map();
    let (start, goal) = env.place(&obstacles, rng)?;
    planner.reset();
    let k_actions = weights.cfg.n_actions;
    let mut history = SliceHistory::new();
    let mut steps = Vec::new();
    let mut states = vec![start];
    let mut controls = Vec::new();
    let mut s = start;
    let mut succeeded = s.distance_to(goal) < env.success_radius;
    let mut tick = 0usize;
    while !succeeded && tick < env.episode_cap_or_default() {
        let t = tick as f64 * env.motion.dt;
        let obs = policy::encode(&env.field, &s, goal, &obstacles, t, &env.motion, &history);
        history.push(obs.latest_slice());
        let (dist, _) = forward_cached(weights, &obs, None)?;
        let planned = planner.control(
            &s,
            nalgebra::Vector3::new(goal.x, goal.y, 0.0),
            &env.field,
            t,
            &env.motion,
        )?;
        let action = nearest_action(planned.0, k_actions, env.motion.u_max);
        let q = GUIDED_Q; // the planner's action; alternatives share 0.1
        let is_weight = (dist.probs[action] / q).min(IS_CLIP);
        steps.push(EpisodeStep {
            obs: Arc::new(obs),
            action,
            prob: dist.probs[action],
            is_weight,
        });
        let u = action_to_control(action, k_actions, env.motion.u_max)?;
        s = dynamics::step(&s, u, &env.field, t, &env.motion);
        states.push(s);
        controls.push(u);
        tick += 1;
        let cell = env.cell_of(s.x, s.y);
        if obstacles.blocked(cell.0, cell.1) {
            break;
        }
        if s.distance_to(goal) < env.success_radius {
            succeeded = true;
        }
    }
    Ok(EpisodeRecord {
        steps,
        path: Trajectory {
            states,
            controls,
            t0: 0.0,
            dt: env.motion.dt,
        },
        succeeded,
        goal,
    })
}

/// Index of the discrete action nearest to a continuous turn rate.
pub fn nearest_action(u: f64, n_actions: usize, u_max: f64) -> usize {
    let frac = (u.clamp(-u_max, u_max) / u_max + 1.0) / 2.0;
    (frac * (n_actions - 1) as f64).round() as usize
}

impl EnvSpec {
    fn episode_cap_or_default(&self) -> usize {
        self.step_cap
    }
}

/// Whether `round` (1-based) is a guided round under fraction `beta`:
/// guided rounds are spread evenly so every window of `1/beta` rounds
/// contains one.
pub fn is_guided_round(round: u64, beta: f64) -> bool {
    if beta <= 0.0 {
        return false;
    }
    (round as f64 * beta).floor() > ((round - 1) as f64 * beta).floor()
}

/// The full training loop. `resume` continues from a checkpointed state;
/// `on_round` observes every finished round (the CLI hangs checkpointing
/// and curve output on it).
pub fn run_training(
    env: &EnvSpec,
    pcfg: &PolicyConfig,
    tcfg: &TrainingConfig,
    resume: Option<(PolicyWeights, u64, u128)>,
    mut on_round: impl FnMut(u64, &PolicyWeights, &RoundStats),
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    pcfg.validate()?;
    let (mut weights, start_round, word_pos) = match resume {
        Some((w, round, pos)) => (w, round, Some(pos)),
        None => (PolicyWeights::init(pcfg, tcfg.seed), 0, None),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    if let Some(pos) = word_pos {
        rng.set_word_pos(pos);
    }
    let mut buffer = ReplayBuffer::new(tcfg.replay_capacity);
    let mut planner = RecedingHorizonController::new(ILQRConfig::default(), 5);
    let mut curve = Vec::with_capacity(tcfg.rounds as usize);

    for round in (start_round + 1)..=(start_round + tcfg.rounds) {
        let mut episode_env = env.clone();
        episode_env.step_cap = tcfg.episode_cap;
        let record = if is_guided_round(round, tcfg.guided_fraction) {
            rollout_guided(&episode_env, &weights, &mut planner, &mut rng)?
        } else {
            rollout_policy(&episode_env, &weights, &mut rng)?
        };
        let probs: Vec<f64> = record.steps.iter().map(|s| s.prob).collect();
        let reward = episode_reward(
            &record.path,
            &probs,
            record.goal,
            record.succeeded,
            tcfg.alpha,
            tcfg.r_max,
        );
        let experiences = assign_rewards(&record.steps, reward, tcfg.gamma);
        let batch = make_batch(&buffer, &experiences, tcfg.batch_size, &mut rng);
        buffer.push(experiences);
        let stats = update(
            &mut weights,
            &batch,
            tcfg.learning_rate,
            tcfg.seed,
            tcfg.workers,
        )?;
        let row = RoundStats {
            round,
            reward,
            success: record.succeeded,
            loss: stats.loss,
            steps: record.steps.len(),
        };
        on_round(round, &weights, &row);
        curve.push(row);
    }
    Ok(TrainOutcome {
        weights,
        curve,
        rng_word_pos: rng.get_word_pos(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{ControlInput, VehicleState};
    use crate::field::{generate, FieldPatternSpec, PatternKind};
    use crate::MotionParams;
    use approx::assert_relative_eq;
    use ndarray::Array4;
    use rand::Rng;

    fn dummy_obs(tag: f64) -> Arc<policy::Observation> {
        Arc::new(policy::Observation {
            env: Array4::zeros((3, 3, 4, 4)),
            vehicle: [tag, 0.0, 0.0, 0.0, 0.0],
        })
    }

    fn dummy_exp(tag: usize) -> Experience {
        Experience {
            obs: dummy_obs(tag as f64),
            action: 0,
            reward: 1.0,
            step_index: tag,
            episode_len: 1,
            is_weight: 1.0,
        }
    }

    fn path_at_distances(goal: Vector2<f64>, dists: &[f64]) -> Trajectory {
        // decision states on the x-axis at the given distances, plus a
        // final state at the last distance (kept off the decision list)
        let mut states: Vec<VehicleState> = dists
            .iter()
            .map(|d| VehicleState::new(goal.x - d, goal.y, 0.0))
            .collect();
        let last = *dists.last().unwrap();
        states.push(VehicleState::new(goal.x - last, goal.y, 0.0));
        Trajectory {
            controls: vec![ControlInput(0.0); states.len() - 1],
            states,
            t0: 0.0,
            dt: 1.0,
        }
    }

    #[test]
    fn reward_success_formula() {
        let goal = Vector2::new(5.0, 0.0);
        let path = path_at_distances(goal, &[2.0, 1.0]);
        let r = episode_reward(&path, &[0.5, 0.5], goal, true, 0.9, 10.0);
        assert_relative_eq!(r, 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn reward_failure_blend() {
        let goal = Vector2::new(5.0, 0.0);
        // decision distances (2, 1) as above, but the path bottoms out at
        // D_min = ln 2 in the final state
        let mut path = path_at_distances(goal, &[2.0, 1.0]);
        let d_min = std::f64::consts::LN_2;
        *path.states.last_mut().unwrap() = VehicleState::new(goal.x - d_min, goal.y, 0.0);
        let r = episode_reward(&path, &[0.5, 0.5], goal, false, 0.9, 10.0);
        assert_relative_eq!(r, -0.65, epsilon = 1e-12);
    }

    #[test]
    fn reward_distance_penalty_vanishes_at_goal_touch() {
        let goal = Vector2::new(0.0, 0.0);
        let path = Trajectory {
            states: vec![
                VehicleState::new(3.0, 0.0, 0.0),
                VehicleState::new(0.0, 0.0, 0.0),
            ],
            controls: vec![ControlInput(0.0)],
            t0: 0.0,
            dt: 1.0,
        };
        // D_min = 0 -> r_d = 0, so the failure penalty is pure alpha*r_s
        let r = episode_reward(&path, &[0.5], goal, false, 0.9, 10.0);
        let r_s: f64 = 1.0 / (0.5 * 3.0);
        assert_relative_eq!(r, -0.9 * r_s, epsilon = 1e-12);
    }

    #[test]
    fn reward_caps_degenerate_distance_sum() {
        let goal = Vector2::new(1.0, 1.0);
        let path = Trajectory {
            states: vec![
                VehicleState::new(1.0, 1.0, 0.0),
                VehicleState::new(1.0, 1.0, 0.0),
            ],
            controls: vec![ControlInput(0.0)],
            t0: 0.0,
            dt: 1.0,
        };
        let r = episode_reward(&path, &[0.7], goal, true, 0.9, 10.0);
        assert_eq!(r, 10.0);
    }

    #[test]
    fn reward_sign_property() {
        let goal = Vector2::new(4.0, 4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.random_range(1..10);
            let dists: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..10.0)).collect();
            let probs: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
            let path = path_at_distances(goal, &dists);
            let alpha = rng.random_range(0.0..1.0);
            let up = episode_reward(&path, &probs, goal, true, alpha, 10.0);
            let down = episode_reward(&path, &probs, goal, false, alpha, 10.0);
            assert!(up > 0.0);
            assert!(down <= 0.0);
        }
    }

    #[test]
    fn closest_approach_penalty_is_monotone_and_bounded() {
        // beyond d ~ 36 the penalty rounds to exactly 1.0 in f64
        let mut prev = -1.0;
        for d in [0.0, 0.1, 0.5, 1.0, 2.0, 10.0, 30.0] {
            let r_d = 1.0 - (-d as f64).exp();
            assert!((0.0..1.0).contains(&r_d));
            assert!(r_d > prev);
            prev = r_d;
        }
    }

    #[test]
    fn assign_rewards_discounting() {
        let steps: Vec<EpisodeStep> = (0..3)
            .map(|i| EpisodeStep {
                obs: dummy_obs(i as f64),
                action: 0,
                prob: 0.5,
                is_weight: 1.0,
            })
            .collect();
        let q: Vec<f64> = assign_rewards(&steps, 8.0, 0.5)
            .iter()
            .map(|e| e.reward)
            .collect();
        assert_eq!(q, vec![2.0, 4.0, 8.0]);
        let flat: Vec<f64> = assign_rewards(&steps, 3.0, 1.0)
            .iter()
            .map(|e| e.reward)
            .collect();
        assert_eq!(flat, vec![3.0; 3]);
        let zero: Vec<f64> = assign_rewards(&steps, 0.0, 0.5)
            .iter()
            .map(|e| e.reward)
            .collect();
        assert_eq!(zero, vec![0.0; 3]);
    }

    #[test]
    fn buffer_fifo_eviction() {
        let mut buf = ReplayBuffer::new(3);
        for i in 0..4 {
            buf.push(vec![dummy_exp(i)]);
        }
        let tags: Vec<usize> = buf.iter().map(|e| e.step_index).collect();
        assert_eq!(tags, vec![1, 2, 3]);

        let mut buf = ReplayBuffer::new(3);
        buf.push((0..7).map(dummy_exp).collect());
        let tags: Vec<usize> = buf.iter().map(|e| e.step_index).collect();
        assert_eq!(tags, vec![4, 5, 6]);

        let before = buf.len();
        buf.push(vec![]);
        assert_eq!(buf.len(), before);
    }

    #[test]
    fn batch_pads_latest_from_buffer() {
        let mut buf = ReplayBuffer::new(10_000);
        buf.push((0..1000).map(dummy_exp).collect());
        let latest: Vec<Experience> = (5000..5120).map(dummy_exp).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = make_batch(&buf, &latest, 500, &mut rng);
        assert_eq!(batch.experiences.len(), 500);
        assert!(!batch.small);
        let from_latest = batch
            .experiences
            .iter()
            .filter(|e| e.step_index >= 5000)
            .count();
        assert_eq!(from_latest, 120, "every latest experience is included");
    }

    #[test]
    fn batch_truncates_oversized_episode_to_most_recent() {
        let buf = ReplayBuffer::new(100);
        let latest: Vec<Experience> = (0..600).map(dummy_exp).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = make_batch(&buf, &latest, 500, &mut rng);
        assert_eq!(batch.experiences.len(), 500);
        assert!(batch.experiences.iter().all(|e| e.step_index >= 100));
    }

    #[test]
    fn batch_flags_small_when_underfilled() {
        let buf = ReplayBuffer::new(100);
        let latest: Vec<Experience> = (0..10).map(dummy_exp).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = make_batch(&buf, &latest, 500, &mut rng);
        assert_eq!(batch.experiences.len(), 10);
        assert!(batch.small);
    }

    #[test]
    fn batch_is_reproducible_under_seed() {
        let mut buf = ReplayBuffer::new(1000);
        buf.push((0..400).map(dummy_exp).collect());
        let latest: Vec<Experience> = (9000..9050).map(dummy_exp).collect();
        let pick = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            make_batch(&buf, &latest, 200, &mut rng)
                .experiences
                .iter()
                .map(|e| e.step_index)
                .collect::<Vec<_>>()
        };
        assert_eq!(pick(7), pick(7));
        assert_ne!(pick(7), pick(8));
    }

    fn obs_from_env(seed: u64) -> policy::Observation {
        let spec = FieldPatternSpec::centered(PatternKind::Vortex, 8, 8);
        let field = generate(&spec, 8, 8, 1, 1.0).unwrap();
        let obstacles = crate::episode::ObstacleMap::border(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = VehicleState::new(
            rng.random_range(1.5..6.5),
            rng.random_range(1.5..6.5),
            rng.random_range(-3.0..3.0),
        );
        policy::encode(
            &field,
            &s,
            Vector2::new(6.0, 6.0),
            &obstacles,
            0.0,
            &MotionParams::default(),
            &SliceHistory::new(),
        )
    }

    #[test]
    fn update_with_zero_credit_is_identity() {
        let cfg = PolicyConfig::tiny();
        let mut w = PolicyWeights::init(&cfg, 1);
        let snapshot = w.clone();
        let batch = Batch {
            experiences: vec![Experience {
                obs: Arc::new(obs_from_env(1)),
                action: 2,
                reward: 0.0,
                step_index: 0,
                episode_len: 1,
                is_weight: 1.0,
            }],
            small: true,
        };
        update(&mut w, &batch, 0.1, 0, 1).unwrap();
        assert_eq!(w, snapshot);
    }

    #[test]
    fn positive_credit_raises_action_probability() {
        let mut cfg = PolicyConfig::tiny();
        cfg.n_actions = 2;
        let mut w = PolicyWeights::init(&cfg, 2);
        let obs = Arc::new(obs_from_env(2));
        let action = 1usize;
        let before = policy::forward(&w, &obs).unwrap().probs[action];
        let batch = Batch {
            experiences: vec![Experience {
                obs: obs.clone(),
                action,
                reward: 1.0,
                step_index: 0,
                episode_len: 1,
                is_weight: 1.0,
            }],
            small: true,
        };
        update(&mut w, &batch, 0.05, 0, 1).unwrap();
        let after = policy::forward(&w, &obs).unwrap().probs[action];
        assert!(after > before, "{after} <= {before}");
    }

    #[test]
    fn repeated_positive_updates_converge_to_certainty() {
        let mut cfg = PolicyConfig::tiny();
        cfg.n_actions = 2;
        let mut w = PolicyWeights::init(&cfg, 3);
        let obs = Arc::new(obs_from_env(3));
        let action = 0usize;
        let batch = Batch {
            experiences: vec![Experience {
                obs: obs.clone(),
                action,
                reward: 1.0,
                step_index: 0,
                episode_len: 1,
                is_weight: 1.0,
            }],
            small: true,
        };
        let mut last = 0.0;
        for _ in 0..300 {
            update(&mut w, &batch, 0.2, 0, 1).unwrap();
            last = policy::forward(&w, &obs).unwrap().probs[action];
        }
        assert!(last > 0.95, "prob only reached {last}");
    }

    #[test]
    fn duplicated_batch_gives_identical_step() {
        let cfg = PolicyConfig::tiny();
        let base = PolicyWeights::init(&cfg, 4);
        let exps: Vec<Experience> = (0..3)
            .map(|i| Experience {
                obs: Arc::new(obs_from_env(10 + i)),
                action: (i as usize) % cfg.n_actions,
                reward: 0.5 + i as f64,
                step_index: i as usize,
                episode_len: 3,
                is_weight: 1.0,
            })
            .collect();
        let mut doubled = exps.clone();
        doubled.extend(exps.clone());

        let mut w1 = base.clone();
        update(
            &mut w1,
            &Batch {
                experiences: exps,
                small: true,
            },
            0.1,
            9,
            1,
        )
        .unwrap();
        let mut w2 = base.clone();
        update(
            &mut w2,
            &Batch {
                experiences: doubled,
                small: true,
            },
            0.1,
            9,
            1,
        )
        .unwrap();
        for ((_, a), (_, b)) in w1.param_slices().iter().zip(w2.param_slices().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-12);
                assert!(rel < 1e-9, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn multi_worker_update_is_bit_identical() {
        let cfg = PolicyConfig::tiny();
        let base = PolicyWeights::init(&cfg, 6);
        let exps: Vec<Experience> = (0..40)
            .map(|i| Experience {
                obs: Arc::new(obs_from_env(50 + i)),
                action: (i as usize) % cfg.n_actions,
                reward: (i as f64 * 0.37).sin(),
                step_index: i as usize,
                episode_len: 40,
                is_weight: 1.0,
            })
            .collect();
        let batch = Batch {
            experiences: exps,
            small: false,
        };
        let mut w1 = base.clone();
        update(&mut w1, &batch, 0.01, 5, 1).unwrap();
        let mut w4 = base.clone();
        update(&mut w4, &batch, 0.01, 5, 4).unwrap();
        assert_eq!(w1, w4);
    }

    #[test]
    fn guided_round_schedule_matches_fraction() {
        let guided: Vec<u64> = (1..=50).filter(|&r| is_guided_round(r, 0.1)).collect();
        assert_eq!(guided, vec![10, 20, 30, 40, 50]);
        assert!((1..=50).all(|r| !is_guided_round(r, 0.0)));
        assert!((1..=50).all(|r| is_guided_round(r, 1.0)));
    }

    #[test]
    fn nearest_action_snaps_to_grid() {
        assert_eq!(nearest_action(0.0, 9, 1.0), 4);
        assert_eq!(nearest_action(-1.0, 9, 1.0), 0);
        assert_eq!(nearest_action(1.0, 9, 1.0), 8);
        assert_eq!(nearest_action(0.26, 9, 1.0), 5);
        assert_eq!(nearest_action(5.0, 9, 1.0), 8); // clamped
    }

    #[test]
    fn zero_rounds_returns_initial_weights() {
        let spec = FieldPatternSpec::centered(PatternKind::Uniform, 8, 8);
        let field = generate(&spec, 8, 8, 1, 1.0).unwrap();
        let env = EnvSpec::new(field, MotionParams::default());
        let pcfg = PolicyConfig::tiny();
        let tcfg = TrainingConfig {
            rounds: 0,
            ..Default::default()
        };
        let out = run_training(&env, &pcfg, &tcfg, None, |_, _, _| {}).unwrap();
        assert_eq!(out.weights, PolicyWeights::init(&pcfg, tcfg.seed));
        assert!(out.curve.is_empty());
    }

    #[test]
    fn curve_length_matches_rounds() {
        let mut spec = FieldPatternSpec::centered(PatternKind::Uniform, 8, 8);
        spec.strength = 0.1;
        let field = generate(&spec, 8, 8, 1, 1.0).unwrap();
        let mut env = EnvSpec::new(field, MotionParams::default());
        env.min_separation = 2.0;
        let pcfg = PolicyConfig::tiny();
        let tcfg = TrainingConfig {
            rounds: 5,
            batch_size: 16,
            episode_cap: 20,
            learning_rate: 1e-3,
            guided_fraction: 0.0,
            seed: 3,
            ..Default::default()
        };
        let out = run_training(&env, &pcfg, &tcfg, None, |_, _, _| {}).unwrap();
        assert_eq!(out.curve.len(), 5);
        assert!(out.weights.is_finite());
    }

    #[test]
    fn training_is_deterministic_under_seed() {
        let mut spec = FieldPatternSpec::centered(PatternKind::Uniform, 8, 8);
        spec.strength = 0.1;
        let field = generate(&spec, 8, 8, 1, 1.0).unwrap();
        let mut env = EnvSpec::new(field, MotionParams::default());
        env.min_separation = 2.0;
        let pcfg = PolicyConfig::tiny();
        let tcfg = TrainingConfig {
            rounds: 4,
            batch_size: 8,
            episode_cap: 15,
            learning_rate: 1e-3,
            guided_fraction: 0.25,
            seed: 11,
            ..Default::default()
        };
        let a = run_training(&env, &pcfg, &tcfg, None, |_, _, _| {}).unwrap();
        let b = run_training(&env, &pcfg, &tcfg, None, |_, _, _| {}).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.rng_word_pos, b.rng_word_pos);
        for (x, y) in a.curve.iter().zip(&b.curve) {
            assert_eq!(x.reward, y.reward);
            assert_eq!(x.loss, y.loss);
        }
    }
}
