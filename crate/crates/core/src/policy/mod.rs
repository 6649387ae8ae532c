//! Recurrent convolutional policy over discrete angular-rate actions.
//!
//! The observation couples a 3-step history of environment grids (flow x/y
//! components plus an occupancy channel carrying obstacles, the goal, and
//! the robot cell) with a 5-entry vehicle vector. Three convolutional
//! recurrent layers, each unrolled over the 3 temporal slices and followed
//! by a 2x2 max-pool, feed a fully connected head joined by a small vehicle
//! subnet; a softmax over `n_actions` evenly spaced turn rates closes the
//! net. The robot's absolute position is deliberately absent from the
//! vehicle vector so the policy reacts to flow structure, not to places.
//!
//! Forward/backward are implemented from scratch in [`net`]; gradients are
//! exact reverse-mode and finite-difference-checked in the tests.

mod checkpoint;
mod net;

use std::collections::VecDeque;
use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, Array4};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dynamics::{ControlInput, MotionParams, VehicleState};
use crate::episode::{Controller, EpisodeError, ObstacleMap, StepContext};
use crate::field::DisturbanceField;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use net::{backward_into, forward_cached, ForwardCache};

/// Occupancy-channel value of an obstacle cell.
pub const OCC_OBSTACLE: f64 = -1.0;
/// Occupancy-channel value of the goal cell.
pub const OCC_GOAL: f64 = 0.5;
/// Occupancy-channel value of the robot cell.
pub const OCC_ROBOT: f64 = 1.0;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("action index {index} out of range (K = {n})")]
    BadAction { index: usize, n: usize },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = PolicyError> = std::result::Result<T, E>;

/// Network sizing. `grid` is the side length of the (square) observation
/// grid; all tensor shapes derive from it.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub grid: usize,
    pub conv_channels: [usize; 3],
    pub kernel: usize,
    pub vehicle_widths: [usize; 2],
    pub fc_widths: [usize; 2],
    pub n_actions: usize,
    pub dropout: f64,
}

impl PolicyConfig {
    /// Full-size configuration for 48x48 fields.
    pub fn standard(grid: usize) -> Self {
        Self {
            grid,
            conv_channels: [8, 16, 16],
            kernel: 3,
            vehicle_widths: [16, 16],
            fc_widths: [128, 64],
            n_actions: 9,
            dropout: 0.5,
        }
    }

    /// Desk-scale configuration that trains in minutes on a CPU.
    pub fn small(grid: usize) -> Self {
        Self {
            grid,
            conv_channels: [4, 8, 8],
            kernel: 3,
            vehicle_widths: [8, 8],
            fc_widths: [64, 32],
            n_actions: 9,
            dropout: 0.5,
        }
    }

    /// Minimal configuration used by the gradient checks (8x8 grid, two
    /// channels per recurrent layer).
    pub fn tiny() -> Self {
        Self {
            grid: 8,
            conv_channels: [2, 2, 2],
            kernel: 3,
            vehicle_widths: [4, 4],
            fc_widths: [8, 8],
            n_actions: 9,
            dropout: 0.5,
        }
    }

    /// Spatial side length after the three pools.
    pub fn pooled_side(&self) -> usize {
        self.grid.div_ceil(2).div_ceil(2).div_ceil(2)
    }

    /// Length of the flattened conv-trunk output.
    pub fn flat_dim(&self) -> usize {
        self.conv_channels[2] * self.pooled_side() * self.pooled_side()
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid < 4 {
            return Err(PolicyError::ShapeMismatch(format!(
                "grid {} too small",
                self.grid
            )));
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(PolicyError::ShapeMismatch("kernel must be odd".into()));
        }
        if self.n_actions < 2 {
            return Err(PolicyError::ShapeMismatch("need at least 2 actions".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(PolicyError::ShapeMismatch("dropout must be in [0,1)".into()));
        }
        Ok(())
    }
}

/// One dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    fn zeros(out: usize, input: usize) -> Self {
        Self {
            w: Array2::zeros((out, input)),
            b: Array1::zeros(out),
        }
    }
}

/// Weights of one convolutional recurrent layer: `w_in` convolves the
/// incoming map, `w_fb` the previous step's hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentLayer {
    pub w_in: Array4<f64>,
    pub w_fb: Array4<f64>,
    pub bias: Array1<f64>,
}

/// All learnable parameters. The same structure doubles as the gradient
/// container.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyWeights {
    pub cfg: PolicyConfig,
    pub recurrent: Vec<RecurrentLayer>,
    pub vehicle_fc: Vec<Dense>,
    pub fc1: Dense,
    pub fc2: Dense,
    pub out: Dense,
}

impl PolicyWeights {
    /// All-zero parameters (also the gradient accumulator shape).
    pub fn zeros(cfg: &PolicyConfig) -> Self {
        let k = cfg.kernel;
        let mut recurrent = Vec::with_capacity(3);
        let mut in_ch = 3;
        for &out_ch in &cfg.conv_channels {
            recurrent.push(RecurrentLayer {
                w_in: Array4::zeros((out_ch, in_ch, k, k)),
                w_fb: Array4::zeros((out_ch, out_ch, k, k)),
                bias: Array1::zeros(out_ch),
            });
            in_ch = out_ch;
        }
        let vehicle_fc = vec![
            Dense::zeros(cfg.vehicle_widths[0], 5),
            Dense::zeros(cfg.vehicle_widths[1], cfg.vehicle_widths[0]),
        ];
        let concat = cfg.flat_dim() + cfg.vehicle_widths[1];
        Self {
            recurrent,
            vehicle_fc,
            fc1: Dense::zeros(cfg.fc_widths[0], concat),
            fc2: Dense::zeros(cfg.fc_widths[1], cfg.fc_widths[0]),
            out: Dense::zeros(cfg.n_actions, cfg.fc_widths[1]),
            cfg: cfg.clone(),
        }
    }

    /// Seeded init, uniform in ±1/√fan_in per tensor.
    pub fn init(cfg: &PolicyConfig, seed: u64) -> Self {
        let mut w = Self::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut w.recurrent {
            let fan_in = layer.w_in.dim().1 * layer.w_in.dim().2 * layer.w_in.dim().3;
            fill_uniform(layer.w_in.as_slice_mut().unwrap(), fan_in, &mut rng);
            let fan_fb = layer.w_fb.dim().1 * layer.w_fb.dim().2 * layer.w_fb.dim().3;
            fill_uniform(layer.w_fb.as_slice_mut().unwrap(), fan_fb, &mut rng);
        }
        for d in w
            .vehicle_fc
            .iter_mut()
            .chain([&mut w.fc1, &mut w.fc2, &mut w.out])
        {
            let fan_in = d.w.dim().1;
            fill_uniform(d.w.as_slice_mut().unwrap(), fan_in, &mut rng);
        }
        w
    }

    /// Named views of every parameter tensor, in a fixed order.
    pub fn param_slices(&self) -> Vec<(String, &[f64])> {
        let mut v: Vec<(String, &[f64])> = Vec::new();
        for (i, l) in self.recurrent.iter().enumerate() {
            v.push((format!("recurrent{i}.w_in"), l.w_in.as_slice().unwrap()));
            v.push((format!("recurrent{i}.w_fb"), l.w_fb.as_slice().unwrap()));
            v.push((format!("recurrent{i}.bias"), l.bias.as_slice().unwrap()));
        }
        for (i, d) in self.vehicle_fc.iter().enumerate() {
            v.push((format!("vehicle{i}.w"), d.w.as_slice().unwrap()));
            v.push((format!("vehicle{i}.b"), d.b.as_slice().unwrap()));
        }
        v.push(("fc1.w".into(), self.fc1.w.as_slice().unwrap()));
        v.push(("fc1.b".into(), self.fc1.b.as_slice().unwrap()));
        v.push(("fc2.w".into(), self.fc2.w.as_slice().unwrap()));
        v.push(("fc2.b".into(), self.fc2.b.as_slice().unwrap()));
        v.push(("out.w".into(), self.out.w.as_slice().unwrap()));
        v.push(("out.b".into(), self.out.b.as_slice().unwrap()));
        v
    }

    pub fn param_slices_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut v: Vec<(String, &mut [f64])> = Vec::new();
        for (i, l) in self.recurrent.iter_mut().enumerate() {
            v.push((format!("recurrent{i}.w_in"), l.w_in.as_slice_mut().unwrap()));
            v.push((format!("recurrent{i}.w_fb"), l.w_fb.as_slice_mut().unwrap()));
            v.push((format!("recurrent{i}.bias"), l.bias.as_slice_mut().unwrap()));
        }
        for (i, d) in self.vehicle_fc.iter_mut().enumerate() {
            v.push((format!("vehicle{i}.w"), d.w.as_slice_mut().unwrap()));
            v.push((format!("vehicle{i}.b"), d.b.as_slice_mut().unwrap()));
        }
        v.push(("fc1.w".into(), self.fc1.w.as_slice_mut().unwrap()));
        v.push(("fc1.b".into(), self.fc1.b.as_slice_mut().unwrap()));
        v.push(("fc2.w".into(), self.fc2.w.as_slice_mut().unwrap()));
        v.push(("fc2.b".into(), self.fc2.b.as_slice_mut().unwrap()));
        v.push(("out.w".into(), self.out.w.as_slice_mut().unwrap()));
        v.push(("out.b".into(), self.out.b.as_slice_mut().unwrap()));
        v
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &PolicyWeights, scale: f64) {
        let theirs = other.param_slices();
        for ((_, mine), (_, them)) in self.param_slices_mut().into_iter().zip(theirs) {
            for (a, b) in mine.iter_mut().zip(them) {
                *a += scale * b;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.param_slices()
            .iter()
            .all(|(_, s)| s.iter().all(|v| v.is_finite()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.param_slices()
            .iter()
            .map(|(_, s)| s.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    fn check_observation(&self, obs: &Observation) -> Result<()> {
        let (t, c, h, w) = obs.env.dim();
        if t != 3 || c != 3 || h != self.cfg.grid || w != self.cfg.grid {
            return Err(PolicyError::ShapeMismatch(format!(
                "observation env is {t}x{c}x{h}x{w}, expected 3x3x{g}x{g}",
                g = self.cfg.grid
            )));
        }
        Ok(())
    }
}

fn fill_uniform(slice: &mut [f64], fan_in: usize, rng: &mut ChaCha8Rng) {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    for v in slice {
        *v = rng.random_range(-bound..bound);
    }
}

/// Network input: three temporal slices of the 3-channel environment grid
/// plus the vehicle vector
/// `(v_x, v_y, dir_to_goal_x, dir_to_goal_y, distance/diagonal)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// `[time (3), channel (3), H, W]`, oldest slice first.
    pub env: Array4<f64>,
    pub vehicle: [f64; 5],
}

impl Observation {
    /// The newest environment slice (what [`SliceHistory::push`] wants
    /// after the step is taken).
    pub fn latest_slice(&self) -> Array3<f64> {
        self.env.index_axis(ndarray::Axis(0), 2).to_owned()
    }
}

/// Rolling store of the two most recent environment slices.
#[derive(Debug, Clone, Default)]
pub struct SliceHistory {
    slices: VecDeque<Array3<f64>>,
}

impl SliceHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.slices.clear();
    }

    pub fn push(&mut self, slice: Array3<f64>) {
        if self.slices.len() == 2 {
            self.slices.pop_front();
        }
        self.slices.push_back(slice);
    }

    /// `[oldest, middle, current]`, padding by repetition when fewer than
    /// two prior slices exist (episode start).
    fn stack(&self, current: Array3<f64>) -> [Array3<f64>; 3] {
        match self.slices.len() {
            0 => [current.clone(), current.clone(), current],
            1 => [self.slices[0].clone(), self.slices[0].clone(), current],
            _ => [self.slices[0].clone(), self.slices[1].clone(), current],
        }
    }
}

/// Builds the environment slice for one instant: flow components in
/// channels 0/1, occupancy in channel 2.
pub fn env_slice(
    field: &DisturbanceField,
    state: &VehicleState,
    goal: nalgebra::Vector2<f64>,
    obstacles: &ObstacleMap,
    t: f64,
) -> Array3<f64> {
    let (w, h) = (field.grid_w(), field.grid_h());
    let cs = field.cell_size();
    let mut slice = Array3::zeros((3, h, w));
    for iy in 0..h {
        for ix in 0..w {
            let flow = field.sample(ix as f64 * cs, iy as f64 * cs, t);
            slice[[0, iy, ix]] = flow.x;
            slice[[1, iy, ix]] = flow.y;
            if obstacles.blocked(ix, iy) {
                slice[[2, iy, ix]] = OCC_OBSTACLE;
            }
        }
    }
    let to_cell = |wx: f64, wy: f64| {
        let ix = (wx / cs).round().clamp(0.0, (w - 1) as f64) as usize;
        let iy = (wy / cs).round().clamp(0.0, (h - 1) as f64) as usize;
        (ix, iy)
    };
    let (gx, gy) = to_cell(goal.x, goal.y);
    slice[[2, gy, gx]] = OCC_GOAL;
    let (rx, ry) = to_cell(state.x, state.y);
    // robot wins the cell if it sits on the goal
    slice[[2, ry, rx]] = OCC_ROBOT;
    slice
}

/// Assembles the observation for the current instant from the field, the
/// robot state, and the slice history (which the caller advances with
/// [`SliceHistory::push`] after acting).
pub fn encode(
    field: &DisturbanceField,
    state: &VehicleState,
    goal: nalgebra::Vector2<f64>,
    obstacles: &ObstacleMap,
    t: f64,
    motion: &MotionParams,
    history: &SliceHistory,
) -> Observation {
    let current = env_slice(field, state, goal, obstacles, t);
    let stacked = history.stack(current);
    let (c, h, w) = stacked[0].dim();
    let mut env = Array4::zeros((3, c, h, w));
    for (i, s) in stacked.iter().enumerate() {
        env.index_axis_mut(ndarray::Axis(0), i).assign(s);
    }
    let dx = goal.x - state.x;
    let dy = goal.y - state.y;
    let dist = dx.hypot(dy);
    let (dirx, diry) = if dist > 1e-12 {
        (dx / dist, dy / dist)
    } else {
        (0.0, 0.0)
    };
    let diag = field.extent_x().hypot(field.extent_y()).max(1e-12);
    Observation {
        env,
        vehicle: [
            motion.v * state.theta.cos(),
            motion.v * state.theta.sin(),
            dirx,
            diry,
            dist / diag,
        ],
    }
}

/// Softmax action distribution over the discrete turn rates.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    pub probs: Vec<f64>,
    pub logits: Vec<f64>,
}

impl ActionDistribution {
    /// Categorical draw by inverse CDF; deterministic under a seeded rng.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        sample_action(self, rng)
    }

    pub fn argmax(&self) -> usize {
        self.probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

/// Eval-mode forward pass (dropout disabled), a pure function of
/// `(weights, observation)`.
pub fn forward(w: &PolicyWeights, obs: &Observation) -> Result<ActionDistribution> {
    let (dist, _) = net::forward_cached(w, obs, None)?;
    Ok(dist)
}

/// Draws an action index from the distribution.
pub fn sample_action(dist: &ActionDistribution, rng: &mut ChaCha8Rng) -> usize {
    let x: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in dist.probs.iter().enumerate() {
        acc += p;
        if x < acc {
            return i;
        }
    }
    dist.probs.len() - 1
}

/// Inverted-dropout mask over the FC1 output, drawn from `rng`.
pub fn sample_dropout_mask(cfg: &PolicyConfig, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let keep = 1.0 - cfg.dropout;
    Array1::from_iter((0..cfg.fc_widths[0]).map(|_| {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    }))
}

/// Maps action index `i` to the turn rate `u_max (2i/(K−1) − 1)`:
/// `K` evenly spaced rates spanning `[-u_max, u_max]`.
pub fn action_to_control(index: usize, n_actions: usize, u_max: f64) -> Result<ControlInput> {
    if index >= n_actions {
        return Err(PolicyError::BadAction {
            index,
            n: n_actions,
        });
    }
    let frac = 2.0 * index as f64 / (n_actions - 1) as f64 - 1.0;
    Ok(ControlInput(u_max * frac))
}

/// Evaluation-time policy controller: encodes, forwards in eval mode, and
/// samples an action each tick.
pub struct DrlController {
    pub weights: Arc<PolicyWeights>,
    history: SliceHistory,
}

impl DrlController {
    pub fn new(weights: Arc<PolicyWeights>) -> Self {
        Self {
            weights,
            history: SliceHistory::new(),
        }
    }
}

impl Controller for DrlController {
    fn method(&self) -> &'static str {
        "drl"
    }

    fn reset(&mut self) {
        self.history.clear();
    }

    fn act(&mut self, ctx: &StepContext, rng: &mut ChaCha8Rng) -> Result<ControlInput, EpisodeError> {
        let obs = encode(
            ctx.field,
            ctx.state,
            ctx.goal,
            ctx.obstacles,
            ctx.t,
            ctx.motion,
            &self.history,
        );
        self.history.push(obs.latest_slice());
        let dist = forward(&self.weights, &obs)
            .map_err(|e| EpisodeError::Controller(e.to_string()))?;
        let a = dist.sample(rng);
        action_to_control(a, self.weights.cfg.n_actions, ctx.motion.u_max)
            .map_err(|e| EpisodeError::Controller(e.to_string()))
    }
}
