//! Trial harness: start/goal placement, termination rules, and per-trial
//! metrics for benchmarking controllers.
//!
//! A trial steps the dynamics under a [`Controller`] until the vehicle
//! enters the goal radius, hits an obstacle cell, or exhausts the step cap.
//! Each trial forks its placement and control randomness from the incoming
//! rng up front, so two different controllers given equally seeded rngs see
//! identical start/goal draws — the basis of the paired method comparison.

use nalgebra::Vector2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::dynamics::{self, ControlInput, MotionParams, Trajectory, VehicleState};
use crate::field::DisturbanceField;

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("could not place start/goal after {0} attempts")]
    PlacementFailed(usize),
    #[error("controller failed: {0}")]
    Controller(String),
    #[error("invalid environment: {0}")]
    InvalidEnv(String),
}

pub type Result<T, E = EpisodeError> = std::result::Result<T, E>;

/// Grid of blocked cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObstacleMap {
    w: usize,
    h: usize,
    blocked: Vec<bool>,
}

impl ObstacleMap {
    /// All cells free.
    pub fn open(w: usize, h: usize) -> Self {
        Self {
            w,
            h,
            blocked: vec![false; w * h],
        }
    }

    /// One-cell obstacle border around the grid.
    pub fn border(w: usize, h: usize) -> Self {
        let mut m = Self::open(w, h);
        for ix in 0..w {
            m.blocked[ix] = true;
            m.blocked[(h - 1) * w + ix] = true;
        }
        for iy in 0..h {
            m.blocked[iy * w] = true;
            m.blocked[iy * w + w - 1] = true;
        }
        m
    }

    pub fn blocked(&self, ix: usize, iy: usize) -> bool {
        ix < self.w && iy < self.h && self.blocked[iy * self.w + ix]
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn height(&self) -> usize {
        self.h
    }
}

/// Start or goal position: pinned or drawn per trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Placement {
    Fixed { x: f64, y: f64 },
    Random,
}

/// Everything a trial needs: the field, obstacle layout, placement rules,
/// motion constants, and termination thresholds.
#[derive(Debug, Clone)]
pub struct EnvSpec {
    pub field: DisturbanceField,
    pub border_obstacles: bool,
    pub start: Placement,
    pub goal: Placement,
    /// Minimum start-goal distance for random placements (world units).
    pub min_separation: f64,
    pub motion: MotionParams,
    pub step_cap: usize,
    pub success_radius: f64,
}

impl EnvSpec {
    pub fn new(field: DisturbanceField, motion: MotionParams) -> Self {
        let side = field.grid_w().min(field.grid_h()) as f64;
        Self {
            field,
            border_obstacles: true,
            start: Placement::Random,
            goal: Placement::Random,
            min_separation: (side / 4.0).max(2.0),
            motion,
            step_cap: 300,
            success_radius: 1.0,
        }
    }

    pub fn obstacle_map(&self) -> ObstacleMap {
        if self.border_obstacles {
            ObstacleMap::border(self.field.grid_w(), self.field.grid_h())
        } else {
            ObstacleMap::open(self.field.grid_w(), self.field.grid_h())
        }
    }

    /// Draws a start pose and goal point honoring placement rules. A fixed
    /// start faces the goal; a random start gets a uniform heading.
    pub fn place(
        &self,
        obstacles: &ObstacleMap,
        rng: &mut ChaCha8Rng,
    ) -> Result<(VehicleState, Vector2<f64>)> {
        const ATTEMPTS: usize = 10_000;
        let cs = self.field.cell_size();
        let free_point = |rng: &mut ChaCha8Rng| -> Option<Vector2<f64>> {
            for _ in 0..ATTEMPTS {
                let x = rng.random_range(0.0..self.field.extent_x());
                let y = rng.random_range(0.0..self.field.extent_y());
                let ix = (x / cs).round() as usize;
                let iy = (y / cs).round() as usize;
                if !obstacles.blocked(ix, iy) {
                    return Some(Vector2::new(x, y));
                }
            }
            None
        };
        for _ in 0..ATTEMPTS {
            let start = match self.start {
                Placement::Fixed { x, y } => Vector2::new(x, y),
                Placement::Random => {
                    free_point(rng).ok_or(EpisodeError::PlacementFailed(ATTEMPTS))?
                }
            };
            let goal = match self.goal {
                Placement::Fixed { x, y } => Vector2::new(x, y),
                Placement::Random => {
                    free_point(rng).ok_or(EpisodeError::PlacementFailed(ATTEMPTS))?
                }
            };
            let sep = (start - goal).norm();
            let fixed_pair = matches!(self.start, Placement::Fixed { .. })
                && matches!(self.goal, Placement::Fixed { .. });
            if !fixed_pair && sep < self.min_separation {
                continue;
            }
            if fixed_pair && sep == 0.0 {
                return Err(EpisodeError::InvalidEnv(
                    "fixed start equals fixed goal".into(),
                ));
            }
            let theta = match self.start {
                Placement::Fixed { .. } => (goal.y - start.y).atan2(goal.x - start.x),
                Placement::Random => rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            };
            return Ok((VehicleState::new(start.x, start.y, theta), goal));
        }
        Err(EpisodeError::PlacementFailed(ATTEMPTS))
    }

    pub fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let cs = self.field.cell_size();
        let ix = (x / cs).round().clamp(0.0, (self.field.grid_w() - 1) as f64) as usize;
        let iy = (y / cs).round().clamp(0.0, (self.field.grid_h() - 1) as f64) as usize;
        (ix, iy)
    }
}

/// Per-step context handed to controllers.
pub struct StepContext<'a> {
    pub state: &'a VehicleState,
    pub goal: Vector2<f64>,
    pub field: &'a DisturbanceField,
    pub obstacles: &'a ObstacleMap,
    pub motion: &'a MotionParams,
    /// Simulated time at this step.
    pub t: f64,
    /// Tick index within the trial.
    pub step: usize,
}

/// A control source the harness can benchmark.
pub trait Controller {
    /// Tag written to result CSVs (`drl`, `ilqr`, ...).
    fn method(&self) -> &'static str;
    /// Clears per-trial state (plans, observation history).
    fn reset(&mut self);
    fn act(&mut self, ctx: &StepContext, rng: &mut ChaCha8Rng) -> Result<ControlInput>;
}

/// Outcome of one trial.
#[derive(Debug, Clone)]
pub struct TrialResult {
    pub success: bool,
    /// Simulated seconds until termination.
    pub time_cost: f64,
    /// Number of cell-boundary crossings.
    pub step_cost: usize,
    pub path: Trajectory,
    pub method: &'static str,
    pub goal: Vector2<f64>,
}

impl TrialResult {
    pub fn start(&self) -> &VehicleState {
        &self.path.states[0]
    }
}

/// Runs one trial. Placement and control randomness are forked from `rng`
/// immediately, so the placement stream is independent of how much
/// randomness the controller consumes.
pub fn run_trial(
    env: &EnvSpec,
    controller: &mut dyn Controller,
    rng: &mut ChaCha8Rng,
) -> Result<TrialResult> {
    let placement_seed: u64 = rng.random();
    let control_seed: u64 = rng.random();
    let mut placement_rng = ChaCha8Rng::seed_from_u64(placement_seed);
    let mut control_rng = ChaCha8Rng::seed_from_u64(control_seed);

    let obstacles = env.obstacle_map();
    let (start, goal) = env.place(&obstacles, &mut placement_rng)?;
    controller.reset();

    let mut states = vec![start];
    let mut controls = Vec::new();
    let mut s = start;
    let mut success = s.distance_to(goal) < env.success_radius;
    let mut ticks = 0usize;
    let mut step_cost = 0usize;
    let mut cell = env.cell_of(s.x, s.y);

    while !success && ticks < env.step_cap {
        let t = ticks as f64 * env.motion.dt;
        let ctx = StepContext {
            state: &s,
            goal,
            field: &env.field,
            obstacles: &obstacles,
            motion: &env.motion,
            t,
            step: ticks,
        };
        let u = controller.act(&ctx, &mut control_rng)?;
        let u = ControlInput::clamped(u.0, env.motion.u_max);
        s = dynamics::step(&s, u, &env.field, t, &env.motion);
        states.push(s);
        controls.push(u);
        ticks += 1;

        let new_cell = env.cell_of(s.x, s.y);
        if new_cell != cell {
            step_cost += 1;
            cell = new_cell;
        }
        if obstacles.blocked(new_cell.0, new_cell.1) {
            break; // collision terminates the trial as a failure
        }
        if s.distance_to(goal) < env.success_radius {
            success = true;
        }
    }

    Ok(TrialResult {
        success,
        time_cost: ticks as f64 * env.motion.dt,
        step_cost,
        path: Trajectory {
            states,
            controls,
            t0: 0.0,
            dt: env.motion.dt,
        },
        method: controller.method(),
        goal,
    })
}

/// Aggregate statistics over a batch of trials.
#[derive(Debug, Clone)]
pub struct BatchSummary {
    pub n_trials: usize,
    pub n_success: usize,
    pub success_rate: f64,
    pub mean_time: f64,
    pub std_time: f64,
    pub mean_steps: f64,
    pub std_steps: f64,
    pub results: Vec<TrialResult>,
    /// Per-trial seeds, aligned with `results`.
    pub seeds: Vec<u64>,
}

/// Deterministic per-trial seed stream (splitmix64 over the base seed).
pub fn trial_seed(base: u64, index: usize) -> u64 {
    let mut z = base
        .wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs `n_trials` independent trials, optionally fanned out over a rayon
/// pool. Results are merged in trial order, so worker count never changes
/// the outcome. Time/step averages cover successful trials unless
/// `include_failed` is set.
pub fn run_batch<C, F>(
    env: &EnvSpec,
    make_controller: F,
    n_trials: usize,
    base_seed: u64,
    workers: usize,
    include_failed: bool,
) -> Result<BatchSummary>
where
    C: Controller,
    F: Fn() -> C + Sync,
{
    let seeds: Vec<u64> = (0..n_trials).map(|i| trial_seed(base_seed, i)).collect();
    let run_one = |seed: &u64| -> Result<TrialResult> {
        let mut rng = ChaCha8Rng::seed_from_u64(*seed);
        let mut c = make_controller();
        run_trial(env, &mut c, &mut rng)
    };
    let results: Vec<TrialResult> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| EpisodeError::InvalidEnv(e.to_string()))?;
        pool.install(|| seeds.par_iter().map(run_one).collect::<Result<Vec<_>>>())?
    } else {
        seeds.iter().map(run_one).collect::<Result<Vec<_>>>()?
    };
    Ok(summarize(results, seeds, include_failed))
}

/// Builds the aggregate view of a finished batch.
pub fn summarize(results: Vec<TrialResult>, seeds: Vec<u64>, include_failed: bool) -> BatchSummary {
    let n_trials = results.len();
    let n_success = results.iter().filter(|r| r.success).count();
    let qualifying: Vec<&TrialResult> = results
        .iter()
        .filter(|r| include_failed || r.success)
        .collect();
    let moments = |vals: &[f64]| -> (f64, f64) {
        if vals.is_empty() {
            return (f64::NAN, f64::NAN);
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let times: Vec<f64> = qualifying.iter().map(|r| r.time_cost).collect();
    let steps: Vec<f64> = qualifying.iter().map(|r| r.step_cost as f64).collect();
    let (mean_time, std_time) = moments(&times);
    let (mean_steps, std_steps) = moments(&steps);
    BatchSummary {
        n_trials,
        n_success,
        success_rate: n_success as f64 / n_trials.max(1) as f64,
        mean_time,
        std_time,
        mean_steps,
        std_steps,
        results,
        seeds,
    }
}
