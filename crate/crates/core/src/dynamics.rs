//! Disturbed Dubins vehicle dynamics.
//!
//! The vehicle moves at constant linear speed `v` with angular-speed control
//! `u`; flow from a [`DisturbanceField`] adds to the translational velocity.
//! One explicit Euler step:
//!
//! ```text
//! x' = x + (v cos θ + ωx(x, y, t)) Δt
//! y' = y + (v sin θ + ωy(x, y, t)) Δt
//! θ' = wrap(θ + u Δt)
//! ```
//!
//! [`jacobians`] returns the exact linearization of this map, with the flow
//! partials taken from [`DisturbanceField::jacobian`].

use nalgebra::{Matrix3, Vector2, Vector3};
use thiserror::Error;

use crate::field::DisturbanceField;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("motion parameters invalid: {0}")]
    InvalidParams(String),
}

/// Planar pose `(x, y, θ)` with θ kept in `(-π, π]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl VehicleState {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    pub fn distance_to(&self, p: Vector2<f64>) -> f64 {
        (self.x - p.x).hypot(self.y - p.y)
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.theta)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }
}

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta.rem_euclid(std::f64::consts::TAU);
    if t > std::f64::consts::PI {
        t -= std::f64::consts::TAU;
    }
    t
}

/// Angular-speed command (rad/s).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlInput(pub f64);

impl ControlInput {
    /// Clamps the command into `[-u_max, u_max]`.
    pub fn clamped(u: f64, u_max: f64) -> Self {
        Self(u.clamp(-u_max, u_max))
    }
}

/// Motion constants shared by the simulator, planner, and policy harness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionParams {
    /// Constant linear speed (world units / s).
    pub v: f64,
    /// Integration step Δt (s).
    pub dt: f64,
    /// Control bound (rad/s).
    pub u_max: f64,
}

impl MotionParams {
    pub fn new(v: f64, dt: f64, u_max: f64) -> Result<Self, DynamicsError> {
        if !(v > 0.0) || !(dt > 0.0) || !(u_max > 0.0) {
            return Err(DynamicsError::InvalidParams(format!(
                "v, dt, u_max must be positive (got {v}, {dt}, {u_max})"
            )));
        }
        // the planner's linearization ignores the heading wrap; keep single
        // steps well away from the branch cut
        if u_max * dt > std::f64::consts::FRAC_PI_2 {
            return Err(DynamicsError::InvalidParams(format!(
                "u_max*dt = {} exceeds pi/2",
                u_max * dt
            )));
        }
        Ok(Self { v, dt, u_max })
    }
}

impl Default for MotionParams {
    fn default() -> Self {
        Self {
            v: 1.0,
            dt: 1.0,
            u_max: 1.0,
        }
    }
}

/// Linearization of one Euler step: `A = ∂f/∂s` (3x3), `B = ∂f/∂u` (3x1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicsJacobians {
    pub a: Matrix3<f64>,
    pub b: Vector3<f64>,
}

/// One Euler step of the disturbed Dubins model. The flow is sampled at the
/// step's start position and time.
pub fn step(
    s: &VehicleState,
    u: ControlInput,
    field: &DisturbanceField,
    t: f64,
    p: &MotionParams,
) -> VehicleState {
    let w = field.sample(s.x, s.y, t);
    VehicleState::new(
        s.x + (p.v * s.theta.cos() + w.x) * p.dt,
        s.y + (p.v * s.theta.sin() + w.y) * p.dt,
        s.theta + u.0 * p.dt,
    )
}

/// Exact Jacobians of [`step`] at `(s, u)`.
pub fn jacobians(
    s: &VehicleState,
    _u: ControlInput,
    field: &DisturbanceField,
    t: f64,
    p: &MotionParams,
) -> DynamicsJacobians {
    let j = field.jacobian(s.x, s.y, t);
    let dt = p.dt;
    let a = Matrix3::new(
        1.0 + j.dwx_dx * dt,
        j.dwx_dy * dt,
        -p.v * s.theta.sin() * dt,
        j.dwy_dx * dt,
        1.0 + j.dwy_dy * dt,
        p.v * s.theta.cos() * dt,
        0.0,
        0.0,
        1.0,
    );
    DynamicsJacobians {
        a,
        b: Vector3::new(0.0, 0.0, dt),
    }
}

/// A rolled-out path: `N+1` states for `N` controls, with the start time and
/// step length needed to timestamp each state.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<VehicleState>,
    pub controls: Vec<ControlInput>,
    pub t0: f64,
    pub dt: f64,
}

impl Trajectory {
    /// Number of control steps.
    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    /// Timestamp of state `k`.
    pub fn time_at(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn final_state(&self) -> &VehicleState {
        self.states.last().expect("trajectory has at least s0")
    }
}

/// Applies a control sequence from `s0`, sampling the field along the way.
pub fn rollout(
    s0: VehicleState,
    controls: &[ControlInput],
    field: &DisturbanceField,
    t0: f64,
    p: &MotionParams,
) -> Trajectory {
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(s0);
    let mut s = s0;
    for (k, &u) in controls.iter().enumerate() {
        s = step(&s, u, field, t0 + k as f64 * p.dt, p);
        states.push(s);
    }
    Trajectory {
        states,
        controls: controls.to_vec(),
        t0,
        dt: p.dt,
    }
}
