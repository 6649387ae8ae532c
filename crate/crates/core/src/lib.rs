//! Planning and learning for a planar constant-speed vehicle moving through
//! spatiotemporal flow fields.
//!
//! The crate provides the building blocks end to end: flow-field
//! construction and ingestion ([`field`]), the disturbed Dubins dynamics and
//! their linearization ([`dynamics`]), an iterative LQR trajectory optimizer
//! ([`ilqr`]), a recurrent convolutional policy network with hand-rolled
//! gradients ([`policy`]), the policy-gradient training loop with experience
//! replay ([`training`]), and a trial harness for benchmarking controllers
//! ([`episode`]).

pub mod dynamics;
pub mod episode;
pub mod field;
pub mod ilqr;
pub mod policy;
pub mod training;

pub use dynamics::{ControlInput, DynamicsJacobians, MotionParams, Trajectory, VehicleState};
pub use episode::{BatchSummary, Controller, EnvSpec, ObstacleMap, Placement, TrialResult};
pub use field::{
    generate, ingest_currents, CenterPath, CurrentCsvSchema, DisturbanceField, FieldJacobian,
    FieldPatternSpec, PatternKind,
};
pub use ilqr::{ILQRConfig, ILQRSolution, QuadraticCost, RecedingHorizonController};
pub use policy::{
    ActionDistribution, DrlController, Observation, PolicyConfig, PolicyWeights, SliceHistory,
};
pub use training::{Experience, ReplayBuffer, TrainingConfig};
