//! Flapping-wing robot flight workbench.
//!
//! * [`model`]: robot description (4 ellipsoid bodies, 5 joints, floating base)
//! * [`dynamics`]: mass matrix, bias forces, Jacobians, forward dynamics, time stepping
//! * [`aero`]: stateless per-body fluid wrenches and their generalized projection
//! * [`control`]: observations, action filter, joint PD loop, MLP actor-critic
//! * [`trajectory`]: procedural target paths and the lookahead window
//! * [`training`]: reward, termination, randomization, episodes, PPO
//! * [`analysis`]: system identification, pole-zero classification, spectra,
//!   phase portraits and robustness sweeps
//! * [`glide`]: locked-joint trim and glide-ratio checks

// `!(x > 0.0)` style checks are deliberate: NaN must fail them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aero;
pub mod analysis;
pub mod control;
pub mod dynamics;
pub mod glide;
pub mod logging;
pub mod model;
pub mod training;
pub mod trajectory;

pub use aero::{Environment, FluidBodyParams, FluidCoefficients, Wrench};
pub use dynamics::{GeneralizedVector, MassMatrix};
pub use model::{build_default_model, validate_model, RobotModel, SimState};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed config: {0}")]
    Config(String),
    #[error("invalid body id {0}")]
    InvalidBody(usize),
    #[error("direction vector has zero length")]
    ZeroDirection,
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("mass matrix is singular; the model is invalid")]
    SingularMassMatrix,
    #[error("trajectory spec is empty")]
    EmptyTrajectory,
    #[error("trajectory window [{start}, {end}] s is unavailable")]
    TrajectoryWindow { start: f64, end: f64 },
    #[error("regression is rank deficient")]
    RankDeficient,
    #[error("degenerate polynomial: {0}")]
    DegeneratePolynomial(&'static str),
    #[error("signal too short: {0}")]
    SignalTooShort(String),
    #[error("no fundamental frequency found")]
    NoFundamental,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("serialization: {0}")]
    Serialization(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(String),
}

pub type Result<T> = std::result::Result<T, Error>;
