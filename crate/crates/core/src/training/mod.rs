//! Reward, termination, domain randomization, episodes and PPO.

mod episode;
mod ppo;
mod randomization;

pub use episode::{initial_state, run_episode, Controller, FlightEnv, PolicyController, Rollout, StepOutcome, ZeroController};
pub use ppo::{
    compute_gae, ppo_loss_and_grad, ppo_train, synthetic_batch, Adam, EpisodeRecord, PpoBatch, PpoConfig, PpoLossStats,
    TrainOutcome, Trainer, UpdateMetrics,
};
pub use randomization::{sample_randomization, DynamicsSample, RandomizationConfig, Range};

use std::f64::consts::FRAC_PI_2;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::control::{PdGains, POLICY_RATE_HZ};
use crate::model::{JointVector, SimState};
use crate::trajectory::Stage;

/// Weights of the position, rate, attitude and energy terms.
pub const REWARD_WEIGHTS: [f64; 4] = [0.5, 0.1, 0.2, 0.05];

/// Largest per-step reward: every term at 1.
pub const MAX_STEP_REWARD: f64 = REWARD_WEIGHTS[0] + REWARD_WEIGHTS[1] + REWARD_WEIGHTS[2] + REWARD_WEIGHTS[3];

/// Kernel widths of the exponential reward terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub sigma_position_m: f64,
    pub sigma_rate_rad_s: f64,
    pub sigma_attitude_rad: f64,
    pub sigma_power_w: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { sigma_position_m: 1.0, sigma_rate_rad_s: 3.0, sigma_attitude_rad: 0.5, sigma_power_w: 5.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_pos: f64,
    pub r_rates: f64,
    pub r_level: f64,
    pub r_energy: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn from_terms(terms: [f64; 4]) -> Self {
        let w = REWARD_WEIGHTS;
        Self {
            r_pos: terms[0],
            r_rates: terms[1],
            r_level: terms[2],
            r_energy: terms[3],
            total: w[0] * terms[0] + w[1] * terms[1] + w[2] * terms[2] + w[3] * terms[3],
        }
    }

    pub fn terms(&self) -> [f64; 4] {
        [self.r_pos, self.r_rates, self.r_level, self.r_energy]
    }
}

/// Mechanical joint power `sum |tau_i qd_i|`, W.
pub fn joint_power(torques: &JointVector, state: &SimState) -> f64 {
    torques.component_mul(&state.joint_velocities).abs().sum()
}

pub fn compute_reward(state: &SimState, target: &Vector3<f64>, torques: &JointVector, cfg: &RewardConfig) -> RewardBreakdown {
    let e2 = (state.base_position - target).norm_squared();
    let w2 = state.base_angular_velocity.norm_squared();
    let (roll, pitch, _) = state.euler_angles();
    let power = joint_power(torques, state);
    let terms = [
        (-e2 / cfg.sigma_position_m.powi(2)).exp(),
        (-w2 / cfg.sigma_rate_rad_s.powi(2)).exp(),
        (-(roll * roll + pitch * pitch) / cfg.sigma_attitude_rad.powi(2)).exp(),
        (-power / cfg.sigma_power_w).exp(),
    ];
    // NaN inputs score zero rather than poisoning returns.
    RewardBreakdown::from_terms(terms.map(|r| if r.is_nan() { 0.0 } else { r }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    Position,
    Attitude,
    Timeout,
    NonFinite,
}

impl TerminationReason {
    pub const ALL: [Self; 4] = [Self::Position, Self::Attitude, Self::Timeout, Self::NonFinite];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Position => "position",
            Self::Attitude => "attitude",
            Self::Timeout => "timeout",
            Self::NonFinite => "non_finite",
        }
    }

    /// Timeouts truncate an episode that could have continued.
    pub fn is_truncation(&self) -> bool {
        matches!(self, Self::Timeout)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub max_duration_s: f64,
    pub position_limit_m: f64,
    /// Roll and pitch bound; enforced only in stages that limit attitude.
    pub attitude_limit_rad: f64,
    pub stage: Stage,
    pub gains: PdGains,
    pub reward: RewardConfig,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            max_duration_s: 30.0,
            position_limit_m: 3.0,
            attitude_limit_rad: FRAC_PI_2,
            stage: Stage::Forward,
            gains: PdGains::default(),
            reward: RewardConfig::default(),
        }
    }
}

impl EpisodeConfig {
    pub fn max_steps(&self) -> usize {
        (self.max_duration_s * POLICY_RATE_HZ).round() as usize
    }
}

/// `step` counts completed policy steps.
pub fn check_termination(state: &SimState, target: &Vector3<f64>, step: usize, cfg: &EpisodeConfig) -> Option<TerminationReason> {
    if !state.is_finite() {
        return Some(TerminationReason::NonFinite);
    }
    if (state.base_position - target).norm() > cfg.position_limit_m {
        return Some(TerminationReason::Position);
    }
    if cfg.stage.limits_attitude() {
        let (roll, pitch, _) = state.euler_angles();
        if roll.abs() > cfg.attitude_limit_rad || pitch.abs() > cfg.attitude_limit_rad {
            return Some(TerminationReason::Attitude);
        }
    }
    if step >= cfg.max_steps() {
        return Some(TerminationReason::Timeout);
    }
    None
}
