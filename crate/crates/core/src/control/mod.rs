//! Policy-to-plant control stack.
//!
//! At 50 Hz the policy emits a raw action in `[-1, 1]^5`. The action is
//! low-pass filtered, mapped onto the joint ranges around the flat nominal
//! pose, and tracked at 250 Hz by a joint PD servo (five servo updates per
//! policy step).

mod checkpoint;
mod network;
mod normalizer;

pub use checkpoint::{config_hash, policy_forward, Policy, PolicyCheckpoint, CHECKPOINT_VERSION};
pub use network::{gaussian_log_prob, ActorCritic, Layer, Mlp, MlpCache, PolicyOutput};
pub use normalizer::RunningNorm;

use std::collections::VecDeque;
use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::PdDrive;
use crate::model::{JointVector, RobotModel, SimState, NUM_JOINTS};
use crate::trajectory::{Trajectory, LOOKAHEAD_STEPS, POLICY_DT};
use crate::{Error, Result};

pub const POLICY_RATE_HZ: f64 = 50.0;
pub const PHYSICS_RATE_HZ: f64 = 250.0;
/// Servo updates per policy step.
pub const SUBSTEPS: usize = 5;
pub const FILTER_CUTOFF_HZ: f64 = 7.0;

pub const HISTORY_LEN: usize = 25;
/// quaternion (4), body rates (3), joints (5), pitot (1), previous action (5)
pub const FRAME_DIM: usize = 18;
pub const OBS_DIM: usize = HISTORY_LEN * FRAME_DIM + 3 * LOOKAHEAD_STEPS;
pub const ACTION_DIM: usize = NUM_JOINTS;

/// Clamps each component to `[-1, 1]`; non-finite entries become 0.
pub fn clamp_action(a: &JointVector) -> JointVector {
    a.map(|x| if x.is_finite() { x.clamp(-1.0, 1.0) } else { 0.0 })
}

/// Single-pole low-pass `y_k = alpha y_{k-1} + (1 - alpha) u_k` with
/// `alpha = exp(-2 pi f_c T)`, the step-invariant discretization of
/// `1 / (s / w_c + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowPassFilter {
    alpha: f64,
    state: JointVector,
}

impl LowPassFilter {
    pub fn new(cutoff_hz: f64, sample_hz: f64) -> Self {
        Self { alpha: (-2.0 * PI * cutoff_hz / sample_hz).exp(), state: JointVector::zeros() }
    }

    pub fn policy_rate() -> Self {
        Self::new(FILTER_CUTOFF_HZ, POLICY_RATE_HZ)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn state(&self) -> &JointVector {
        &self.state
    }

    pub fn set_state(&mut self, y: JointVector) {
        self.state = y;
    }

    pub fn reset(&mut self) {
        self.state = JointVector::zeros();
    }

    pub fn apply(&mut self, u: &JointVector) -> JointVector {
        self.state = self.state * self.alpha + u * (1.0 - self.alpha);
        self.state
    }

    /// Steady-state gain at `freq_hz` for input sampled at `sample_hz`.
    pub fn gain_at(&self, freq_hz: f64, sample_hz: f64) -> f64 {
        let th = 2.0 * PI * freq_hz / sample_hz;
        let re = 1.0 - self.alpha * th.cos();
        let im = self.alpha * th.sin();
        (1.0 - self.alpha) / (re * re + im * im).sqrt()
    }
}

/// Maps `[-1, 1]` onto `[lower, upper]` piecewise-linearly with 0 at the
/// nominal flat pose.
pub fn scale_action(model: &RobotModel, y: &JointVector) -> JointVector {
    JointVector::from_fn(|j, _| {
        let joint = &model.joints[j];
        let v = y[j].clamp(-1.0, 1.0);
        if v >= 0.0 {
            v * joint.upper
        } else {
            v * -joint.lower
        }
    })
}

/// Clamps, filters and scales a raw policy action into joint targets.
pub fn filter_and_scale(model: &RobotModel, raw: &JointVector, filter: &mut LowPassFilter) -> JointVector {
    let y = filter.apply(&clamp_action(raw));
    scale_action(model, &y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdGains {
    #[serde(rename = "kp_n_m_rad")]
    pub kp: JointVector,
    #[serde(rename = "kd_n_m_s_rad")]
    pub kd: JointVector,
}

impl Default for PdGains {
    fn default() -> Self {
        Self { kp: JointVector::repeat(5.0), kd: JointVector::repeat(0.1) }
    }
}

impl PdGains {
    pub fn drive(&self, target: &JointVector) -> PdDrive {
        PdDrive { target: *target, kp: self.kp, kd: self.kd }
    }
}

/// `kp (target - q) - kd qd`, clamped to the joint torque limits.
pub fn pd_torque(model: &RobotModel, target: &JointVector, state: &SimState, gains: &PdGains) -> JointVector {
    let raw = gains.kp.component_mul(&(target - state.joint_positions)) - gains.kd.component_mul(&state.joint_velocities);
    crate::dynamics::clamp_torques(model, &raw)
}

/// Body-frame forward airspeed: x component of `R^T (v - wind)`.
pub fn pitot_reading(state: &SimState, wind: &Vector3<f64>) -> f64 {
    (state.base_orientation.inverse() * (state.base_linear_velocity - wind)).x
}

/// One sensor frame: quaternion `(w, x, y, z)`, body rates, joint positions,
/// pitot airspeed, previous raw action.
pub fn sensor_frame(state: &SimState, wind: &Vector3<f64>, prev_action: &JointVector) -> [f64; FRAME_DIM] {
    let q = state.base_orientation.quaternion();
    let mut f = [0.0; FRAME_DIM];
    f[..4].copy_from_slice(&[q.w, q.i, q.j, q.k]);
    f[4..7].copy_from_slice(state.base_angular_velocity.as_slice());
    f[7..12].copy_from_slice(state.joint_positions.as_slice());
    f[12] = pitot_reading(state, wind);
    f[13..18].copy_from_slice(prev_action.as_slice());
    f
}

/// Past sensor frames, newest first, at most `HISTORY_LEN - 1` of them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameHistory {
    frames: VecDeque<[f64; FRAME_DIM]>,
}

impl FrameHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, frame: [f64; FRAME_DIM]) {
        self.frames.push_front(frame);
        self.frames.truncate(HISTORY_LEN - 1);
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }
}

/// Policy input: the current frame plus 24 past frames (zero-padded), and 30
/// body-frame lookahead offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// Newest first; always `HISTORY_LEN` frames.
    pub history: Vec<[f64; FRAME_DIM]>,
    pub lookahead: [Vector3<f64>; LOOKAHEAD_STEPS],
}

impl Observation {
    pub fn current_frame(&self) -> [f64; FRAME_DIM] {
        self.history[0]
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(OBS_DIM);
        for f in &self.history {
            v.extend_from_slice(f);
        }
        for p in &self.lookahead {
            v.extend_from_slice(p.as_slice());
        }
        v
    }

    pub fn is_finite(&self) -> bool {
        self.history.iter().flatten().all(|x| x.is_finite()) && self.lookahead.iter().all(|p| p.iter().all(|x| x.is_finite()))
    }
}

/// Builds the observation at time `t` from the current state and the
/// previously recorded frames. The caller pushes
/// [`Observation::current_frame`] into the history afterwards.
pub fn build_observation(
    state: &SimState,
    wind: &Vector3<f64>,
    trajectory: &Trajectory,
    t: f64,
    prev_action: &JointVector,
    history: &FrameHistory,
) -> Result<Observation> {
    if !(t >= 0.0) || t > trajectory.duration() + 1e-9 {
        return Err(Error::TrajectoryWindow { start: t, end: t + LOOKAHEAD_STEPS as f64 * POLICY_DT });
    }
    let mut frames = Vec::with_capacity(HISTORY_LEN);
    frames.push(sensor_frame(state, wind, prev_action));
    frames.extend(history.frames.iter().copied());
    frames.resize(HISTORY_LEN, [0.0; FRAME_DIM]);
    let rot: Matrix3<f64> = *state.base_orientation.to_rotation_matrix().matrix();
    let obs = Observation { history: frames, lookahead: trajectory.lookahead_window(t, &state.base_position, &rot) };
    if !obs.is_finite() {
        return Err(Error::NonFinite("observation"));
    }
    Ok(obs)
}
