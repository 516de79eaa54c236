use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sysid::{IoData, IoSegment};
use crate::aero::Environment;
use crate::control::Policy;
use crate::model::RobotModel;
use crate::training::{run_episode, EpisodeConfig, PolicyController, RandomizationConfig, TerminationReason};
use crate::trajectory::{forward_flight, Excitation, Trajectory, CRUISE_SPEED, POLICY_DT};
use crate::Result;

/// Multisine excitation of the commanded position on a straight path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcitationSpec {
    pub segments: usize,
    pub duration_s: f64,
    /// Bound on the offset per axis, m.
    pub amplitude_m: f64,
    pub min_hz: f64,
    pub max_hz: f64,
    pub sines_per_axis: usize,
    pub speed_m_s: f64,
    /// Segment `i` draws its frequencies and launch state from `seed + i`.
    pub seed: u64,
    /// Subtract each segment's mean output.
    pub detrend: bool,
}

impl Default for ExcitationSpec {
    fn default() -> Self {
        Self {
            segments: 4,
            duration_s: 30.0,
            amplitude_m: 1.0,
            min_hz: 0.05,
            max_hz: 2.0,
            sines_per_axis: 4,
            speed_m_s: CRUISE_SPEED,
            seed: 0,
            detrend: true,
        }
    }
}

/// A segment dropped because its episode ended early.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscardedSegment {
    pub seed: u64,
    pub termination: TerminationReason,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoCollection {
    pub data: IoData,
    pub discarded: Vec<DiscardedSegment>,
}

/// Flies the policy on excited straight paths and records, at the policy
/// rate, the commanded offset `u` and the measured offset `y`, both taken
/// relative to the unexcited path.
pub fn collect_io_pairs(
    policy: &Policy,
    model: &RobotModel,
    environment: &Environment,
    config: &EpisodeConfig,
    spec: &ExcitationSpec,
) -> Result<IoCollection> {
    let base = Trajectory::new(&forward_flight(spec.speed_m_s, spec.duration_s))?;
    let config = EpisodeConfig { max_duration_s: spec.duration_s, ..config.clone() };
    let randomization = RandomizationConfig::initial_state_only();
    let mut out = IoCollection { data: IoData::new(1.0 / POLICY_DT), discarded: Vec::new() };
    for i in 0..spec.segments {
        let seed = spec.seed + i as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let excitation = Excitation::multisine(spec.amplitude_m, spec.min_hz, spec.max_hz, spec.sines_per_axis, &mut rng);
        let traj = base.clone().with_excitation(excitation);
        let mut controller = PolicyController::deterministic(policy);
        let r = run_episode(&mut controller, model, environment, &traj, &config, &randomization, seed)?;
        if r.termination != TerminationReason::Timeout {
            out.discarded.push(DiscardedSegment { seed, termination: r.termination, steps: r.steps() });
            continue;
        }
        let mut seg = IoSegment::default();
        for k in 0..r.steps() {
            let t = (k + 1) as f64 * POLICY_DT;
            let nominal = traj.nominal_position_at(t);
            let u = r.targets[k] - nominal;
            let y = r.states[k + 1].base_position - nominal;
            seg.u.push([u.x, u.y, u.z]);
            seg.y.push([y.x, y.y, y.z]);
        }
        if spec.detrend && !seg.is_empty() {
            for axis in 0..3 {
                let mean = seg.y.iter().map(|v| v[axis]).sum::<f64>() / seg.len() as f64;
                seg.y.iter_mut().for_each(|v| v[axis] -= mean);
            }
        }
        out.data.segments.push(seg);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{ActorCritic, OBS_DIM};
    use crate::model::build_default_model;
    use crate::trajectory::Stage;

    fn policy() -> Policy {
        Policy::new(ActorCritic::random(OBS_DIM, &[8], 5, 0.3, &mut ChaCha8Rng::seed_from_u64(1)))
    }

    #[test]
    fn short_segments_are_aligned() {
        let spec = ExcitationSpec { segments: 2, duration_s: 0.5, ..Default::default() };
        // An untrained policy tumbles quickly, so attitude is left unbounded.
        let cfg = EpisodeConfig { stage: Stage::Maneuver, ..Default::default() };
        let c = collect_io_pairs(&policy(), &build_default_model(), &Environment::default(), &cfg, &spec).unwrap();
        assert!(c.discarded.is_empty(), "{:?}", c.discarded);
        assert_eq!(c.data.segments.len(), 2);
        for s in &c.data.segments {
            assert_eq!(s.u.len(), s.y.len());
            assert_eq!(s.len(), 25);
            assert!(s.u.iter().flatten().all(|v| v.abs() <= 1.0 + 1e-12));
        }
    }

    #[test]
    fn terminated_segments_are_discarded() {
        let spec = ExcitationSpec { segments: 1, duration_s: 30.0, ..Default::default() };
        let env = Environment::default().without_aero();
        let c = collect_io_pairs(&policy(), &build_default_model(), &env, &EpisodeConfig::default(), &spec).unwrap();
        assert!(c.data.segments.is_empty());
        assert_eq!(c.discarded.len(), 1);
        assert_eq!(c.discarded[0].termination, TerminationReason::Position);
    }
}
