use nalgebra::{UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{check_termination, compute_reward, EpisodeConfig, RandomizationConfig, RewardBreakdown, TerminationReason};
use crate::aero::Environment;
use crate::control::{
    build_observation, clamp_action, filter_and_scale, sensor_frame, FrameHistory, LowPassFilter, Observation, Policy, SUBSTEPS,
};
use crate::dynamics::{step_pd, DEFAULT_DT};
use crate::model::{JointVector, RobotModel, SimState};
use crate::trajectory::{Trajectory, POLICY_DT};
use crate::Result;

/// Level attitude along the trajectory heading, moving with the path's start
/// velocity, shifted by the given offsets.
pub fn initial_state(trajectory: &Trajectory, position_offset: &Vector3<f64>, velocity_offset: &Vector3<f64>) -> SimState {
    SimState {
        base_position: trajectory.start() + position_offset,
        base_orientation: UnitQuaternion::from_euler_angles(0.0, 0.0, trajectory.start_heading()),
        base_linear_velocity: trajectory.start_velocity() + velocity_offset,
        ..Default::default()
    }
}

/// Result of one policy step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub reward: RewardBreakdown,
    pub done: Option<TerminationReason>,
    /// Joint torques over the last servo update.
    pub torques: JointVector,
}

/// A single flight episode at the policy rate.
#[derive(Debug, Clone)]
pub struct FlightEnv {
    pub model: RobotModel,
    pub environment: Environment,
    pub trajectory: Trajectory,
    pub config: EpisodeConfig,
    state: SimState,
    filter: LowPassFilter,
    history: FrameHistory,
    prev_action: JointVector,
    steps: usize,
    done: Option<TerminationReason>,
}

impl FlightEnv {
    pub fn new(
        model: RobotModel,
        environment: Environment,
        trajectory: Trajectory,
        config: EpisodeConfig,
        state: SimState,
    ) -> Self {
        Self {
            model,
            environment,
            trajectory,
            config,
            state,
            filter: LowPassFilter::policy_rate(),
            history: FrameHistory::new(),
            prev_action: JointVector::zeros(),
            steps: 0,
            done: None,
        }
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn time(&self) -> f64 {
        self.steps as f64 * POLICY_DT
    }

    pub fn done(&self) -> Option<TerminationReason> {
        self.done
    }

    pub fn target(&self) -> Vector3<f64> {
        self.trajectory.position_at(self.time())
    }

    pub fn observe(&self) -> Result<Observation> {
        let t = self.time().min(self.trajectory.duration());
        build_observation(&self.state, &self.environment.wind_velocity, &self.trajectory, t, &self.prev_action, &self.history)
    }

    /// Filters the action into joint targets and runs the servo for one
    /// policy period. A physics failure ends the episode as non-finite.
    pub fn step(&mut self, raw_action: &JointVector) -> StepOutcome {
        let action = clamp_action(raw_action);
        self.history.push(sensor_frame(&self.state, &self.environment.wind_velocity, &self.prev_action));
        let target = filter_and_scale(&self.model, &action, &mut self.filter);
        let drive = self.config.gains.drive(&target);
        let mut torques = JointVector::zeros();
        let mut failed = false;
        for _ in 0..SUBSTEPS {
            match step_pd(&self.model, &self.state, &drive, &self.environment, DEFAULT_DT) {
                Ok((next, info)) => {
                    self.state = next;
                    torques = info.applied_torques;
                }
                Err(_) => {
                    failed = true;
                    break;
                }
            }
        }
        self.prev_action = action;
        self.steps += 1;
        let goal = self.target();
        if failed {
            self.done = Some(TerminationReason::NonFinite);
            return StepOutcome { reward: RewardBreakdown::from_terms([0.0; 4]), done: self.done, torques };
        }
        let reward = compute_reward(&self.state, &goal, &torques, &self.config.reward);
        self.done = check_termination(&self.state, &goal, self.steps, &self.config);
        StepOutcome { reward, done: self.done, torques }
    }
}

/// Maps observations to raw actions.
pub trait Controller {
    fn act(&mut self, obs: &Observation) -> Result<JointVector>;
}

/// Always commands the nominal pose.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroController;

impl Controller for ZeroController {
    fn act(&mut self, _obs: &Observation) -> Result<JointVector> {
        Ok(JointVector::zeros())
    }
}

/// Acts with the policy mean, or samples around it when given a noise seed.
#[derive(Debug, Clone)]
pub struct PolicyController<'a> {
    pub policy: &'a Policy,
    noise: Option<ChaCha8Rng>,
}

impl<'a> PolicyController<'a> {
    pub fn deterministic(policy: &'a Policy) -> Self {
        Self { policy, noise: None }
    }

    pub fn stochastic(policy: &'a Policy, seed: u64) -> Self {
        Self { policy, noise: Some(ChaCha8Rng::seed_from_u64(seed)) }
    }
}

impl Controller for PolicyController<'_> {
    fn act(&mut self, obs: &Observation) -> Result<JointVector> {
        let out = self.policy.forward(&obs.to_vec())?;
        let mut a = JointVector::from_iterator(out.mean.iter().copied());
        if let Some(rng) = self.noise.as_mut() {
            for (k, s) in out.std.iter().enumerate() {
                let z: f64 = StandardNormal.sample(rng);
                a[k] += s * z;
            }
        }
        Ok(a)
    }
}

/// Full record of one episode. `states[0]` is the initial state; every other
/// vector has one entry per executed policy step.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<JointVector>,
    pub rewards: Vec<RewardBreakdown>,
    pub torques: Vec<JointVector>,
    pub targets: Vec<Vector3<f64>>,
    pub states: Vec<SimState>,
    pub termination: TerminationReason,
    pub wind: Vector3<f64>,
    pub seed: u64,
}

impl Rollout {
    pub fn steps(&self) -> usize {
        self.rewards.len()
    }

    pub fn total_return(&self) -> f64 {
        self.rewards.iter().map(|r| r.total).sum()
    }

    pub fn duration(&self) -> f64 {
        self.steps() as f64 * POLICY_DT
    }

    pub fn final_position_error(&self) -> f64 {
        match (self.states.last(), self.targets.last()) {
            (Some(s), Some(t)) => (s.base_position - t).norm(),
            _ => f64::NAN,
        }
    }
}

/// Runs one episode. `seed` drives the randomization draw, which also sets
/// the initial perturbation.
pub fn run_episode<C: Controller + ?Sized>(
    controller: &mut C,
    model: &RobotModel,
    environment: &Environment,
    trajectory: &Trajectory,
    config: &EpisodeConfig,
    randomization: &RandomizationConfig,
    seed: u64,
) -> Result<Rollout> {
    let (m, e, sample) = super::sample_randomization(randomization, model, environment, seed);
    let s0 = initial_state(trajectory, &sample.initial_position_offset, &sample.initial_velocity_offset);
    let mut env = FlightEnv::new(m, e, trajectory.clone(), config.clone(), s0.clone());
    let mut out = Rollout {
        observations: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::new(),
        torques: Vec::new(),
        targets: Vec::new(),
        states: vec![s0],
        termination: TerminationReason::Timeout,
        wind: env.environment.wind_velocity,
        seed,
    };
    loop {
        let obs = match env.observe() {
            Ok(o) => o,
            Err(_) => {
                out.termination = TerminationReason::NonFinite;
                break;
            }
        };
        let action = controller.act(&obs)?;
        let step = env.step(&action);
        out.observations.push(obs.to_vec());
        out.actions.push(action);
        out.rewards.push(step.reward);
        out.torques.push(step.torques);
        out.targets.push(env.target());
        out.states.push(env.state().clone());
        if let Some(reason) = step.done {
            out.termination = reason;
            break;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_default_model;
    use crate::trajectory::{forward_flight, CRUISE_SPEED};

    fn setup() -> (RobotModel, Trajectory, EpisodeConfig) {
        (build_default_model(), Trajectory::new(&forward_flight(CRUISE_SPEED, 30.0)).unwrap(), EpisodeConfig::default())
    }

    #[test]
    fn free_fall_terminates_on_position() {
        let (model, traj, cfg) = setup();
        let env = Environment::default().without_aero();
        let r = run_episode(&mut ZeroController, &model, &env, &traj, &cfg, &RandomizationConfig::none(), 0).unwrap();
        assert_eq!(r.termination, TerminationReason::Position);
        // Ballistic drop of 3 m takes sqrt(6 / 9.81) s; the target keeps pace
        // horizontally, so the error crosses 3 m in the policy step after that.
        let expect = ((6.0f64 / 9.81).sqrt() / POLICY_DT).ceil() as usize;
        assert!((r.steps() as i64 - expect as i64).abs() <= 1, "{} vs {expect}", r.steps());
        assert!(r.steps() < cfg.max_steps());
    }

    #[test]
    fn rollout_lengths_agree() {
        let (model, traj, cfg) = setup();
        let env = Environment::default();
        let r =
            run_episode(&mut ZeroController, &model, &env, &traj, &cfg, &RandomizationConfig::initial_state_only(), 3).unwrap();
        assert_eq!(r.rewards.len(), r.steps());
        assert_eq!(r.observations.len(), r.steps());
        assert_eq!(r.states.len(), r.steps() + 1);
        assert_eq!(r.targets.len(), r.steps());
    }

    #[test]
    fn seeded_rollouts_are_identical() {
        let (model, traj, cfg) = setup();
        let env = Environment::default();
        let rc = RandomizationConfig::default();
        let policy = Policy::new(crate::control::ActorCritic::random(
            crate::control::OBS_DIM,
            &[16],
            5,
            0.5,
            &mut ChaCha8Rng::seed_from_u64(1),
        ));
        let a = run_episode(&mut PolicyController::stochastic(&policy, 4), &model, &env, &traj, &cfg, &rc, 9).unwrap();
        let b = run_episode(&mut PolicyController::stochastic(&policy, 4), &model, &env, &traj, &cfg, &rc, 9).unwrap();
        assert_eq!(a, b);
    }
}
