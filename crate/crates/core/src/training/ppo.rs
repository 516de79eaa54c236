//! Clipped-surrogate PPO with generalized advantage estimation.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::episode::{initial_state, FlightEnv};
use super::randomization::{DynamicsSample, RandomizationConfig};
use super::{EpisodeConfig, TerminationReason, MAX_STEP_REWARD};
use crate::aero::Environment;
use crate::control::{gaussian_log_prob, ActorCritic, Policy, ACTION_DIM, OBS_DIM};
use crate::model::{JointVector, RobotModel};
use crate::trajectory::{random_spec, Stage, Trajectory};
use crate::{Error, Result};

const HALF_LN_2PI_E: f64 = 1.418_938_533_204_672_7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub num_envs: usize,
    /// Policy steps per environment per update.
    pub horizon: usize,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub clip: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub learning_rate: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    /// Per-network gradient norm bound; 0 disables clipping.
    pub max_grad_norm: f64,
    /// Remaining epochs are skipped once the minibatch KL estimate exceeds
    /// 1.5 times this value; 0 disables the check.
    pub target_kl: f64,
    pub normalize_advantages: bool,
    pub hidden_sizes: Vec<usize>,
    pub initial_action_std: f64,
    pub start_stage: u8,
    pub final_stage: u8,
    /// Advance when the mean return of the window exceeds this fraction of the stage maximum.
    pub advance_fraction: f64,
    pub advance_window: usize,
    pub parallel: bool,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            num_envs: 16,
            horizon: 128,
            epochs: 4,
            minibatch_size: 512,
            clip: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            learning_rate: 3e-4,
            value_coef: 0.5,
            entropy_coef: 0.0,
            max_grad_norm: 0.5,
            target_kl: 0.02,
            normalize_advantages: true,
            hidden_sizes: vec![256, 256],
            initial_action_std: 0.5,
            start_stage: 1,
            final_stage: 4,
            advance_fraction: 0.7,
            advance_window: 50,
            parallel: true,
            seed: 0,
        }
    }
}

/// Adam over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= self.learning_rate * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Frozen minibatch; one sample per column of `obs` and `actions`.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoBatch {
    /// Normalized observations.
    pub obs: DMatrix<f64>,
    pub actions: DMatrix<f64>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl PpoBatch {
    pub fn len(&self) -> usize {
        self.old_log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.old_log_probs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoLossStats {
    pub total: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Loss `-E[min(r A, clip(r) A)] + c_v E[(V - R)^2] - c_e H` and its gradient
/// in [`ActorCritic::params`] order.
pub fn ppo_loss_and_grad(net: &ActorCritic, batch: &PpoBatch, cfg: &PpoConfig) -> Result<(PpoLossStats, Vec<f64>)> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::DimensionMismatch { expected: 1, got: 0 });
    }
    let nf = n as f64;
    let actor = net.actor.forward_batch(&batch.obs)?;
    let critic = net.critic.forward_batch(&batch.obs)?;
    let pre = actor.output();
    let values = critic.output();
    let log_std = net.log_std.as_slice();
    let inv_var: Vec<f64> = log_std.iter().map(|l| (-2.0 * l).exp()).collect();
    let a_dim = net.action_dim();

    let mut d_pre = DMatrix::zeros(a_dim, n);
    let mut d_log_std = vec![0.0; a_dim];
    let mut d_value = DMatrix::zeros(1, n);
    let mut stats = PpoLossStats::default();
    for i in 0..n {
        let mean: Vec<f64> = pre.column(i).iter().map(|m| m.tanh()).collect();
        let act = batch.actions.column(i);
        let logp = gaussian_log_prob(act.as_slice(), &mean, log_std);
        let ratio = (logp - batch.old_log_probs[i]).exp();
        let adv = batch.advantages[i];
        let clipped = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip);
        let unclipped_active = ratio * adv <= clipped * adv;
        stats.policy_loss -= if unclipped_active { ratio * adv } else { clipped * adv } / nf;
        if !unclipped_active {
            stats.clip_fraction += 1.0 / nf;
        }
        stats.approx_kl += (batch.old_log_probs[i] - logp) / nf;
        // d loss / d logp
        let g = if unclipped_active { -ratio * adv / nf } else { 0.0 };
        if g != 0.0 {
            for k in 0..a_dim {
                let diff = act[k] - mean[k];
                d_pre[(k, i)] = g * diff * inv_var[k] * (1.0 - mean[k] * mean[k]);
                d_log_std[k] += g * (diff * diff * inv_var[k] - 1.0);
            }
        }
        let err = values[(0, i)] - batch.returns[i];
        stats.value_loss += err * err / nf;
        d_value[(0, i)] = 2.0 * cfg.value_coef * err / nf;
    }
    stats.entropy = log_std.iter().map(|l| l + HALF_LN_2PI_E).sum();
    for g in &mut d_log_std {
        *g -= cfg.entropy_coef;
    }
    stats.total = stats.policy_loss + cfg.value_coef * stats.value_loss - cfg.entropy_coef * stats.entropy;

    let mut grad = vec![0.0; net.num_params()];
    let [ra, rc, rs] = net.param_blocks();
    net.actor.backward(&actor, &d_pre, &mut grad[ra]);
    net.critic.backward(&critic, &d_value, &mut grad[rc]);
    grad[rs].copy_from_slice(&d_log_std);
    Ok((stats, grad))
}

/// Rescales the concatenation of `parts` to Euclidean norm at most `max`.
fn clip_norm(parts: &mut [&mut [f64]], max: f64) {
    let norm = parts.iter().flat_map(|p| p.iter()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max {
        let s = max / norm;
        parts.iter_mut().for_each(|p| p.iter_mut().for_each(|x| *x *= s));
    }
}

/// Advantages and returns for one environment's trajectory segment.
///
/// `next_values[t]` is the value used to bootstrap after step `t`: the
/// critic at the next observation, or zero after a terminal step. `cut[t]`
/// marks the end of an episode, stopping the advantage recursion.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    cut: &[bool],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        if cut[t] {
            running = 0.0;
        }
        let delta = rewards[t] + gamma * next_values[t] - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// A finished training episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    /// Total environment steps taken when the episode ended.
    pub env_steps: u64,
    pub stage: u8,
    pub episode_return: f64,
    pub length: usize,
    pub termination: TerminationReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub update: usize,
    pub env_steps: u64,
    pub stage: u8,
    pub episodes: usize,
    /// Over episodes finished during this update; NaN when none finished.
    pub mean_return: f64,
    pub mean_length: f64,
    pub mean_r_pos: f64,
    pub mean_r_rates: f64,
    pub mean_r_level: f64,
    pub mean_r_energy: f64,
    pub terminations: BTreeMap<String, usize>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub normalize_advantages: bool,
}

struct Slot {
    env: FlightEnv,
    rng: ChaCha8Rng,
    episode_return: f64,
}

/// Per-step data of one environment during a rollout.
#[derive(Default)]
struct Lane {
    obs: Vec<Vec<f64>>,
    actions: Vec<JointVector>,
    log_probs: Vec<f64>,
    values: Vec<f64>,
    rewards: Vec<f64>,
    next_values: Vec<f64>,
    cut: Vec<bool>,
}

/// Synchronous vectorized PPO trainer.
///
/// Every environment owns its RNG, so the serial and parallel modes are
/// bit-identical.
pub struct Trainer {
    pub config: PpoConfig,
    pub episode: EpisodeConfig,
    pub randomization: RandomizationConfig,
    model: RobotModel,
    environment: Environment,
    policy: Policy,
    adam: Adam,
    stage: Stage,
    slots: Vec<Slot>,
    rng: ChaCha8Rng,
    window: VecDeque<f64>,
    env_steps: u64,
    updates: usize,
    episodes: Vec<EpisodeRecord>,
    stage_policies: Vec<(Stage, Policy)>,
}

fn slot_seed(seed: u64, env: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(env as u64 + 1)
}

impl Trainer {
    pub fn new(
        config: PpoConfig,
        episode: EpisodeConfig,
        randomization: RandomizationConfig,
        model: RobotModel,
        environment: Environment,
    ) -> Result<Self> {
        let stage = Stage::from_index(config.start_stage)
            .ok_or_else(|| Error::Config(format!("bad start stage {}", config.start_stage)))?;
        Stage::from_index(config.final_stage).ok_or_else(|| Error::Config(format!("bad final stage {}", config.final_stage)))?;
        if config.num_envs == 0 || config.horizon == 0 || config.minibatch_size == 0 {
            return Err(Error::Config("num_envs, horizon and minibatch_size must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let net = ActorCritic::random(OBS_DIM, &config.hidden_sizes, ACTION_DIM, config.initial_action_std, &mut rng);
        let policy = Policy::new(net);
        let adam = Adam::new(policy.net.num_params(), config.learning_rate);
        let mut t = Self {
            config,
            episode,
            randomization,
            model,
            environment,
            policy,
            adam,
            stage,
            slots: Vec::new(),
            rng,
            window: VecDeque::new(),
            env_steps: 0,
            updates: 0,
            episodes: Vec::new(),
            stage_policies: Vec::new(),
        };
        t.slots = (0..t.config.num_envs)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(slot_seed(t.config.seed, i));
                let env = t.fresh_env(&mut rng);
                Slot { env, rng, episode_return: 0.0 }
            })
            .collect();
        Ok(t)
    }

    fn fresh_env(&self, rng: &mut ChaCha8Rng) -> FlightEnv {
        let mut cfg = self.episode.clone();
        cfg.stage = self.stage;
        let spec = random_spec(self.stage, cfg.max_duration_s, rng);
        let trajectory = Trajectory::new(&spec).expect("generated specs are non-empty");
        let rand_cfg =
            if self.stage.randomizes_dynamics() { self.randomization.clone() } else { self.randomization_initial_only() };
        let sample = DynamicsSample::draw(&rand_cfg, rng);
        let (m, e) = sample.apply(&self.model, &self.environment);
        let s0 = initial_state(&trajectory, &sample.initial_position_offset, &sample.initial_velocity_offset);
        FlightEnv::new(m, e, trajectory, cfg, s0)
    }

    fn randomization_initial_only(&self) -> RandomizationConfig {
        RandomizationConfig {
            initial_position_m: self.randomization.initial_position_m,
            initial_velocity_m_s: self.randomization.initial_velocity_m_s,
            ..RandomizationConfig::none()
        }
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn episodes(&self) -> &[EpisodeRecord] {
        &self.episodes
    }

    /// Policies captured when each stage was completed.
    pub fn stage_policies(&self) -> &[(Stage, Policy)] {
        &self.stage_policies
    }

    fn stage_max_return(&self) -> f64 {
        MAX_STEP_REWARD * self.episode.max_steps() as f64
    }

    fn value_of(&self, obs: &[f64]) -> Result<f64> {
        Ok(self.policy.net.critic.forward(&self.policy.norm.normalize(obs))?[0])
    }

    /// Collects one rollout and runs the PPO epochs over it.
    pub fn run_update(&mut self) -> Result<UpdateMetrics> {
        let ne = self.config.num_envs;
        let mut lanes: Vec<Lane> = (0..ne).map(|_| Lane::default()).collect();
        let mut raw_obs: Vec<Vec<f64>> = self.slots.iter().map(|s| s.env.observe().map(|o| o.to_vec())).collect::<Result<_>>()?;
        let mut finished: Vec<EpisodeRecord> = Vec::new();
        let mut term_sums = [0.0; 4];
        let mut term_count = 0usize;

        for _ in 0..self.config.horizon {
            let normed: Vec<Vec<f64>> = raw_obs.iter().map(|o| self.policy.norm.normalize(o)).collect();
            let x = DMatrix::from_fn(OBS_DIM, ne, |r, c| normed[c][r]);
            let pre = self.policy.net.actor.forward_batch(&x)?.output().clone();
            let vals = self.policy.net.critic.forward_batch(&x)?.output().clone();
            let std: Vec<f64> = self.policy.net.log_std.iter().map(|l| l.exp()).collect();
            let log_std = self.policy.net.log_std.as_slice().to_vec();

            let mut actions = Vec::with_capacity(ne);
            for (i, slot) in self.slots.iter_mut().enumerate() {
                let mean: Vec<f64> = pre.column(i).iter().map(|m| m.tanh()).collect();
                let a = JointVector::from_fn(|k, _| {
                    let z: f64 = StandardNormal.sample(&mut slot.rng);
                    mean[k] + std[k] * z
                });
                lanes[i].log_probs.push(gaussian_log_prob(a.as_slice(), &mean, &log_std));
                actions.push(a);
            }

            let outcomes: Vec<_> = if self.config.parallel {
                self.slots.par_iter_mut().zip(actions.par_iter()).map(|(s, a)| s.env.step(a)).collect()
            } else {
                self.slots.iter_mut().zip(actions.iter()).map(|(s, a)| s.env.step(a)).collect()
            };
            self.env_steps += ne as u64;

            for i in 0..ne {
                let out = &outcomes[i];
                let lane = &mut lanes[i];
                lane.obs.push(std::mem::take(&mut raw_obs[i]));
                lane.actions.push(actions[i]);
                lane.values.push(vals[(0, i)]);
                lane.rewards.push(out.reward.total);
                for (s, t) in term_sums.iter_mut().zip(out.reward.terms()) {
                    *s += t;
                }
                term_count += 1;
                self.slots[i].episode_return += out.reward.total;
                match out.done {
                    None => {
                        lane.cut.push(false);
                        lane.next_values.push(f64::NAN);
                        raw_obs[i] = self.slots[i].env.observe()?.to_vec();
                    }
                    Some(reason) => {
                        let boot = if reason.is_truncation() {
                            match self.slots[i].env.observe() {
                                Ok(o) => self.value_of(&o.to_vec())?,
                                Err(_) => 0.0,
                            }
                        } else {
                            0.0
                        };
                        lane.cut.push(true);
                        lane.next_values.push(boot);
                        finished.push(EpisodeRecord {
                            env_steps: self.env_steps,
                            stage: self.stage.index(),
                            episode_return: self.slots[i].episode_return,
                            length: self.slots[i].env.steps(),
                            termination: reason,
                        });
                        let mut rng = self.slots[i].rng.clone();
                        self.slots[i].env = self.fresh_env(&mut rng);
                        self.slots[i].rng = rng;
                        self.slots[i].episode_return = 0.0;
                        raw_obs[i] = self.slots[i].env.observe()?.to_vec();
                    }
                }
            }
        }

        // Bootstrap values for steps that were not terminal.
        for i in 0..ne {
            let last = self.value_of(&raw_obs[i])?;
            let lane = &mut lanes[i];
            let n = lane.values.len();
            for t in 0..n {
                if !lane.cut[t] {
                    lane.next_values[t] = if t + 1 < n { lane.values[t + 1] } else { last };
                }
            }
        }

        let mut obs_all = Vec::new();
        let mut act_all = Vec::new();
        let mut logp_all = Vec::new();
        let mut adv_all = Vec::new();
        let mut ret_all = Vec::new();
        for lane in lanes {
            let (adv, ret) =
                compute_gae(&lane.rewards, &lane.values, &lane.next_values, &lane.cut, self.config.gamma, self.config.gae_lambda);
            obs_all.extend(lane.obs);
            act_all.extend(lane.actions);
            logp_all.extend(lane.log_probs);
            adv_all.extend(adv);
            ret_all.extend(ret);
        }
        if self.config.normalize_advantages && adv_all.len() > 1 {
            let n = adv_all.len() as f64;
            let mean = adv_all.iter().sum::<f64>() / n;
            let std = (adv_all.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt() + 1e-8;
            adv_all.iter_mut().for_each(|a| *a = (*a - mean) / std);
        }
        let normed: Vec<Vec<f64>> = obs_all.iter().map(|o| self.policy.norm.normalize(o)).collect();

        let total = normed.len();
        let mut idx: Vec<usize> = (0..total).collect();
        let mut last_stats = PpoLossStats::default();
        let mut params = self.policy.net.params();
        let [ra, rc, rs] = self.policy.net.param_blocks();
        'epochs: for _ in 0..self.config.epochs {
            idx.shuffle(&mut self.rng);
            for chunk in idx.chunks(self.config.minibatch_size) {
                let batch = PpoBatch {
                    obs: DMatrix::from_fn(OBS_DIM, chunk.len(), |r, c| normed[chunk[c]][r]),
                    actions: DMatrix::from_fn(ACTION_DIM, chunk.len(), |r, c| act_all[chunk[c]][r]),
                    old_log_probs: chunk.iter().map(|&j| logp_all[j]).collect(),
                    advantages: chunk.iter().map(|&j| adv_all[j]).collect(),
                    returns: chunk.iter().map(|&j| ret_all[j]).collect(),
                };
                let (stats, mut grad) = ppo_loss_and_grad(&self.policy.net, &batch, &self.config)?;
                if !stats.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Divergence(format!("non-finite loss at update {}", self.updates)));
                }
                if self.config.max_grad_norm > 0.0 {
                    // Actor and critic are clipped separately so the value
                    // gradient cannot starve the policy update.
                    let (head, std_part) = grad.split_at_mut(rs.start);
                    clip_norm(&mut [&mut head[ra.clone()], std_part], self.config.max_grad_norm);
                    clip_norm(&mut [&mut head[rc.clone()]], self.config.max_grad_norm);
                }
                self.adam.step(&mut params, &grad);
                self.policy.net.set_params(&params)?;
                last_stats = stats;
                if self.config.target_kl > 0.0 && stats.approx_kl > 1.5 * self.config.target_kl {
                    break 'epochs;
                }
            }
        }
        self.policy.norm.update(&obs_all)?;
        self.updates += 1;

        let mut terminations = BTreeMap::new();
        for r in TerminationReason::ALL {
            terminations.insert(r.name().to_owned(), finished.iter().filter(|e| e.termination == r).count());
        }
        let ep_n = finished.len() as f64;
        let mean_or_nan = |f: &dyn Fn(&EpisodeRecord) -> f64| {
            if finished.is_empty() {
                f64::NAN
            } else {
                finished.iter().map(f).sum::<f64>() / ep_n
            }
        };
        let tc = term_count.max(1) as f64;
        let metrics = UpdateMetrics {
            update: self.updates,
            env_steps: self.env_steps,
            stage: self.stage.index(),
            episodes: finished.len(),
            mean_return: mean_or_nan(&|e| e.episode_return),
            mean_length: mean_or_nan(&|e| e.length as f64),
            mean_r_pos: term_sums[0] / tc,
            mean_r_rates: term_sums[1] / tc,
            mean_r_level: term_sums[2] / tc,
            mean_r_energy: term_sums[3] / tc,
            terminations,
            policy_loss: last_stats.policy_loss,
            value_loss: last_stats.value_loss,
            entropy: last_stats.entropy,
            approx_kl: last_stats.approx_kl,
            clip_fraction: last_stats.clip_fraction,
            normalize_advantages: self.config.normalize_advantages,
        };

        for e in &finished {
            self.window.push_back(e.episode_return);
            if self.window.len() > self.config.advance_window {
                self.window.pop_front();
            }
        }
        self.episodes.extend(finished);
        self.maybe_advance();
        Ok(metrics)
    }

    fn maybe_advance(&mut self) {
        if self.stage.index() >= self.config.final_stage || self.window.len() < self.config.advance_window {
            return;
        }
        let mean = self.window.iter().sum::<f64>() / self.window.len() as f64;
        if mean >= self.config.advance_fraction * self.stage_max_return() {
            self.stage_policies.push((self.stage, self.policy.clone()));
            self.stage = Stage::from_index(self.stage.index() + 1).expect("below final stage");
            self.window.clear();
        }
    }
}

/// Result of [`ppo_train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: Policy,
    pub metrics: Vec<UpdateMetrics>,
    pub episodes: Vec<EpisodeRecord>,
    pub stage_policies: Vec<(Stage, Policy)>,
    pub final_stage: Stage,
}

/// Trains until at least `total_steps` environment steps have been taken.
pub fn ppo_train(
    config: PpoConfig,
    episode: EpisodeConfig,
    randomization: RandomizationConfig,
    model: RobotModel,
    environment: Environment,
    total_steps: u64,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, episode, randomization, model, environment)?;
    let mut metrics = Vec::new();
    while trainer.env_steps() < total_steps {
        metrics.push(trainer.run_update()?);
    }
    Ok(TrainOutcome {
        policy: trainer.policy.clone(),
        metrics,
        episodes: trainer.episodes.clone(),
        stage_policies: trainer.stage_policies.clone(),
        final_stage: trainer.stage,
    })
}

/// Random frozen minibatch for gradient checks.
pub fn synthetic_batch<R: Rng + ?Sized>(net: &ActorCritic, n: usize, rng: &mut R) -> PpoBatch {
    let obs = DMatrix::from_fn(net.obs_dim(), n, |_, _| rng.random_range(-1.0..1.0));
    let actions = DMatrix::from_fn(net.action_dim(), n, |_, _| rng.random_range(-1.0..1.0));
    let mut old = Vec::with_capacity(n);
    for i in 0..n {
        let out = net.forward(obs.column(i).as_slice()).expect("matching dims");
        // Shift so that ratios land on both sides of the clip range.
        let shift = rng.random_range(-0.4..0.4);
        old.push(gaussian_log_prob(actions.column(i).as_slice(), out.mean.as_slice(), net.log_std.as_slice()) + shift);
    }
    PpoBatch {
        obs,
        actions,
        old_log_probs: old,
        advantages: (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
        returns: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_with_zero_rate_is_identity() {
        let mut p = vec![1.0, -2.0, 3.5];
        let before = p.clone();
        let mut adam = Adam::new(3, 0.0);
        adam.step(&mut p, &[0.3, -7.0, 1e3]);
        assert_eq!(p, before);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut p = vec![3.0, -4.0];
        let mut adam = Adam::new(2, 0.05);
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            adam.step(&mut p, &g);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-2), "{p:?}");
    }

    #[test]
    fn gae_matches_hand_computation() {
        let (g, l) = (0.9, 0.8);
        let r = [1.0, 2.0, 3.0];
        let v = [0.5, 0.25, 0.125];
        let next = [0.25, 0.125, 0.0];
        let cut = [false, false, true];
        let (adv, ret) = compute_gae(&r, &v, &next, &cut, g, l);
        let d2 = 3.0 - 0.125;
        let d1 = 2.0 + g * 0.125 - 0.25;
        let d0 = 1.0 + g * 0.25 - 0.5;
        let a2 = d2;
        let a1 = d1 + g * l * a2;
        let a0 = d0 + g * l * a1;
        assert!((adv[0] - a0).abs() < 1e-15 && (adv[1] - a1).abs() < 1e-15 && (adv[2] - a2).abs() < 1e-15);
        assert!((ret[0] - (a0 + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn gae_stops_at_episode_boundary() {
        let (adv, _) = compute_gae(&[1.0, 10.0], &[0.0, 0.0], &[0.0, 0.0], &[true, true], 0.99, 0.95);
        assert_eq!(adv, vec![1.0, 10.0]);
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = ActorCritic::random(6, &[8, 8], 3, 0.6, &mut rng);
        let batch = synthetic_batch(&net, 32, &mut rng);
        let cfg = PpoConfig { entropy_coef: 0.01, ..Default::default() };
        let (_, grad) = ppo_loss_and_grad(&net, &batch, &cfg).unwrap();
        let p = net.params();
        let h = 1e-6;
        let mut fd = vec![0.0; p.len()];
        let mut probe = net.clone();
        for k in 0..p.len() {
            let mut q = p.clone();
            q[k] += h;
            probe.set_params(&q).unwrap();
            let up = ppo_loss_and_grad(&probe, &batch, &cfg).unwrap().0.total;
            q[k] -= 2.0 * h;
            probe.set_params(&q).unwrap();
            let down = ppo_loss_and_grad(&probe, &batch, &cfg).unwrap().0.total;
            fd[k] = (up - down) / (2.0 * h);
        }
        let diff: f64 = grad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
        assert!(diff / scale < 1e-4, "relative error {}", diff / scale);
    }

    #[test]
    fn serial_and_parallel_agree() {
        let model = crate::model::build_default_model();
        let cfg =
            PpoConfig { num_envs: 3, horizon: 20, epochs: 2, minibatch_size: 30, hidden_sizes: vec![8], ..Default::default() };
        let run = |parallel: bool| {
            let mut t = Trainer::new(
                PpoConfig { parallel, ..cfg.clone() },
                EpisodeConfig::default(),
                RandomizationConfig::default(),
                model.clone(),
                Environment::default(),
            )
            .unwrap();
            let m: Vec<_> = (0..2).map(|_| t.run_update().unwrap()).collect();
            (t.policy().clone(), format!("{m:?}"))
        };
        assert_eq!(run(true), run(false));
    }
}
