use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ActorCritic, PolicyOutput, RunningNorm};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Network plus the observation statistics it was trained against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub net: ActorCritic,
    pub norm: RunningNorm,
}

impl Policy {
    pub fn new(net: ActorCritic) -> Self {
        let norm = RunningNorm::new(net.obs_dim());
        Self { net, norm }
    }

    /// Normalizes a raw observation and evaluates the network.
    pub fn forward(&self, raw_obs: &[f64]) -> Result<PolicyOutput> {
        if raw_obs.len() != self.norm.dim() {
            return Err(Error::DimensionMismatch { expected: self.norm.dim(), got: raw_obs.len() });
        }
        self.net.forward(&self.norm.normalize(raw_obs))
    }
}

/// Deterministic policy evaluation: `(mean, std, value)` for a raw observation.
pub fn policy_forward(obs: &[f64], policy: &Policy) -> Result<PolicyOutput> {
    policy.forward(obs)
}

/// Hex SHA-256 of a config snapshot.
pub fn config_hash(config_text: &str) -> String {
    hex::encode(Sha256::digest(config_text.as_bytes()))
}

/// Versioned JSON container for a policy. Floats round-trip exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub version: u32,
    pub actor_shape: Vec<usize>,
    pub critic_shape: Vec<usize>,
    pub params: Vec<f64>,
    pub normalizer: RunningNorm,
    pub config_hash: String,
    pub seed: u64,
    pub stage: u8,
}

impl PolicyCheckpoint {
    pub fn from_policy(policy: &Policy, config_hash: &str, seed: u64, stage: u8) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            actor_shape: policy.net.actor.shapes(),
            critic_shape: policy.net.critic.shapes(),
            params: policy.net.params(),
            normalizer: policy.norm.clone(),
            config_hash: config_hash.to_owned(),
            seed,
            stage,
        }
    }

    pub fn to_policy(&self) -> Result<Policy> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", self.version)));
        }
        let (a, c) = (&self.actor_shape, &self.critic_shape);
        if a.len() < 2 || a.len() != c.len() || a[..a.len() - 1] != c[..c.len() - 1] || c.last() != Some(&1) {
            return Err(Error::Checkpoint("inconsistent layer shapes".into()));
        }
        let hidden = &a[1..a.len() - 1];
        let mut net = ActorCritic::zeros(a[0], hidden, a[a.len() - 1]);
        net.set_params(&self.params).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if self.normalizer.dim() != a[0] || self.normalizer.m2.len() != a[0] {
            return Err(Error::Checkpoint("normalizer width does not match input layer".into()));
        }
        if !self.params.iter().all(|p| p.is_finite()) {
            return Err(Error::Checkpoint("non-finite parameters".into()));
        }
        Ok(Policy { net, norm: self.normalizer.clone() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(self)?;
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path)?;
        serde_json::from_str(&s).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut policy = Policy::new(ActorCritic::random(6, &[8, 8], 2, 0.5, &mut rng));
        policy.norm.update(&[vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![0.1, 0.3, 0.7, 1.1, 1.3, 1.7]]).unwrap();
        let ck = PolicyCheckpoint::from_policy(&policy, &config_hash("a = 1"), 42, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.json");
        ck.save(&path).unwrap();
        let back = PolicyCheckpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_policy().unwrap(), policy);
    }

    #[test]
    fn rejects_corrupt_checkpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let policy = Policy::new(ActorCritic::random(4, &[3], 2, 0.5, &mut rng));
        let mut ck = PolicyCheckpoint::from_policy(&policy, "x", 0, 1);
        ck.params.pop();
        assert!(ck.to_policy().is_err());
        let mut ck = PolicyCheckpoint::from_policy(&policy, "x", 0, 1);
        ck.version = 99;
        assert!(ck.to_policy().is_err());
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(config_hash(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }
}
