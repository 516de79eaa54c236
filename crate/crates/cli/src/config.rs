use std::path::{Path, PathBuf};

use flapsim::analysis::ExcitationSpec;
use flapsim::training::{EpisodeConfig, PpoConfig, RandomizationConfig};
use flapsim::trajectory::{forward_flight, random_spec, Stage, Trajectory, TrajectorySpec, CRUISE_SPEED};
use flapsim::{build_default_model, Environment, RobotModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Variable that overrides the output directory when `--out` is absent.
pub const OUT_DIR_ENV: &str = "FLAPSIM_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub total_steps: u64,
    /// Updates between progress lines on stderr.
    pub report_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { total_steps: 500_000, report_every: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeSection {
    pub episodes: usize,
    pub duration_s: f64,
    /// Draw the launch state per episode.
    pub randomize_initial_state: bool,
}

impl Default for EpisodeSection {
    fn default() -> Self {
        Self { episodes: 20, duration_s: 30.0, randomize_initial_state: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    /// Coefficient to vary, by name; empty for a wind-only sweep.
    pub coefficient: String,
    pub scales: Vec<f64>,
    pub winds_m_s: Vec<[f64; 3]>,
    pub episodes: usize,
    pub duration_s: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            coefficient: "kutta_lift".into(),
            scales: vec![0.5, 0.75, 1.0, 1.25, 1.5],
            winds_m_s: Vec::new(),
            episodes: 100,
            duration_s: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SysidSection {
    pub excitation: ExcitationSpec,
    pub shared_denominator: bool,
}

impl Default for SysidSection {
    fn default() -> Self {
        Self { excitation: ExcitationSpec::default(), shared_denominator: true }
    }
}

/// Everything a run depends on. One file fully determines a run together
/// with the command-line flags, which are folded in before the snapshot is
/// written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub stage: u8,
    pub output_dir: Option<PathBuf>,
    /// Robot description in TOML; the built-in model when absent.
    pub model_path: Option<PathBuf>,
    /// Target path in TOML; the stage's default path when absent.
    pub trajectory_path: Option<PathBuf>,
    pub environment: Environment,
    pub episode: EpisodeConfig,
    pub randomization: RandomizationConfig,
    pub ppo: PpoConfig,
    pub train: TrainSection,
    pub simulate: EpisodeSection,
    pub evaluate: EpisodeSection,
    pub sweep: SweepSection,
    pub sysid: SysidSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            stage: 1,
            output_dir: None,
            model_path: None,
            trajectory_path: None,
            environment: Environment::default(),
            episode: EpisodeConfig::default(),
            randomization: RandomizationConfig::default(),
            ppo: PpoConfig::default(),
            train: TrainSection::default(),
            simulate: EpisodeSection { episodes: 1, ..EpisodeSection::default() },
            evaluate: EpisodeSection::default(),
            sweep: SweepSection::default(),
            sysid: SysidSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        // Relative paths inside the file are relative to the file.
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p.as_mut() {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        let mut cfg = cfg;
        fix(&mut cfg.model_path);
        fix(&mut cfg.trajectory_path);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        for p in [&self.model_path, &self.trajectory_path].into_iter().flatten() {
            if !p.exists() {
                return Err(CliError::config(format!("referenced file {} does not exist", p.display())));
            }
        }
        if Stage::from_index(self.stage).is_none() {
            return Err(CliError::config(format!("stage {} is not in 1..=4", self.stage)));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn stage(&self) -> Stage {
        Stage::from_index(self.stage).expect("validated")
    }

    pub fn model(&self) -> Result<RobotModel, CliError> {
        match &self.model_path {
            Some(p) => RobotModel::load(p).map_err(|e| CliError::config(format!("{}: {e}", p.display()))),
            None => Ok(build_default_model()),
        }
    }

    /// The configured path, the straight cruise path for stage 1, or a
    /// seeded random path for later stages.
    pub fn trajectory(&self, duration_s: f64, seed: u64) -> Result<Trajectory, CliError> {
        let spec = match &self.trajectory_path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
                TrajectorySpec::from_toml_str(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
            }
            None if self.stage() == Stage::Forward => forward_flight(CRUISE_SPEED, duration_s),
            None => random_spec(self.stage(), duration_s, &mut ChaCha8Rng::seed_from_u64(seed)),
        };
        Trajectory::new(&spec).map_err(|e| CliError::config(e.to_string()))
    }

    pub fn episode_config(&self, duration_s: f64) -> EpisodeConfig {
        EpisodeConfig { stage: self.stage(), max_duration_s: duration_s, ..self.episode.clone() }
    }

    pub fn episode_randomization(&self, section: &EpisodeSection) -> RandomizationConfig {
        if self.stage().randomizes_dynamics() {
            self.randomization.clone()
        } else if section.randomize_initial_state {
            RandomizationConfig {
                initial_position_m: self.randomization.initial_position_m,
                initial_velocity_m_s: self.randomization.initial_velocity_m_s,
                ..RandomizationConfig::none()
            }
        } else {
            RandomizationConfig::none()
        }
    }
}
