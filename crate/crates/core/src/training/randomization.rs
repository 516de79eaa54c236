use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aero::Environment;
use crate::model::{RobotModel, NUM_BODIES};

/// Closed interval sampled uniformly. A zero-width range always yields `low`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub low: f64,
    pub high: f64,
}

impl Range {
    pub const fn new(low: f64, high: f64) -> Self {
        Self { low, high }
    }

    pub const fn fixed(v: f64) -> Self {
        Self { low: v, high: v }
    }

    pub const fn symmetric(half_width: f64) -> Self {
        Self { low: -half_width, high: half_width }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.low && v <= self.high
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.low + self.high)
    }

    pub fn width(&self) -> f64 {
        self.high - self.low
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.high > self.low {
            rng.random_range(self.low..=self.high)
        } else {
            self.low
        }
    }
}

/// Per-episode dynamics randomization. Scales multiply the nominal value,
/// offsets add to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomizationConfig {
    pub joint_damping_scale: Range,
    /// Applied to each body's mass and rotational inertia together.
    pub link_mass_scale: Range,
    /// Per body and per axis.
    pub com_offset_m: Range,
    /// Independent factor for each of the five fluid coefficients, shared by all bodies.
    pub aero_coefficient_scale: Range,
    pub added_mass_scale: Range,
    pub wind_x_m_s: Range,
    pub wind_y_m_s: Range,
    pub wind_z_m_s: Range,
    /// Per-axis offset from the trajectory start.
    pub initial_position_m: Range,
    /// Per-axis offset from the trajectory start velocity.
    pub initial_velocity_m_s: Range,
}

impl Default for RandomizationConfig {
    fn default() -> Self {
        Self {
            joint_damping_scale: Range::new(0.9, 1.1),
            link_mass_scale: Range::new(0.9, 1.1),
            com_offset_m: Range::symmetric(0.05),
            aero_coefficient_scale: Range::new(0.7, 1.3),
            added_mass_scale: Range::new(0.9, 1.1),
            wind_x_m_s: Range::symmetric(2.0),
            wind_y_m_s: Range::symmetric(2.0),
            wind_z_m_s: Range::symmetric(1.5),
            initial_position_m: Range::symmetric(0.5),
            initial_velocity_m_s: Range::symmetric(0.5),
        }
    }
}

impl RandomizationConfig {
    /// Nominal dynamics and an unperturbed start.
    pub fn none() -> Self {
        Self {
            joint_damping_scale: Range::fixed(1.0),
            link_mass_scale: Range::fixed(1.0),
            com_offset_m: Range::fixed(0.0),
            aero_coefficient_scale: Range::fixed(1.0),
            added_mass_scale: Range::fixed(1.0),
            wind_x_m_s: Range::fixed(0.0),
            wind_y_m_s: Range::fixed(0.0),
            wind_z_m_s: Range::fixed(0.0),
            initial_position_m: Range::fixed(0.0),
            initial_velocity_m_s: Range::fixed(0.0),
        }
    }

    /// Nominal dynamics with the default start perturbation.
    pub fn initial_state_only() -> Self {
        let d = Self::default();
        Self { initial_position_m: d.initial_position_m, initial_velocity_m_s: d.initial_velocity_m_s, ..Self::none() }
    }

    /// Named ranges, in a fixed order, for reporting and bounds checks.
    pub fn ranges(&self) -> [(&'static str, Range); 10] {
        [
            ("joint_damping_scale", self.joint_damping_scale),
            ("link_mass_scale", self.link_mass_scale),
            ("com_offset_m", self.com_offset_m),
            ("aero_coefficient_scale", self.aero_coefficient_scale),
            ("added_mass_scale", self.added_mass_scale),
            ("wind_x_m_s", self.wind_x_m_s),
            ("wind_y_m_s", self.wind_y_m_s),
            ("wind_z_m_s", self.wind_z_m_s),
            ("initial_position_m", self.initial_position_m),
            ("initial_velocity_m_s", self.initial_velocity_m_s),
        ]
    }
}

/// One draw from a [`RandomizationConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsSample {
    pub joint_damping_scale: f64,
    pub link_mass_scale: [f64; NUM_BODIES],
    pub com_offset: [Vector3<f64>; NUM_BODIES],
    pub aero_coefficient_scale: [f64; 5],
    pub added_mass_scale: f64,
    pub wind: Vector3<f64>,
    pub initial_position_offset: Vector3<f64>,
    pub initial_velocity_offset: Vector3<f64>,
}

impl DynamicsSample {
    pub fn draw<R: Rng + ?Sized>(cfg: &RandomizationConfig, rng: &mut R) -> Self {
        let v3 = |r: &Range, rng: &mut R| Vector3::new(r.sample(rng), r.sample(rng), r.sample(rng));
        let joint_damping_scale = cfg.joint_damping_scale.sample(rng);
        let link_mass_scale = std::array::from_fn(|_| cfg.link_mass_scale.sample(rng));
        let com_offset = std::array::from_fn(|_| v3(&cfg.com_offset_m, rng));
        let aero_coefficient_scale = std::array::from_fn(|_| cfg.aero_coefficient_scale.sample(rng));
        let added_mass_scale = cfg.added_mass_scale.sample(rng);
        let wind = Vector3::new(cfg.wind_x_m_s.sample(rng), cfg.wind_y_m_s.sample(rng), cfg.wind_z_m_s.sample(rng));
        let initial_position_offset = v3(&cfg.initial_position_m, rng);
        let initial_velocity_offset = v3(&cfg.initial_velocity_m_s, rng);
        Self {
            joint_damping_scale,
            link_mass_scale,
            com_offset,
            aero_coefficient_scale,
            added_mass_scale,
            wind,
            initial_position_offset,
            initial_velocity_offset,
        }
    }

    pub fn apply(&self, model: &RobotModel, env: &Environment) -> (RobotModel, Environment) {
        let mut m = model.clone();
        for j in &mut m.joints {
            j.damping *= self.joint_damping_scale;
        }
        for (b, body) in m.bodies.iter_mut().enumerate() {
            body.mass *= self.link_mass_scale[b];
            body.inertia *= self.link_mass_scale[b];
            body.com_offset += self.com_offset[b];
            body.coefficients = body.coefficients.scaled(self.aero_coefficient_scale);
            body.fluid.added_mass *= self.added_mass_scale;
            body.fluid.added_inertia *= self.added_mass_scale;
        }
        let e = env.clone().with_wind(env.wind_velocity + self.wind);
        (m, e)
    }
}

/// Draws a sample from `seed` and applies it to the nominal model and environment.
pub fn sample_randomization(
    cfg: &RandomizationConfig,
    model: &RobotModel,
    env: &Environment,
    seed: u64,
) -> (RobotModel, Environment, DynamicsSample) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = DynamicsSample::draw(cfg, &mut rng);
    let (m, e) = sample.apply(model, env);
    (m, e, sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_default_model;

    #[test]
    fn zero_width_is_identity() {
        let model = build_default_model();
        let env = Environment::default();
        let (m, e, s) = sample_randomization(&RandomizationConfig::none(), &model, &env, 7);
        assert_eq!(m, model);
        assert_eq!(e, env);
        assert_eq!(s.initial_position_offset, Vector3::zeros());
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let model = build_default_model();
        let env = Environment::default();
        let cfg = RandomizationConfig::default();
        let a = sample_randomization(&cfg, &model, &env, 11);
        let b = sample_randomization(&cfg, &model, &env, 11);
        assert_eq!(a, b);
        assert_ne!(a.2, sample_randomization(&cfg, &model, &env, 12).2);
    }

    #[test]
    fn mass_scale_statistics() {
        let cfg = RandomizationConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..10_000).map(|_| DynamicsSample::draw(&cfg, &mut rng).link_mass_scale[0]).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!(xs.iter().all(|x| (0.9..=1.1).contains(x)));
        assert!((mean - 1.0).abs() < 0.01);
    }

    #[test]
    fn wind_is_applied() {
        let model = build_default_model();
        let env = Environment::default();
        let (_, e, s) = sample_randomization(&RandomizationConfig::default(), &model, &env, 5);
        assert_eq!(e.wind_velocity, s.wind);
        assert!(s.wind.x.abs() <= 2.0 && s.wind.z.abs() <= 1.5);
    }
}
