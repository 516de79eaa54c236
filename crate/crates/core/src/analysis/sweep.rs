use std::io::Write;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aero::{Environment, FluidCoefficients};
use crate::control::Policy;
use crate::model::RobotModel;
use crate::training::{run_episode, EpisodeConfig, PolicyController, RandomizationConfig};
use crate::trajectory::{forward_flight, Trajectory, CRUISE_SPEED};
use crate::Result;

/// Fluid coefficient factors and a steady wind applied to every episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// Factors in [`FluidCoefficients::NAMES`] order.
    pub coefficient_scale: [f64; 5],
    pub wind_m_s: Vector3<f64>,
}

impl Default for SweepPoint {
    fn default() -> Self {
        Self { coefficient_scale: [1.0; 5], wind_m_s: Vector3::zeros() }
    }
}

impl SweepPoint {
    /// Varies one coefficient; `index` follows [`FluidCoefficients::NAMES`].
    pub fn coefficient(index: usize, scale: f64) -> Self {
        let mut p = Self::default();
        p.coefficient_scale[index] = scale;
        p
    }

    pub fn wind(wind_m_s: Vector3<f64>) -> Self {
        Self { wind_m_s, ..Self::default() }
    }

    pub fn apply(&self, model: &RobotModel, env: &Environment) -> (RobotModel, Environment) {
        let mut m = model.clone();
        for body in &mut m.bodies {
            body.coefficients = body.coefficients.scaled(self.coefficient_scale);
        }
        (m, env.clone().with_wind(env.wind_velocity + self.wind_m_s))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub points: Vec<SweepPoint>,
    pub episodes: usize,
    /// Length of the straight forward path, s.
    pub duration_s: f64,
    /// Largest final distance from the last target that counts as success, m.
    pub success_radius_m: f64,
    /// Episode `i` of every point uses seed `seed + i`.
    pub seed: u64,
    /// Per-episode draws; by default only the launch state varies.
    pub randomization: RandomizationConfig,
    pub parallel: bool,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            points: vec![SweepPoint::default()],
            episodes: 100,
            duration_s: 30.0,
            success_radius_m: 3.0,
            seed: 0,
            randomization: RandomizationConfig::initial_state_only(),
            parallel: true,
        }
    }
}

impl SweepSpec {
    /// One point per factor on the coefficient `index`.
    pub fn coefficient_sweep(index: usize, scales: &[f64]) -> Self {
        Self { points: scales.iter().map(|s| SweepPoint::coefficient(index, *s)).collect(), ..Self::default() }
    }

    /// One point per wind vector.
    pub fn wind_sweep(winds: &[Vector3<f64>]) -> Self {
        Self { points: winds.iter().map(|w| SweepPoint::wind(*w)).collect(), ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub point: SweepPoint,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_final_error_m: f64,
}

/// Runs `spec.episodes` deterministic-policy episodes per point and counts
/// those ending within the success radius of the final target. Zero
/// episodes give an empty table.
pub fn success_sweep(
    policy: &Policy,
    model: &RobotModel,
    environment: &Environment,
    config: &EpisodeConfig,
    spec: &SweepSpec,
) -> Result<Vec<SweepRow>> {
    if spec.episodes == 0 {
        return Ok(Vec::new());
    }
    let trajectory = Trajectory::new(&forward_flight(CRUISE_SPEED, spec.duration_s))?;
    let config = EpisodeConfig { max_duration_s: spec.duration_s, ..config.clone() };
    let mut rows = Vec::with_capacity(spec.points.len());
    for point in &spec.points {
        let (m, e) = point.apply(model, environment);
        let run = |i: usize| -> Result<f64> {
            let mut controller = PolicyController::deterministic(policy);
            let r = run_episode(&mut controller, &m, &e, &trajectory, &config, &spec.randomization, spec.seed + i as u64)?;
            Ok((r.states.last().expect("initial state").base_position - trajectory.end()).norm())
        };
        let errors: Vec<f64> = if spec.parallel {
            (0..spec.episodes).into_par_iter().map(run).collect::<Result<_>>()?
        } else {
            (0..spec.episodes).map(run).collect::<Result<_>>()?
        };
        // A diverged episode has a NaN error and counts as a failure.
        let successes = errors.iter().filter(|d| **d <= spec.success_radius_m).count();
        rows.push(SweepRow {
            point: *point,
            episodes: spec.episodes,
            successes,
            success_rate: successes as f64 / spec.episodes as f64,
            mean_final_error_m: errors.iter().sum::<f64>() / errors.len() as f64,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut w: W) -> Result<()> {
    let names = FluidCoefficients::NAMES.map(|n| format!("{n}_scale"));
    writeln!(w, "{},wind_x_m_s,wind_y_m_s,wind_z_m_s,episodes,successes,success_rate,mean_final_error_m", names.join(","))?;
    for r in rows {
        let s = r.point.coefficient_scale;
        let v = r.point.wind_m_s;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            s[0], s[1], s[2], s[3], s[4], v.x, v.y, v.z, r.episodes, r.successes, r.success_rate, r.mean_final_error_m
        )?;
    }
    Ok(())
}
