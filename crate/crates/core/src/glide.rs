//! Locked-joint gliding: quasi-static trim and simulated glide ratio.
//!
//! In a steady glide the aerodynamic force balances the weight, so the
//! horizontal-to-vertical distance ratio equals the lift-to-drag ratio.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use crate::aero::{self, Environment};
use crate::dynamics::{self, Kinematics, DEFAULT_DT};
use crate::model::{JointVector, RobotModel, SimState, NUM_JOINTS};
use crate::{Error, Result};

/// Steady straight glide in the vertical plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlideTrim {
    /// Airspeed, m/s.
    pub speed: f64,
    /// Flight-path angle, rad; negative when descending.
    pub flight_path_angle: f64,
    /// Body pitch, rad; negative is nose-up.
    pub pitch: f64,
    pub lift_to_drag: f64,
}

/// Copy of the model with every joint locked.
pub fn locked_model(model: &RobotModel) -> RobotModel {
    model.with_locked_joints(&(0..NUM_JOINTS).collect::<Vec<_>>())
}

fn trim_state(model: &RobotModel, x: &Vector3<f64>) -> SimState {
    let (speed, gamma, pitch) = (x[0], x[1], x[2]);
    SimState {
        base_orientation: UnitQuaternion::from_euler_angles(0.0, pitch, 0.0),
        base_linear_velocity: Vector3::new(gamma.cos(), 0.0, gamma.sin()) * speed,
        joint_positions: JointVector::from_column_slice(&model.glide_pose),
        ..Default::default()
    }
}

/// Net generalized force on the base in the x, z and pitch directions.
fn trim_residual(model: &RobotModel, env: &Environment, x: &Vector3<f64>) -> Result<Vector3<f64>> {
    let state = trim_state(model, x);
    let kin = Kinematics::new(model, &state);
    let wrenches = aero::body_wrenches(&kin, model, &state, env)?;
    let net = aero::generalized_aero_force_with(&kin, &wrenches)? - kin.bias_forces(model, &env.gravity);
    Ok(Vector3::new(net[0], net[2], net[4]))
}

/// Solves for the steady glide at the model's glide pose by damped Newton
/// iteration from `guess = (speed, flight_path_angle, pitch)`.
pub fn trim_glide_from(model: &RobotModel, env: &Environment, guess: Vector3<f64>) -> Result<GlideTrim> {
    let mut x = guess;
    let mut r = trim_residual(model, env, &x)?;
    for _ in 0..100 {
        if r.norm() < 1e-11 {
            break;
        }
        let mut jac = Matrix3::zeros();
        for k in 0..3 {
            let h = 1e-6 * x[k].abs().max(1e-2);
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            let d = (trim_residual(model, env, &xp)? - trim_residual(model, env, &xm)?) / (2.0 * h);
            jac.set_column(k, &d);
        }
        let dx = jac.lu().solve(&(-r)).ok_or(Error::RankDeficient)?;
        let mut t = 1.0;
        loop {
            let cand = x + dx * t;
            let rc = trim_residual(model, env, &cand)?;
            if rc.norm() < r.norm() || t < 1e-4 {
                x = cand;
                r = rc;
                break;
            }
            t *= 0.5;
        }
    }
    if !(r.norm() < 1e-8) || !(x[0] > 0.0) || !(x[1] < 0.0) {
        return Err(Error::Divergence(format!("glide trim did not converge, residual {:.3e}", r.norm())));
    }
    Ok(GlideTrim { speed: x[0], flight_path_angle: x[1], pitch: x[2], lift_to_drag: -1.0 / x[1].tan() })
}

pub fn trim_glide(model: &RobotModel, env: &Environment) -> Result<GlideTrim> {
    trim_glide_from(model, env, Vector3::new(4.0, -0.16, -0.6))
}

/// Outcome of a simulated locked-joint glide.
#[derive(Debug, Clone, PartialEq)]
pub struct GlideRun {
    /// Horizontal over vertical distance across the measurement window.
    pub ratio: f64,
    pub final_speed: f64,
    pub final_pitch: f64,
    /// Largest relative change of the windowed ratio across the window halves.
    pub ratio_spread: f64,
}

/// Launches level at `launch_speed` in the glide pose, lets the transient
/// decay for the first half of `duration`, and measures the glide ratio over
/// the second half.
pub fn simulate_glide(model: &RobotModel, env: &Environment, launch_speed: f64, duration: f64) -> Result<GlideRun> {
    let locked = locked_model(model);
    let mut s = SimState {
        base_linear_velocity: Vector3::new(launch_speed, 0.0, 0.0),
        joint_positions: JointVector::from_column_slice(&model.glide_pose),
        ..Default::default()
    };
    let n = (duration / DEFAULT_DT).round() as usize;
    let marks = [n / 2, 3 * n / 4, n];
    let mut pos = Vec::new();
    let zero = JointVector::zeros();
    for k in 0..=n {
        if marks.contains(&k) {
            pos.push(s.base_position);
        }
        if k < n {
            s = dynamics::step(&locked, &s, &zero, env, DEFAULT_DT)?;
        }
    }
    let ratio_of = |a: &Vector3<f64>, b: &Vector3<f64>| {
        let d = b - a;
        (d.x * d.x + d.y * d.y).sqrt() / (-d.z)
    };
    let ratio = ratio_of(&pos[0], &pos[2]);
    let first = ratio_of(&pos[0], &pos[1]);
    let second = ratio_of(&pos[1], &pos[2]);
    Ok(GlideRun {
        ratio,
        final_speed: s.base_linear_velocity.norm(),
        final_pitch: s.euler_angles().1,
        ratio_spread: ((first - second) / ratio).abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_default_model;

    #[test]
    fn trim_balances_forces() {
        let model = build_default_model();
        let env = Environment::default();
        let trim = trim_glide(&model, &env).unwrap();
        let r = trim_residual(&model, &env, &Vector3::new(trim.speed, trim.flight_path_angle, trim.pitch)).unwrap();
        assert!(r.norm() < 1e-8);
        assert!(trim.lift_to_drag > 1.0);
    }

    #[test]
    fn configured_design_ratio_matches_trim() {
        let model = build_default_model();
        let trim = trim_glide(&model, &Environment::default()).unwrap();
        assert!(
            (trim.lift_to_drag - model.design_lift_to_drag).abs() < 0.02 * model.design_lift_to_drag,
            "trim L/D {} vs configured {}",
            trim.lift_to_drag,
            model.design_lift_to_drag
        );
    }

    #[test]
    fn no_glide_without_air() {
        let model = build_default_model();
        assert!(trim_glide(&model, &Environment::default().without_aero()).is_err());
    }
}
