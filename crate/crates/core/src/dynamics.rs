//! Floating-base multibody dynamics.
//!
//! Equations of motion in the form `M(q) qdd + h(q, qd) = [0_6; tau] + u_aero`
//! where `h` collects Coriolis, centrifugal and gravity terms. Generalized
//! velocity ordering is `[v_world (3), omega_body (3), qd_joints (5)]`.
//!
//! `M` and `h` are assembled from per-body Jacobians taken at the body CoM with
//! world-aligned axes:
//!
//! * `M = sum J^T diag(m I, R I_b R^T) J`
//! * `h = sum J_v^T m (a_bias - g) + J_w^T (I_w alpha_bias + w x I_w w)`
//!
//! where `a_bias`, `alpha_bias` are the CoM accelerations at `qdd = 0`.

use nalgebra::{Matrix3, Rotation3, SMatrix, SVector, Unit, UnitQuaternion, Vector3};

use crate::aero::{self, Environment, Wrench};
use crate::model::{BaseMode, RobotModel, SimState, NUM_BODIES, NUM_DOF, NUM_JOINTS};
use crate::{Error, Result};

pub type GeneralizedVector = SVector<f64, NUM_DOF>;
pub type MassMatrix = SMatrix<f64, NUM_DOF, NUM_DOF>;
pub type BodyJacobian = SMatrix<f64, 6, NUM_DOF>;

const NUM_LINKS: usize = NUM_JOINTS + 1;

/// Default physics step, 250 Hz.
pub const DEFAULT_DT: f64 = 1.0 / 250.0;

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Positions, Jacobians, velocities and velocity-product accelerations of
/// every link and body for one state.
#[derive(Debug, Clone)]
pub struct Kinematics {
    pub link_rotation: [Matrix3<f64>; NUM_LINKS],
    pub link_origin: [Vector3<f64>; NUM_LINKS],
    /// Joint axes in world axes.
    pub joint_axis: [Vector3<f64>; NUM_JOINTS],
    pub body_rotation: [Matrix3<f64>; NUM_BODIES],
    pub body_com: [Vector3<f64>; NUM_BODIES],
    pub jacobians: [BodyJacobian; NUM_BODIES],
    /// CoM acceleration at zero generalized acceleration.
    pub bias_linear: [Vector3<f64>; NUM_BODIES],
    /// Angular acceleration at zero generalized acceleration.
    pub bias_angular: [Vector3<f64>; NUM_BODIES],
    /// World angular velocity of each body.
    pub body_angular_velocity: [Vector3<f64>; NUM_BODIES],
}

impl Kinematics {
    /// The model must be valid (see [`crate::validate_model`]).
    pub fn new(model: &RobotModel, state: &SimState) -> Self {
        debug_assert_eq!(model.joints.len(), NUM_JOINTS);
        debug_assert_eq!(model.bodies.len(), NUM_BODIES);
        let rb = *state.base_orientation.to_rotation_matrix().matrix();
        let mut rot = [Matrix3::identity(); NUM_LINKS];
        let mut org = [Vector3::zeros(); NUM_LINKS];
        let mut omega = [Vector3::zeros(); NUM_LINKS];
        let mut alpha = [Vector3::zeros(); NUM_LINKS];
        let mut acc = [Vector3::zeros(); NUM_LINKS];
        let mut axis = [Vector3::zeros(); NUM_JOINTS];
        rot[0] = rb;
        org[0] = state.base_position;
        omega[0] = rb * state.base_angular_velocity;

        for (j, joint) in model.joints.iter().enumerate() {
            let p = joint.parent_link;
            let c = j + 1;
            let r = rot[p] * joint.origin;
            let z = rot[p] * joint.axis;
            let qd = state.joint_velocities[j];
            org[c] = org[p] + r;
            axis[j] = z;
            let local = Rotation3::from_axis_angle(&Unit::new_unchecked(joint.axis), state.joint_positions[j]);
            rot[c] = rot[p] * local.matrix();
            omega[c] = omega[p] + z * qd;
            alpha[c] = alpha[p] + omega[p].cross(&(z * qd));
            acc[c] = acc[p] + alpha[p].cross(&r) + omega[p].cross(&omega[p].cross(&r));
        }

        let mut jacobians = [BodyJacobian::zeros(); NUM_BODIES];
        let mut body_rotation = [Matrix3::identity(); NUM_BODIES];
        let mut body_com = [Vector3::zeros(); NUM_BODIES];
        let mut bias_linear = [Vector3::zeros(); NUM_BODIES];
        let mut bias_angular = [Vector3::zeros(); NUM_BODIES];
        let mut body_angular_velocity = [Vector3::zeros(); NUM_BODIES];
        for (b, body) in model.bodies.iter().enumerate() {
            let l = body.link;
            let d = rot[l] * body.com_offset;
            let com = org[l] + d;
            body_rotation[b] = rot[l];
            body_com[b] = com;
            bias_angular[b] = alpha[l];
            bias_linear[b] = acc[l] + alpha[l].cross(&d) + omega[l].cross(&omega[l].cross(&d));
            body_angular_velocity[b] = omega[l];

            let jac = &mut jacobians[b];
            jac.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
            jac.fixed_view_mut::<3, 3>(3, 3).copy_from(&rb);
            jac.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&(com - org[0])) * rb));
            let mut link = l;
            while link > 0 {
                let j = link - 1;
                let z = axis[j];
                jac.fixed_view_mut::<3, 1>(3, 6 + j).copy_from(&z);
                jac.fixed_view_mut::<3, 1>(0, 6 + j).copy_from(&z.cross(&(com - org[link])));
                link = model.joints[j].parent_link;
            }
        }

        Self {
            link_rotation: rot,
            link_origin: org,
            joint_axis: axis,
            body_rotation,
            body_com,
            jacobians,
            bias_linear,
            bias_angular,
            body_angular_velocity,
        }
    }

    pub fn mass_matrix(&self, model: &RobotModel) -> MassMatrix {
        let mut m = MassMatrix::zeros();
        for (b, body) in model.bodies.iter().enumerate() {
            let jac = &self.jacobians[b];
            let jv = jac.fixed_rows::<3>(0);
            let jw = jac.fixed_rows::<3>(3);
            let r = &self.body_rotation[b];
            let iw = r * body.inertia * r.transpose();
            m += jv.transpose() * jv * body.mass + jw.transpose() * iw * jw;
        }
        symmetrize(&mut m);
        m
    }

    pub fn bias_forces(&self, model: &RobotModel, gravity: &Vector3<f64>) -> GeneralizedVector {
        let mut h = GeneralizedVector::zeros();
        for (b, body) in model.bodies.iter().enumerate() {
            let jac = &self.jacobians[b];
            let r = &self.body_rotation[b];
            let iw = r * body.inertia * r.transpose();
            let w = &self.body_angular_velocity[b];
            let f = (self.bias_linear[b] - gravity) * body.mass;
            let t = iw * self.bias_angular[b] + w.cross(&(iw * w));
            h += jac.fixed_rows::<3>(0).transpose() * f + jac.fixed_rows::<3>(3).transpose() * t;
        }
        h
    }
}

fn symmetrize(m: &mut MassMatrix) {
    for i in 0..NUM_DOF {
        for j in (i + 1)..NUM_DOF {
            let a = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = a;
            m[(j, i)] = a;
        }
    }
}

pub fn mass_matrix(model: &RobotModel, state: &SimState) -> MassMatrix {
    Kinematics::new(model, state).mass_matrix(model)
}

/// `C(q, qd) qd + G(q)`.
pub fn bias_forces(model: &RobotModel, state: &SimState, gravity: &Vector3<f64>) -> GeneralizedVector {
    Kinematics::new(model, state).bias_forces(model, gravity)
}

/// Maps generalized velocity to `[v_com; omega]` of the body, both in world axes.
pub fn body_jacobian(model: &RobotModel, state: &SimState, body: usize) -> Result<BodyJacobian> {
    if body >= model.bodies.len() {
        return Err(Error::InvalidBody(body));
    }
    Ok(Kinematics::new(model, state).jacobians[body])
}

/// Generalized coordinates that are allowed to accelerate.
pub fn free_dofs(model: &RobotModel) -> [bool; NUM_DOF] {
    let mut free = [true; NUM_DOF];
    if model.base_mode == BaseMode::Fixed {
        free[..6].iter_mut().for_each(|f| *f = false);
    }
    for (j, joint) in model.joints.iter().enumerate() {
        if joint.locked {
            free[6 + j] = false;
        }
    }
    free
}

/// Joint torques clamped to the model's torque limits.
pub fn clamp_torques(model: &RobotModel, torques: &SVector<f64, NUM_JOINTS>) -> SVector<f64, NUM_JOINTS> {
    SVector::from_fn(|j, _| {
        let lim = model.joints[j].torque_limit;
        torques[j].clamp(-lim, lim)
    })
}

/// Solves `m x = rhs` on the free coordinates; constrained ones get zero.
fn solve_free(m: &MassMatrix, rhs: &GeneralizedVector, free: &[bool; NUM_DOF]) -> Result<GeneralizedVector> {
    let idx: Vec<usize> = (0..NUM_DOF).filter(|&i| free[i]).collect();
    let n = idx.len();
    let mut out = GeneralizedVector::zeros();
    if n == 0 {
        return Ok(out);
    }
    let sub = nalgebra::DMatrix::from_fn(n, n, |r, c| m[(idx[r], idx[c])]);
    let b = nalgebra::DVector::from_fn(n, |r, _| rhs[idx[r]]);
    let chol = sub.cholesky().ok_or(Error::SingularMassMatrix)?;
    let x = chol.solve(&b);
    for (k, &i) in idx.iter().enumerate() {
        out[i] = x[k];
    }
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::SingularMassMatrix);
    }
    Ok(out)
}

/// Right-hand side `[0_6; tau] + u_aero`.
pub fn applied_forces(torques: &SVector<f64, NUM_JOINTS>, aero: &GeneralizedVector) -> GeneralizedVector {
    let mut rhs = *aero;
    for j in 0..NUM_JOINTS {
        rhs[6 + j] += torques[j];
    }
    rhs
}

/// Solves the equations of motion for `qdd`. Torques are clamped to limits;
/// fixed-base and locked-joint coordinates have zero acceleration.
pub fn forward_dynamics(
    model: &RobotModel,
    state: &SimState,
    joint_torques: &SVector<f64, NUM_JOINTS>,
    generalized_aero: &GeneralizedVector,
    gravity: &Vector3<f64>,
) -> Result<GeneralizedVector> {
    let kin = Kinematics::new(model, state);
    let m = kin.mass_matrix(model);
    let h = kin.bias_forces(model, gravity);
    let rhs = applied_forces(&clamp_torques(model, joint_torques), generalized_aero) - h;
    solve_free(&m, &rhs, &free_dofs(model))
}

/// Total mechanical energy: kinetic plus gravitational potential.
pub fn mechanical_energy(model: &RobotModel, state: &SimState, gravity: &Vector3<f64>) -> f64 {
    let kin = Kinematics::new(model, state);
    let qd = state.generalized_velocity();
    let kinetic = 0.5 * qd.dot(&(kin.mass_matrix(model) * qd));
    let potential: f64 = model.bodies.iter().enumerate().map(|(b, body)| -body.mass * gravity.dot(&kin.body_com[b])).sum();
    kinetic + potential
}

/// World linear momentum of the whole assembly.
pub fn linear_momentum(model: &RobotModel, state: &SimState) -> Vector3<f64> {
    let kin = Kinematics::new(model, state);
    let qd = state.generalized_velocity();
    model.bodies.iter().enumerate().map(|(b, body)| (kin.jacobians[b].fixed_rows::<3>(0) * qd) * body.mass).sum()
}

/// Diagnostics of one integration step.
#[derive(Debug, Clone)]
pub struct StepInfo {
    pub acceleration: GeneralizedVector,
    pub generalized_aero: GeneralizedVector,
    /// Body-frame aero wrench per body, evaluated at the pre-step state.
    pub wrenches: Vec<Wrench>,
    /// Joint torques actually applied over the step.
    pub applied_torques: SVector<f64, NUM_JOINTS>,
}

/// Joint-space PD servo `tau = kp (target - q) - kd qd`, integrated implicitly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdDrive {
    pub target: SVector<f64, NUM_JOINTS>,
    pub kp: SVector<f64, NUM_JOINTS>,
    pub kd: SVector<f64, NUM_JOINTS>,
}

impl PdDrive {
    /// The servo law at the given joint state, before clamping.
    pub fn torque(&self, q: &SVector<f64, NUM_JOINTS>, qd: &SVector<f64, NUM_JOINTS>) -> SVector<f64, NUM_JOINTS> {
        self.kp.component_mul(&(self.target - q)) - self.kd.component_mul(qd)
    }
}

/// Advances one step of semi-implicit Euler under pure torque control.
pub fn step_with_info(
    model: &RobotModel,
    state: &SimState,
    joint_torques: &SVector<f64, NUM_JOINTS>,
    env: &Environment,
    dt: f64,
) -> Result<(SimState, StepInfo)> {
    advance(model, state, joint_torques, None, env, dt)
}

/// Advances one step with the joints driven by a PD servo.
///
/// The servo torque is linearized about the end of the step,
/// `tau = kp (target - q - dt qd') - kd qd'`, which keeps stiff gains stable
/// against the light base inertia. Joints whose servo torque saturates at the
/// pre-step state receive the constant limit torque instead.
pub fn step_pd(
    model: &RobotModel,
    state: &SimState,
    drive: &PdDrive,
    env: &Environment,
    dt: f64,
) -> Result<(SimState, StepInfo)> {
    advance(model, state, &SVector::zeros(), Some(drive), env, dt)
}

/// Shared integrator.
///
/// * aero wrenches use the pre-step state and the previous step's
///   acceleration for their added-mass part;
/// * joint damping (and the servo, if any) is treated implicitly;
/// * velocities update first, positions use the new velocities;
/// * for a floating base, the base velocity receives a uniform correction so
///   that the world linear momentum equals its exact impulse update.
fn advance(
    model: &RobotModel,
    state: &SimState,
    feedforward: &SVector<f64, NUM_JOINTS>,
    drive: Option<&PdDrive>,
    env: &Environment,
    dt: f64,
) -> Result<(SimState, StepInfo)> {
    if !state.is_finite() {
        return Err(Error::NonFinite("state"));
    }
    let kin = Kinematics::new(model, state);
    let wrenches = aero::body_wrenches(&kin, model, state, env)?;
    let u_aero = aero::generalized_aero_force_with(&kin, &wrenches)?;
    let m0 = kin.mass_matrix(model);
    let mut m = m0;
    let h = kin.bias_forces(model, &env.gravity);
    let qd = state.generalized_velocity();

    // Per joint: constant torque plus an implicit velocity gain `c`, so that
    // tau = tau0 - c * dt * qdd.
    let mut tau0 = SVector::<f64, NUM_JOINTS>::zeros();
    let mut gain = SVector::<f64, NUM_JOINTS>::zeros();
    for (j, joint) in model.joints.iter().enumerate() {
        let lim = joint.torque_limit;
        let v = state.joint_velocities[j];
        let mut t = feedforward[j];
        let mut c = 0.0;
        if let Some(d) = drive {
            let servo = d.kp[j] * (d.target[j] - state.joint_positions[j]) - d.kd[j] * v;
            if (t + servo).abs() < lim {
                c = d.kp[j] * dt + d.kd[j];
                t = t + servo - d.kp[j] * dt * v;
            } else {
                t += servo;
            }
        }
        tau0[j] = if c == 0.0 { t.clamp(-lim, lim) } else { t };
        gain[j] = c;
    }

    let mut rhs = applied_forces(&tau0, &u_aero) - h;
    for (j, joint) in model.joints.iter().enumerate() {
        rhs[6 + j] -= joint.damping * qd[6 + j];
        m[(6 + j, 6 + j)] += dt * (joint.damping + gain[j]);
    }
    let free = free_dofs(model);
    let qdd = solve_free(&m, &rhs, &free)?;
    let applied = SVector::<f64, NUM_JOINTS>::from_fn(|j, _| tau0[j] - gain[j] * dt * qdd[6 + j]);

    let mut qd_new = qd + qdd * dt;
    for (i, f) in free.iter().enumerate() {
        if !f {
            qd_new[i] = 0.0;
        }
    }

    let mut next = state.clone();
    for (j, joint) in model.joints.iter().enumerate() {
        let v = qd_new[6 + j].clamp(-joint.velocity_limit, joint.velocity_limit);
        let q = state.joint_positions[j] + v * dt;
        let qc = joint.clamp_position(q);
        // A joint pressed against its stop loses the outward velocity.
        qd_new[6 + j] = if qc != q { 0.0 } else { v };
        next.joint_positions[j] = qc;
    }
    let w_body: Vector3<f64> = qd_new.fixed_rows::<3>(3).into_owned();
    let mut quat = state.base_orientation * UnitQuaternion::from_scaled_axis(w_body * dt);
    quat.renormalize();
    next.base_orientation = quat;
    next.set_generalized_velocity(&qd_new);

    if model.base_mode == BaseMode::Floating {
        let p_old: Vector3<f64> = (m0 * qd).fixed_rows::<3>(0).into_owned();
        let external = env.gravity * model.total_mass() + u_aero.fixed_rows::<3>(0);
        let p_target = p_old + external * dt;
        let p_new = linear_momentum(model, &next);
        next.base_linear_velocity += (p_target - p_new) / model.total_mass();
    }
    next.base_position = state.base_position + next.base_linear_velocity * dt;
    next.time = state.time + dt;
    next.last_acceleration = qdd;

    if !next.is_finite() {
        return Err(Error::NonFinite("state"));
    }
    Ok((next, StepInfo { acceleration: qdd, generalized_aero: u_aero, wrenches, applied_torques: applied }))
}

pub fn step(
    model: &RobotModel,
    state: &SimState,
    joint_torques: &SVector<f64, NUM_JOINTS>,
    env: &Environment,
    dt: f64,
) -> Result<SimState> {
    step_with_info(model, state, joint_torques, env, dt).map(|(s, _)| s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_default_model, JointVector, LEFT_FLAP, LEFT_WING, MAIN_BODY, TAIL};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(rng: &mut ChaCha8Rng, model: &RobotModel) -> SimState {
        let mut s = SimState {
            base_position: Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)),
            base_orientation: UnitQuaternion::from_euler_angles(
                rng.random_range(-3.0..3.0),
                rng.random_range(-1.5..1.5),
                rng.random_range(-3.0..3.0),
            ),
            base_linear_velocity: Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0)),
            base_angular_velocity: Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0)),
            ..Default::default()
        };
        for (j, joint) in model.joints.iter().enumerate() {
            s.joint_positions[j] = rng.random_range(joint.lower..joint.upper);
            s.joint_velocities[j] = rng.random_range(-20.0..20.0);
        }
        s
    }

    /// Pose of body `b` as (CoM, rotation) from forward kinematics only.
    fn pose(model: &RobotModel, s: &SimState, b: usize) -> (Vector3<f64>, Matrix3<f64>) {
        let k = Kinematics::new(model, s);
        (k.body_com[b], k.body_rotation[b])
    }

    /// Body twist by central differences of the pose along the retraction.
    fn fd_twist(model: &RobotModel, s: &SimState, v: &GeneralizedVector, b: usize) -> nalgebra::Vector6<f64> {
        let h = 1e-6;
        let (pp, rp) = pose(model, &s.advanced(v, h), b);
        let (pm, rm) = pose(model, &s.advanced(v, -h), b);
        let lin = (pp - pm) / (2.0 * h);
        let dr = (rp - rm) / (2.0 * h);
        let (_, r0) = pose(model, s, b);
        let w = dr * r0.transpose();
        let ang = Vector3::new(w[(2, 1)] - w[(1, 2)], w[(0, 2)] - w[(2, 0)], w[(1, 0)] - w[(0, 1)]) * 0.5;
        nalgebra::Vector6::new(lin.x, lin.y, lin.z, ang.x, ang.y, ang.z)
    }

    #[test]
    fn jacobian_matches_finite_difference_twist() {
        let model = build_default_model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let s = random_state(&mut rng, &model);
            let v = s.generalized_velocity();
            let kin = Kinematics::new(&model, &s);
            for b in 0..NUM_BODIES {
                let analytic = kin.jacobians[b] * v;
                let fd = fd_twist(&model, &s, &v, b);
                assert!((analytic - fd).norm() < 1e-6 * (1.0 + analytic.norm()), "body {b}");
            }
        }
    }

    #[test]
    fn base_jacobian_translation_block_is_identity() {
        let model = build_default_model();
        let j = body_jacobian(&model, &SimState::default(), MAIN_BODY).unwrap();
        assert_eq!(j.fixed_view::<3, 3>(0, 0).into_owned(), Matrix3::identity());
        assert!(matches!(body_jacobian(&model, &SimState::default(), 9), Err(Error::InvalidBody(9))));
    }

    #[test]
    fn tail_does_not_depend_on_wing_joints() {
        let model = build_default_model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_state(&mut rng, &model);
        let j = body_jacobian(&model, &s, TAIL).unwrap();
        for col in 6..10 {
            assert_eq!(j.column(col).norm(), 0.0);
        }
        let jw = body_jacobian(&model, &s, LEFT_WING).unwrap();
        assert!(jw.column(6 + LEFT_FLAP).norm() > 0.0);
    }

    /// Kinetic energy from finite-difference body twists; no Jacobian involved.
    fn fd_kinetic(model: &RobotModel, s: &SimState, v: &GeneralizedVector) -> f64 {
        model
            .bodies
            .iter()
            .enumerate()
            .map(|(b, body)| {
                let tw = fd_twist(model, s, v, b);
                let (_, r) = pose(model, s, b);
                let lin = tw.fixed_rows::<3>(0);
                let w = r.transpose() * tw.fixed_rows::<3>(3);
                0.5 * body.mass * lin.norm_squared() + 0.5 * w.dot(&(body.inertia * w))
            })
            .sum()
    }

    #[test]
    fn mass_matrix_matches_energy_oracle() {
        let model = build_default_model();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..3 {
            let s = random_state(&mut rng, &model);
            let m = mass_matrix(&model, &s);
            let e = |i: usize| GeneralizedVector::from_fn(|k, _| if k == i { 1.0 } else { 0.0 });
            for i in 0..NUM_DOF {
                for j in i..NUM_DOF {
                    let oracle = if i == j {
                        2.0 * fd_kinetic(&model, &s, &e(i))
                    } else {
                        fd_kinetic(&model, &s, &(e(i) + e(j))) - fd_kinetic(&model, &s, &e(i)) - fd_kinetic(&model, &s, &e(j))
                    };
                    assert!((m[(i, j)] - oracle).abs() < 1e-8, "({i},{j}) {} vs {oracle}", m[(i, j)]);
                }
            }
            assert!((m - m.transpose()).norm() < 1e-10);
            assert!(m.cholesky().is_some());
        }
    }

    #[test]
    fn single_free_body_translation_block() {
        let model = build_default_model();
        let m = mass_matrix(&model, &SimState::default());
        let block = m.fixed_view::<3, 3>(0, 0).into_owned();
        assert_relative_eq!(block, Matrix3::identity() * model.total_mass(), epsilon = 1e-14);
    }

    #[test]
    fn gravity_bias_equals_weight() {
        let model = build_default_model();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = random_state(&mut rng, &model);
        s.set_generalized_velocity(&GeneralizedVector::zeros());
        let g = Vector3::new(0.0, 0.0, -9.81);
        let h = bias_forces(&model, &s, &g);
        assert_relative_eq!(h[2], 0.31 * 9.81, epsilon = 1e-12);
        assert_eq!(bias_forces(&model, &s, &Vector3::zeros()), GeneralizedVector::zeros());
    }

    #[test]
    fn skew_symmetry_via_finite_difference_mass_derivative() {
        // With gravity off, qd^T Mdot qd = 2 qd^T h.
        let model = build_default_model();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let s = random_state(&mut rng, &model);
            let v = s.generalized_velocity();
            let eps = 1e-6;
            let mdot = (mass_matrix(&model, &s.advanced(&v, eps)) - mass_matrix(&model, &s.advanced(&v, -eps))) / (2.0 * eps);
            let h = bias_forces(&model, &s, &Vector3::zeros());
            let lhs = v.dot(&(mdot * v));
            let rhs = 2.0 * v.dot(&h);
            assert!((lhs - rhs).abs() < 1e-8 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn forward_dynamics_residual() {
        let model = build_default_model();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let g = Vector3::new(0.0, 0.0, -9.81);
        for _ in 0..50 {
            let s = random_state(&mut rng, &model);
            let tau = JointVector::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let u = GeneralizedVector::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let qdd = forward_dynamics(&model, &s, &tau, &u, &g).unwrap();
            let res = mass_matrix(&model, &s) * qdd + bias_forces(&model, &s, &g) - applied_forces(&tau, &u);
            assert!(res.norm() < 1e-9 * (1.0 + u.norm() + tau.norm()));
        }
    }

    #[test]
    fn rest_without_forces_has_zero_acceleration() {
        let model = build_default_model();
        let qdd =
            forward_dynamics(&model, &SimState::default(), &JointVector::zeros(), &GeneralizedVector::zeros(), &Vector3::zeros())
                .unwrap();
        assert_eq!(qdd, GeneralizedVector::zeros());
    }

    #[test]
    fn free_fall_from_rest() {
        let model = build_default_model();
        let g = Vector3::new(0.0, 0.0, -9.81);
        let qdd = forward_dynamics(&model, &SimState::default(), &JointVector::zeros(), &GeneralizedVector::zeros(), &g).unwrap();
        assert_relative_eq!(qdd[2], -9.81, epsilon = 1e-10);
        // Uniform gravity exerts no internal torques on an assembly at rest.
        for i in 3..NUM_DOF {
            assert!(qdd[i].abs() < 1e-10);
        }
    }

    #[test]
    fn torques_are_clamped() {
        let model = build_default_model();
        let big = JointVector::repeat(100.0);
        let clamped = clamp_torques(&model, &big);
        let a = forward_dynamics(&model, &SimState::default(), &big, &GeneralizedVector::zeros(), &Vector3::zeros()).unwrap();
        let b = forward_dynamics(&model, &SimState::default(), &clamped, &GeneralizedVector::zeros(), &Vector3::zeros()).unwrap();
        assert_eq!(a, b);
        assert_eq!(clamped[0], model.joints[0].torque_limit);
    }

    #[test]
    fn free_body_coasts_exactly() {
        let model = build_default_model();
        let env = Environment::default().without_aero().with_gravity(Vector3::zeros());
        let s = SimState { base_linear_velocity: Vector3::new(1.0, -2.0, 0.5), ..Default::default() };
        let n = step(&model, &s, &JointVector::zeros(), &env, DEFAULT_DT).unwrap();
        assert_relative_eq!(n.base_position, s.base_linear_velocity * DEFAULT_DT, epsilon = 1e-15);
        assert_eq!(n.time, DEFAULT_DT);
    }

    #[test]
    fn momentum_is_conserved_without_external_forces() {
        let model = build_default_model();
        let env = Environment::default().without_aero().with_gravity(Vector3::zeros());
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut s = random_state(&mut rng, &model);
        s.joint_positions *= 0.3;
        let p0 = linear_momentum(&model, &s);
        for k in 0..250 {
            let tau = JointVector::from_fn(|j, _| (k as f64 * 0.1 + j as f64).sin() * 0.2);
            s = step(&model, &s, &tau, &env, DEFAULT_DT).unwrap();
        }
        assert!((linear_momentum(&model, &s) - p0).norm() < 1e-8);
    }

    #[test]
    fn stepping_is_deterministic() {
        let model = build_default_model();
        let env = Environment::default().with_wind(Vector3::new(1.0, 0.5, -0.2));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s0 = random_state(&mut rng, &model);
        let tau = JointVector::from_fn(|j, _| 0.1 * j as f64);
        let run = || {
            let mut s = s0.clone();
            for _ in 0..100 {
                s = step(&model, &s, &tau, &env, DEFAULT_DT).unwrap();
            }
            s
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn locked_and_fixed_coordinates_stay_put() {
        let model = build_default_model().with_fixed_base().with_locked_joints(&[0, 2]);
        let env = Environment::default();
        let mut s = SimState::default();
        s.joint_positions[0] = 0.2;
        for _ in 0..50 {
            s = step(&model, &s, &JointVector::repeat(0.5), &env, DEFAULT_DT).unwrap();
        }
        assert_eq!(s.base_position, Vector3::zeros());
        assert_eq!(s.joint_positions[0], 0.2);
        assert_eq!(s.joint_positions[2], 0.0);
        assert!(s.joint_positions[1] != 0.0);
    }

    #[test]
    fn quaternion_stays_normalized() {
        let model = build_default_model();
        let env = Environment::default();
        let mut s = SimState { base_angular_velocity: Vector3::new(3.0, -7.0, 2.0), ..Default::default() };
        for _ in 0..500 {
            s = step(&model, &s, &JointVector::zeros(), &env, DEFAULT_DT).unwrap();
        }
        assert!((s.base_orientation.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn non_finite_state_is_reported() {
        let model = build_default_model();
        let s = SimState { base_linear_velocity: Vector3::new(f64::NAN, 0.0, 0.0), ..Default::default() };
        assert!(matches!(step(&model, &s, &JointVector::zeros(), &Environment::default(), DEFAULT_DT), Err(Error::NonFinite(_))));
    }
}
