//! Stateless fluid forces on ellipsoidal bodies.
//!
//! Each body sees a wrench computed only from its instantaneous kinematics
//! relative to the surrounding air. Two models are provided:
//!
//! * the ellipsoid model sums added-mass, quadratic drag, Magnus, Kutta and
//!   viscous contributions;
//! * the inertia-box model keeps only the added-mass and viscous parts.
//!
//! All quantities are expressed in the body frame at the body CoM; the body
//! frame is aligned with the ellipsoid's principal axes. The added-mass terms
//! need the body-frame acceleration, which callers take from the previous
//! step so that the model stays a pure function of the state.

use std::f64::consts::PI;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dynamics::{GeneralizedVector, Kinematics};
use crate::model::{FluidModelKind, RobotModel, SimState, NUM_BODIES};
use crate::{Error, Result};

/// Surrounding medium and external field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Environment {
    #[serde(rename = "fluid_density_kg_m3")]
    pub fluid_density: f64,
    #[serde(rename = "kinematic_viscosity_m2_s")]
    pub kinematic_viscosity: f64,
    /// Constant world-frame wind.
    #[serde(rename = "wind_velocity_m_s")]
    pub wind_velocity: Vector3<f64>,
    #[serde(rename = "gravity_m_s2")]
    pub gravity: Vector3<f64>,
    pub aero_enabled: bool,
}

impl Default for Environment {
    fn default() -> Self {
        Self {
            fluid_density: 1.225,
            kinematic_viscosity: 1.5e-5,
            wind_velocity: Vector3::zeros(),
            gravity: Vector3::new(0.0, 0.0, -9.81),
            aero_enabled: true,
        }
    }
}

impl Environment {
    /// No fluid forces; gravity unchanged.
    pub fn without_aero(mut self) -> Self {
        self.aero_enabled = false;
        self
    }

    pub fn with_gravity(mut self, g: Vector3<f64>) -> Self {
        self.gravity = g;
        self
    }

    pub fn with_wind(mut self, wind: Vector3<f64>) -> Self {
        self.wind_velocity = wind;
        self
    }
}

/// Dimensionless fluid coefficients shared by the ellipsoid model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluidCoefficients {
    pub blunt_drag: f64,
    pub slender_drag: f64,
    pub angular_drag: f64,
    pub kutta_lift: f64,
    pub magnus_lift: f64,
}

impl Default for FluidCoefficients {
    // 3.14 is a measured coefficient, not pi.
    #[allow(clippy::approx_constant)]
    fn default() -> Self {
        Self { blunt_drag: 0.2, slender_drag: 0.12, angular_drag: 1.5, kutta_lift: 3.14, magnus_lift: 1.0 }
    }
}

impl FluidCoefficients {
    pub const NAMES: [&'static str; 5] = ["blunt_drag", "slender_drag", "angular_drag", "kutta_lift", "magnus_lift"];

    pub fn zero() -> Self {
        Self { blunt_drag: 0.0, slender_drag: 0.0, angular_drag: 0.0, kutta_lift: 0.0, magnus_lift: 0.0 }
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.blunt_drag, self.slender_drag, self.angular_drag, self.kutta_lift, self.magnus_lift]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self { blunt_drag: a[0], slender_drag: a[1], angular_drag: a[2], kutta_lift: a[3], magnus_lift: a[4] }
    }

    /// Element-wise scaling in [`Self::NAMES`] order.
    pub fn scaled(&self, factors: [f64; 5]) -> Self {
        let a = self.as_array();
        Self::from_array(std::array::from_fn(|i| a[i] * factors[i]))
    }

    pub fn any_negative(&self) -> bool {
        self.as_array().iter().any(|c| !(*c >= 0.0))
    }
}

/// Per-body fluid parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluidBodyParams {
    #[serde(rename = "added_mass_kg")]
    pub added_mass: Vector3<f64>,
    #[serde(rename = "added_inertia_kg_m2")]
    pub added_inertia: Vector3<f64>,
    #[serde(rename = "volume_m3")]
    pub volume: f64,
    /// Largest silhouette area of the ellipsoid.
    #[serde(rename = "max_area_m2")]
    pub max_area: f64,
    /// Angular drag reference moment for rotation about each principal axis.
    #[serde(rename = "drag_moments_m5")]
    pub drag_moments: Vector3<f64>,
    /// Upper bound of the angular drag reference over rotation directions.
    #[serde(rename = "max_drag_moment_m5")]
    pub max_drag_moment: f64,
    #[serde(rename = "viscous_radius_m")]
    pub viscous_radius: f64,
    #[serde(rename = "semi_axes_m")]
    pub semi_axes: Vector3<f64>,
}

impl FluidBodyParams {
    pub fn negative_fields(&self) -> [(&'static str, bool); 7] {
        let neg = |x: f64| !(x >= 0.0);
        [
            ("added mass", self.added_mass.iter().any(|x| neg(*x))),
            ("added inertia", self.added_inertia.iter().any(|x| neg(*x))),
            ("volume", neg(self.volume)),
            ("max area", neg(self.max_area)),
            ("drag moments", self.drag_moments.iter().any(|x| neg(*x)) || neg(self.max_drag_moment)),
            ("viscous radius", neg(self.viscous_radius)),
            ("semi axes", self.semi_axes.iter().any(|x| neg(*x))),
        ]
    }
}

/// Lamb's shape integrals `(alpha_0, beta_0, gamma_0)` of an ellipsoid with
/// semi-axes `(a, b, c)`:
///
/// `alpha_i = abc * int_0^inf dl / ((s_i^2 + l) sqrt((a^2+l)(b^2+l)(c^2+l)))`
///
/// They sum to 2. The integral is evaluated in `ln(l)` where the integrand is
/// smooth and decays exponentially at both ends.
pub fn added_mass_integrals(s: &Vector3<f64>) -> Vector3<f64> {
    let sq = s.component_mul(s);
    let abc = s.x * s.y * s.z;
    let lo = sq.min().ln() - 40.0;
    let hi = sq.max().ln() + 60.0;
    let n = 20_000usize;
    let h = (hi - lo) / n as f64;
    let mut acc = Vector3::zeros();
    for k in 0..=n {
        let l = (lo + h * k as f64).exp();
        let delta = ((sq.x + l) * (sq.y + l) * (sq.z + l)).sqrt();
        let w = if k == 0 || k == n {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += Vector3::new(1.0 / (sq.x + l), 1.0 / (sq.y + l), 1.0 / (sq.z + l)) * (w * l / delta);
    }
    acc * (abc * h / 3.0)
}

/// Fluid parameters of a solid ellipsoid in a fluid of the given density.
///
/// Added mass and added inertia come from the classical potential-flow
/// results for ellipsoids; drag references follow the silhouette geometry.
pub fn ellipsoid_fluid_params(semi_axes: &Vector3<f64>, density: f64) -> FluidBodyParams {
    let s = semi_axes;
    let volume = 4.0 / 3.0 * PI * s.x * s.y * s.z;
    let rho_v = density * volume;
    let ints = added_mass_integrals(s);
    let added_mass = ints.map(|a| rho_v * a / (2.0 - a));

    let sq = s.component_mul(s);
    let scale = sq.max();
    let lamb = |p2: f64, q2: f64, ip: f64, iq: f64| -> f64 {
        // Rotation about the third axis, with (p, q) the other two.
        let d = p2 - q2;
        if d.abs() <= 1e-12 * scale {
            return 0.0;
        }
        let den = 2.0 * d + (p2 + q2) * (ip - iq);
        rho_v / 5.0 * d * d * (iq - ip) / den
    };
    let added_inertia =
        Vector3::new(lamb(sq.y, sq.z, ints.y, ints.z), lamb(sq.z, sq.x, ints.z, ints.x), lamb(sq.x, sq.y, ints.x, ints.y));

    let mut sorted = [s.x, s.y, s.z];
    sorted.sort_by(|a, b| a.total_cmp(b));
    let (d_mid, d_max) = (sorted[1], sorted[2]);
    let max_area = PI * d_max * d_mid;
    let drag_moment = |i: usize| {
        let (a, b) = (s[(i + 1) % 3], s[(i + 2) % 3]);
        8.0 / 15.0 * PI * s[i] * a.max(b).powi(4)
    };
    FluidBodyParams {
        added_mass,
        added_inertia,
        volume,
        max_area,
        drag_moments: Vector3::new(drag_moment(0), drag_moment(1), drag_moment(2)),
        max_drag_moment: 8.0 / 15.0 * PI * d_mid * d_max.powi(4),
        viscous_radius: (s.x + s.y + s.z) / 3.0,
        semi_axes: *s,
    }
}

/// Silhouette area of an ellipsoid seen along `direction`.
pub fn projected_area(semi_axes: &Vector3<f64>, direction: &Vector3<f64>) -> Result<f64> {
    let n = direction.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::ZeroDirection);
    }
    let u = direction / n;
    let (a, b, c) = (semi_axes.x, semi_axes.y, semi_axes.z);
    Ok(PI * ((b * c * u.x).powi(2) + (a * c * u.y).powi(2) + (a * b * u.z).powi(2)).sqrt())
}

/// Index of the smallest semi-axis, i.e. the surface normal of a thin body.
fn thin_axis(semi_axes: &Vector3<f64>) -> usize {
    semi_axes.imin()
}

/// Component of `v` lying in the plane of the two largest semi-axes.
pub fn parallel_velocity(semi_axes: &Vector3<f64>, v: &Vector3<f64>) -> Vector3<f64> {
    let mut p = *v;
    p[thin_axis(semi_axes)] = 0.0;
    p
}

/// Body-frame motion of a body relative to the air.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BodyKinematics {
    /// CoM velocity relative to the air.
    pub velocity: Vector3<f64>,
    pub angular_velocity: Vector3<f64>,
    /// Time derivative of `velocity` as seen in the body frame.
    pub acceleration: Vector3<f64>,
    pub angular_acceleration: Vector3<f64>,
}

impl BodyKinematics {
    fn check(&self) -> Result<()> {
        let all = self
            .velocity
            .iter()
            .chain(self.angular_velocity.iter())
            .chain(self.acceleration.iter())
            .chain(self.angular_acceleration.iter());
        for x in all {
            if !x.is_finite() {
                return Err(Error::NonFinite("body kinematics"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WrenchFrame {
    /// Body frame, applied at the CoM.
    Body,
    /// World-aligned axes, applied at the CoM.
    World,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wrench {
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
    pub frame: WrenchFrame,
}

impl Wrench {
    pub fn zero(frame: WrenchFrame) -> Self {
        Self { force: Vector3::zeros(), torque: Vector3::zeros(), frame }
    }

    pub fn is_finite(&self) -> bool {
        self.force.iter().chain(self.torque.iter()).all(|x| x.is_finite())
    }

    pub fn as_vector(&self) -> nalgebra::Vector6<f64> {
        nalgebra::Vector6::new(self.force.x, self.force.y, self.force.z, self.torque.x, self.torque.y, self.torque.z)
    }
}

/// Individual contributions of the fluid model, all in the body frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AeroTerms {
    pub added_mass_force: Vector3<f64>,
    pub drag_force: Vector3<f64>,
    pub magnus_force: Vector3<f64>,
    pub kutta_force: Vector3<f64>,
    pub viscous_force: Vector3<f64>,
    pub added_mass_torque: Vector3<f64>,
    pub drag_torque: Vector3<f64>,
    pub viscous_torque: Vector3<f64>,
}

impl AeroTerms {
    pub fn wrench(&self) -> Wrench {
        Wrench {
            force: self.added_mass_force + self.drag_force + self.magnus_force + self.kutta_force + self.viscous_force,
            torque: self.added_mass_torque + self.drag_torque + self.viscous_torque,
            frame: WrenchFrame::Body,
        }
    }

    pub const CSV_HEADER: [&'static str; 24] = [
        "fa_x", "fa_y", "fa_z", "fd_x", "fd_y", "fd_z", "fm_x", "fm_y", "fm_z", "fk_x", "fk_y", "fk_z", "fv_x", "fv_y", "fv_z",
        "ta_x", "ta_y", "ta_z", "td_x", "td_y", "td_z", "tv_x", "tv_y", "tv_z",
    ];

    pub fn to_row(&self) -> [f64; 24] {
        let mut out = [0.0; 24];
        let parts = [
            self.added_mass_force,
            self.drag_force,
            self.magnus_force,
            self.kutta_force,
            self.viscous_force,
            self.added_mass_torque,
            self.drag_torque,
            self.viscous_torque,
        ];
        for (i, p) in parts.iter().enumerate() {
            out[3 * i..3 * i + 3].copy_from_slice(p.as_slice());
        }
        out
    }
}

fn added_mass_and_viscous(kin: &BodyKinematics, p: &FluidBodyParams, env: &Environment) -> AeroTerms {
    let v = kin.velocity;
    let w = kin.angular_velocity;
    let ma_v = p.added_mass.component_mul(&v);
    let ia_w = p.added_inertia.component_mul(&w);
    let nu = env.kinematic_viscosity;
    let r = p.viscous_radius;
    AeroTerms {
        added_mass_force: -p.added_mass.component_mul(&kin.acceleration) + ma_v.cross(&w),
        added_mass_torque: -p.added_inertia.component_mul(&kin.angular_acceleration) + ma_v.cross(&v) + ia_w.cross(&w),
        viscous_force: v * (-6.0 * PI * r * nu),
        viscous_torque: w * (-8.0 * PI * r.powi(3) * nu),
        ..Default::default()
    }
}

/// All terms of the ellipsoid model.
///
/// The Kutta term uses `(v x v_par) x v / |v|`, so its magnitude scales with
/// `|v|^2` like the drag, and it vanishes both for flow in the surface plane
/// and for flow along the surface normal. The angular drag similarly carries
/// one factor of `|omega|`, with the direction-dependent reference moment
/// `I_D = |omega_hat o drag_moments|`.
pub fn ellipsoid_terms(kin: &BodyKinematics, p: &FluidBodyParams, c: &FluidCoefficients, env: &Environment) -> Result<AeroTerms> {
    kin.check()?;
    let mut terms = added_mass_and_viscous(kin, p, env);
    let rho = env.fluid_density;
    let v = kin.velocity;
    let w = kin.angular_velocity;

    let speed = v.norm();
    if speed > 0.0 {
        let a_proj = projected_area(&p.semi_axes, &v)?;
        let drag_area = c.blunt_drag * a_proj + c.slender_drag * (p.max_area - a_proj);
        terms.drag_force = v * (-rho * drag_area * speed);
        let v_par = parallel_velocity(&p.semi_axes, &v);
        terms.kutta_force = v.cross(&v_par).cross(&v) * (c.kutta_lift * rho * a_proj / speed);
    }
    terms.magnus_force = w.cross(&v) * (c.magnus_lift * rho * p.volume);

    let spin = w.norm();
    if spin > 0.0 {
        let i_d = p.drag_moments.component_mul(&(w / spin)).norm();
        let moment = c.angular_drag * i_d + c.slender_drag * (p.max_drag_moment - i_d);
        terms.drag_torque = w * (-rho * moment * spin);
    }
    Ok(terms)
}

pub fn ellipsoid_wrench(kin: &BodyKinematics, p: &FluidBodyParams, c: &FluidCoefficients, env: &Environment) -> Result<Wrench> {
    Ok(ellipsoid_terms(kin, p, c, env)?.wrench())
}

/// Added-mass and viscous terms only.
pub fn inertia_box_terms(kin: &BodyKinematics, p: &FluidBodyParams, env: &Environment) -> Result<AeroTerms> {
    kin.check()?;
    Ok(added_mass_and_viscous(kin, p, env))
}

pub fn inertia_box_wrench(kin: &BodyKinematics, p: &FluidBodyParams, env: &Environment) -> Result<Wrench> {
    Ok(inertia_box_terms(kin, p, env)?.wrench())
}

/// Body-frame kinematics of body `b` relative to the air, using `accel` as
/// the generalized acceleration for the added-mass terms.
pub fn body_fluid_kinematics(
    kin: &Kinematics,
    b: usize,
    qdot: &GeneralizedVector,
    accel: &GeneralizedVector,
    wind: &Vector3<f64>,
) -> BodyKinematics {
    let r = &kin.body_rotation[b];
    let rt = r.transpose();
    let jac = &kin.jacobians[b];
    let twist = jac * qdot;
    let acc = jac * accel;
    let v_world = twist.fixed_rows::<3>(0) - wind;
    let w_world = twist.fixed_rows::<3>(3);
    let a_world = acc.fixed_rows::<3>(0) + kin.bias_linear[b];
    let alpha_world = acc.fixed_rows::<3>(3) + kin.bias_angular[b];
    let velocity = rt * v_world;
    let angular_velocity = rt * w_world;
    BodyKinematics {
        velocity,
        angular_velocity,
        acceleration: rt * a_world - angular_velocity.cross(&velocity),
        angular_acceleration: rt * alpha_world,
    }
}

/// Per-term breakdown for every body, in body frames.
pub fn body_terms(kin: &Kinematics, model: &RobotModel, state: &SimState, env: &Environment) -> Result<Vec<AeroTerms>> {
    let qdot = state.generalized_velocity();
    model
        .bodies
        .iter()
        .enumerate()
        .map(|(b, body)| {
            let bk = body_fluid_kinematics(kin, b, &qdot, &state.last_acceleration, &env.wind_velocity);
            match body.fluid_model {
                FluidModelKind::Ellipsoid => ellipsoid_terms(&bk, &body.fluid, &body.coefficients, env),
                FluidModelKind::InertiaBox => inertia_box_terms(&bk, &body.fluid, env),
            }
        })
        .collect()
}

/// Body-frame wrench on every body; all zero when aero is disabled.
pub fn body_wrenches(kin: &Kinematics, model: &RobotModel, state: &SimState, env: &Environment) -> Result<Vec<Wrench>> {
    if !env.aero_enabled {
        return Ok(vec![Wrench::zero(WrenchFrame::Body); model.bodies.len()]);
    }
    Ok(body_terms(kin, model, state, env)?.iter().map(AeroTerms::wrench).collect())
}

/// Per-term breakdown for the current state.
pub fn aero_breakdown(model: &RobotModel, state: &SimState, env: &Environment) -> Result<Vec<AeroTerms>> {
    body_terms(&Kinematics::new(model, state), model, state, env)
}

/// Sum of Jacobian-transpose-mapped body wrenches.
pub fn generalized_aero_force_with(kin: &Kinematics, wrenches: &[Wrench]) -> Result<GeneralizedVector> {
    if wrenches.len() != NUM_BODIES {
        return Err(Error::DimensionMismatch { expected: NUM_BODIES, got: wrenches.len() });
    }
    let mut u = GeneralizedVector::zeros();
    for (b, w) in wrenches.iter().enumerate() {
        let world = match w.frame {
            WrenchFrame::World => w.as_vector(),
            WrenchFrame::Body => {
                let r = &kin.body_rotation[b];
                let f = r * w.force;
                let t = r * w.torque;
                nalgebra::Vector6::new(f.x, f.y, f.z, t.x, t.y, t.z)
            }
        };
        u += kin.jacobians[b].transpose() * world;
    }
    Ok(u)
}

pub fn generalized_aero_force(model: &RobotModel, state: &SimState, wrenches: &[Wrench]) -> Result<GeneralizedVector> {
    generalized_aero_force_with(&Kinematics::new(model, state), wrenches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn wing() -> FluidBodyParams {
        ellipsoid_fluid_params(&Vector3::new(0.085, 0.234, 0.00425), 1.225)
    }

    #[test]
    fn shape_integrals_sum_to_two() {
        for s in [Vector3::new(1.0, 1.0, 1.0), Vector3::new(0.085, 0.234, 0.00425), Vector3::new(3.0, 0.5, 0.2)] {
            let a = added_mass_integrals(&s);
            assert_relative_eq!(a.sum(), 2.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn sphere_added_mass_is_half_displaced_mass() {
        let p = ellipsoid_fluid_params(&Vector3::new(0.5, 0.5, 0.5), 1000.0);
        let displaced = 1000.0 * 4.0 / 3.0 * PI * 0.125;
        for i in 0..3 {
            assert_relative_eq!(p.added_mass[i], 0.5 * displaced, max_relative = 1e-9);
            assert!(p.added_inertia[i].abs() < 1e-12);
        }
    }

    #[test]
    fn thin_disk_limits() {
        // Broadside added mass 8/3 rho R^3, added inertia about a diameter 16/45 rho R^5.
        let (r, c) = (1.0, 1e-4);
        let p = ellipsoid_fluid_params(&Vector3::new(r, r, c), 1.0);
        assert_relative_eq!(p.added_mass.z, 8.0 / 3.0, max_relative = 1e-3);
        assert_relative_eq!(p.added_inertia.x, 16.0 / 45.0, max_relative = 1e-3);
        assert_relative_eq!(p.added_inertia.y, 16.0 / 45.0, max_relative = 1e-3);
        assert!(p.added_mass.x < 1e-3);
    }

    #[test]
    fn wing_params_are_ordered() {
        let p = wing();
        assert!(p.added_mass.z > p.added_mass.x && p.added_mass.x > 0.0);
        assert!(p.added_inertia.iter().all(|x| *x >= 0.0));
        assert!(p.drag_moments.iter().all(|d| *d <= p.max_drag_moment));
        assert_relative_eq!(p.max_area, PI * 0.085 * 0.234);
    }

    #[test]
    fn projected_area_cases() {
        let r = 0.3;
        let sphere = Vector3::new(r, r, r);
        assert_relative_eq!(projected_area(&sphere, &Vector3::new(1.0, 2.0, -3.0)).unwrap(), PI * r * r, epsilon = 1e-14);
        let s = Vector3::new(0.2, 0.5, 0.05);
        assert_relative_eq!(projected_area(&s, &Vector3::z()).unwrap(), PI * 0.2 * 0.5, epsilon = 1e-14);
        assert!(matches!(projected_area(&s, &Vector3::zeros()), Err(Error::ZeroDirection)));
    }

    /// Ray-sampling silhouette: fraction of a bounding square hit by parallel rays.
    fn monte_carlo_silhouette(s: &Vector3<f64>, u: &Vector3<f64>, n: usize) -> f64 {
        let u = u.normalize();
        let helper = if u.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let e1 = u.cross(&helper).normalize();
        let e2 = u.cross(&e1);
        let half = s.max();
        let inv2 = s.map(|x| 1.0 / (x * x));
        let mut hits = 0usize;
        // Low-discrepancy grid keeps the estimate deterministic.
        let side = (n as f64).sqrt() as usize;
        for i in 0..side {
            for j in 0..side {
                let a = -half + 2.0 * half * (i as f64 + 0.5) / side as f64;
                let b = -half + 2.0 * half * (j as f64 + 0.5) / side as f64;
                let p = e1 * a + e2 * b;
                // Ray p + t u hits the ellipsoid iff the quadratic in t has a real root.
                let qa = (u.component_mul(&u)).dot(&inv2);
                let qb = 2.0 * (p.component_mul(&u)).dot(&inv2);
                let qc = (p.component_mul(&p)).dot(&inv2) - 1.0;
                if qb * qb - 4.0 * qa * qc >= 0.0 {
                    hits += 1;
                }
            }
        }
        hits as f64 / (side * side) as f64 * (2.0 * half).powi(2)
    }

    #[test]
    fn projected_area_matches_ray_sampling() {
        let s = Vector3::new(0.3, 0.2, 0.1);
        for u in [Vector3::new(0.3, -0.8, 0.5), Vector3::new(1.0, 1.0, 0.2), Vector3::new(-0.1, 0.2, 1.0)] {
            let exact = projected_area(&s, &u).unwrap();
            let mc = monte_carlo_silhouette(&s, &u, 1_000_000);
            assert_relative_eq!(exact, mc, max_relative = 0.01);
        }
    }

    fn kin(v: Vector3<f64>, w: Vector3<f64>) -> BodyKinematics {
        BodyKinematics { velocity: v, angular_velocity: w, ..Default::default() }
    }

    #[test]
    fn zero_kinematics_gives_zero_wrench() {
        let env = Environment::default();
        let w = ellipsoid_wrench(&kin(Vector3::zeros(), Vector3::zeros()), &wing(), &FluidCoefficients::default(), &env).unwrap();
        assert_eq!(w.force, Vector3::zeros());
        assert_eq!(w.torque, Vector3::zeros());
        let w = inertia_box_wrench(&kin(Vector3::zeros(), Vector3::zeros()), &wing(), &env).unwrap();
        assert_eq!(w.as_vector(), nalgebra::Vector6::zeros());
    }

    #[test]
    fn magnus_vanishes_for_parallel_spin() {
        let v = Vector3::new(1.0, -2.0, 0.5);
        let t = ellipsoid_terms(&kin(v, v * 3.0), &wing(), &FluidCoefficients::default(), &Environment::default()).unwrap();
        assert!(t.magnus_force.norm() < 1e-15);
    }

    #[test]
    fn kutta_vanishes_for_in_plane_flow() {
        // The wing's thin axis is z, so any velocity with v_z = 0 is in-plane.
        let v = Vector3::new(3.0, 1.0, 0.0);
        let t =
            ellipsoid_terms(&kin(v, Vector3::zeros()), &wing(), &FluidCoefficients::default(), &Environment::default()).unwrap();
        assert_eq!(t.kutta_force, Vector3::zeros());
        // ... and for flow along the normal.
        let t = ellipsoid_terms(
            &kin(Vector3::z() * 4.0, Vector3::zeros()),
            &wing(),
            &FluidCoefficients::default(),
            &Environment::default(),
        )
        .unwrap();
        assert_eq!(t.kutta_force, Vector3::zeros());
    }

    #[test]
    fn kutta_lifts_a_wing_at_positive_angle_of_attack() {
        // Air coming from ahead and below: body moves forward and down.
        let v = Vector3::new(4.0, 0.0, -0.6);
        let t =
            ellipsoid_terms(&kin(v, Vector3::zeros()), &wing(), &FluidCoefficients::default(), &Environment::default()).unwrap();
        assert!(t.kutta_force.z > 0.0);
        assert!(t.kutta_force.dot(&v).abs() < 1e-12 * t.kutta_force.norm() * v.norm());
    }

    #[test]
    fn speed_scaling() {
        let v = Vector3::new(2.0, 0.3, -0.7);
        let env = Environment::default();
        let c = FluidCoefficients::default();
        let a = ellipsoid_terms(&kin(v, Vector3::zeros()), &wing(), &c, &env).unwrap();
        let b = ellipsoid_terms(&kin(v * 2.0, Vector3::zeros()), &wing(), &c, &env).unwrap();
        assert_relative_eq!(b.drag_force, a.drag_force * 4.0, max_relative = 1e-14);
        assert_relative_eq!(b.viscous_force, a.viscous_force * 2.0, max_relative = 1e-14);
    }

    #[test]
    fn viscous_force_direct_evaluation() {
        let mut p = wing();
        p.viscous_radius = 0.1;
        let env = Environment { kinematic_viscosity: 1.5e-5, ..Default::default() };
        let t = ellipsoid_terms(&kin(Vector3::x(), Vector3::zeros()), &p, &FluidCoefficients::default(), &env).unwrap();
        assert_relative_eq!(t.viscous_force.x, -6.0 * PI * 0.1 * 1.5e-5, max_relative = 1e-15);
        assert_eq!(t.viscous_force.y, 0.0);
        assert_eq!(t.viscous_force.z, 0.0);
    }

    #[test]
    fn inertia_box_equals_ellipsoid_without_lift_and_drag() {
        let k = BodyKinematics {
            velocity: Vector3::new(1.0, -0.4, 0.3),
            angular_velocity: Vector3::new(0.2, 1.5, -0.7),
            acceleration: Vector3::new(3.0, 0.1, -2.0),
            angular_acceleration: Vector3::new(-4.0, 2.0, 1.0),
        };
        let env = Environment::default();
        let a = inertia_box_wrench(&k, &wing(), &env).unwrap();
        let b = ellipsoid_wrench(&k, &wing(), &FluidCoefficients::zero(), &env).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn steady_translation_leaves_only_viscous_force() {
        let k = kin(Vector3::new(1.0, 2.0, -0.5), Vector3::zeros());
        let t = inertia_box_terms(&k, &wing(), &Environment::default()).unwrap();
        assert_eq!(t.added_mass_force, Vector3::zeros());
        assert_eq!(t.wrench().force, t.viscous_force);
    }

    #[test]
    fn non_finite_kinematics_rejected() {
        let k = kin(Vector3::new(f64::NAN, 0.0, 0.0), Vector3::zeros());
        assert!(ellipsoid_wrench(&k, &wing(), &FluidCoefficients::default(), &Environment::default()).is_err());
        assert!(inertia_box_wrench(&k, &wing(), &Environment::default()).is_err());
    }

    proptest::proptest! {
        #[test]
        fn drag_and_viscous_terms_dissipate(
            vx in -10.0f64..10.0, vy in -10.0f64..10.0, vz in -10.0f64..10.0,
            wx in -30.0f64..30.0, wy in -30.0f64..30.0, wz in -30.0f64..30.0,
        ) {
            let v = Vector3::new(vx, vy, vz);
            let w = Vector3::new(wx, wy, wz);
            let t = ellipsoid_terms(&kin(v, w), &wing(), &FluidCoefficients::default(), &Environment::default()).unwrap();
            proptest::prop_assert!(t.drag_force.dot(&v) <= 0.0);
            proptest::prop_assert!(t.viscous_force.dot(&v) <= 0.0);
            proptest::prop_assert!(t.drag_torque.dot(&w) <= 0.0);
            proptest::prop_assert!(t.viscous_torque.dot(&w) <= 0.0);
            let scale = t.magnus_force.norm().max(1e-300);
            proptest::prop_assert!(t.magnus_force.dot(&v).abs() <= 1e-12 * scale * v.norm());
            proptest::prop_assert!(t.magnus_force.dot(&w).abs() <= 1e-12 * scale * w.norm());
        }
    }
}
