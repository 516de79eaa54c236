//! Robot description and canonical simulation state.
//!
//! The robot is four rigid ellipsoids (main body, left wing, right wing, tail)
//! hanging off a floating base through five revolute joints:
//!
//! | joint | parent link        | role                |
//! |-------|--------------------|---------------------|
//! | q1    | base               | left wing flap      |
//! | q2    | after q1           | left wing pitch     |
//! | q3    | base               | right wing flap     |
//! | q4    | after q3           | right wing pitch    |
//! | q5    | base               | tail pitch          |
//!
//! Every joint creates a new link frame. Link `0` is the base link, and joint
//! `j` creates link `j + 1`. Bodies are attached to links; the links created by
//! the flap joints carry no body.
//!
//! The base frame follows the usual flight convention used throughout the
//! crate: `x` forward, `y` to the left, `z` up.

use std::path::Path;

use nalgebra::{Matrix3, SVector, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::aero::{ellipsoid_fluid_params, FluidBodyParams, FluidCoefficients};
use crate::{Error, Result};

/// Number of actuated joints.
pub const NUM_JOINTS: usize = 5;
/// Number of generalized coordinates: 6 floating-base + 5 joints.
pub const NUM_DOF: usize = 6 + NUM_JOINTS;
/// Number of rigid bodies.
pub const NUM_BODIES: usize = 4;

pub const MAIN_BODY: usize = 0;
pub const LEFT_WING: usize = 1;
pub const RIGHT_WING: usize = 2;
pub const TAIL: usize = 3;

pub const LEFT_FLAP: usize = 0;
pub const LEFT_PITCH: usize = 1;
pub const RIGHT_FLAP: usize = 2;
pub const RIGHT_PITCH: usize = 3;
pub const TAIL_PITCH: usize = 4;

/// Density used to size the added-mass defaults of a freshly built model.
pub const REFERENCE_AIR_DENSITY: f64 = 1.225;

pub type JointVector = SVector<f64, NUM_JOINTS>;

/// Which fluid force model acts on a body.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FluidModelKind {
    /// Added mass, drag, Magnus, Kutta and viscous terms.
    Ellipsoid,
    /// Added mass and viscous terms only.
    InertiaBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseMode {
    Floating,
    /// Base pinned in place; only the joints move.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyDesc {
    pub name: String,
    /// Link frame the body is rigidly attached to.
    pub link: usize,
    #[serde(rename = "mass_kg")]
    pub mass: f64,
    /// Inertia about the CoM, expressed in the link frame.
    #[serde(rename = "inertia_kg_m2")]
    pub inertia: Matrix3<f64>,
    /// CoM position in the link frame. The ellipsoid is centred on the CoM and
    /// its principal axes are aligned with the link frame.
    #[serde(rename = "com_offset_m")]
    pub com_offset: Vector3<f64>,
    #[serde(rename = "semi_axes_m")]
    pub semi_axes: Vector3<f64>,
    pub fluid_model: FluidModelKind,
    pub fluid: FluidBodyParams,
    pub coefficients: FluidCoefficients,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointDesc {
    pub name: String,
    pub parent_link: usize,
    /// Joint origin in the parent link frame.
    #[serde(rename = "origin_m")]
    pub origin: Vector3<f64>,
    /// Rotation axis in the parent link frame.
    pub axis: Vector3<f64>,
    #[serde(rename = "lower_rad")]
    pub lower: f64,
    #[serde(rename = "upper_rad")]
    pub upper: f64,
    #[serde(rename = "velocity_limit_rad_s")]
    pub velocity_limit: f64,
    #[serde(rename = "damping_n_m_s_rad")]
    pub damping: f64,
    #[serde(rename = "torque_limit_n_m")]
    pub torque_limit: f64,
    /// Locked joints keep their position and never accelerate.
    #[serde(default)]
    pub locked: bool,
}

impl JointDesc {
    pub fn clamp_position(&self, q: f64) -> f64 {
        q.clamp(self.lower, self.upper)
    }
}

/// Immutable robot description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotModel {
    pub base_mode: BaseMode,
    #[serde(rename = "total_wingspan_m")]
    pub total_wingspan: f64,
    #[serde(rename = "mean_chord_m")]
    pub mean_chord: f64,
    #[serde(rename = "nominal_mass_kg")]
    pub nominal_mass: f64,
    #[serde(rename = "mass_tolerance_kg")]
    pub mass_tolerance: f64,
    /// Lift-to-drag ratio the locked-joint glide is designed for.
    pub design_lift_to_drag: f64,
    /// Joint angles held during a glide.
    #[serde(rename = "glide_pose_rad")]
    pub glide_pose: [f64; NUM_JOINTS],
    pub bodies: Vec<BodyDesc>,
    pub joints: Vec<JointDesc>,
}

/// Geometry and mass-distribution choices behind [`build_model`].
///
/// The platform's exact body dimensions and inertias are not published; these
/// defaults are engineering choices, all of them overridable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelParams {
    pub wingspan_m: f64,
    pub mean_chord_m: f64,
    pub total_mass_kg: f64,
    pub main_body_mass_fraction: f64,
    pub wing_mass_fraction: f64,
    pub tail_mass_fraction: f64,
    /// Ellipsoid thickness as a fraction of chord for wings and tail.
    pub thickness_ratio: f64,
    pub body_semi_axes_m: [f64; 3],
    /// x position of the wing root (leading edge) in the base frame.
    pub wing_root_x_m: f64,
    pub tail_root_x_m: f64,
    pub tail_semi_length_m: f64,
    pub tail_semi_span_m: f64,
    pub flap_limit_rad: f64,
    pub wing_pitch_limit_rad: f64,
    pub tail_pitch_limit_rad: f64,
    pub joint_velocity_limit_rad_s: f64,
    pub joint_damping_n_m_s_rad: f64,
    pub flap_torque_limit_n_m: f64,
    pub pitch_torque_limit_n_m: f64,
    pub design_lift_to_drag: f64,
    pub glide_pose_rad: [f64; NUM_JOINTS],
    pub coefficients: FluidCoefficients,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            wingspan_m: 0.995,
            mean_chord_m: 0.17,
            total_mass_kg: 0.31,
            main_body_mass_fraction: 0.7,
            wing_mass_fraction: 0.1,
            tail_mass_fraction: 0.1,
            thickness_ratio: 0.05,
            body_semi_axes_m: [0.14, 0.03, 0.03],
            wing_root_x_m: 0.03,
            tail_root_x_m: -0.14,
            tail_semi_length_m: 0.08,
            tail_semi_span_m: 0.07,
            flap_limit_rad: 60f64.to_radians(),
            wing_pitch_limit_rad: 45f64.to_radians(),
            tail_pitch_limit_rad: 45f64.to_radians(),
            joint_velocity_limit_rad_s: 60.0,
            joint_damping_n_m_s_rad: 0.01,
            flap_torque_limit_n_m: 5.0,
            pitch_torque_limit_n_m: 2.0,
            design_lift_to_drag: 6.2,
            glide_pose_rad: [0.1, 0.0, 0.1, 0.0, 0.0],
            coefficients: FluidCoefficients::default(),
        }
    }
}

pub fn build_default_model() -> RobotModel {
    build_model(&ModelParams::default())
}

fn solid_ellipsoid_inertia(mass: f64, s: &Vector3<f64>) -> Matrix3<f64> {
    let (a2, b2, c2) = (s.x * s.x, s.y * s.y, s.z * s.z);
    Matrix3::from_diagonal(&Vector3::new(b2 + c2, a2 + c2, a2 + b2)) * (mass / 5.0)
}

fn make_body(
    name: &str,
    link: usize,
    mass: f64,
    com_offset: Vector3<f64>,
    semi_axes: Vector3<f64>,
    fluid_model: FluidModelKind,
    coefficients: FluidCoefficients,
) -> BodyDesc {
    BodyDesc {
        name: name.to_string(),
        link,
        mass,
        inertia: solid_ellipsoid_inertia(mass, &semi_axes),
        com_offset,
        semi_axes,
        fluid_model,
        fluid: ellipsoid_fluid_params(&semi_axes, REFERENCE_AIR_DENSITY),
        coefficients,
    }
}

#[allow(clippy::too_many_arguments)]
fn make_joint(
    name: &str,
    parent_link: usize,
    origin: Vector3<f64>,
    axis: Vector3<f64>,
    limit: f64,
    p: &ModelParams,
    torque_limit: f64,
) -> JointDesc {
    JointDesc {
        name: name.to_string(),
        parent_link,
        origin,
        axis,
        lower: -limit,
        upper: limit,
        velocity_limit: p.joint_velocity_limit_rad_s,
        damping: p.joint_damping_n_m_s_rad,
        torque_limit,
        locked: false,
    }
}

pub fn build_model(p: &ModelParams) -> RobotModel {
    let body_axes = Vector3::from(p.body_semi_axes_m);
    let body_half_width = body_axes.y;
    let wing_length = (p.wingspan_m - 2.0 * body_half_width) / 2.0;
    let half_chord = p.mean_chord_m / 2.0;
    let wing_axes = Vector3::new(half_chord, wing_length / 2.0, p.thickness_ratio * half_chord);
    let tail_axes = Vector3::new(p.tail_semi_length_m, p.tail_semi_span_m, p.thickness_ratio * p.tail_semi_length_m);

    let m = p.total_mass_kg;
    let coeffs = p.coefficients;
    let bodies = vec![
        make_body("main_body", 0, m * p.main_body_mass_fraction, Vector3::zeros(), body_axes, FluidModelKind::InertiaBox, coeffs),
        // Wings pitch about their leading edge, so the CoM sits half a chord aft.
        make_body(
            "left_wing",
            LEFT_PITCH + 1,
            m * p.wing_mass_fraction,
            Vector3::new(-half_chord, wing_axes.y, 0.0),
            wing_axes,
            FluidModelKind::Ellipsoid,
            coeffs,
        ),
        make_body(
            "right_wing",
            RIGHT_PITCH + 1,
            m * p.wing_mass_fraction,
            Vector3::new(-half_chord, -wing_axes.y, 0.0),
            wing_axes,
            FluidModelKind::Ellipsoid,
            coeffs,
        ),
        make_body(
            "tail",
            TAIL_PITCH + 1,
            m * p.tail_mass_fraction,
            Vector3::new(-tail_axes.x, 0.0, 0.0),
            tail_axes,
            FluidModelKind::Ellipsoid,
            coeffs,
        ),
    ];

    let left_root = Vector3::new(p.wing_root_x_m, body_half_width, 0.0);
    let right_root = Vector3::new(p.wing_root_x_m, -body_half_width, 0.0);
    // Positive flap raises either wing; positive pitch lowers the leading edge.
    let joints = vec![
        make_joint("left_flap", 0, left_root, Vector3::x(), p.flap_limit_rad, p, p.flap_torque_limit_n_m),
        make_joint(
            "left_pitch",
            LEFT_FLAP + 1,
            Vector3::zeros(),
            Vector3::y(),
            p.wing_pitch_limit_rad,
            p,
            p.pitch_torque_limit_n_m,
        ),
        make_joint("right_flap", 0, right_root, -Vector3::x(), p.flap_limit_rad, p, p.flap_torque_limit_n_m),
        make_joint(
            "right_pitch",
            RIGHT_FLAP + 1,
            Vector3::zeros(),
            Vector3::y(),
            p.wing_pitch_limit_rad,
            p,
            p.pitch_torque_limit_n_m,
        ),
        make_joint(
            "tail_pitch",
            0,
            Vector3::new(p.tail_root_x_m, 0.0, 0.0),
            Vector3::y(),
            p.tail_pitch_limit_rad,
            p,
            p.pitch_torque_limit_n_m,
        ),
    ];

    RobotModel {
        base_mode: BaseMode::Floating,
        total_wingspan: p.wingspan_m,
        mean_chord: p.mean_chord_m,
        nominal_mass: p.total_mass_kg,
        mass_tolerance: 1e-9,
        design_lift_to_drag: p.design_lift_to_drag,
        glide_pose: p.glide_pose_rad,
        bodies,
        joints,
    }
}

/// One violated model invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelViolation {
    BodyCount(usize),
    JointCount(usize),
    NonPositiveMass { body: usize, mass: f64 },
    TotalMass { expected: f64, actual: f64, tolerance: f64 },
    InertiaNotPositiveDefinite { body: usize },
    InvalidLink { body: usize, link: usize },
    NonUnitAxis { joint: usize, norm: f64 },
    LimitOrder { joint: usize, lower: f64, upper: f64 },
    ParentOrder { joint: usize, parent: usize },
    NegativeJointParameter { joint: usize, field: &'static str },
    NegativeFluidParameter { body: usize, field: &'static str },
    ReferenceAreaTooSmall { body: usize },
    NonFinite(&'static str),
}

impl std::fmt::Display for ModelViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        use ModelViolation::*;
        match self {
            BodyCount(n) => write!(f, "expected {NUM_BODIES} bodies, found {n}"),
            JointCount(n) => write!(f, "expected {NUM_JOINTS} joints, found {n}"),
            NonPositiveMass { body, mass } => write!(f, "body {body} has non-positive mass {mass}"),
            TotalMass { expected, actual, tolerance } => {
                write!(f, "total mass {actual} kg differs from {expected} kg by more than {tolerance}")
            }
            InertiaNotPositiveDefinite { body } => {
                write!(f, "body {body} inertia is not symmetric positive definite")
            }
            InvalidLink { body, link } => write!(f, "body {body} references missing link {link}"),
            NonUnitAxis { joint, norm } => write!(f, "joint {joint} axis has norm {norm}"),
            LimitOrder { joint, lower, upper } => {
                write!(f, "joint {joint} limits not ordered: {lower} >= {upper}")
            }
            ParentOrder { joint, parent } => {
                write!(f, "joint {joint} parent link {parent} is not defined before it")
            }
            NegativeJointParameter { joint, field } => write!(f, "joint {joint} has negative {field}"),
            NegativeFluidParameter { body, field } => write!(f, "body {body} has negative fluid {field}"),
            ReferenceAreaTooSmall { body } => {
                write!(f, "body {body} maximum reference area is below its largest silhouette")
            }
            NonFinite(what) => write!(f, "non-finite value in {what}"),
        }
    }
}

fn is_spd(m: &Matrix3<f64>) -> bool {
    let sym = (m - m.transpose()).abs().max() <= 1e-12 * m.abs().max().max(1e-300);
    sym && m.cholesky().is_some()
}

/// Lists every violated invariant; an empty list means the model is valid.
pub fn validate_model(model: &RobotModel) -> Vec<ModelViolation> {
    let mut out = Vec::new();
    if model.bodies.len() != NUM_BODIES {
        out.push(ModelViolation::BodyCount(model.bodies.len()));
    }
    if model.joints.len() != NUM_JOINTS {
        out.push(ModelViolation::JointCount(model.joints.len()));
    }
    let num_links = model.joints.len() + 1;

    for (j, joint) in model.joints.iter().enumerate() {
        if joint.parent_link > j {
            out.push(ModelViolation::ParentOrder { joint: j, parent: joint.parent_link });
        }
        let norm = joint.axis.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-9 {
            out.push(ModelViolation::NonUnitAxis { joint: j, norm });
        }
        if !(joint.lower < joint.upper) {
            out.push(ModelViolation::LimitOrder { joint: j, lower: joint.lower, upper: joint.upper });
        }
        for (field, v) in
            [("velocity limit", joint.velocity_limit), ("damping", joint.damping), ("torque limit", joint.torque_limit)]
        {
            if !(v >= 0.0) {
                out.push(ModelViolation::NegativeJointParameter { joint: j, field });
            }
        }
        if !joint.origin.iter().all(|x| x.is_finite()) {
            out.push(ModelViolation::NonFinite("joint origin"));
        }
    }

    let mut total = 0.0;
    for (b, body) in model.bodies.iter().enumerate() {
        if !(body.mass > 0.0) {
            out.push(ModelViolation::NonPositiveMass { body: b, mass: body.mass });
        }
        total += body.mass;
        if !is_spd(&body.inertia) {
            out.push(ModelViolation::InertiaNotPositiveDefinite { body: b });
        }
        if body.link >= num_links {
            out.push(ModelViolation::InvalidLink { body: b, link: body.link });
        }
        if !body.com_offset.iter().chain(body.semi_axes.iter()).all(|x| x.is_finite()) {
            out.push(ModelViolation::NonFinite("body geometry"));
        }
        for (field, negative) in body.fluid.negative_fields() {
            if negative {
                out.push(ModelViolation::NegativeFluidParameter { body: b, field });
            }
        }
        if body.coefficients.any_negative() {
            out.push(ModelViolation::NegativeFluidParameter { body: b, field: "coefficient" });
        }
        // The largest silhouette of an ellipsoid is along its smallest axis.
        let s = &body.semi_axes;
        let largest = std::f64::consts::PI * (s.x * s.y).max(s.y * s.z).max(s.x * s.z);
        if body.fluid.max_area < largest * (1.0 - 1e-12) {
            out.push(ModelViolation::ReferenceAreaTooSmall { body: b });
        }
    }
    if (total - model.nominal_mass).abs() > model.mass_tolerance {
        out.push(ModelViolation::TotalMass { expected: model.nominal_mass, actual: total, tolerance: model.mass_tolerance });
    }
    out
}

impl RobotModel {
    pub fn num_links(&self) -> usize {
        self.joints.len() + 1
    }

    pub fn total_mass(&self) -> f64 {
        self.bodies.iter().map(|b| b.mass).sum()
    }

    /// Copy of the model with the base pinned in place.
    pub fn with_fixed_base(&self) -> Self {
        let mut m = self.clone();
        m.base_mode = BaseMode::Fixed;
        m
    }

    /// Copy of the model with the given joints locked.
    pub fn with_locked_joints(&self, joints: &[usize]) -> Self {
        let mut m = self.clone();
        for &j in joints {
            m.joints[j].locked = true;
        }
        m
    }

    pub fn joint_lower(&self) -> JointVector {
        JointVector::from_iterator(self.joints.iter().map(|j| j.lower))
    }

    pub fn joint_upper(&self) -> JointVector {
        JointVector::from_iterator(self.joints.iter().map(|j| j.upper))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

/// Full kinematic state of the robot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    #[serde(rename = "base_position_m")]
    pub base_position: Vector3<f64>,
    pub base_orientation: UnitQuaternion<f64>,
    /// World frame.
    #[serde(rename = "base_linear_velocity_m_s")]
    pub base_linear_velocity: Vector3<f64>,
    /// Base body frame.
    #[serde(rename = "base_angular_velocity_rad_s")]
    pub base_angular_velocity: Vector3<f64>,
    #[serde(rename = "joint_positions_rad")]
    pub joint_positions: JointVector,
    #[serde(rename = "joint_velocities_rad_s")]
    pub joint_velocities: JointVector,
    #[serde(rename = "time_s")]
    pub time: f64,
    /// Generalized acceleration from the previous step, used by the lagged
    /// added-mass terms. Zero for a fresh state.
    pub last_acceleration: crate::dynamics::GeneralizedVector,
}

impl Default for SimState {
    fn default() -> Self {
        Self {
            base_position: Vector3::zeros(),
            base_orientation: UnitQuaternion::identity(),
            base_linear_velocity: Vector3::zeros(),
            base_angular_velocity: Vector3::zeros(),
            joint_positions: JointVector::zeros(),
            joint_velocities: JointVector::zeros(),
            time: 0.0,
            last_acceleration: crate::dynamics::GeneralizedVector::zeros(),
        }
    }
}

impl SimState {
    /// Roll, pitch, yaw (Z-Y-X convention).
    pub fn euler_angles(&self) -> (f64, f64, f64) {
        self.base_orientation.euler_angles()
    }

    /// Generalized velocity `[v_world, omega_body, qdot_joints]`.
    pub fn generalized_velocity(&self) -> crate::dynamics::GeneralizedVector {
        let mut v = crate::dynamics::GeneralizedVector::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.base_linear_velocity);
        v.fixed_rows_mut::<3>(3).copy_from(&self.base_angular_velocity);
        v.fixed_rows_mut::<NUM_JOINTS>(6).copy_from(&self.joint_velocities);
        v
    }

    pub fn set_generalized_velocity(&mut self, v: &crate::dynamics::GeneralizedVector) {
        self.base_linear_velocity = v.fixed_rows::<3>(0).into_owned();
        self.base_angular_velocity = v.fixed_rows::<3>(3).into_owned();
        self.joint_velocities = v.fixed_rows::<NUM_JOINTS>(6).into_owned();
    }

    /// Moves the configuration along a generalized velocity for time `h`:
    /// world-frame translation, body-frame rotation, additive joints.
    pub fn advanced(&self, v: &crate::dynamics::GeneralizedVector, h: f64) -> Self {
        let mut s = self.clone();
        s.base_position += v.fixed_rows::<3>(0) * h;
        let w: Vector3<f64> = v.fixed_rows::<3>(3) * h;
        s.base_orientation = self.base_orientation * UnitQuaternion::from_scaled_axis(w);
        s.joint_positions += v.fixed_rows::<NUM_JOINTS>(6) * h;
        s
    }

    pub fn is_finite(&self) -> bool {
        self.base_position.iter().all(|x| x.is_finite())
            && self.base_orientation.coords.iter().all(|x| x.is_finite())
            && self.base_linear_velocity.iter().all(|x| x.is_finite())
            && self.base_angular_velocity.iter().all(|x| x.is_finite())
            && self.joint_positions.iter().all(|x| x.is_finite())
            && self.joint_velocities.iter().all(|x| x.is_finite())
            && self.time.is_finite()
    }
}
