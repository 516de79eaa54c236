//! Procedural target trajectories.
//!
//! A trajectory is a sequence of segments, each an analytic function of time:
//!
//! * a [`Command`] holds forward speed, climb rate and yaw rate constant, so
//!   the path is a straight line, a horizontal arc, or a helix when both the
//!   climb rate and the yaw rate are nonzero;
//! * a [`LoopPrimitive`] traces a vertical circle in the plane of the current
//!   heading.
//!
//! Segments join with continuous position; heading and speed switch
//! instantaneously.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Policy period; spacing of the lookahead points.
pub const POLICY_DT: f64 = 0.02;
pub const LOOKAHEAD_STEPS: usize = 30;
pub const DEFAULT_COMMAND_DURATION: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Command {
    #[serde(rename = "forward_speed_m_s")]
    pub forward_speed: f64,
    #[serde(rename = "z_velocity_m_s", default)]
    pub z_velocity: f64,
    #[serde(rename = "yaw_rate_rad_s", default)]
    pub yaw_rate: f64,
    #[serde(rename = "duration_s", default = "default_duration")]
    pub duration: f64,
}

fn default_duration() -> f64 {
    DEFAULT_COMMAND_DURATION
}

impl Command {
    pub fn new(forward_speed: f64, z_velocity: f64, yaw_rate: f64) -> Self {
        Self { forward_speed, z_velocity, yaw_rate, duration: DEFAULT_COMMAND_DURATION }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopKind {
    /// Full upward loop, ending where it started with unchanged heading.
    Full,
    /// Upward half loop; the following segment flies the reversed heading.
    Immelmann,
    /// Downward half loop; the following segment flies the reversed heading.
    SplitS,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopPrimitive {
    pub kind: LoopKind,
    #[serde(rename = "radius_m")]
    pub radius: f64,
    /// Tangential speed along the circle.
    #[serde(rename = "speed_m_s")]
    pub speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Segment {
    Command(Command),
    Loop(LoopPrimitive),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    #[serde(rename = "start_position_m", default)]
    pub start_position: Vector3<f64>,
    /// Initial heading, rad from the world x axis towards y.
    #[serde(rename = "start_heading_rad", default)]
    pub start_heading: f64,
    pub segments: Vec<Segment>,
}

impl TrajectorySpec {
    pub fn from_commands(commands: &[Command]) -> Self {
        Self {
            start_position: Vector3::zeros(),
            start_heading: 0.0,
            segments: commands.iter().map(|c| Segment::Command(*c)).collect(),
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Piece {
    start_time: f64,
    duration: f64,
    start: Vector3<f64>,
    heading: f64,
    segment: Segment,
}

impl Piece {
    fn local(&self, tau: f64) -> Vector3<f64> {
        let tau = tau.clamp(0.0, self.duration);
        let h = Vector3::new(self.heading.cos(), self.heading.sin(), 0.0);
        match self.segment {
            Segment::Command(c) => {
                let horizontal = if c.yaw_rate.abs() < 1e-12 {
                    h * (c.forward_speed * tau)
                } else {
                    let psi = self.heading + c.yaw_rate * tau;
                    let r = c.forward_speed / c.yaw_rate;
                    Vector3::new(r * (psi.sin() - self.heading.sin()), r * (self.heading.cos() - psi.cos()), 0.0)
                };
                self.start + horizontal + Vector3::z() * (c.z_velocity * tau)
            }
            Segment::Loop(l) => {
                let phi = l.speed * tau / l.radius;
                let up = if l.kind == LoopKind::SplitS { -1.0 } else { 1.0 };
                self.start + h * (l.radius * phi.sin()) + Vector3::z() * (up * l.radius * (1.0 - phi.cos()))
            }
        }
    }

    fn end_heading(&self) -> f64 {
        match self.segment {
            Segment::Command(c) => self.heading + c.yaw_rate * self.duration,
            Segment::Loop(l) => match l.kind {
                LoopKind::Full => self.heading,
                LoopKind::Immelmann | LoopKind::SplitS => self.heading + PI,
            },
        }
    }
}

/// One sinusoid `amplitude sin(2 pi f t + phase)` on a world axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SineComponent {
    pub axis: usize,
    pub amplitude_m: f64,
    pub frequency_hz: f64,
    pub phase_rad: f64,
}

/// Sum of sinusoids added to a path, used to excite the closed loop.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Excitation {
    pub components: Vec<SineComponent>,
}

impl Excitation {
    /// `per_axis` zero-phase sinusoids per axis with log-uniform frequencies
    /// in `[min_hz, max_hz]`. Amplitudes are `amplitude_m / per_axis`, so each
    /// axis stays within `amplitude_m` and the offset starts at zero.
    pub fn multisine<R: Rng + ?Sized>(amplitude_m: f64, min_hz: f64, max_hz: f64, per_axis: usize, rng: &mut R) -> Self {
        let mut components = Vec::with_capacity(3 * per_axis);
        let (lo, hi) = (min_hz.ln(), max_hz.ln());
        for axis in 0..3 {
            for _ in 0..per_axis {
                let f = if hi > lo { rng.random_range(lo..hi).exp() } else { min_hz };
                components.push(SineComponent {
                    axis,
                    amplitude_m: amplitude_m / per_axis as f64,
                    frequency_hz: f,
                    phase_rad: 0.0,
                });
            }
        }
        Self { components }
    }

    pub fn offset(&self, t: f64) -> Vector3<f64> {
        let mut v = Vector3::zeros();
        for c in &self.components {
            v[c.axis] += c.amplitude_m * (2.0 * PI * c.frequency_hz * t + c.phase_rad).sin();
        }
        v
    }
}

/// Continuous-time target path.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pieces: Vec<Piece>,
    excitation: Option<Excitation>,
}

impl Trajectory {
    pub fn new(spec: &TrajectorySpec) -> Result<Self> {
        if spec.segments.is_empty() {
            return Err(Error::EmptyTrajectory);
        }
        let mut pieces = Vec::with_capacity(spec.segments.len());
        let mut t = 0.0;
        let mut p = spec.start_position;
        let mut heading = spec.start_heading;
        for seg in &spec.segments {
            let duration = match seg {
                Segment::Command(c) => {
                    if !(c.duration > 0.0) || !(c.forward_speed >= 0.0) {
                        return Err(Error::Config(format!("invalid command {c:?}")));
                    }
                    c.duration
                }
                Segment::Loop(l) => {
                    if !(l.radius > 0.0) || !(l.speed > 0.0) {
                        return Err(Error::Config(format!("invalid loop {l:?}")));
                    }
                    let sweep = if l.kind == LoopKind::Full { 2.0 * PI } else { PI };
                    sweep * l.radius / l.speed
                }
            };
            let piece = Piece { start_time: t, duration, start: p, heading, segment: *seg };
            p = piece.local(duration);
            heading = piece.end_heading();
            t += duration;
            pieces.push(piece);
        }
        Ok(Self { pieces, excitation: None })
    }

    /// Adds `excitation` on top of the path.
    pub fn with_excitation(mut self, excitation: Excitation) -> Self {
        self.excitation = Some(excitation);
        self
    }

    pub fn excitation(&self) -> Option<&Excitation> {
        self.excitation.as_ref()
    }

    /// Position on the path without any excitation.
    pub fn nominal_position_at(&self, t: f64) -> Vector3<f64> {
        let idx = self.pieces.partition_point(|p| p.start_time <= t).saturating_sub(1);
        let piece = &self.pieces[idx];
        piece.local(t - piece.start_time)
    }

    pub fn duration(&self) -> f64 {
        let last = self.pieces.last().expect("non-empty");
        last.start_time + last.duration
    }

    /// Target position; times outside `[0, duration]` hold the end points.
    pub fn position_at(&self, t: f64) -> Vector3<f64> {
        let p = self.nominal_position_at(t);
        match &self.excitation {
            Some(e) => p + e.offset(t.clamp(0.0, self.duration())),
            None => p,
        }
    }

    pub fn start(&self) -> Vector3<f64> {
        self.pieces[0].start
    }

    pub fn end(&self) -> Vector3<f64> {
        self.position_at(self.duration())
    }

    /// Heading of the first segment.
    pub fn start_heading(&self) -> f64 {
        self.pieces[0].heading
    }

    /// Initial target velocity.
    pub fn start_velocity(&self) -> Vector3<f64> {
        let h = 1e-6;
        (self.position_at(h) - self.position_at(0.0)) / h
    }

    /// Uniform samples `k dt` for `k = 0..=round(duration / dt)`.
    pub fn sample(&self, dt: f64) -> SampledTrajectory {
        let n = (self.duration() / dt).round() as usize;
        let times: Vec<f64> = (0..=n).map(|k| k as f64 * dt).collect();
        let positions = times.iter().map(|&t| self.position_at(t)).collect();
        SampledTrajectory { times, positions }
    }

    /// Upcoming targets `R^T (p(t + k dt) - p_robot)` for `k = 1..=30`, with
    /// the end point held past the end of the path.
    pub fn lookahead_window(
        &self,
        t: f64,
        robot_position: &Vector3<f64>,
        robot_rotation: &Matrix3<f64>,
    ) -> [Vector3<f64>; LOOKAHEAD_STEPS] {
        let rt = robot_rotation.transpose();
        std::array::from_fn(|k| {
            let tk = (t + (k + 1) as f64 * POLICY_DT).min(self.duration());
            rt * (self.position_at(tk) - robot_position)
        })
    }
}

pub fn generate(spec: &TrajectorySpec, dt: f64) -> Result<SampledTrajectory> {
    Ok(Trajectory::new(spec)?.sample(dt))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledTrajectory {
    pub times: Vec<f64>,
    pub positions: Vec<Vector3<f64>>,
}

impl SampledTrajectory {
    /// CSV with columns `t_s,x_m,y_m,z_m`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t_s,x_m,y_m,z_m")?;
        for (t, p) in self.times.iter().zip(&self.positions) {
            writeln!(w, "{t},{},{},{}", p.x, p.y, p.z)?;
        }
        Ok(())
    }
}

/// Curriculum stages of increasing difficulty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Constant forward flight.
    Forward,
    /// Climbing and diving at variable speeds.
    ClimbDive,
    /// Turns and arbitrary manoeuvres.
    Maneuver,
    /// Stage-3 paths under dynamics randomization.
    Randomized,
}

impl Stage {
    pub fn from_index(i: u8) -> Option<Self> {
        match i {
            1 => Some(Self::Forward),
            2 => Some(Self::ClimbDive),
            3 => Some(Self::Maneuver),
            4 => Some(Self::Randomized),
            _ => None,
        }
    }

    pub fn index(&self) -> u8 {
        match self {
            Self::Forward => 1,
            Self::ClimbDive => 2,
            Self::Maneuver => 3,
            Self::Randomized => 4,
        }
    }

    /// Whether the attitude termination applies.
    pub fn limits_attitude(&self) -> bool {
        matches!(self, Self::Forward | Self::ClimbDive)
    }

    pub fn randomizes_dynamics(&self) -> bool {
        matches!(self, Self::Randomized)
    }
}

/// Cruise speed of the forward-flight stage.
pub const CRUISE_SPEED: f64 = 3.8;

/// Straight level flight at `speed` for `duration` seconds, built from
/// 3-second commands.
pub fn forward_flight(speed: f64, duration: f64) -> TrajectorySpec {
    let n = (duration / DEFAULT_COMMAND_DURATION).ceil().max(1.0) as usize;
    let mut cmds = vec![Command::new(speed, 0.0, 0.0); n];
    let last = duration - DEFAULT_COMMAND_DURATION * (n - 1) as f64;
    cmds[n - 1].duration = last;
    TrajectorySpec::from_commands(&cmds)
}

/// Random command sequence for a curriculum stage covering `duration` seconds.
pub fn random_spec<R: Rng>(stage: Stage, duration: f64, rng: &mut R) -> TrajectorySpec {
    if stage == Stage::Forward {
        return forward_flight(CRUISE_SPEED, duration);
    }
    let n = (duration / DEFAULT_COMMAND_DURATION).ceil().max(1.0) as usize;
    let mut segments = Vec::with_capacity(n);
    for _ in 0..n {
        let speed = rng.random_range(3.0..5.5);
        let climb = rng.random_range(-1.0..1.0);
        let yaw = if stage == Stage::ClimbDive { 0.0 } else { rng.random_range(-0.6..0.6) };
        segments.push(Segment::Command(Command::new(speed, climb, yaw)));
    }
    if stage != Stage::ClimbDive && rng.random_bool(0.25) {
        let kind = [LoopKind::Full, LoopKind::Immelmann, LoopKind::SplitS][rng.random_range(0..3)];
        let at = rng.random_range(1..n.max(2));
        segments.insert(at.min(segments.len()), Segment::Loop(LoopPrimitive { kind, radius: 3.0, speed: 4.5 }));
    }
    TrajectorySpec { start_position: Vector3::zeros(), start_heading: 0.0, segments }
}
