//! Joint phase portraits and an orbit closure measure.
//!
//! The flapping period is refined by fitting a truncated Fourier series to
//! the whole record. Each cycle is then fitted on its own, and successive
//! cycle loops are compared in the `(q, qd / omega)` plane, where a pure
//! sinusoid traces a circle.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::spectrum::spectral_analysis;
use crate::training::Rollout;
use crate::trajectory::POLICY_DT;
use crate::{Error, Result};

/// Fewest complete cycles accepted.
pub const MIN_CYCLES: usize = 10;
/// Closure metric at or below which an orbit counts as periodic.
pub const PERIODIC_CLOSURE: f64 = 0.05;
const MAX_HARMONICS: usize = 3;
const LOOP_POINTS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrbitStats {
    pub frequency_hz: f64,
    pub period_s: f64,
    pub cycles: usize,
    pub harmonics: usize,
    pub position_min: f64,
    pub position_max: f64,
    pub velocity_min: f64,
    pub velocity_max: f64,
    /// Mean RMS distance between successive cycle loops over the orbit diameter.
    pub closure: f64,
    pub periodic: bool,
}

impl OrbitStats {
    pub fn position_range(&self) -> f64 {
        self.position_max - self.position_min
    }

    pub fn velocity_range(&self) -> f64 {
        self.velocity_max - self.velocity_min
    }
}

fn basis_row(omega: f64, t: f64, harmonics: usize) -> Vec<f64> {
    let mut row = Vec::with_capacity(2 * harmonics + 1);
    row.push(1.0);
    for k in 1..=harmonics {
        let a = k as f64 * omega * t;
        row.push(a.cos());
        row.push(a.sin());
    }
    row
}

/// Least-squares Fourier coefficients of `x` sampled at `t`; returns the
/// coefficients and the RMS residual.
fn fourier_fit(t: &[f64], x: &[f64], omega: f64, harmonics: usize) -> Option<(DVector<f64>, f64)> {
    let cols = 2 * harmonics + 1;
    if t.len() < cols {
        return None;
    }
    let mut a = DMatrix::zeros(t.len(), cols);
    for (i, &ti) in t.iter().enumerate() {
        for (j, v) in basis_row(omega, ti, harmonics).into_iter().enumerate() {
            a[(i, j)] = v;
        }
    }
    let b = DVector::from_column_slice(x);
    let coef = a.clone().svd(true, true).solve(&b, 1e-12).ok()?;
    let rms = ((a * &coef - b).norm_squared() / t.len() as f64).sqrt();
    Some((coef, rms))
}

fn eval_fourier(coef: &DVector<f64>, omega: f64, t: f64, harmonics: usize) -> f64 {
    basis_row(omega, t, harmonics).iter().zip(coef.iter()).map(|(b, c)| b * c).sum()
}

/// Golden-section search for the minimum of `f` on `[lo, hi]`.
fn golden_min<F: FnMut(f64) -> f64>(mut f: F, mut lo: f64, mut hi: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..200 {
        if hi - lo <= 1e-15 * hi.abs() {
            break;
        }
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(*x), hi.max(*x)))
}

/// Orbit statistics of a joint position `q` and velocity `qd` sampled at
/// `sample_rate_hz`.
pub fn phase_portrait(q: &[f64], qd: &[f64], sample_rate_hz: f64) -> Result<OrbitStats> {
    if q.len() != qd.len() {
        return Err(Error::DimensionMismatch { expected: q.len(), got: qd.len() });
    }
    if q.iter().chain(qd).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("joint sample"));
    }
    let spec = spectral_analysis(q, sample_rate_hz)?;
    let dt = 1.0 / sample_rate_hz;
    let t: Vec<f64> = (0..q.len()).map(|k| k as f64 * dt).collect();
    let samples_per_cycle = sample_rate_hz / spec.fundamental_hz;
    let harmonics = MAX_HARMONICS.min(((samples_per_cycle.floor() as usize).saturating_sub(1)) / 2).max(1);

    // The RMS residual is V-shaped around an exact fit, which keeps the
    // search sharp for clean signals.
    let df = sample_rate_hz / q.len() as f64;
    let w0 = 2.0 * PI * spec.fundamental_hz;
    let dw = 2.0 * PI * 1.5 * df;
    let omega =
        golden_min(|w| fourier_fit(&t, q, w, harmonics).map_or(f64::INFINITY, |(_, r)| r), (w0 - dw).max(0.5 * w0), w0 + dw);
    let period = 2.0 * PI / omega;
    let span = t.last().copied().unwrap_or(0.0) + dt;
    let cycles = (span / period).floor() as usize;
    if cycles < MIN_CYCLES {
        return Err(Error::SignalTooShort(format!("{cycles} cycles; the portrait needs {MIN_CYCLES}")));
    }
    let v: Vec<f64> = qd.iter().map(|x| x / omega).collect();

    let phases: Vec<f64> = (0..LOOP_POINTS).map(|i| i as f64 * period / LOOP_POINTS as f64).collect();
    let fit_loop = |ts: &[f64], qs: &[f64], vs: &[f64], t0: f64| -> Result<Vec<(f64, f64)>> {
        let local: Vec<f64> = ts.iter().map(|x| x - t0).collect();
        let too_short = || Error::SignalTooShort("too few samples per cycle".into());
        let (cq, _) = fourier_fit(&local, qs, omega, harmonics).ok_or_else(too_short)?;
        let (cv, _) = fourier_fit(&local, vs, omega, harmonics).ok_or_else(too_short)?;
        Ok(phases.iter().map(|&p| (eval_fourier(&cq, omega, p, harmonics), eval_fourier(&cv, omega, p, harmonics))).collect())
    };

    let mut loops = Vec::with_capacity(cycles);
    for c in 0..cycles {
        let (t0, t1) = (c as f64 * period, (c + 1) as f64 * period);
        let idx: Vec<usize> = (0..t.len()).filter(|&k| t[k] >= t0 && t[k] < t1).collect();
        let ts: Vec<f64> = idx.iter().map(|&k| t[k]).collect();
        let qs: Vec<f64> = idx.iter().map(|&k| q[k]).collect();
        let vs: Vec<f64> = idx.iter().map(|&k| v[k]).collect();
        loops.push(fit_loop(&ts, &qs, &vs, t0)?);
    }
    let global = fit_loop(&t, q, &v, 0.0)?;
    let mut diameter: f64 = 0.0;
    for a in &global {
        for b in &global {
            diameter = diameter.max(((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt());
        }
    }
    if !(diameter > 0.0) {
        return Err(Error::NoFundamental);
    }
    let mut total = 0.0;
    for pair in loops.windows(2) {
        let ms: f64 = pair[0].iter().zip(&pair[1]).map(|(a, b)| (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sum::<f64>()
            / LOOP_POINTS as f64;
        total += ms.sqrt();
    }
    let closure = total / (cycles - 1) as f64 / diameter;
    let (position_min, position_max) = min_max(q);
    let (velocity_min, velocity_max) = min_max(qd);
    Ok(OrbitStats {
        frequency_hz: omega / (2.0 * PI),
        period_s: period,
        cycles,
        harmonics,
        position_min,
        position_max,
        velocity_min,
        velocity_max,
        closure,
        periodic: closure <= PERIODIC_CLOSURE,
    })
}

/// Portrait of `joint` over a rollout, skipping the first `skip_s` seconds
/// of transient.
pub fn rollout_phase_portrait(rollout: &Rollout, joint: usize, skip_s: f64) -> Result<OrbitStats> {
    if joint >= crate::model::NUM_JOINTS {
        return Err(Error::DimensionMismatch { expected: crate::model::NUM_JOINTS, got: joint });
    }
    let skip = (skip_s / POLICY_DT).round() as usize;
    let states = rollout.states.get(skip..).unwrap_or(&[]);
    let q: Vec<f64> = states.iter().map(|s| s.joint_positions[joint]).collect();
    let qd: Vec<f64> = states.iter().map(|s| s.joint_velocities[joint]).collect();
    phase_portrait(&q, &qd, 1.0 / POLICY_DT)
}
