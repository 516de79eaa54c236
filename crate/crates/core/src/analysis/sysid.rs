//! Closed-loop LTI identification.
//!
//! A third-order ARX model `y[k] + a1 y[k-1] + a2 y[k-2] + a3 y[k-3] =
//! b1 u[k-1] + b2 u[k-2] + b3 u[k-3]` is fitted per axis by least squares,
//! with the `a` coefficients optionally shared across axes. The discrete
//! model is mapped to continuous time by inverting the zero-order-hold
//! discretization, which is exact for inputs held over each sample.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::poles::{poly_from_roots, poly_roots, C64};
use crate::{Error, Result};

pub const ARX_ORDER: usize = 3;
/// Shortest record accepted for identification, s.
pub const MIN_IDENT_DURATION_S: f64 = 30.0;
/// Normalized held-out error above which a fit is flagged poor.
pub const POOR_FIT_NMSE: f64 = 1e-2;

/// One contiguous record of commanded offsets `u` and measured offsets `y`,
/// both in world axes, sampled uniformly.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IoSegment {
    pub u: Vec<[f64; 3]>,
    pub y: Vec<[f64; 3]>,
}

impl IoSegment {
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    fn channel(v: &[[f64; 3]], axis: usize) -> Vec<f64> {
        v.iter().map(|s| s[axis]).collect()
    }

    pub fn u_axis(&self, axis: usize) -> Vec<f64> {
        Self::channel(&self.u, axis)
    }

    pub fn y_axis(&self, axis: usize) -> Vec<f64> {
        Self::channel(&self.y, axis)
    }

    fn slice(&self, start: usize, end: usize) -> IoSegment {
        IoSegment { u: self.u[start..end].to_vec(), y: self.y[start..end].to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoData {
    pub sample_rate_hz: f64,
    pub segments: Vec<IoSegment>,
}

const CSV_HEADER: &str = "segment,t_s,u_x_m,u_y_m,u_z_m,y_x_m,y_y_m,y_z_m";

impl IoData {
    pub fn new(sample_rate_hz: f64) -> Self {
        Self { sample_rate_hz, segments: Vec::new() }
    }

    pub fn total_samples(&self) -> usize {
        self.segments.iter().map(IoSegment::len).sum()
    }

    pub fn duration(&self) -> f64 {
        self.total_samples() as f64 / self.sample_rate_hz
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz.is_finite()) {
            return Err(Error::Config(format!("sample rate {} Hz", self.sample_rate_hz)));
        }
        for (i, s) in self.segments.iter().enumerate() {
            if s.u.len() != s.y.len() {
                return Err(Error::Config(format!("segment {i}: {} inputs but {} outputs", s.u.len(), s.y.len())));
            }
            if s.u.iter().chain(&s.y).flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("io sample"));
            }
        }
        Ok(())
    }

    /// Writes one row per sample; `t_s` restarts at zero in each segment.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for (i, seg) in self.segments.iter().enumerate() {
            for (k, (u, y)) in seg.u.iter().zip(&seg.y).enumerate() {
                let t = k as f64 / self.sample_rate_hz;
                writeln!(w, "{i},{t},{},{},{},{},{},{}", u[0], u[1], u[2], y[0], y[1], y[2])?;
            }
        }
        Ok(())
    }

    /// Reads the format of [`IoData::write_csv`]. The sample rate is taken
    /// from the first time step, so every segment needs two samples.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let headers = reader.headers().map_err(|e| Error::Csv(e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
            return Err(Error::Csv(format!("expected header {CSV_HEADER}")));
        }
        let mut segments: Vec<IoSegment> = Vec::new();
        let mut current = usize::MAX;
        let mut dt = None;
        let mut prev_t = 0.0;
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Csv(e.to_string()))?;
            let f = |i: usize| -> Result<f64> {
                rec.get(i)
                    .ok_or_else(|| Error::Csv(format!("row {}: missing column {i}", line + 2)))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Csv(format!("row {}: {e}", line + 2)))
            };
            let seg = f(0)? as usize;
            let t = f(1)?;
            if seg != current {
                segments.push(IoSegment::default());
                current = seg;
            } else if dt.is_none() {
                dt = Some(t - prev_t);
            }
            prev_t = t;
            let s = segments.last_mut().expect("pushed above");
            s.u.push([f(2)?, f(3)?, f(4)?]);
            s.y.push([f(5)?, f(6)?, f(7)?]);
        }
        let dt = dt.ok_or_else(|| Error::Csv("cannot infer the sample rate".into()))?;
        if !(dt > 0.0) {
            return Err(Error::Csv(format!("non-increasing time step {dt}")));
        }
        let data = Self { sample_rate_hz: 1.0 / dt, segments };
        data.validate()?;
        Ok(data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// One denominator for all axes; otherwise each axis gets its own.
    pub shared_denominator: bool,
    /// Leading fraction of every segment used for fitting; the rest is held out.
    pub train_fraction: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { shared_denominator: true, train_fraction: 0.7 }
    }
}

/// Discrete ARX coefficients of one axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscreteAxis {
    pub a: [f64; 3],
    pub b: [f64; 3],
}

impl DiscreteAxis {
    /// Free-run simulation. The first [`ARX_ORDER`] outputs are copied from
    /// `y_init`; later ones depend only on the model and `u`.
    pub fn simulate(&self, u: &[f64], y_init: &[f64]) -> Vec<f64> {
        let mut y = Vec::with_capacity(u.len());
        for k in 0..u.len() {
            if k < ARX_ORDER {
                y.push(y_init[k]);
                continue;
            }
            let mut v = 0.0;
            for i in 0..ARX_ORDER {
                v += self.b[i] * u[k - 1 - i] - self.a[i] * y[k - 1 - i];
            }
            y.push(v);
        }
        y
    }
}

/// `numerator[0] s^2 + numerator[1] s + numerator[2]` over the monic
/// `s^3 + denominator[1] s^2 + denominator[2] s + denominator[3]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisTransferFunction {
    pub numerator: [f64; 3],
    pub denominator: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferFunctionFit {
    /// x, y, z.
    pub axes: Vec<AxisTransferFunction>,
    pub discrete: Vec<DiscreteAxis>,
    pub shared_denominator: bool,
    pub sample_rate_hz: f64,
    /// Free-run simulation MSE on the fitting portion, m^2.
    pub train_mse: f64,
    /// Free-run simulation MSE on the held-out portion, m^2.
    pub heldout_mse: f64,
    /// Held-out MSE divided by the output variance, averaged over axes.
    pub heldout_mse_normalized: f64,
    pub poor_fit: bool,
}

impl TransferFunctionFit {
    /// Mean over axes and samples of the free-run squared error, skipping the
    /// initial samples copied from the data.
    pub fn simulation_mse(&self, segments: &[IoSegment]) -> f64 {
        let (mut sum, mut n) = (0.0, 0usize);
        for seg in segments.iter().filter(|s| s.len() > ARX_ORDER) {
            for (axis, d) in self.discrete.iter().enumerate() {
                let y = seg.y_axis(axis);
                let sim = d.simulate(&seg.u_axis(axis), &y);
                for k in ARX_ORDER..y.len() {
                    sum += (sim[k] - y[k]).powi(2);
                    n += 1;
                }
            }
        }
        if n == 0 {
            f64::NAN
        } else {
            sum / n as f64
        }
    }

    fn normalized_mse(&self, segments: &[IoSegment]) -> f64 {
        let mut total = 0.0;
        for (axis, d) in self.discrete.iter().enumerate() {
            let (mut err, mut n) = (0.0, 0usize);
            let mut ys = Vec::new();
            for seg in segments.iter().filter(|s| s.len() > ARX_ORDER) {
                let y = seg.y_axis(axis);
                let sim = d.simulate(&seg.u_axis(axis), &y);
                for k in ARX_ORDER..y.len() {
                    err += (sim[k] - y[k]).powi(2);
                    n += 1;
                }
                ys.extend_from_slice(&y[ARX_ORDER..]);
            }
            let mse = err / n.max(1) as f64;
            let mean = ys.iter().sum::<f64>() / ys.len().max(1) as f64;
            let var = ys.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / ys.len().max(1) as f64;
            total += if var > 0.0 { mse / var } else { mse };
        }
        total / self.discrete.len() as f64
    }
}

fn split(data: &IoData, fraction: f64) -> (Vec<IoSegment>, Vec<IoSegment>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for seg in &data.segments {
        let cut = ((seg.len() as f64 * fraction).round() as usize).min(seg.len());
        train.push(seg.slice(0, cut));
        test.push(seg.slice(cut, seg.len()));
    }
    (train, test)
}

/// Least squares with column equilibration. Fails when the scaled
/// regressor has a relative singular value below `1e-10`.
fn solve_least_squares(a: DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>> {
    if a.nrows() < a.ncols() {
        return Err(Error::RankDeficient);
    }
    let scale: Vec<f64> = a.column_iter().map(|c| c.norm()).collect();
    if scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::RankDeficient);
    }
    let mut a = a;
    for (j, s) in scale.iter().enumerate() {
        a.column_mut(j).unscale_mut(*s);
    }
    let svd = a.svd(true, true);
    let sv = &svd.singular_values;
    if sv.min() <= 1e-10 * sv.max() {
        return Err(Error::RankDeficient);
    }
    let mut x = svd.solve(&b, 0.0).map_err(|_| Error::RankDeficient)?;
    for (j, s) in scale.iter().enumerate() {
        x[j] /= s;
    }
    Ok(x)
}

/// Fits the discrete models for the axes in `axes`, sharing `a` among them.
fn fit_arx(train: &[IoSegment], axes: &[usize]) -> Result<(Vec<f64>, Vec<[f64; 3]>)> {
    let n = ARX_ORDER;
    let cols = n + n * axes.len();
    let rows: usize = train.iter().map(|s| s.len().saturating_sub(n)).sum::<usize>() * axes.len();
    let mut a = DMatrix::zeros(rows, cols);
    let mut b = DVector::zeros(rows);
    let mut r = 0;
    for (slot, &axis) in axes.iter().enumerate() {
        for seg in train {
            let u = seg.u_axis(axis);
            let y = seg.y_axis(axis);
            for k in n..seg.len() {
                for i in 0..n {
                    a[(r, i)] = -y[k - 1 - i];
                    a[(r, n + n * slot + i)] = u[k - 1 - i];
                }
                b[r] = y[k];
                r += 1;
            }
        }
    }
    let theta = solve_least_squares(a, b)?;
    let den = theta.rows(0, n).iter().copied().collect();
    let nums = (0..axes.len()).map(|s| [theta[n + n * s], theta[n + n * s + 1], theta[n + n * s + 2]]).collect();
    Ok((den, nums))
}

/// Zero-order-hold discretization of `C (sI - A)^-1 B` in controllable
/// canonical form: returns `(Ad, Bd)`.
fn zoh(denominator: &[f64; 4], dt: f64) -> (Matrix3<f64>, Vector3<f64>) {
    let mut m = Matrix4::zeros();
    m[(0, 1)] = 1.0;
    m[(1, 2)] = 1.0;
    m[(2, 0)] = -denominator[3];
    m[(2, 1)] = -denominator[2];
    m[(2, 2)] = -denominator[1];
    m[(2, 3)] = 1.0;
    let e = (m * dt).exp();
    (e.fixed_view::<3, 3>(0, 0).into_owned(), e.fixed_view::<3, 1>(0, 3).into_owned())
}

/// Characteristic polynomial coefficients `[a1, a2, a3]` of a 3x3 matrix.
fn char_poly(m: &Matrix3<f64>) -> [f64; 3] {
    let minors = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)] + m[(0, 0)] * m[(2, 2)] - m[(0, 2)] * m[(2, 0)]
        + m[(1, 1)] * m[(2, 2)]
        - m[(1, 2)] * m[(2, 1)];
    [-m.trace(), minors, -m.determinant()]
}

/// Discrete numerator of `c (zI - Ad)^-1 Bd` over the given denominator.
fn discrete_numerator(c: &Vector3<f64>, ad: &Matrix3<f64>, bd: &Vector3<f64>, a: &[f64; 3]) -> [f64; 3] {
    let h1 = c.dot(bd);
    let h2 = c.dot(&(ad * bd));
    let h3 = c.dot(&(ad * ad * bd));
    [h1, h2 + a[0] * h1, h3 + a[0] * h2 + a[1] * h1]
}

/// Zero-order-hold discretization of a strictly proper third-order transfer
/// function.
pub fn discretize(tf: &AxisTransferFunction, dt: f64) -> DiscreteAxis {
    let (ad, bd) = zoh(&tf.denominator, dt);
    let a = char_poly(&ad);
    let c = Vector3::new(tf.numerator[2], tf.numerator[1], tf.numerator[0]);
    DiscreteAxis { a, b: discrete_numerator(&c, &ad, &bd, &a) }
}

/// Inverts [`discretize`]: poles map through `s = ln(z) / dt`, and the
/// numerator solves the linear map from continuous to discrete numerators.
pub fn to_continuous(a: &[f64; 3], b: &[[f64; 3]], dt: f64) -> Result<(Vec<AxisTransferFunction>, bool)> {
    let z = poly_roots(&[1.0, a[0], a[1], a[2]])?;
    let mut exact = true;
    let s: Vec<C64> = z
        .iter()
        .map(|z| {
            // A real negative z has no real-coefficient preimage.
            if z.im == 0.0 && z.re < 0.0 {
                exact = false;
            }
            z.ln() / dt
        })
        .collect();
    if s.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
        return Err(Error::DegeneratePolynomial("discrete pole at the origin"));
    }
    let d = poly_from_roots(&s);
    let denominator = [1.0, d[1], d[2], d[3]];
    let (ad, bd) = zoh(&denominator, dt);
    let ad_poly = char_poly(&ad);
    let mut basis = Matrix3::zeros();
    for j in 0..3 {
        let col = discrete_numerator(&Vector3::ith(j, 1.0), &ad, &bd, &ad_poly);
        basis.set_column(j, &Vector3::from(col));
    }
    let lu = basis.lu();
    let mut out = Vec::with_capacity(b.len());
    for bi in b {
        let c = lu.solve(&Vector3::from(*bi)).ok_or(Error::RankDeficient)?;
        out.push(AxisTransferFunction { numerator: [c[2], c[1], c[0]], denominator });
    }
    Ok((out, exact))
}

/// Identifies the x, y and z channels of `data`.
pub fn fit_lti(data: &IoData, options: &FitOptions) -> Result<TransferFunctionFit> {
    data.validate()?;
    if data.duration() < MIN_IDENT_DURATION_S {
        return Err(Error::SignalTooShort(format!(
            "{:.1} s of io data; identification needs {MIN_IDENT_DURATION_S} s",
            data.duration()
        )));
    }
    let dt = 1.0 / data.sample_rate_hz;
    let (train, test) = split(data, options.train_fraction);
    let groups: Vec<Vec<usize>> = if options.shared_denominator { vec![vec![0, 1, 2]] } else { vec![vec![0], vec![1], vec![2]] };
    let mut discrete = vec![DiscreteAxis { a: [0.0; 3], b: [0.0; 3] }; 3];
    let mut axes = vec![AxisTransferFunction { numerator: [0.0; 3], denominator: [0.0; 4] }; 3];
    let mut exact = true;
    for group in &groups {
        let (den, nums) = fit_arx(&train, group)?;
        let a = [den[0], den[1], den[2]];
        let (tfs, ok) = to_continuous(&a, &nums, dt)?;
        exact &= ok;
        for (slot, &axis) in group.iter().enumerate() {
            discrete[axis] = DiscreteAxis { a, b: nums[slot] };
            axes[axis] = tfs[slot];
        }
    }
    let mut fit = TransferFunctionFit {
        axes,
        discrete,
        shared_denominator: options.shared_denominator,
        sample_rate_hz: data.sample_rate_hz,
        train_mse: f64::NAN,
        heldout_mse: f64::NAN,
        heldout_mse_normalized: f64::NAN,
        poor_fit: true,
    };
    fit.train_mse = fit.simulation_mse(&train);
    fit.heldout_mse = fit.simulation_mse(&test);
    fit.heldout_mse_normalized = fit.normalized_mse(&test);
    fit.poor_fit = !exact || !(fit.heldout_mse_normalized <= POOR_FIT_NMSE);
    Ok(fit)
}

/// Denominator shared by the reference closed-loop model.
pub const REFERENCE_DENOMINATOR: [f64; 4] = [1.0, 3.554, 6.438, 2.809];
/// Numerators of the reference closed-loop model for x, y and z.
pub const REFERENCE_NUMERATORS: [[f64; 3]; 3] = [[49.89, 164.9, 26.27], [-0.09798, -10.07, -24.67], [1.006, 1.020, 3.836]];

/// The reference closed-loop model as per-axis transfer functions.
pub fn reference_model() -> Vec<AxisTransferFunction> {
    REFERENCE_NUMERATORS.iter().map(|n| AxisTransferFunction { numerator: *n, denominator: REFERENCE_DENOMINATOR }).collect()
}

/// Simulates continuous transfer functions with RK4 on a fine grid while
/// each input sample is held for one period; `y[k]` is read at `t_k`.
pub fn simulate_continuous(tfs: &[AxisTransferFunction], u: &[[f64; 3]], sample_rate_hz: f64, substeps: usize) -> Vec<[f64; 3]> {
    let h = 1.0 / (sample_rate_hz * substeps as f64);
    let mut y = vec![[0.0; 3]; u.len()];
    for (axis, tf) in tfs.iter().enumerate().take(3) {
        let d = tf.denominator;
        let f = |x: &Vector3<f64>, v: f64| Vector3::new(x[1], x[2], v - d[3] * x[0] - d[2] * x[1] - d[1] * x[2]);
        let c = Vector3::new(tf.numerator[2], tf.numerator[1], tf.numerator[0]);
        let mut x = Vector3::zeros();
        for (k, uk) in u.iter().enumerate() {
            y[k][axis] = c.dot(&x);
            let v = uk[axis];
            for _ in 0..substeps {
                let k1 = f(&x, v);
                let k2 = f(&(x + k1 * (h / 2.0)), v);
                let k3 = f(&(x + k2 * (h / 2.0)), v);
                let k4 = f(&(x + k3 * h), v);
                x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            }
        }
    }
    y
}

/// One segment of the given model driven by uniform white noise in
/// `[-amplitude, amplitude]`, held per sample.
pub fn synthesize_io(tfs: &[AxisTransferFunction], duration_s: f64, sample_rate_hz: f64, amplitude: f64, seed: u64) -> IoData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (duration_s * sample_rate_hz).round() as usize;
    let u: Vec<[f64; 3]> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-amplitude..=amplitude))).collect();
    let y = simulate_continuous(tfs, &u, sample_rate_hz, 20);
    IoData { sample_rate_hz, segments: vec![IoSegment { u, y }] }
}
