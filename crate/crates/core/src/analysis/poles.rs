use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};

use super::sysid::TransferFunctionFit;
use crate::{Error, Result};

pub type C64 = Complex<f64>;

/// Complex root in a serializable form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Root {
    pub re: f64,
    pub im: f64,
}

impl From<C64> for Root {
    fn from(c: C64) -> Self {
        Self { re: c.re, im: c.im }
    }
}

impl From<Root> for C64 {
    fn from(r: Root) -> Self {
        C64::new(r.re, r.im)
    }
}

fn horner(coeffs: &[f64], z: C64) -> (C64, C64) {
    let mut p = C64::new(0.0, 0.0);
    let mut dp = C64::new(0.0, 0.0);
    for &c in coeffs {
        dp = dp * z + p;
        p = p * z + c;
    }
    (p, dp)
}

/// Roots of `c[0] s^n + ... + c[n]` from the companion-matrix eigenvalues,
/// each polished by a few Newton steps.
pub fn poly_roots(coeffs: &[f64]) -> Result<Vec<C64>> {
    let lead = *coeffs.first().ok_or(Error::DegeneratePolynomial("empty polynomial"))?;
    if lead == 0.0 || !lead.is_finite() {
        return Err(Error::DegeneratePolynomial("zero or non-finite leading coefficient"));
    }
    if coeffs.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("polynomial coefficient"));
    }
    let n = coeffs.len() - 1;
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut comp = DMatrix::zeros(n, n);
    for j in 0..n {
        comp[(0, j)] = -coeffs[j + 1] / lead;
    }
    for i in 1..n {
        comp[(i, i - 1)] = 1.0;
    }
    let mut roots: Vec<C64> = comp.complex_eigenvalues().iter().copied().collect();
    for r in &mut roots {
        for _ in 0..3 {
            let (p, dp) = horner(coeffs, *r);
            if dp.norm() == 0.0 {
                break;
            }
            let next = *r - p / dp;
            if !(next.re.is_finite() && next.im.is_finite()) || horner(coeffs, next).0.norm() > p.norm() {
                break;
            }
            *r = next;
        }
    }
    roots.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    Ok(roots)
}

/// Monic polynomial with the given roots, highest power first. Imaginary
/// parts of the coefficients are dropped, so conjugate pairs are expected.
pub fn poly_from_roots(roots: &[C64]) -> Vec<f64> {
    let mut c = vec![C64::new(1.0, 0.0)];
    for r in roots {
        let mut next = vec![C64::new(0.0, 0.0); c.len() + 1];
        for (i, ci) in c.iter().enumerate() {
            next[i] += ci;
            next[i + 1] -= ci * r;
        }
        c = next;
    }
    c.into_iter().map(|z| z.re).collect()
}

fn trim_leading_zeros(c: &[f64]) -> Result<&[f64]> {
    let first = c.iter().position(|x| *x != 0.0).ok_or(Error::DegeneratePolynomial("zero polynomial"))?;
    Ok(&c[first..])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoleZeroReport {
    pub poles: Vec<Root>,
    /// One list per output axis.
    pub zeros: Vec<Vec<Root>>,
    /// All poles strictly in the left half plane.
    pub bibo_stable: bool,
    /// Per axis: all zeros strictly in the left half plane.
    pub minimum_phase: Vec<bool>,
}

/// Classifies a common-denominator system given as coefficient lists,
/// highest power first. Leading zeros of numerators are ignored.
pub fn classify(denominator: &[f64], numerators: &[Vec<f64>]) -> Result<PoleZeroReport> {
    let poles = poly_roots(denominator)?;
    let mut zeros = Vec::with_capacity(numerators.len());
    for num in numerators {
        zeros.push(poly_roots(trim_leading_zeros(num)?)?);
    }
    Ok(PoleZeroReport {
        bibo_stable: poles.iter().all(|p| p.re < 0.0),
        minimum_phase: zeros.iter().map(|z| z.iter().all(|r| r.re < 0.0)).collect(),
        poles: poles.into_iter().map(Root::from).collect(),
        zeros: zeros.into_iter().map(|z| z.into_iter().map(Root::from).collect()).collect(),
    })
}

/// Pole-zero classification of an identified model. With per-axis
/// denominators, the poles of every axis are pooled.
pub fn poles_zeros_classify(fit: &TransferFunctionFit) -> Result<PoleZeroReport> {
    let numerators: Vec<Vec<f64>> = fit.axes.iter().map(|a| a.numerator.to_vec()).collect();
    let mut report = classify(&fit.axes[0].denominator, &numerators)?;
    if !fit.shared_denominator {
        for axis in &fit.axes[1..] {
            let extra = poly_roots(&axis.denominator)?;
            report.bibo_stable &= extra.iter().all(|p| p.re < 0.0);
            report.poles.extend(extra.into_iter().map(Root::from));
        }
    }
    Ok(report)
}
