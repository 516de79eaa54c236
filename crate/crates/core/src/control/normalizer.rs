use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const VAR_FLOOR: f64 = 1e-8;

/// Per-feature running mean and variance (parallel Welford merge).
///
/// Normalization is `(x - mean) / sqrt(var + 1e-8)` with no clipping, so it
/// is exactly invertible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningNorm {
    pub mean: Vec<f64>,
    /// Sum of squared deviations from the mean.
    pub m2: Vec<f64>,
    pub count: f64,
}

impl RunningNorm {
    pub fn new(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], m2: vec![0.0; dim], count: 0.0 }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variance(&self) -> Vec<f64> {
        if self.count < 1.0 {
            return vec![1.0; self.dim()];
        }
        self.m2.iter().map(|m| m / self.count).collect()
    }

    pub fn std(&self) -> Vec<f64> {
        self.variance().into_iter().map(|v| (v + VAR_FLOOR).sqrt()).collect()
    }

    /// Merges a batch of samples.
    pub fn update(&mut self, batch: &[Vec<f64>]) -> Result<()> {
        if batch.is_empty() {
            return Ok(());
        }
        let d = self.dim();
        let n = batch.len() as f64;
        let mut bmean = vec![0.0; d];
        for x in batch {
            if x.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: x.len() });
            }
            for (m, v) in bmean.iter_mut().zip(x) {
                *m += v;
            }
        }
        bmean.iter_mut().for_each(|m| *m /= n);
        let mut bm2 = vec![0.0; d];
        for x in batch {
            for i in 0..d {
                let e = x[i] - bmean[i];
                bm2[i] += e * e;
            }
        }
        let total = self.count + n;
        for i in 0..d {
            let delta = bmean[i] - self.mean[i];
            self.mean[i] += delta * n / total;
            self.m2[i] += bm2[i] + delta * delta * self.count * n / total;
        }
        self.count = total;
        Ok(())
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        let s = self.std();
        x.iter().zip(&self.mean).zip(&s).map(|((x, m), s)| (x - m) / s).collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        let s = self.std();
        z.iter().zip(&self.mean).zip(&s).map(|((z, m), s)| z * s + m).collect()
    }
}
