use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Band searched for the flapping fundamental, Hz.
pub const FUNDAMENTAL_BAND_HZ: (f64, f64) = (1.0, 20.0);
/// Energy fraction at or above which the fundamental counts as a dominant mode.
pub const DOMINANT_MODE_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Peak frequency refined by log-parabolic interpolation, Hz.
    pub fundamental_hz: f64,
    /// Centre of the peak bin, Hz.
    pub peak_bin_hz: f64,
    /// `band_power / total_power`.
    pub energy_fraction: f64,
    /// Power in the peak bin and its two neighbours.
    pub band_power: f64,
    /// Power in all non-DC bins.
    pub total_power: f64,
    pub dominant_mode: bool,
    /// One-sided bin frequencies, Hz, from DC up to Nyquist.
    pub frequencies_hz: Vec<f64>,
    /// Hann-windowed one-sided power per bin; the non-DC bins sum to `total_power`.
    pub power: Vec<f64>,
}

/// Locates the dominant oscillation of a uniformly sampled series. The mean
/// is removed and a Hann window applied before the transform.
pub fn spectral_analysis(signal: &[f64], sample_rate_hz: f64) -> Result<SpectrumReport> {
    if !(sample_rate_hz > 0.0 && sample_rate_hz.is_finite()) {
        return Err(Error::Config(format!("sample rate {sample_rate_hz} Hz")));
    }
    let n = signal.len();
    // Two periods of the slowest detectable frequency.
    let needed = (2.0 * sample_rate_hz / FUNDAMENTAL_BAND_HZ.0).ceil() as usize;
    if n < needed.max(4) {
        return Err(Error::SignalTooShort(format!("{n} samples; the spectrum needs {needed}")));
    }
    if signal.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("signal sample"));
    }
    let mean = signal.iter().sum::<f64>() / n as f64;
    let rms = (signal.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    if rms <= 1e-12 * mean.abs() || rms == 0.0 {
        return Err(Error::NoFundamental);
    }

    let window: Vec<f64> = (0..n).map(|k| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * k as f64 / n as f64).cos()).collect();
    let mut buf: Vec<Complex<f64>> = signal.iter().zip(&window).map(|(v, w)| Complex::new((v - mean) * w, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);

    let norm = n as f64 * window.iter().map(|w| w * w).sum::<f64>();
    let half = n / 2;
    let power: Vec<f64> = (0..=half)
        .map(|k| {
            let p = buf[k].norm_sqr() / norm;
            // Interior bins stand for both signs of frequency.
            if k == 0 || (n.is_multiple_of(2) && k == half) {
                p
            } else {
                2.0 * p
            }
        })
        .collect();
    let df = sample_rate_hz / n as f64;
    let frequencies_hz: Vec<f64> = (0..=half).map(|k| k as f64 * df).collect();
    let total_power: f64 = power[1..].iter().sum();

    let (lo, hi) = FUNDAMENTAL_BAND_HZ;
    let peak = (1..=half)
        .filter(|&k| frequencies_hz[k] >= lo && frequencies_hz[k] <= hi)
        .max_by(|&a, &b| power[a].total_cmp(&power[b]))
        .ok_or(Error::NoFundamental)?;
    if !(power[peak] > 0.0) {
        return Err(Error::NoFundamental);
    }

    let mut offset = 0.0;
    if peak > 1 && peak < half && power[peak - 1] > 0.0 && power[peak + 1] > 0.0 {
        let (a, b, c) = (power[peak - 1].ln(), power[peak].ln(), power[peak + 1].ln());
        let denom = a - 2.0 * b + c;
        if denom < 0.0 {
            offset = (0.5 * (a - c) / denom).clamp(-0.5, 0.5);
        }
    }
    let band = peak.saturating_sub(1).max(1)..=(peak + 1).min(half);
    let band_power: f64 = power[band].iter().sum();
    let energy_fraction = band_power / total_power;
    Ok(SpectrumReport {
        fundamental_hz: (peak as f64 + offset) * df,
        peak_bin_hz: frequencies_hz[peak],
        energy_fraction,
        band_power,
        total_power,
        dominant_mode: energy_fraction >= DOMINANT_MODE_FRACTION,
        frequencies_hz,
        power,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn sine(f: f64, fs: f64, secs: f64) -> Vec<f64> {
        (0..(fs * secs) as usize).map(|k| (2.0 * PI * f * k as f64 / fs).sin()).collect()
    }

    #[test]
    fn pure_tone() {
        for secs in [4.0, 8.0, 10.0] {
            let r = spectral_analysis(&sine(5.3, 250.0, secs), 250.0).unwrap();
            assert!((r.fundamental_hz - 5.3).abs() < 0.1, "{secs} s: {}", r.fundamental_hz);
            assert!(r.energy_fraction > 0.95, "{secs} s: {}", r.energy_fraction);
            assert!(r.dominant_mode);
        }
    }

    #[test]
    fn white_noise_has_no_dominant_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..2500).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = spectral_analysis(&x, 250.0).unwrap();
        assert!(r.energy_fraction < 0.1, "{}", r.energy_fraction);
        assert!(!r.dominant_mode);
    }

    #[test]
    fn error_paths() {
        assert!(matches!(spectral_analysis(&[2.5; 1000], 250.0), Err(Error::NoFundamental)));
        assert!(matches!(spectral_analysis(&sine(5.3, 250.0, 1.5), 250.0), Err(Error::SignalTooShort(_))));
        let mut x = sine(5.3, 250.0, 4.0);
        x[7] = f64::NAN;
        assert!(spectral_analysis(&x, 250.0).is_err());
    }

    #[test]
    fn parseval_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x: Vec<f64> = sine(7.0, 50.0, 6.0).iter().map(|v| v + 0.3 * rng.random_range(-1.0..1.0)).collect();
        let r = spectral_analysis(&x, 50.0).unwrap();
        assert!(r.band_power <= r.total_power);
        let sum: f64 = r.power[1..].iter().sum();
        assert!((sum - r.total_power).abs() <= 1e-12 * sum);
        // The windowed power is an estimate of the signal variance.
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64;
        assert!((r.total_power - var).abs() < 0.1 * var);
    }
}
