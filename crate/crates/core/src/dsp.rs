//! Pure DSP kernels for the frequency and texture priors: FFT-based analytic
//! signal, instantaneous phase/frequency, multi-scale decomposition,
//! Teager-Kaiser energy, and feature flux.
//!
//! Everything here is a deterministic pure function over real sequences —
//! audio samples or embedding channels alike. The differentiable graph ops in
//! [`crate::autodiff`] mirror these kernels; tests cross-check the two routes.

use rustfft::{num_complex::Complex, FftPlanner};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("sequence too short: need at least {need} samples, got {got}")]
    TooShort { need: usize, got: usize },
}

/// Complex analytic signal `z(n) = x(n) + j x̂(n)`; the real part equals the
/// input exactly.
#[derive(Debug, Clone)]
pub struct AnalyticSignal {
    pub real: Vec<f64>,
    pub imag: Vec<f64>,
}

impl AnalyticSignal {
    pub fn len(&self) -> usize {
        self.real.len()
    }

    pub fn is_empty(&self) -> bool {
        self.real.is_empty()
    }

    /// Instantaneous amplitude `|z(n)|`.
    pub fn envelope(&self) -> Vec<f64> {
        self.real
            .iter()
            .zip(&self.imag)
            .map(|(r, i)| r.hypot(*i))
            .collect()
    }
}

/// The three views of one sequence: temporal difference, identity, and
/// moving average. All components keep the input length.
#[derive(Debug, Clone)]
pub struct MultiScaleSet {
    pub x_high: Vec<f64>,
    pub x_all: Vec<f64>,
    pub x_low: Vec<f64>,
}

/// Instantaneous-frequency features per scale, in rad/sample, all
/// non-negative.
#[derive(Debug, Clone)]
pub struct IFFeatures {
    pub f_high: Vec<f64>,
    pub f_all: Vec<f64>,
    pub f_low: Vec<f64>,
}

/// Texture cues for one utterance: per-step absolute TKEO energy, its
/// per-dimension time mean, and the per-dimension flux.
#[derive(Debug, Clone)]
pub struct TextureCues {
    /// `|Ψ|` per time step and feature dimension, `T x D` row-major.
    pub psi: Vec<Vec<f64>>,
    /// Time mean of `psi`, one value per dimension.
    pub psi_bar: Vec<f64>,
    /// Per-dimension std of absolute adjacent differences.
    pub flux: Vec<f64>,
}

impl TextureCues {
    /// Compute all cues from a `T x D` feature matrix.
    pub fn from_features(h: &[Vec<f64>]) -> Result<Self, DspError> {
        let t = h.len();
        if t < 3 {
            return Err(DspError::TooShort { need: 3, got: t });
        }
        let d = h[0].len();
        let mut psi = vec![vec![0.0; d]; t];
        for j in 0..d {
            let col: Vec<f64> = h.iter().map(|row| row[j]).collect();
            let col_psi = tkeo(&col).expect("length checked above");
            for (n, row) in psi.iter_mut().enumerate() {
                row[j] = col_psi[n].abs();
            }
        }
        let mut psi_bar = vec![0.0; d];
        for row in &psi {
            for (acc, v) in psi_bar.iter_mut().zip(row) {
                *acc += v;
            }
        }
        for acc in psi_bar.iter_mut() {
            *acc /= t as f64;
        }
        let flux = feature_flux(h)?;
        Ok(Self { psi, psi_bar, flux })
    }
}

/// FFT-based analytic signal: zero the negative-frequency bins, double the
/// positive ones, keep DC and Nyquist.
pub fn hilbert_analytic(x: &[f64]) -> Result<AnalyticSignal, DspError> {
    let n = x.len();
    if n < 2 {
        return Err(DspError::TooShort { need: 2, got: n });
    }
    let imag = hilbert_imag(x);
    Ok(AnalyticSignal {
        real: x.to_vec(),
        imag,
    })
}

/// The Hilbert transform `x̂` alone (imaginary part of the analytic signal).
///
/// As a linear map this is antisymmetric: applying it to a cotangent and
/// negating gives the adjoint, which the autodiff op relies on.
pub(crate) fn hilbert_imag(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut planner = FftPlanner::new();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    // Analytic-signal mask: keep DC (and Nyquist for even n), double the
    // positive frequencies, zero the negative ones.
    let half = n / 2;
    for (k, v) in buf.iter_mut().enumerate() {
        if k == 0 || (n % 2 == 0 && k == half) {
            // unchanged
        } else if k < half || (n % 2 == 1 && k == half) {
            *v *= 2.0;
        } else {
            *v = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|v| v.im / n as f64).collect()
}

/// Four-quadrant instantaneous phase of an analytic signal, in `(-π, π]`.
/// The angle of `(0, 0)` is defined as 0.
pub fn instantaneous_phase(z: &AnalyticSignal) -> Vec<f64> {
    z.real
        .iter()
        .zip(&z.imag)
        .map(|(&r, &i)| if r == 0.0 && i == 0.0 { 0.0 } else { i.atan2(r) })
        .collect()
}

/// Wrap an angle difference into `(-π, π]`.
pub fn wrap_angle(x: f64) -> f64 {
    x - 2.0 * PI * ((x - PI) / (2.0 * PI)).ceil()
}

/// Instantaneous frequency: absolute wrapped phase difference between
/// adjacent steps, in rad/sample.
///
/// `f(0)` duplicates `f(1)` so the output keeps the input length. With
/// `wrap = false` the raw principal-value difference is used instead, which
/// produces ≈2π spikes wherever the phase wraps.
pub fn instantaneous_frequency(theta: &[f64], wrap: bool) -> Result<Vec<f64>, DspError> {
    if theta.len() < 2 {
        return Err(DspError::TooShort {
            need: 2,
            got: theta.len(),
        });
    }
    let mut out = Vec::with_capacity(theta.len());
    out.push(0.0); // placeholder, overwritten below
    for w in theta.windows(2) {
        let d = w[1] - w[0];
        out.push(if wrap { wrap_angle(d).abs() } else { d.abs() });
    }
    out[0] = out[1];
    Ok(out)
}

/// Split a sequence into difference / identity / moving-average components.
///
/// `x_high(n) = x(n) - x(n-1)` with `x_high(0) = 0`; `x_low` is a centered
/// moving average of width `pool_window` with edge replication.
pub fn decompose_multiscale(x: &[f64], pool_window: usize) -> Result<MultiScaleSet, DspError> {
    if x.len() < 2 {
        return Err(DspError::TooShort {
            need: 2,
            got: x.len(),
        });
    }
    assert!(pool_window >= 1, "pool_window must be >= 1");
    let n = x.len();
    let mut x_high = Vec::with_capacity(n);
    x_high.push(0.0);
    for w in x.windows(2) {
        x_high.push(w[1] - w[0]);
    }
    let x_low = moving_average(x, pool_window);
    Ok(MultiScaleSet {
        x_high,
        x_all: x.to_vec(),
        x_low,
    })
}

/// Centered moving average with edge replication; output keeps the length.
pub(crate) fn moving_average(x: &[f64], window: usize) -> Vec<f64> {
    let n = x.len() as isize;
    let lo = -((window as isize - 1) / 2);
    let hi = window as isize / 2;
    (0..n)
        .map(|i| {
            (lo..=hi)
                .map(|off| x[(i + off).clamp(0, n - 1) as usize])
                .sum::<f64>()
                / window as f64
        })
        .collect()
}

/// Teager-Kaiser energy `Ψ(n) = x(n)² - x(n-1)·x(n+1)` on interior samples;
/// the endpoints copy their nearest interior value.
pub fn tkeo(x: &[f64]) -> Result<Vec<f64>, DspError> {
    if x.len() < 3 {
        return Err(DspError::TooShort {
            need: 3,
            got: x.len(),
        });
    }
    let n = x.len();
    let mut out = vec![0.0; n];
    for i in 1..n - 1 {
        out[i] = x[i] * x[i] - x[i - 1] * x[i + 1];
    }
    out[0] = out[1];
    out[n - 1] = out[n - 2];
    Ok(out)
}

/// Per-dimension population standard deviation of `|H(n) - H(n-1)|` over a
/// `T x D` feature sequence.
pub fn feature_flux(h: &[Vec<f64>]) -> Result<Vec<f64>, DspError> {
    let t = h.len();
    if t < 2 {
        return Err(DspError::TooShort { need: 2, got: t });
    }
    let d = h[0].len();
    let m = (t - 1) as f64;
    let mut mean = vec![0.0; d];
    for w in h.windows(2) {
        for j in 0..d {
            mean[j] += (w[1][j] - w[0][j]).abs();
        }
    }
    for v in mean.iter_mut() {
        *v /= m;
    }
    let mut var = vec![0.0; d];
    for w in h.windows(2) {
        for j in 0..d {
            let diff = (w[1][j] - w[0][j]).abs() - mean[j];
            var[j] += diff * diff;
        }
    }
    Ok(var.iter().map(|v| (v / m).sqrt()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::{num_complex::Complex, FftPlanner};
    use std::f64::consts::PI;

    fn cosine(omega: f64, n: usize, amp: f64, phase: f64) -> Vec<f64> {
        (0..n).map(|i| amp * (omega * i as f64 + phase).cos()).collect()
    }

    #[test]
    fn hilbert_of_constant_is_zero() {
        let z = hilbert_analytic(&[0.7; 128]).unwrap();
        assert_eq!(z.real, vec![0.7; 128]);
        assert!(z.imag.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn hilbert_of_cosine_is_sine() {
        // Finite-length leakage decays like 1/distance from the edges; a
        // 96-sample margin at N=256 brings the analytic-pair error under
        // 1e-2 (the same profile as scipy.signal.hilbert, which uses the
        // identical construction).
        let n = 256;
        let skip = 96;
        let omega = 0.3;
        let x = cosine(omega, n, 1.0, 0.0);
        let z = hilbert_analytic(&x).unwrap();
        let expected: Vec<f64> = (0..n).map(|i| (omega * i as f64).sin()).collect();
        let max_err = (skip..n - skip)
            .map(|i| (z.imag[i] - expected[i]).abs())
            .fold(0.0, f64::max);
        assert!(max_err <= 1e-2, "max interior error {max_err}");
        let env = z.envelope();
        let env_err = (skip..n - skip)
            .map(|i| (env[i] - 1.0).abs())
            .fold(0.0, f64::max);
        assert!(env_err <= 1e-2, "envelope error {env_err}");
    }

    #[test]
    fn analytic_signal_has_no_negative_frequency_energy() {
        // Deterministic pseudo-random signal.
        let n = 512;
        let x: Vec<f64> = (0..n)
            .map(|i| ((i as f64 * 12.9898).sin() * 43758.5453).fract() - 0.5)
            .collect();
        let z = hilbert_analytic(&x).unwrap();
        let mut buf: Vec<Complex<f64>> = z
            .real
            .iter()
            .zip(&z.imag)
            .map(|(&r, &i)| Complex::new(r, i))
            .collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        for k in n / 2 + 1..n {
            assert!(
                buf[k].norm() <= 1e-6 * norm,
                "bin {k} has magnitude {}",
                buf[k].norm()
            );
        }
    }

    #[test]
    fn phase_of_positive_real_axis_is_zero() {
        let z = AnalyticSignal {
            real: vec![1.0, 2.0, 0.5],
            imag: vec![0.0, 0.0, 0.0],
        };
        assert!(instantaneous_phase(&z).iter().all(|&p| p == 0.0));
    }

    #[test]
    fn phase_axis_cases() {
        let z = AnalyticSignal {
            real: vec![0.0, 0.0],
            imag: vec![1.0, 0.0],
        };
        let p = instantaneous_phase(&z);
        assert!((p[0] - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert_eq!(p[1], 0.0); // angle of (0, 0) defined as 0
    }

    #[test]
    fn phase_slope_of_cosine_matches_frequency() {
        let n = 256;
        let omega = 0.3;
        let x = cosine(omega, n, 1.0, 0.0);
        let z = hilbert_analytic(&x).unwrap();
        let theta = instantaneous_phase(&z);
        // Least-squares slope of the unwrapped interior phase.
        let mut unwrapped = vec![theta[8]];
        for i in 9..n - 8 {
            let prev = *unwrapped.last().unwrap();
            let mut d = theta[i] - theta[i - 1];
            d = wrap_angle(d);
            unwrapped.push(prev + d);
        }
        let m = unwrapped.len() as f64;
        let tbar = (m - 1.0) / 2.0;
        let ybar = unwrapped.iter().sum::<f64>() / m;
        let num: f64 = unwrapped
            .iter()
            .enumerate()
            .map(|(i, y)| (i as f64 - tbar) * (y - ybar))
            .sum();
        let den: f64 = (0..unwrapped.len())
            .map(|i| (i as f64 - tbar).powi(2))
            .sum();
        let slope = num / den;
        assert!((slope - omega).abs() < 1e-3, "slope {slope}");
    }

    #[test]
    fn if_of_constant_phase_is_zero() {
        let f = instantaneous_frequency(&[0.4; 16], true).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn if_of_cosine_matches_omega() {
        // IF is less edge-sensitive than the raw analytic pair; a 48-sample
        // margin suffices for ±0.01 at N=256.
        let n = 256;
        let skip = 48;
        let omega = 0.3;
        let x = cosine(omega, n, 1.0, 0.0);
        let z = hilbert_analytic(&x).unwrap();
        let theta = instantaneous_phase(&z);
        let f = instantaneous_frequency(&theta, true).unwrap();
        for (i, &v) in f.iter().enumerate().take(n - skip).skip(skip) {
            assert!((v - omega).abs() <= 0.01, "f[{i}] = {v}");
        }
    }

    #[test]
    fn if_wraps_phase_jumps() {
        // Jump from -π+0.1 to π-0.1 is a wrapped step of -0.2, not 2π-0.2.
        let theta = vec![-PI + 0.1, PI - 0.1];
        let f = instantaneous_frequency(&theta, true).unwrap();
        assert!((f[1] - 0.2).abs() < 1e-12, "wrapped IF {}", f[1]);
        let raw = instantaneous_frequency(&theta, false).unwrap();
        assert!((raw[1] - (2.0 * PI - 0.2)).abs() < 1e-12);
    }

    #[test]
    fn if_stays_within_principal_range() {
        let theta: Vec<f64> = (0..200)
            .map(|i| ((i as f64 * 78.233).sin() * 1e4).fract() * 10.0)
            .collect();
        let f = instantaneous_frequency(&theta, true).unwrap();
        assert!(f.iter().all(|&v| (0.0..=PI + 1e-12).contains(&v)));
    }

    #[test]
    fn decompose_constant() {
        let ms = decompose_multiscale(&[0.5; 32], 3).unwrap();
        assert!(ms.x_high.iter().all(|&v| v == 0.0));
        assert!(ms.x_low.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        assert_eq!(ms.x_all, vec![0.5; 32]);
    }

    #[test]
    fn decompose_differencing_definition() {
        let ms = decompose_multiscale(&[0.0, 1.0, 0.0, 1.0], 3).unwrap();
        assert_eq!(ms.x_high, vec![0.0, 1.0, -1.0, 1.0]);
    }

    #[test]
    fn moving_average_of_ramp_is_ramp_on_interior() {
        let x: Vec<f64> = (0..64).map(|i| 0.25 * i as f64 - 3.0).collect();
        let ms = decompose_multiscale(&x, 3).unwrap();
        for i in 1..63 {
            assert!(
                (ms.x_low[i] - x[i]).abs() < 1e-12,
                "x_low[{i}] = {}",
                ms.x_low[i]
            );
        }
        // All components preserve length.
        assert_eq!(ms.x_high.len(), 64);
        assert_eq!(ms.x_all.len(), 64);
        assert_eq!(ms.x_low.len(), 64);
    }

    #[test]
    fn tkeo_of_constant_is_zero() {
        let psi = tkeo(&[0.3; 10]).unwrap();
        assert!(psi.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tkeo_quarter_period_cosine() {
        // x = cos(πn/2) = [1, 0, -1, 0, 1]: Ψ(1) = 0 - (1·-1) = 1.
        let x = vec![1.0, 0.0, -1.0, 0.0, 1.0];
        let psi = tkeo(&x).unwrap();
        assert!((psi[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn tkeo_sinusoid_identity() {
        // Ψ[A cos(Ωn + φ)] = A² sin²(Ω) on interior samples, exactly.
        for &(amp, omega, phase) in &[(2.0, 0.5, 0.0), (1.5, 1.2, 0.7), (0.3, 2.9, -1.1)] {
            let x = cosine(omega, 64, amp, phase);
            let psi = tkeo(&x).unwrap();
            let expected = amp * amp * omega.sin().powi(2);
            for v in &psi[1..63] {
                assert!((v - expected).abs() <= 1e-9, "psi {v} vs {expected}");
            }
        }
    }

    #[test]
    fn flux_of_time_constant_matrix_is_zero() {
        let h = vec![vec![1.0, -2.0, 0.5]; 6];
        assert!(feature_flux(&h).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flux_of_constant_magnitude_differences_is_zero() {
        // Alternating +1/-1 gives |diff| = 2 everywhere, so std = 0.
        let h: Vec<Vec<f64>> = (0..8).map(|i| vec![if i % 2 == 0 { 1.0 } else { -1.0 }]).collect();
        let flux = feature_flux(&h).unwrap();
        assert!(flux[0].abs() < 1e-15);
    }

    #[test]
    fn flux_matches_two_pass_recomputation() {
        let t = 17;
        let d = 5;
        let h: Vec<Vec<f64>> = (0..t)
            .map(|i| {
                (0..d)
                    .map(|j| ((i * d + j) as f64 * 0.7311).sin() * 2.0)
                    .collect()
            })
            .collect();
        let flux = feature_flux(&h).unwrap();
        for j in 0..d {
            let diffs: Vec<f64> = (1..t).map(|i| (h[i][j] - h[i - 1][j]).abs()).collect();
            let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
            let var = diffs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / diffs.len() as f64;
            assert!((flux[j] - var.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn texture_cues_shapes_and_mean() {
        let t = 12;
        let d = 4;
        let h: Vec<Vec<f64>> = (0..t)
            .map(|i| (0..d).map(|j| ((i + j) as f64 * 0.37).cos()).collect())
            .collect();
        let cues = TextureCues::from_features(&h).unwrap();
        assert_eq!(cues.psi.len(), t);
        assert_eq!(cues.psi_bar.len(), d);
        assert_eq!(cues.flux.len(), d);
        for j in 0..d {
            let mean = cues.psi.iter().map(|row| row[j]).sum::<f64>() / t as f64;
            assert!((mean - cues.psi_bar[j]).abs() < 1e-12);
            assert!(cues.psi.iter().all(|row| row[j] >= 0.0));
        }
    }
}
