//! Band-limited leak noise.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::trace::Trace;

/// Samples discarded at the start of filtered noise so the filters settle.
const WARMUP: usize = 4096;

/// Direct-form-I biquad (RBJ cookbook coefficients).
#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
    x: [f64; 2],
    y: [f64; 2],
}

impl Biquad {
    fn new(b: [f64; 3], a0: f64, a1: f64, a2: f64) -> Self {
        Self {
            b: [b[0] / a0, b[1] / a0, b[2] / a0],
            a: [a1 / a0, a2 / a0],
            x: [0.0; 2],
            y: [0.0; 2],
        }
    }

    fn lowpass(fc: f64, fs: f64) -> Self {
        let w0 = 2.0 * PI * fc / fs;
        let alpha = w0.sin() / (2.0 * std::f64::consts::FRAC_1_SQRT_2);
        let c = w0.cos();
        Self::new([(1.0 - c) / 2.0, 1.0 - c, (1.0 - c) / 2.0], 1.0 + alpha, -2.0 * c, 1.0 - alpha)
    }

    fn highpass(fc: f64, fs: f64) -> Self {
        let w0 = 2.0 * PI * fc / fs;
        let alpha = w0.sin() / (2.0 * std::f64::consts::FRAC_1_SQRT_2);
        let c = w0.cos();
        Self::new([(1.0 + c) / 2.0, -(1.0 + c), (1.0 + c) / 2.0], 1.0 + alpha, -2.0 * c, 1.0 - alpha)
    }

    fn process(&mut self, x: f64) -> f64 {
        let y = self.b[0] * x + self.b[1] * self.x[0] + self.b[2] * self.x[1] - self.a[0] * self.y[0] - self.a[1] * self.y[1];
        self.x = [x, self.x[0]];
        self.y = [y, self.y[0]];
        y
    }
}

/// White Gaussian noise through a 4th-order band-pass (2nd-order Butterworth
/// high-pass at `low` cascaded with a 2nd-order Butterworth low-pass at
/// `high`), scaled to exactly `rms`.
pub fn band_limited_noise(len: usize, fs: f64, low: f64, high: f64, rms: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let high = high.min(0.45 * fs);
    let mut hp = Biquad::highpass(low, fs);
    let mut lp = Biquad::lowpass(high, fs);
    let mut out = Vec::with_capacity(len);
    for i in 0..len + WARMUP {
        let w: f64 = StandardNormal.sample(rng);
        let y = lp.process(hp.process(w));
        if i >= WARMUP {
            out.push(y);
        }
    }
    let cur = (out.iter().map(|x| x * x).sum::<f64>() / len.max(1) as f64).sqrt();
    if cur > 0.0 {
        let g = rms / cur;
        out.iter_mut().for_each(|x| *x *= g);
    }
    out
}

/// Recording setup for a reference leak signature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeakSignatureConfig {
    pub fs: f64,
    pub duration: f64,
    /// RMS of the signature at the reference pressure and hole area, Pa.
    pub reference_rms: f64,
    pub reference_pressure_psi: f64,
    pub reference_hole_area: f64,
    pub band_low_hz: f64,
    pub band_high_hz: f64,
    pub seed: u64,
}

impl Default for LeakSignatureConfig {
    fn default() -> Self {
        Self {
            fs: 48_000.0,
            duration: 1.0,
            reference_rms: 0.05,
            reference_pressure_psi: 4.0,
            reference_hole_area: 7.85e-7,
            band_low_hz: 300.0,
            band_high_hz: 8_000.0,
            seed: 0,
        }
    }
}

/// Stationary leak noise whose RMS grows linearly with pressure and with the
/// square root of the hole area (flow through the hole scales with its area,
/// radiated power with the flow).
pub fn record_leak_signature(hole_area: f64, pressure_psi: f64, cfg: &LeakSignatureConfig) -> Result<Trace, SimError> {
    if !(hole_area > 0.0 && hole_area.is_finite()) {
        return Err(SimError::NonPositiveHoleArea(hole_area));
    }
    if !(pressure_psi > 0.0 && pressure_psi.is_finite()) {
        return Err(SimError::InvalidConfig(format!("pressure must be > 0 psi, got {pressure_psi}")));
    }
    if !(cfg.fs > 0.0 && cfg.duration > 0.0) {
        return Err(SimError::InvalidConfig("fs and duration must be > 0".into()));
    }
    let rms = cfg.reference_rms * (pressure_psi / cfg.reference_pressure_psi) * (hole_area / cfg.reference_hole_area).sqrt();
    let len = (cfg.duration * cfg.fs).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let samples = band_limited_noise(len, cfg.fs, cfg.band_low_hz, cfg.band_high_hz, rms, &mut rng);
    Ok(Trace::new(samples, cfg.fs, 0.0))
}
