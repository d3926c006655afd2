use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::SimError;
use crate::trace::Trace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PulseShape {
    #[serde(rename = "HANN_MONOPULSE")]
    HannMonopulse,
    #[serde(rename = "GAUSSIAN")]
    Gaussian,
}

/// Probe pulse emitted by a speaker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseSpec {
    pub shape: PulseShape,
    /// Total support of the pulse, s.
    #[serde(rename = "width_s")]
    pub width: f64,
    /// Peak pressure, Pa.
    #[serde(rename = "amplitude_pa")]
    pub amplitude: f64,
}

impl Default for PulseSpec {
    fn default() -> Self {
        Self {
            shape: PulseShape::HannMonopulse,
            width: 1e-3,
            amplitude: 1.0,
        }
    }
}

impl PulseSpec {
    pub fn validate(&self, fs: f64) -> Result<(), SimError> {
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return Err(SimError::InvalidAmplitude(self.amplitude));
        }
        if !(self.width * fs >= 2.0) {
            return Err(SimError::WidthBelowTwoSamples {
                width: self.width,
                fs,
            });
        }
        Ok(())
    }

    /// Continuous pulse value `tau` seconds after the pulse starts.
    /// Zero outside `[0, width]`; the peak sits at `width / 2`.
    pub fn value_at(&self, tau: f64) -> f64 {
        if !(0.0..=self.width).contains(&tau) {
            return 0.0;
        }
        match self.shape {
            PulseShape::HannMonopulse => self.amplitude * 0.5 * (1.0 - (2.0 * PI * tau / self.width).cos()),
            PulseShape::Gaussian => {
                let sigma = self.width / 6.0;
                let z = (tau - 0.5 * self.width) / sigma;
                self.amplitude * (-0.5 * z * z).exp()
            }
        }
    }
}

/// Samples the pulse at `fs`: `round(width * fs)` samples starting at the
/// pulse onset, so a Hann pulse peaks exactly at the middle sample.
pub fn synthesize_pulse(spec: &PulseSpec, fs: f64) -> Result<Trace, SimError> {
    spec.validate(fs)?;
    let n = (spec.width * fs).round() as usize;
    let samples = (0..n).map(|k| spec.value_at(k as f64 / fs)).collect();
    Ok(Trace::new(samples, fs, 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hann_one_ms_at_48k() {
        let t = synthesize_pulse(&PulseSpec::default(), 48_000.0).unwrap();
        assert_eq!(t.len(), 48);
        let (imax, vmax) = t
            .samples
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        assert_eq!(imax, 24);
        assert!((vmax - 1.0).abs() < 1e-15);
        // Closed-form raised cosine.
        for (k, v) in t.samples.iter().enumerate() {
            let expect = 0.5 * (1.0 - (2.0 * PI * k as f64 / 48.0).cos());
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_amplitude_rejected() {
        let spec = PulseSpec {
            amplitude: 0.0,
            ..PulseSpec::default()
        };
        assert!(matches!(synthesize_pulse(&spec, 48_000.0), Err(SimError::InvalidAmplitude(_))));
    }

    #[test]
    fn too_narrow_rejected() {
        let spec = PulseSpec {
            width: 20e-6,
            ..PulseSpec::default()
        };
        assert!(matches!(
            synthesize_pulse(&spec, 48_000.0),
            Err(SimError::WidthBelowTwoSamples { .. })
        ));
    }

    #[test]
    fn gaussian_peak_centered() {
        let spec = PulseSpec {
            shape: PulseShape::Gaussian,
            width: 1e-3,
            amplitude: 2.0,
        };
        let t = synthesize_pulse(&spec, 48_000.0).unwrap();
        assert!((t.samples[24] - 2.0).abs() < 1e-12);
        assert!(t.samples[0] < 0.03);
    }
}
