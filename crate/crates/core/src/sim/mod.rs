//! Ray-traced acoustic simulation of a pipe network.

mod noise;
mod paths;
mod pulse;
mod scatter;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::fft_convolve;
use crate::network::{LeakId, PipeNetwork, TerminalId};
use crate::trace::Trace;

pub use noise::{band_limited_noise, record_leak_signature, LeakSignatureConfig};
pub use paths::{AcousticGraph, Arrival};
pub use pulse::{synthesize_pulse, PulseShape, PulseSpec};
pub use scatter::{scatter, scatter_with_loss};

/// RNG stream offset for leak noise so it never collides with mic noise.
const LEAK_STREAM_BASE: u64 = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("pulse width {width} s spans fewer than two samples at {fs} Hz")]
    WidthBelowTwoSamples { width: f64, fs: f64 },
    #[error("pulse amplitude must be positive, got {0}")]
    InvalidAmplitude(f64),
    #[error("scattering needs at least two ports, got {0}")]
    FewerThanTwoPorts(usize),
    #[error("expected {expected} incident amplitudes, found {found}")]
    PortCountMismatch { expected: usize, found: usize },
    #[error("area must be positive, got {0}")]
    NonPositiveArea(f64),
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("unknown source location: {0}")]
    UnknownSourceLocation(String),
    #[error("duration {duration} s does not cover source activity ending at {needed} s")]
    DurationTooShort { duration: f64, needed: f64 },
    #[error("waveform sampled at {found} Hz, simulation runs at {expected} Hz")]
    SampleRateMismatch { expected: f64, found: f64 },
    #[error("hole area must be positive, got {0}")]
    NonPositiveHoleArea(f64),
    #[error("echo enumeration exceeded {0} packets")]
    PathExplosion(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub fs: f64,
    pub duration: f64,
    /// Mic self-noise, Pa RMS.
    pub noise_floor: f64,
    pub rng_seed: u64,
    /// Echo paths weaker than this fraction of the source are dropped.
    pub amplitude_floor: f64,
    /// Longest echo tail kept for continuous sources, s.
    pub max_response: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            fs: 48_000.0,
            duration: 0.5,
            noise_floor: 0.0,
            rng_seed: 0,
            amplitude_floor: 1e-4,
            max_response: 1.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if !(self.fs > 0.0 && self.fs.is_finite()) {
            return bad("fs must be > 0");
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad("duration must be > 0");
        }
        if !(self.noise_floor >= 0.0 && self.noise_floor.is_finite()) {
            return bad("noise_floor must be >= 0");
        }
        if !(self.amplitude_floor > 0.0 && self.amplitude_floor < 1.0) {
            return bad("amplitude_floor must be in (0, 1)");
        }
        if !(self.max_response > 0.0) {
            return bad("max_response must be > 0");
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        (self.duration * self.fs).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SourceEvent {
    SpeakerPulse {
        terminal: TerminalId,
        start_time: f64,
        pulse: PulseSpec,
    },
    /// Arbitrary waveform played by a terminal's speaker.
    SpeakerWaveform {
        terminal: TerminalId,
        start_time: f64,
        waveform: Trace,
    },
    /// Continuous leak noise. Without a signature the noise is synthesized
    /// from the leak's level and band.
    LeakNoise {
        leak: LeakId,
        start_time: f64,
        signature: Option<Trace>,
    },
}

impl SourceEvent {
    pub fn start_time(&self) -> f64 {
        match self {
            SourceEvent::SpeakerPulse { start_time, .. }
            | SourceEvent::SpeakerWaveform { start_time, .. }
            | SourceEvent::LeakNoise { start_time, .. } => *start_time,
        }
    }
}

/// All echo arrivals heard at every terminal when `terminal`'s speaker emits
/// a unit impulse, up to `max_distance` of travel.
pub fn terminal_arrivals(
    net: &PipeNetwork,
    terminal: TerminalId,
    max_distance: f64,
    floor: f64,
) -> Result<Vec<Vec<Arrival>>, SimError> {
    let graph = AcousticGraph::build(net);
    graph.arrivals(&graph.speaker_emission(terminal.0), max_distance, floor)
}

/// Linear-interpolation impulse response, `delay0` in samples added to all arrivals.
fn taps(arrivals: &[Arrival], c: f64, fs: f64, delay0: f64) -> Vec<f64> {
    let Some(last) = arrivals.last() else {
        return Vec::new();
    };
    let len = (delay0 + last.distance / c * fs).floor() as usize + 2;
    let mut h = vec![0.0; len];
    for a in arrivals {
        let pos = delay0 + a.distance / c * fs;
        let k = pos.floor() as usize;
        let f = pos - k as f64;
        h[k] += a.amplitude * (1.0 - f);
        h[k + 1] += a.amplitude * f;
    }
    h
}

/// Simulates the mic recordings at every terminal (indexed by terminal id).
pub fn simulate(net: &PipeNetwork, sources: &[SourceEvent], cfg: &SimConfig) -> Result<Vec<Trace>, SimError> {
    cfg.validate()?;
    let n = cfg.samples();
    let fs = cfg.fs;
    let c = net.medium.speed_of_sound;
    let mut out = vec![vec![0.0; n]; net.terminals.len()];
    let graph = AcousticGraph::build(net);

    for src in sources {
        let start = src.start_time();
        if !(start >= 0.0 && start.is_finite()) {
            return Err(SimError::InvalidConfig(format!("source start time {start} must be >= 0")));
        }
        match src {
            SourceEvent::SpeakerPulse { terminal, pulse, .. } => {
                check_terminal(net, *terminal)?;
                pulse.validate(fs)?;
                let end = start + pulse.width;
                if end > cfg.duration {
                    return Err(SimError::DurationTooShort {
                        duration: cfg.duration,
                        needed: end,
                    });
                }
                let max_dist = c * (cfg.duration - start);
                let arrivals = graph.arrivals(&graph.speaker_emission(terminal.0), max_dist, cfg.amplitude_floor)?;
                for (trace, arr) in out.iter_mut().zip(&arrivals) {
                    for a in arr {
                        let onset = start + a.distance / c;
                        let first = (onset * fs).ceil().max(0.0) as usize;
                        let last = (((onset + pulse.width) * fs).floor() as usize).min(n.saturating_sub(1));
                        for k in first..=last.max(first) {
                            if k < n {
                                trace[k] += a.amplitude * pulse.value_at(k as f64 / fs - onset);
                            }
                        }
                    }
                }
            }
            SourceEvent::SpeakerWaveform { terminal, waveform, .. } => {
                check_terminal(net, *terminal)?;
                check_rate(fs, waveform)?;
                let end = start + waveform.len() as f64 / fs;
                if end > cfg.duration + 0.5 / fs {
                    return Err(SimError::DurationTooShort {
                        duration: cfg.duration,
                        needed: end,
                    });
                }
                let max_dist = c * cfg.max_response.min(cfg.duration - start);
                let arrivals = graph.arrivals(&graph.speaker_emission(terminal.0), max_dist, cfg.amplitude_floor)?;
                for (trace, arr) in out.iter_mut().zip(&arrivals) {
                    let h = taps(arr, c, fs, start * fs);
                    let y = fft_convolve(&waveform.samples, &h);
                    for (o, v) in trace.iter_mut().zip(y) {
                        *o += v;
                    }
                }
            }
            SourceEvent::LeakNoise { leak, signature, .. } => {
                let spec = net
                    .leaks
                    .get(leak.0)
                    .ok_or_else(|| SimError::UnknownSourceLocation(format!("leak {}", leak.0)))?;
                if start >= cfg.duration {
                    return Err(SimError::DurationTooShort {
                        duration: cfg.duration,
                        needed: start,
                    });
                }
                let max_dist = c * cfg.max_response;
                let arrivals = graph.arrivals(&graph.leak_emission(leak.0), max_dist, cfg.amplitude_floor)?;
                let pre = (cfg.max_response * fs).ceil() as usize + 2;
                // Source samples cover times (m - pre) / fs for m in 0..pre + n.
                let mut s = match signature {
                    Some(sig) => {
                        check_rate(fs, sig)?;
                        if sig.is_empty() {
                            return Err(SimError::InvalidConfig("empty leak signature".into()));
                        }
                        sig.samples.iter().copied().cycle().take(pre + n).collect::<Vec<_>>()
                    }
                    None => {
                        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
                        rng.set_stream(LEAK_STREAM_BASE + leak.0 as u64);
                        band_limited_noise(pre + n, fs, spec.band_low_hz, spec.band_high_hz, spec.source_level, &mut rng)
                    }
                };
                let onset = pre + (start * fs).round() as usize;
                if start > 0.0 {
                    s[..onset.min(pre + n)].iter_mut().for_each(|x| *x = 0.0);
                }
                for (trace, arr) in out.iter_mut().zip(&arrivals) {
                    let h = taps(arr, c, fs, 0.0);
                    if h.is_empty() {
                        continue;
                    }
                    let y = fft_convolve(&s, &h);
                    for (o, v) in trace.iter_mut().zip(&y[pre..]) {
                        *o += v;
                    }
                }
            }
        }
    }

    if cfg.noise_floor > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_floor).map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        for (k, trace) in out.iter_mut().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
            rng.set_stream(k as u64);
            for x in trace.iter_mut() {
                *x += normal.sample(&mut rng);
            }
        }
    }

    Ok(out.into_iter().map(|s| Trace::new(s, fs, 0.0)).collect())
}

fn check_terminal(net: &PipeNetwork, t: TerminalId) -> Result<(), SimError> {
    if t.0 < net.terminals.len() {
        Ok(())
    } else {
        Err(SimError::UnknownSourceLocation(format!("terminal {}", t.0)))
    }
}

fn check_rate(fs: f64, t: &Trace) -> Result<(), SimError> {
    if (t.fs - fs).abs() > 1e-9 * fs {
        Err(SimError::SampleRateMismatch { expected: fs, found: t.fs })
    } else {
        Ok(())
    }
}
