//! Echo suppression applied to node traces before imaging.

use serde::{Deserialize, Serialize};

use super::ImagingError;
use crate::reflectometry::{detect_pulses, PulseEvent};
use crate::trace::Trace;

/// One reflected copy `alpha * s(t - tau)` riding on the signal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Echo {
    pub alpha: f64,
    /// Delay after the direct arrival, s.
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FilterSpec {
    Identity,
    /// One echo list per node.
    IdealEcho { echoes: Vec<Vec<Echo>> },
    /// One trained channel per node (that node as the receiver).
    Adaptive { estimates: Vec<ChannelEstimate> },
}

impl FilterSpec {
    /// Applies the filter belonging to `node`.
    pub fn apply(&self, node: usize, trace: &Trace) -> Result<Trace, ImagingError> {
        match self {
            FilterSpec::Identity => Ok(trace.clone()),
            FilterSpec::IdealEcho { echoes } => {
                let e = echoes.get(node).ok_or(ImagingError::MissingFilter(node))?;
                ideal_echo_filter(trace, e)
            }
            FilterSpec::Adaptive { estimates } => {
                let e = estimates.get(node).ok_or(ImagingError::MissingFilter(node))?;
                adaptive_echo_filter(trace, e)
            }
        }
    }

    pub fn node_count(&self) -> Option<usize> {
        match self {
            FilterSpec::Identity => None,
            FilterSpec::IdealEcho { echoes } => Some(echoes.len()),
            FilterSpec::Adaptive { estimates } => Some(estimates.len()),
        }
    }
}

fn check_echo(e: &Echo) -> Result<(), ImagingError> {
    if !(e.alpha.abs() < 1.0) {
        return Err(ImagingError::UnstableAlpha(e.alpha));
    }
    if !(e.tau > 0.0 && e.tau.is_finite()) {
        return Err(ImagingError::NonPositiveTau(e.tau));
    }
    Ok(())
}

/// Inverts `p = s + alpha s(t - tau)` with `y[n] = p[n] - alpha y[n - tau]`,
/// one recursion per echo in ascending delay. Delays are rounded to whole
/// samples.
pub fn ideal_echo_filter(trace: &Trace, echoes: &[Echo]) -> Result<Trace, ImagingError> {
    echoes.iter().try_for_each(check_echo)?;
    let mut sorted = echoes.to_vec();
    sorted.sort_by(|a, b| a.tau.total_cmp(&b.tau));
    let mut y = trace.samples.clone();
    for e in &sorted {
        let lag = ((e.tau * trace.fs).round() as usize).max(1);
        for n in lag..y.len() {
            y[n] -= e.alpha * y[n - lag];
        }
    }
    Ok(trace.with_samples(y))
}

/// Least echo-to-direct correlation accepted as a speaker echo.
const MIN_ECHO_CORRELATION: f64 = 0.8;

/// Speaker echo of a receiving node from its transmission trace `t̄_ji`:
/// the echo sits `2 d_ii / c` after the direct arrival. The gain is the
/// least-squares projection of the samples one echo delay later onto the
/// direct pulse; the match must correlate well or no echo is reported.
pub fn estimate_echo_params(t_ji: &Trace, d_ii: f64, c: f64) -> Result<Echo, ImagingError> {
    let tau = 2.0 * d_ii / c;
    let lag = (tau * t_ji.fs).round() as usize;
    let events = detect_pulses(t_ji, tau.min(1e-3), 8.0);
    let max_energy = events.iter().fold(0.0f64, |m, e| m.max(e.energy));
    let direct: &PulseEvent = events
        .iter()
        .find(|e| e.energy > 0.0 && e.energy >= 0.5 * max_energy)
        .ok_or(ImagingError::EchoNotFound)?;
    let x = &t_ji.samples;
    let w = direct.window.clone();
    if lag == 0 || w.end + lag > x.len() {
        return Err(ImagingError::EchoNotFound);
    }
    let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
    for n in w {
        xy += x[n] * x[n + lag];
        xx += x[n] * x[n];
        yy += x[n + lag] * x[n + lag];
    }
    let rho = xy / (xx * yy).sqrt();
    let alpha = xy / xx;
    if !(rho.abs() >= MIN_ECHO_CORRELATION && alpha.abs() < 1.0) {
        return Err(ImagingError::EchoNotFound);
    }
    Ok(Echo { alpha, tau })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelEstimate {
    pub taps: Vec<f64>,
    /// Normalized misalignment against a known channel, dB; filled in by
    /// [`misalignment_db`] callers when the truth is known.
    pub misalignment_db: Option<f64>,
    pub source: usize,
    pub receiver: usize,
    pub fs: f64,
}

/// `20 log10(|h_est - h| / |h|)` over the longer of the two tap vectors.
pub fn misalignment_db(estimate: &[f64], truth: &[f64]) -> f64 {
    let n = estimate.len().max(truth.len());
    let at = |v: &[f64], k: usize| v.get(k).copied().unwrap_or(0.0);
    let err: f64 = (0..n).map(|k| (at(estimate, k) - at(truth, k)).powi(2)).sum();
    let norm: f64 = truth.iter().map(|v| v * v).sum();
    10.0 * (err / norm).log10()
}

const NLMS_REGULARIZATION: f64 = 1e-9;

/// Normalized LMS identification of `d = x * h + noise`.
pub fn nlms_train(x: &Trace, d: &Trace, taps: usize, step: f64) -> Result<ChannelEstimate, ImagingError> {
    if !(step > 0.0 && step < 2.0) {
        return Err(ImagingError::StepOutOfRange(step));
    }
    if taps == 0 {
        return Err(ImagingError::InvalidConfig("taps must be >= 1".into()));
    }
    if x.len() != d.len() || (x.fs - d.fs).abs() > 1e-9 * x.fs {
        return Err(ImagingError::WindowMismatch(format!(
            "reference {} samples at {} Hz, observation {} samples at {} Hz",
            x.len(),
            x.fs,
            d.len(),
            d.fs
        )));
    }
    let xs = &x.samples;
    let mut h = vec![0.0; taps];
    // Running energy of the regressor x[n], x[n-1], ..., x[n-taps+1].
    let mut power = 0.0;
    for n in 0..xs.len() {
        power += xs[n] * xs[n];
        if n >= taps {
            power -= xs[n - taps] * xs[n - taps];
        }
        let span = taps.min(n + 1);
        let mut y = 0.0;
        for k in 0..span {
            y += h[k] * xs[n - k];
        }
        let g = step * (d.samples[n] - y) / (power.max(0.0) + NLMS_REGULARIZATION);
        for k in 0..span {
            h[k] += g * xs[n - k];
        }
        // Refresh the running sum now and then to stop drift.
        if n % 4096 == 4095 {
            power = xs[n + 1 - span..=n].iter().map(|v| v * v).sum();
        }
    }
    Ok(ChannelEstimate {
        taps: h,
        misalignment_db: None,
        source: 0,
        receiver: 0,
        fs: x.fs,
    })
}

/// Echo taps relative to the direct path: the dominant tap is the direct
/// path, and every later local maximum of |h| above 5 % of it (outside the
/// direct tap's own lobe) is an echo.
pub fn extract_echoes(estimate: &ChannelEstimate) -> Result<Vec<Echo>, ImagingError> {
    let h = &estimate.taps;
    let (direct, &peak) = h
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
        .ok_or(ImagingError::NoDirectPath)?;
    if !(peak.abs() > 0.0) {
        return Err(ImagingError::NoDirectPath);
    }
    let floor = 0.05 * peak.abs();
    // The direct lobe: contiguous taps above the floor next to the peak.
    let mut lobe_end = direct + 1;
    while lobe_end < h.len() && h[lobe_end].abs() > floor && lobe_end - direct <= 2 {
        lobe_end += 1;
    }
    let mut echoes = Vec::new();
    for k in lobe_end..h.len() {
        let a = h[k].abs();
        let left = h[k - 1].abs();
        let right = h.get(k + 1).map_or(0.0, |v| v.abs());
        if a > floor && a > left && a >= right {
            echoes.push(Echo {
                alpha: h[k] / peak,
                tau: (k - direct) as f64 / estimate.fs,
            });
        }
    }
    Ok(echoes)
}

/// Cascade of ideal cancelers built from the echoes in a trained channel.
pub fn adaptive_echo_filter(trace: &Trace, estimate: &ChannelEstimate) -> Result<Trace, ImagingError> {
    let echoes = extract_echoes(estimate)?;
    ideal_echo_filter(trace, &echoes)
}
