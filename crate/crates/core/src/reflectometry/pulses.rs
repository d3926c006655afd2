use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::correlate::correlate_samples;
use super::ReflectometryError;
use crate::dsp::mad;
use crate::trace::Trace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PulseLabel {
    Injected,
    Terminal,
    Joint,
    SpeakerEcho,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseEvent {
    /// Absolute time of the extremum, s.
    pub time: f64,
    pub lag_samples: usize,
    pub polarity: i8,
    pub peak: f64,
    /// Sum of squares over the window, Pa² per sample.
    pub energy: f64,
    pub label: PulseLabel,
    pub window: Range<usize>,
}

/// Ignore extrema smaller than this fraction of the global peak; keeps
/// floating-point dust out of noiseless traces.
const RELATIVE_FLOOR: f64 = 1e-9;

/// Local extrema of |x| above `threshold_mads * MAD(x)`, picked greedily
/// by magnitude with a `min_separation` exclusion zone. Returned in time order.
pub fn detect_pulses(trace: &Trace, min_separation: f64, threshold_mads: f64) -> Vec<PulseEvent> {
    let x = &trace.samples;
    let n = x.len();
    if n < 3 {
        return Vec::new();
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let threshold = (threshold_mads * mad(x)).max(RELATIVE_FLOOR * peak);
    if peak == 0.0 {
        return Vec::new();
    }
    let mut candidates: Vec<usize> = (0..n)
        .filter(|&i| {
            let a = x[i].abs();
            a > threshold && (i == 0 || a >= x[i - 1].abs()) && (i + 1 == n || a > x[i + 1].abs())
        })
        .collect();
    candidates.sort_by(|&a, &b| x[b].abs().total_cmp(&x[a].abs()).then(a.cmp(&b)));
    let sep = (min_separation * trace.fs).round() as usize;
    let mut chosen: Vec<usize> = Vec::new();
    for c in candidates {
        if chosen.iter().all(|&k| k.abs_diff(c) >= sep.max(1)) {
            chosen.push(c);
        }
    }
    chosen.sort_unstable();
    chosen
        .into_iter()
        .map(|i| {
            let cut = 0.1 * x[i].abs();
            let mut lo = i;
            while lo > 0 && x[lo - 1].abs() > cut && x[lo - 1].signum() == x[i].signum() {
                lo -= 1;
            }
            let mut hi = i + 1;
            while hi < n && x[hi].abs() > cut && x[hi].signum() == x[i].signum() {
                hi += 1;
            }
            PulseEvent {
                time: trace.start_time + i as f64 / trace.fs,
                lag_samples: i,
                polarity: if x[i] >= 0.0 { 1 } else { -1 },
                peak: x[i],
                energy: x[lo..hi].iter().map(|v| v * v).sum(),
                label: PulseLabel::Unknown,
                window: lo..hi,
            }
        })
        .collect()
}

/// Labels detected events in a reflection trace.
///
/// Round-trip distances are measured from the injected pulse. Terminal echoes
/// from node j sit at `2 * d̂_ij` (mic of i to speaker of j and back).
/// `tolerance` applies to one-way distances.
pub fn label_pulses(
    events: &[PulseEvent],
    d_ii: f64,
    terminal_distances: &[f64],
    c: f64,
    fs: f64,
    tolerance: f64,
) -> Result<Vec<PulseEvent>, ReflectometryError> {
    let max_energy = events.iter().fold(0.0f64, |m, e| m.max(e.energy));
    let injected = events
        .iter()
        .position(|e| e.energy > 0.0 && e.energy >= 0.5 * max_energy)
        .ok_or(ReflectometryError::NoInjectedPulse)?;
    let mut out = events.to_vec();
    let lag0 = events[injected].lag_samples as f64;
    let round_trip = |e: &PulseEvent| (e.lag_samples as f64 - lag0) * c / fs;
    let rt_tol = 2.0 * tolerance;
    out[injected].label = PulseLabel::Injected;
    for k in injected + 1..out.len() {
        let d = round_trip(&out[k]);
        if terminal_distances.iter().any(|&dij| (d - 2.0 * dij).abs() <= rt_tol) {
            out[k].label = PulseLabel::Terminal;
        }
    }
    for k in injected + 1..out.len() {
        if out[k].label != PulseLabel::Unknown {
            continue;
        }
        let d = round_trip(&out[k]);
        let echo = (injected..k).any(|m| (d - round_trip(&out[m]) - 2.0 * d_ii).abs() <= rt_tol);
        if echo {
            out[k].label = PulseLabel::SpeakerEcho;
        }
    }
    let first_terminal = out
        .iter()
        .position(|e| e.label == PulseLabel::Terminal)
        .unwrap_or(out.len());
    for e in out[injected + 1..first_terminal].iter_mut() {
        if e.label == PulseLabel::Unknown && e.polarity < 0 {
            e.label = PulseLabel::Joint;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointSearch {
    pub threshold_mads: f64,
    /// Negative peaks must also exceed this fraction of R[0].
    pub min_relative: f64,
    /// Lags shorter than this are part of the zero-lag lobe, s.
    pub min_lag: f64,
    /// When set, drop a negative peak lying `2 d_ii` after a stronger one
    /// (the speaker echo of a joint echo correlated with the injected pulse).
    pub speaker_distance: Option<f64>,
}

impl Default for JointSearch {
    fn default() -> Self {
        Self {
            threshold_mads: 8.0,
            min_relative: 0.05,
            min_lag: 1e-3,
            speaker_distance: None,
        }
    }
}

/// Distances to reflecting joints from the negative peaks of r̄'s
/// autocorrelation; ascending.
pub fn estimate_joint_distances(r: &Trace, c: f64, opts: &JointSearch) -> Vec<f64> {
    let ac = correlate_samples(&r.samples, &r.samples);
    if ac.is_empty() || ac[0] <= 0.0 {
        return Vec::new();
    }
    let threshold = (opts.threshold_mads * mad(&ac)).max(opts.min_relative * ac[0]);
    let min_lag = ((opts.min_lag * r.fs).round() as usize).max(1);
    let mut peaks: Vec<usize> = (min_lag..ac.len().saturating_sub(1))
        .filter(|&m| ac[m] < -threshold && ac[m] <= ac[m - 1] && ac[m] < ac[m + 1])
        .collect();
    if let Some(d_ii) = opts.speaker_distance {
        let shift = 2.0 * d_ii / c * r.fs;
        let tol = 2.0;
        let original = peaks.clone();
        peaks.retain(|&m| {
            !original
                .iter()
                .any(|&p| p < m && ac[p] < ac[m] && (m as f64 - p as f64 - shift).abs() <= tol)
        });
    }
    peaks.into_iter().map(|m| c / r.fs * m as f64 / 2.0).collect()
}

/// Ratio of mean squared pressure in the reflected window to that in the
/// injected window.
pub fn pulse_energy_ratio(trace: &Trace, injected: Range<usize>, reflected: Range<usize>) -> Result<f64, ReflectometryError> {
    let n = trace.len();
    for w in [&injected, &reflected] {
        if w.len() < 2 || w.end > n {
            return Err(ReflectometryError::EmptyWindow(w.clone()));
        }
    }
    let ms = |w: &Range<usize>| trace.samples[w.clone()].iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
    let inj = ms(&injected);
    if inj == 0.0 {
        return Err(ReflectometryError::ZeroInjectedEnergy);
    }
    Ok(ms(&reflected) / inj)
}
