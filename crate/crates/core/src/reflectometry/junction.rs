//! Junction class curves `R_E = alpha * exp(beta * d)` and their training rig.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::pulses::{detect_pulses, pulse_energy_ratio};
use super::ReflectometryError;
use crate::network::{build_network, JunctionDesc, JunctionKind, MediumSpec, NetworkDesc, SegmentDesc, TerminalDesc, TerminalId};
use crate::sim::{simulate, PulseSpec, SimConfig, SourceEvent};
use crate::trace::Trace;

/// Least-squares fit of `ln R = ln alpha + beta d`.
pub fn fit_exponential(samples: &[(f64, f64)]) -> Result<(f64, f64), ReflectometryError> {
    if let Some(&(_, r)) = samples.iter().find(|(_, r)| !(*r > 0.0 && r.is_finite())) {
        return Err(ReflectometryError::NonPositiveRatio(r));
    }
    let n = samples.len() as f64;
    let md = samples.iter().map(|s| s.0).sum::<f64>() / n;
    let ml = samples.iter().map(|s| s.1.ln()).sum::<f64>() / n;
    let sxx: f64 = samples.iter().map(|s| (s.0 - md).powi(2)).sum();
    if samples.len() < 2 || !(sxx > 1e-12 * (1.0 + md * md)) {
        return Err(ReflectometryError::DegenerateSamples);
    }
    let sxy: f64 = samples.iter().map(|s| (s.0 - md) * (s.1.ln() - ml)).sum();
    let beta = sxy / sxx;
    Ok(((ml - beta * md).exp(), beta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassCurve {
    pub alpha: f64,
    pub beta: f64,
    /// RMS log-domain residual of the training samples.
    pub residual_spread: f64,
}

impl ClassCurve {
    pub fn residual(&self, distance: f64, ratio: f64) -> f64 {
        (ratio.ln() - (self.alpha.ln() + self.beta * distance)).abs()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JunctionModels {
    pub classes: BTreeMap<JunctionKind, ClassCurve>,
}

impl JunctionModels {
    pub fn fit(samples: &BTreeMap<JunctionKind, Vec<(f64, f64)>>) -> Result<Self, ReflectometryError> {
        let mut classes = BTreeMap::new();
        for (&kind, s) in samples {
            let (alpha, beta) = fit_exponential(s)?;
            let curve = ClassCurve {
                alpha,
                beta,
                residual_spread: 0.0,
            };
            let spread = (s.iter().map(|&(d, r)| curve.residual(d, r).powi(2)).sum::<f64>() / s.len() as f64).sqrt();
            classes.insert(
                kind,
                ClassCurve {
                    residual_spread: spread,
                    ..curve
                },
            );
        }
        Ok(Self { classes })
    }
}

/// Class whose curve is closest in log energy at the observed distance.
pub fn classify_junction(distance: f64, ratio: f64, models: &JunctionModels) -> Result<(JunctionKind, f64), ReflectometryError> {
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(ReflectometryError::NonPositiveRatio(ratio));
    }
    let mut best: Option<(JunctionKind, f64)> = None;
    for kind in JunctionKind::ALL {
        let curve = models.classes.get(&kind).ok_or(ReflectometryError::UntrainedModel(kind))?;
        let r = curve.residual(distance, ratio);
        if best.is_none_or(|(_, b)| r < b) {
            best = Some((kind, r));
        }
    }
    Ok(best.expect("five classes"))
}

// ---------------------------------------------------------------------------
// Feature extraction and simulated training.

/// Energy ratio of the first reversed-polarity echo found near `distance`
/// (one-way, from the mic) relative to the injected pulse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointFeature {
    pub distance: f64,
    pub energy_ratio: f64,
}

pub fn joint_feature(
    r: &Trace,
    expected_distance: f64,
    c: f64,
    min_separation: f64,
    threshold_mads: f64,
    tolerance: f64,
) -> Option<JointFeature> {
    let events = detect_pulses(r, min_separation, threshold_mads);
    let max_energy = events.iter().fold(0.0f64, |m, e| m.max(e.energy));
    let inj = events.iter().find(|e| e.energy >= 0.5 * max_energy)?;
    let joint = events.iter().filter(|e| e.lag_samples > inj.lag_samples && e.polarity < 0).find(|e| {
        let d = (e.lag_samples - inj.lag_samples) as f64 * c / r.fs / 2.0;
        (d - expected_distance).abs() <= tolerance
    })?;
    let ratio = pulse_energy_ratio(r, inj.window.clone(), joint.window.clone()).ok()?;
    Some(JointFeature {
        distance: (joint.lag_samples - inj.lag_samples) as f64 * c / r.fs / 2.0,
        energy_ratio: ratio,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingRig {
    pub medium: MediumSpec,
    pub pipe_diameter: f64,
    pub mic_speaker_distance: f64,
    pub speaker_reflection: f64,
    pub pulse: PulseSpec,
    pub fs: f64,
    pub threshold_mads: f64,
    /// Mic noise during the sweep, Pa RMS.
    pub noise_floor: f64,
    /// Simulations per (class, distance) pair.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for TrainingRig {
    fn default() -> Self {
        Self {
            medium: MediumSpec {
                attenuation_per_meter: 0.02,
                ..MediumSpec::default()
            },
            pipe_diameter: 0.0254,
            mic_speaker_distance: 0.3,
            speaker_reflection: 0.7,
            pulse: PulseSpec::default(),
            fs: 48_000.0,
            threshold_mads: 8.0,
            noise_floor: 0.0,
            repeats: 1,
            seed: 0,
        }
    }
}

/// Probe terminal on a straight pipe of length `distance` into a run port of
/// the junction; every other port leads to an anechoic termination.
pub fn rig_network(kind: JunctionKind, distance: f64, rig: &TrainingRig) -> NetworkDesc {
    let d = rig.pipe_diameter;
    let outlet = 2.0 * distance + 5.0;
    let mut segments = vec![SegmentDesc {
        id: "probe".into(),
        from: "P".into(),
        to: "J".into(),
        length_m: distance,
        diameter_m: d,
    }];
    let branch = d * kind.branch_diameter_ratio();
    let outlets: Vec<f64> = match kind {
        JunctionKind::LBend1x1 => vec![d],
        JunctionKind::T1x1 | JunctionKind::T1x1_5 | JunctionKind::T1x2 => vec![d, branch],
        JunctionKind::Cross1x1 => vec![d, d, d],
    };
    let mut terminals = vec![TerminalDesc {
        id: "P".into(),
        mic_speaker_distance_m: rig.mic_speaker_distance,
        termination_reflection: rig.speaker_reflection,
    }];
    for (k, dia) in outlets.iter().enumerate() {
        let id = format!("O{k}");
        segments.push(SegmentDesc {
            id: format!("out{k}"),
            from: "J".into(),
            to: id.clone(),
            length_m: outlet,
            diameter_m: *dia,
        });
        terminals.push(TerminalDesc {
            id,
            mic_speaker_distance_m: rig.mic_speaker_distance,
            termination_reflection: 0.0,
        });
    }
    NetworkDesc {
        medium: rig.medium,
        segments,
        junctions: vec![JunctionDesc {
            id: "J".into(),
            kind,
            port_areas_m2: BTreeMap::new(),
        }],
        terminals,
        leaks: vec![],
    }
}

/// Simulated reflection trace at the rig's probe terminal.
pub fn rig_reflection(kind: JunctionKind, distance: f64, rig: &TrainingRig) -> Result<Trace, ReflectometryError> {
    let net = build_network(&rig_network(kind, distance, rig)).map_err(|e| ReflectometryError::Training(e.to_string()))?;
    let c = rig.medium.speed_of_sound;
    let cfg = SimConfig {
        fs: rig.fs,
        duration: (2.0 * distance + 2.0 * rig.mic_speaker_distance) / c + 4.0 * rig.pulse.width + 0.01,
        noise_floor: rig.noise_floor,
        rng_seed: rig.seed,
        ..SimConfig::default()
    };
    let src = [SourceEvent::SpeakerPulse {
        terminal: TerminalId(0),
        start_time: 0.0,
        pulse: rig.pulse,
    }];
    let out = simulate(&net, &src, &cfg).map_err(|e| ReflectometryError::Training(e.to_string()))?;
    Ok(out.into_iter().next().expect("probe terminal"))
}

pub fn rig_feature(kind: JunctionKind, distance: f64, rig: &TrainingRig) -> Result<JointFeature, ReflectometryError> {
    let r = rig_reflection(kind, distance, rig)?;
    let c = rig.medium.speed_of_sound;
    joint_feature(&r, distance, c, rig.pulse.width, rig.threshold_mads, 2.0 * c / rig.fs)
        .ok_or_else(|| ReflectometryError::Training(format!("no joint echo for {} at {distance} m", kind.label())))
}

/// Sweeps every class over `distances` (`rig.repeats` runs each) and fits
/// the curves. Each run gets its own seed derived from `rig.seed`.
pub fn train_junction_models(distances: &[f64], rig: &TrainingRig) -> Result<JunctionModels, ReflectometryError> {
    let mut samples = BTreeMap::new();
    for (k, kind) in JunctionKind::ALL.into_iter().enumerate() {
        let mut s = Vec::new();
        for (i, &d) in distances.iter().enumerate() {
            for r in 0..rig.repeats.max(1) {
                let run = TrainingRig {
                    seed: rig.seed.wrapping_add(((k * 10_000 + i) * 100 + r) as u64),
                    ..*rig
                };
                let f = rig_feature(kind, d, &run)?;
                s.push((f.distance, f.energy_ratio));
            }
        }
        samples.insert(kind, s);
    }
    JunctionModels::fit(&samples)
}
