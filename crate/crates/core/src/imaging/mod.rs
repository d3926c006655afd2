//! Passive time-exposure imaging of leak noise along the pipes.

mod filters;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{ImagePoint, NetworkError, PipeNetwork, SegmentId, TerminalId};
use crate::trace::Trace;

pub use filters::{
    adaptive_echo_filter, estimate_echo_params, extract_echoes, ideal_echo_filter, misalignment_db, nlms_train,
    ChannelEstimate, Echo, FilterSpec,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImagingError {
    #[error("imaging needs at least two nodes, got {0}")]
    FewerThanTwoNodes(usize),
    #[error("node windows differ: {0}")]
    WindowMismatch(String),
    #[error("shifted window needs {needed} samples, trace has {available}")]
    WindowOutOfRange { needed: usize, available: usize },
    #[error("no realizations to average")]
    EmptyRealizationList,
    #[error("realization has {found} points, expected {expected}")]
    PointSetMismatch { expected: usize, found: usize },
    #[error("echo gain {0} is not inside (-1, 1)")]
    UnstableAlpha(f64),
    #[error("echo delay must be positive, got {0}")]
    NonPositiveTau(f64),
    #[error("no speaker echo found")]
    EchoNotFound,
    #[error("NLMS step {0} is outside (0, 2)")]
    StepOutOfRange(f64),
    #[error("channel estimate has no dominant tap")]
    NoDirectPath,
    #[error("no filter configured for node {0}")]
    MissingFilter(usize),
    #[error("invalid imaging config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagingConfig {
    pub speed_of_sound: f64,
    /// Attenuation compensation rate K, 1/s of travel time.
    pub atten_comp_rate: f64,
    /// Length of one realization window, s.
    pub segment_length: f64,
    pub realizations: usize,
    pub filter: FilterSpec,
    pub pixel_spacing: f64,
}

impl Default for ImagingConfig {
    fn default() -> Self {
        Self {
            speed_of_sound: 343.0,
            atten_comp_rate: 0.0,
            segment_length: 0.4,
            realizations: 100,
            filter: FilterSpec::Identity,
            pixel_spacing: 0.01,
        }
    }
}

impl ImagingConfig {
    pub fn validate(&self, fs: f64) -> Result<(), ImagingError> {
        let bad = |m: &str| Err(ImagingError::InvalidConfig(m.into()));
        if !(self.speed_of_sound > 0.0 && self.speed_of_sound.is_finite()) {
            return bad("speed_of_sound must be > 0");
        }
        if !(self.atten_comp_rate >= 0.0 && self.atten_comp_rate.is_finite()) {
            return bad("atten_comp_rate must be >= 0");
        }
        if self.realizations == 0 {
            return bad("realizations must be >= 1");
        }
        if !(self.segment_length * fs >= 16.0) {
            return bad("segment_length must span at least 16 samples");
        }
        if !(self.pixel_spacing > 0.0 && self.pixel_spacing.is_finite()) {
            return bad("pixel_spacing must be > 0");
        }
        Ok(())
    }

    /// Samples per realization window.
    pub fn window_samples(&self, fs: f64) -> usize {
        (self.segment_length * fs).round() as usize
    }
}

/// Integer advance, fractional remainder and gain for one backprojection.
#[derive(Debug, Clone, Copy)]
struct Shift {
    whole: usize,
    frac: f64,
    gain: f64,
}

impl Shift {
    fn new(distance: f64, fs: f64, cfg: &ImagingConfig) -> Self {
        let travel = distance / cfg.speed_of_sound;
        let s = travel * fs;
        let whole = s.floor();
        Self {
            whole: whole as usize,
            frac: s - whole,
            gain: (cfg.atten_comp_rate * travel).exp(),
        }
    }

    /// Samples the shifted window reads.
    fn needs(&self, len: usize) -> usize {
        self.whole + len + usize::from(self.frac > 0.0)
    }

    #[inline]
    fn at(&self, x: &[f64], n: usize) -> f64 {
        let i = self.whole + n;
        if self.frac > 0.0 {
            self.gain * (x[i] + self.frac * (x[i + 1] - x[i]))
        } else {
            self.gain * x[i]
        }
    }
}

/// Advances `trace` by `distance / c` (linear interpolation for the
/// fractional part) and applies the gain `exp(K distance / c)`; returns
/// `len` samples.
pub fn backpropagate(trace: &Trace, distance: f64, len: usize, cfg: &ImagingConfig) -> Result<Vec<f64>, ImagingError> {
    if !(distance >= 0.0 && distance.is_finite()) {
        return Err(ImagingError::InvalidConfig(format!("distance must be >= 0, got {distance}")));
    }
    let s = Shift::new(distance, trace.fs, cfg);
    let needed = s.needs(len);
    if needed > trace.len() {
        return Err(ImagingError::WindowOutOfRange {
            needed,
            available: trace.len(),
        });
    }
    Ok((0..len).map(|n| s.at(&trace.samples, n)).collect())
}

/// Per node, the along-pipe distance from its mic to every image point.
pub fn distance_table(net: &PipeNetwork, nodes: &[TerminalId], points: &[ImagePoint]) -> Result<Vec<Vec<f64>>, ImagingError> {
    nodes
        .iter()
        .map(|&t| {
            let mic = net.terminal_point(t);
            points
                .iter()
                .map(|p| net.path_distance(mic, p.point()).map_err(ImagingError::from))
                .collect()
        })
        .collect()
}

/// Checks the node windows and returns the window length in samples.
fn check_windows(traces: &[Trace], points: &[ImagePoint], distances: &[Vec<f64>], cfg: &ImagingConfig) -> Result<usize, ImagingError> {
    if traces.len() < 2 {
        return Err(ImagingError::FewerThanTwoNodes(traces.len()));
    }
    let first = &traces[0];
    for t in &traces[1..] {
        if t.len() != first.len() || (t.fs - first.fs).abs() > 1e-9 * first.fs || (t.start_time - first.start_time).abs() > 0.5 / first.fs {
            return Err(ImagingError::WindowMismatch(format!(
                "{} samples at {} Hz from {} s vs {} samples at {} Hz from {} s",
                first.len(),
                first.fs,
                first.start_time,
                t.len(),
                t.fs,
                t.start_time
            )));
        }
    }
    if distances.len() != traces.len() {
        return Err(ImagingError::WindowMismatch(format!(
            "{} distance rows for {} nodes",
            distances.len(),
            traces.len()
        )));
    }
    if let Some(row) = distances.iter().find(|r| r.len() != points.len()) {
        return Err(ImagingError::PointSetMismatch {
            expected: points.len(),
            found: row.len(),
        });
    }
    cfg.validate(first.fs)?;
    let len = cfg.window_samples(first.fs);
    // The farthest shift must still fit inside the supplied traces.
    for row in distances {
        let far = row.iter().fold(0.0f64, |m, &d| m.max(d));
        let needed = Shift::new(far, first.fs, cfg).needs(len);
        if needed > first.len() {
            return Err(ImagingError::WindowOutOfRange {
                needed,
                available: first.len(),
            });
        }
    }
    Ok(len)
}

/// Unbiased image of one realization:
/// `sum_n ( (sum_i p_i[n])^2 - sum_i p_i[n]^2 )` per point.
pub fn image_realization(
    traces: &[Trace],
    points: &[ImagePoint],
    distances: &[Vec<f64>],
    cfg: &ImagingConfig,
) -> Result<Vec<f64>, ImagingError> {
    let len = check_windows(traces, points, distances, cfg)?;
    let fs = traces[0].fs;
    let mut sum = vec![0.0; len];
    let mut out = Vec::with_capacity(points.len());
    for p in 0..points.len() {
        sum.iter_mut().for_each(|v| *v = 0.0);
        let mut squares = 0.0;
        for (trace, row) in traces.iter().zip(distances) {
            let s = Shift::new(row[p], fs, cfg);
            let x = &trace.samples;
            for (n, acc) in sum.iter_mut().enumerate() {
                let v = s.at(x, n);
                *acc += v;
                squares += v * v;
            }
        }
        let total: f64 = sum.iter().map(|v| v * v).sum();
        out.push(total - squares);
    }
    Ok(out)
}

/// Biased image `sum_i sum_n p_i[n]^2` per point.
pub fn biased_image(
    traces: &[Trace],
    points: &[ImagePoint],
    distances: &[Vec<f64>],
    cfg: &ImagingConfig,
) -> Result<Vec<f64>, ImagingError> {
    let len = check_windows(traces, points, distances, cfg)?;
    let fs = traces[0].fs;
    Ok((0..points.len())
        .map(|p| {
            traces
                .iter()
                .zip(distances)
                .map(|(t, row)| {
                    let s = Shift::new(row[p], fs, cfg);
                    (0..len).map(|n| s.at(&t.samples, n).powi(2)).sum::<f64>()
                })
                .sum()
        })
        .collect())
}

/// Per-point arithmetic mean of the realizations.
pub fn average_image(realizations: &[Vec<f64>]) -> Result<Vec<f64>, ImagingError> {
    let first = realizations.first().ok_or(ImagingError::EmptyRealizationList)?;
    let mut mean = vec![0.0; first.len()];
    for r in realizations {
        if r.len() != first.len() {
            return Err(ImagingError::PointSetMismatch {
                expected: first.len(),
                found: r.len(),
            });
        }
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    let m = realizations.len() as f64;
    mean.iter_mut().for_each(|v| *v /= m);
    Ok(mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearImage {
    pub points: Vec<ImagePoint>,
    pub segment_names: Vec<String>,
    pub intensities: Vec<f64>,
    pub realizations: usize,
    pub config: ImagingConfig,
}

impl LinearImage {
    /// `segment_id,arc_m,intensity`, one row per pixel.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("segment_id,arc_m,intensity\n");
        for (p, v) in self.points.iter().zip(&self.intensities) {
            let name = self.segment_names.get(p.segment.0).map_or_else(|| p.segment.to_string(), Clone::clone);
            writeln!(s, "{name},{:.6},{:.12e}", p.arc, v).expect("writing to a String");
        }
        s
    }

    pub fn peak_index(&self) -> usize {
        argmax(&self.intensities)
    }

    /// Mean intensity over the pixels of one segment.
    pub fn segment_mean(&self, segment: SegmentId) -> Option<f64> {
        let v: Vec<f64> = self
            .points
            .iter()
            .zip(&self.intensities)
            .filter(|(p, _)| p.segment == segment)
            .map(|(_, &v)| v)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Pixelates `net`, filters every node record, then averages `M`
/// realizations over consecutive windows of the records.
///
/// Window `j` covers `[j L, (j + 1) L)` of each record, plus the lookahead
/// the farthest point needs.
pub fn form_image(records: &[Trace], net: &PipeNetwork, nodes: &[TerminalId], cfg: &ImagingConfig) -> Result<LinearImage, ImagingError> {
    if records.len() != nodes.len() {
        return Err(ImagingError::WindowMismatch(format!(
            "{} records for {} nodes",
            records.len(),
            nodes.len()
        )));
    }
    if records.len() < 2 {
        return Err(ImagingError::FewerThanTwoNodes(records.len()));
    }
    if let Some(n) = cfg.filter.node_count() {
        if n != nodes.len() {
            return Err(ImagingError::MissingFilter(n.min(nodes.len())));
        }
    }
    let fs = records[0].fs;
    cfg.validate(fs)?;
    let points = net.pixelate(cfg.pixel_spacing)?;
    let distances = distance_table(net, nodes, &points)?;
    let filtered = records
        .iter()
        .enumerate()
        .map(|(i, r)| cfg.filter.apply(i, r))
        .collect::<Result<Vec<_>, _>>()?;
    let len = cfg.window_samples(fs);
    let far = distances.iter().flatten().fold(0.0f64, |m, &d| m.max(d));
    let span = Shift::new(far, fs, cfg).needs(len);
    let available = filtered.iter().map(Trace::len).min().unwrap_or(0);
    let needed = (cfg.realizations - 1) * len + span;
    if needed > available {
        return Err(ImagingError::WindowOutOfRange { needed, available });
    }
    let window_cfg = ImagingConfig {
        filter: FilterSpec::Identity,
        ..cfg.clone()
    };
    let mut mean = vec![0.0; points.len()];
    for j in 0..cfg.realizations {
        let windows: Vec<Trace> = filtered.iter().map(|t| t.slice(j * len, span)).collect();
        let img = image_realization(&windows, &points, &distances, &window_cfg)?;
        for (m, v) in mean.iter_mut().zip(img) {
            *m += v;
        }
    }
    let m = cfg.realizations as f64;
    mean.iter_mut().for_each(|v| *v /= m);
    log::debug!("imaged {} points over {} realizations", points.len(), cfg.realizations);
    Ok(LinearImage {
        points,
        segment_names: net.segments.iter().map(|s| s.name.clone()).collect(),
        intensities: mean,
        realizations: cfg.realizations,
        config: cfg.clone(),
    })
}

/// Listening time needed by [`form_image`] for `net` and `cfg`, s.
pub fn required_listening(net: &PipeNetwork, fs: f64, cfg: &ImagingConfig) -> f64 {
    let len = cfg.window_samples(fs);
    let far = net.diameter();
    let span = Shift::new(far, fs, cfg).needs(len) + 1;
    ((cfg.realizations - 1) * len + span) as f64 / fs
}

// ---------------------------------------------------------------------------
// Peak picking.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakHypothesis {
    pub segment: SegmentId,
    pub segment_name: String,
    pub arc: f64,
    pub point_index: usize,
    pub intensity: f64,
    /// Ratio to the next lower local maximum, dB, capped.
    pub prominence_db: f64,
    pub low_confidence: bool,
}

pub const MAX_PROMINENCE_DB: f64 = 120.0;
/// Hypotheses less prominent than this are flagged.
pub const LOW_CONFIDENCE_DB: f64 = 3.0;

fn ratio_db(a: f64, b: f64) -> f64 {
    if a <= 0.0 {
        0.0
    } else if b <= 0.0 {
        MAX_PROMINENCE_DB
    } else {
        (10.0 * (a / b).log10()).clamp(0.0, MAX_PROMINENCE_DB)
    }
}

/// Indices of the local maxima along each segment, strongest first.
pub fn local_maxima(image: &LinearImage) -> Vec<usize> {
    let pts = &image.points;
    let v = &image.intensities;
    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.sort_by(|&a, &b| pts[a].segment.cmp(&pts[b].segment).then(pts[a].arc.total_cmp(&pts[b].arc)));
    let mut maxima = Vec::new();
    for (k, &i) in order.iter().enumerate() {
        let same = |j: usize| pts[j].segment == pts[i].segment;
        let left = k.checked_sub(1).map(|q| order[q]).filter(|&j| same(j));
        let right = order.get(k + 1).copied().filter(|&j| same(j));
        if left.is_none_or(|j| v[i] > v[j]) && right.is_none_or(|j| v[i] >= v[j]) {
            maxima.push(i);
        }
    }
    maxima.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    maxima
}

/// The global maximum, plus any local maximum within `min_prominence_db`
/// of it.
pub fn detect_leaks(image: &LinearImage, min_prominence_db: f64) -> Vec<LeakHypothesis> {
    if image.points.is_empty() {
        return Vec::new();
    }
    let v = &image.intensities;
    let mut maxima = local_maxima(image);
    let global = argmax(v);
    if maxima.first() != Some(&global) {
        maxima.retain(|&i| i != global);
        maxima.insert(0, global);
    }
    let hypothesis = |rank: usize| {
        let i = maxima[rank];
        let next = maxima.get(rank + 1).map_or(0.0, |&j| v[j]);
        let prominence_db = ratio_db(v[i], next);
        let p = image.points[i];
        LeakHypothesis {
            segment: p.segment,
            segment_name: image.segment_names.get(p.segment.0).cloned().unwrap_or_else(|| p.segment.to_string()),
            arc: p.arc,
            point_index: i,
            intensity: v[i],
            prominence_db,
            low_confidence: v[i] <= 0.0 || prominence_db < LOW_CONFIDENCE_DB,
        }
    };
    let mut out = vec![hypothesis(0)];
    for rank in 1..maxima.len() {
        let i = maxima[rank];
        if v[i] > 0.0 && ratio_db(v[global], v[i]) <= min_prominence_db {
            out.push(hypothesis(rank));
        } else {
            break;
        }
    }
    out
}

/// Largest local maximum farther than `exclusion` (along the pipes) from the
/// global peak, relative to the global peak, dB. Capped at -120 dB when no
/// positive secondary peak exists.
pub fn secondary_peak_ratio_db(image: &LinearImage, net: &PipeNetwork, exclusion: f64) -> Result<f64, ImagingError> {
    let v = &image.intensities;
    let global = argmax(v);
    let g = image.points[global].point();
    let mut best = None;
    for i in local_maxima(image) {
        if net.path_distance(g, image.points[i].point())? > exclusion {
            best = Some(v[i]);
            break;
        }
    }
    Ok(match best {
        Some(s) if s > 0.0 && v[global] > 0.0 => 10.0 * (s / v[global]).log10(),
        _ => -MAX_PROMINENCE_DB,
    })
}
