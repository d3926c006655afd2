//! Ground-truth pipe network model.
//!
//! A [`PipeNetwork`] is a validated tree of pipe segments whose ends attach to
//! junctions or to terminals (the metering points where sensor nodes live).
//! Leaks sit at arc positions on segments. All distances between points on the
//! network are along-pipe arc distances; since the graph is a tree they are
//! unique.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative tolerance used when checking that a point lies on a segment.
const ARC_EPS: f64 = 1e-9;

/// Area of the virtual non-returning side branch an L-bend fitting presents,
/// as a fraction of its mean port area. Models the dead volume and flow
/// separation of the bend so it reflects a small inverted pulse.
pub const BEND_LOSS_AREA_FRACTION: f64 = 0.25;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("network contains a cycle through segment `{0}`")]
    CycleDetected(String),
    #[error("segment `{segment}` end references unknown node `{node}`")]
    DanglingSegmentEnd { segment: String, node: String },
    #[error("junction `{junction}` of kind {kind} expects {expected} ports, found {found}")]
    PortCountMismatch {
        junction: String,
        kind: JunctionKind,
        expected: usize,
        found: usize,
    },
    #[error("non-positive geometry: {0}")]
    NonPositiveGeometry(String),
    #[error("terminal `{terminal}` must attach to exactly one segment end, found {found}")]
    TerminalAttachment { terminal: String, found: usize },
    #[error("network is not connected")]
    Disconnected,
    #[error("network needs at least two terminals, found {0}")]
    TooFewTerminals(usize),
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("unknown segment `{0}`")]
    UnknownSegment(String),
    #[error("invalid leak `{leak}`: {reason}")]
    InvalidLeak { leak: String, reason: String },
    #[error("invalid terminal `{terminal}`: {reason}")]
    InvalidTerminal { terminal: String, reason: String },
    #[error("invalid medium: {0}")]
    InvalidMedium(String),
    #[error("pixel spacing must be positive, got {0}")]
    NonPositiveSpacing(f64),
    #[error("cross-sectional areas must be positive (got {0}, {1})")]
    NonPositiveArea(f64, f64),
    #[error("point (segment {segment}, arc {arc} m) is not on the network")]
    PointOffNetwork { segment: usize, arc: f64 },
}

/// Acoustic medium filling the pipes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MediumSpec {
    #[serde(rename = "speed_of_sound_mps")]
    pub speed_of_sound: f64,
    #[serde(rename = "density_kgpm3")]
    pub density: f64,
    /// Amplitude decay rate, nepers per metre.
    #[serde(rename = "attenuation_per_m", default)]
    pub attenuation_per_meter: f64,
}

impl Default for MediumSpec {
    fn default() -> Self {
        Self {
            speed_of_sound: 343.0,
            density: 1.2,
            attenuation_per_meter: 0.0,
        }
    }
}

impl MediumSpec {
    fn validate(&self) -> Result<(), NetworkError> {
        if !(self.speed_of_sound > 0.0 && self.speed_of_sound.is_finite()) {
            return Err(NetworkError::InvalidMedium("speed_of_sound must be > 0".into()));
        }
        if !(self.density > 0.0 && self.density.is_finite()) {
            return Err(NetworkError::InvalidMedium("density must be > 0".into()));
        }
        if !(self.attenuation_per_meter >= 0.0 && self.attenuation_per_meter.is_finite()) {
            return Err(NetworkError::InvalidMedium("attenuation_per_m must be >= 0".into()));
        }
        Ok(())
    }
}

macro_rules! index_id {
    ($name:ident) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub struct $name(pub usize);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

index_id!(SegmentId);
index_id!(JunctionId);
index_id!(TerminalId);
index_id!(LeakId);

/// What a segment end is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeRef {
    Junction(JunctionId),
    Terminal(TerminalId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentEnd {
    Start,
    End,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipeSegment {
    pub id: SegmentId,
    pub name: String,
    pub length: f64,
    pub diameter: f64,
    pub cross_section_area: f64,
    /// `ends[0]` sits at arc 0, `ends[1]` at arc `length`.
    pub ends: [NodeRef; 2],
}

/// Pipe fittings the junction classifier knows about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum JunctionKind {
    #[serde(rename = "L_BEND_1x1")]
    LBend1x1,
    #[serde(rename = "T_1x1")]
    T1x1,
    #[serde(rename = "T_1x1_5")]
    T1x1_5,
    #[serde(rename = "T_1x2")]
    T1x2,
    #[serde(rename = "CROSS_1x1")]
    Cross1x1,
}

impl JunctionKind {
    pub const ALL: [JunctionKind; 5] = [
        JunctionKind::LBend1x1,
        JunctionKind::T1x1,
        JunctionKind::T1x1_5,
        JunctionKind::T1x2,
        JunctionKind::Cross1x1,
    ];

    pub fn port_count(self) -> usize {
        match self {
            JunctionKind::LBend1x1 => 2,
            JunctionKind::T1x1 | JunctionKind::T1x1_5 | JunctionKind::T1x2 => 3,
            JunctionKind::Cross1x1 => 4,
        }
    }

    /// Diameter of the side branch relative to the run diameter.
    pub fn branch_diameter_ratio(self) -> f64 {
        match self {
            JunctionKind::T1x1_5 => 1.5,
            JunctionKind::T1x2 => 2.0,
            _ => 1.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            JunctionKind::LBend1x1 => "L_BEND_1x1",
            JunctionKind::T1x1 => "T_1x1",
            JunctionKind::T1x1_5 => "T_1x1_5",
            JunctionKind::T1x2 => "T_1x2",
            JunctionKind::Cross1x1 => "CROSS_1x1",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.label() == s)
    }
}

impl fmt::Display for JunctionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Port {
    pub segment: SegmentId,
    pub end: SegmentEnd,
    pub area: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Junction {
    pub id: JunctionId,
    pub name: String,
    pub kind: JunctionKind,
    pub ports: Vec<Port>,
}

impl Junction {
    /// Area of the non-returning side branch used in scattering.
    pub fn loss_area(&self) -> f64 {
        match self.kind {
            JunctionKind::LBend1x1 => {
                let mean = self.ports.iter().map(|p| p.area).sum::<f64>() / self.ports.len() as f64;
                BEND_LOSS_AREA_FRACTION * mean
            }
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Terminal {
    pub id: TerminalId,
    pub name: String,
    pub segment: SegmentId,
    pub end: SegmentEnd,
    /// Distance from the microphone back to the speaker, which closes the pipe.
    pub mic_speaker_distance: f64,
    /// Pressure reflection coefficient of the speaker-end termination.
    pub termination_reflection: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakSpec {
    pub id: LeakId,
    pub name: String,
    pub segment: SegmentId,
    pub arc_position: f64,
    pub effective_hole_area: f64,
    /// RMS level of the leak noise at the hole, Pa.
    pub source_level: f64,
    pub band_low_hz: f64,
    pub band_high_hz: f64,
}

/// A location on the network: a segment and an arc position along it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkPoint {
    pub segment: SegmentId,
    pub arc: f64,
}

/// A pixel of a linear image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImagePoint {
    pub segment: SegmentId,
    pub arc: f64,
    pub index: usize,
}

impl ImagePoint {
    pub fn point(&self) -> NetworkPoint {
        NetworkPoint {
            segment: self.segment,
            arc: self.arc,
        }
    }
}

// ---------------------------------------------------------------------------
// Structured description used to build a network.

fn default_termination() -> f64 {
    0.7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentDesc {
    pub id: String,
    pub from: String,
    pub to: String,
    pub length_m: f64,
    pub diameter_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JunctionDesc {
    pub id: String,
    pub kind: JunctionKind,
    /// Optional per-segment port area override; defaults to the segment area.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub port_areas_m2: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalDesc {
    pub id: String,
    pub mic_speaker_distance_m: f64,
    #[serde(default = "default_termination")]
    pub termination_reflection: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeakDesc {
    pub id: String,
    pub segment: String,
    pub arc_m: f64,
    pub hole_area_m2: f64,
    pub source_level_pa: f64,
    pub band_low_hz: f64,
    pub band_high_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NetworkDesc {
    #[serde(default)]
    pub medium: MediumSpec,
    #[serde(default)]
    pub segments: Vec<SegmentDesc>,
    #[serde(default)]
    pub junctions: Vec<JunctionDesc>,
    #[serde(default)]
    pub terminals: Vec<TerminalDesc>,
    #[serde(default)]
    pub leaks: Vec<LeakDesc>,
}

// ---------------------------------------------------------------------------

/// Validated, immutable tree network.
#[derive(Debug, Clone, PartialEq)]
pub struct PipeNetwork {
    pub medium: MediumSpec,
    pub segments: Vec<PipeSegment>,
    pub junctions: Vec<Junction>,
    pub terminals: Vec<Terminal>,
    pub leaks: Vec<LeakSpec>,
    /// Along-pipe distance between every pair of graph nodes
    /// (junctions first, then terminals).
    node_distances: Vec<Vec<f64>>,
}

/// Validates a network description and builds the tree.
pub fn build_network(desc: &NetworkDesc) -> Result<PipeNetwork, NetworkError> {
    desc.medium.validate()?;

    let mut names: HashMap<&str, NodeRef> = HashMap::new();
    for (i, j) in desc.junctions.iter().enumerate() {
        if names.insert(j.id.as_str(), NodeRef::Junction(JunctionId(i))).is_some() {
            return Err(NetworkError::DuplicateId(j.id.clone()));
        }
    }
    for (i, t) in desc.terminals.iter().enumerate() {
        if names.insert(t.id.as_str(), NodeRef::Terminal(TerminalId(i))).is_some() {
            return Err(NetworkError::DuplicateId(t.id.clone()));
        }
    }

    let mut segments = Vec::with_capacity(desc.segments.len());
    let mut seg_names: HashMap<&str, SegmentId> = HashMap::new();
    for (i, s) in desc.segments.iter().enumerate() {
        if seg_names.insert(s.id.as_str(), SegmentId(i)).is_some() {
            return Err(NetworkError::DuplicateId(s.id.clone()));
        }
        if !(s.length_m > 0.0 && s.length_m.is_finite()) {
            return Err(NetworkError::NonPositiveGeometry(format!(
                "segment `{}` length {}",
                s.id, s.length_m
            )));
        }
        if !(s.diameter_m > 0.0 && s.diameter_m.is_finite()) {
            return Err(NetworkError::NonPositiveGeometry(format!(
                "segment `{}` diameter {}",
                s.id, s.diameter_m
            )));
        }
        let lookup = |node: &str| {
            names.get(node).copied().ok_or_else(|| NetworkError::DanglingSegmentEnd {
                segment: s.id.clone(),
                node: node.to_string(),
            })
        };
        let ends = [lookup(&s.from)?, lookup(&s.to)?];
        segments.push(PipeSegment {
            id: SegmentId(i),
            name: s.id.clone(),
            length: s.length_m,
            diameter: s.diameter_m,
            cross_section_area: PI * s.diameter_m * s.diameter_m / 4.0,
            ends,
        });
    }

    // Collect attachments per node.
    let mut junction_ports: Vec<Vec<(SegmentId, SegmentEnd)>> = vec![Vec::new(); desc.junctions.len()];
    let mut terminal_ports: Vec<Vec<(SegmentId, SegmentEnd)>> = vec![Vec::new(); desc.terminals.len()];
    for seg in &segments {
        for (k, end) in [SegmentEnd::Start, SegmentEnd::End].into_iter().enumerate() {
            match seg.ends[k] {
                NodeRef::Junction(j) => junction_ports[j.0].push((seg.id, end)),
                NodeRef::Terminal(t) => terminal_ports[t.0].push((seg.id, end)),
            }
        }
    }

    let mut junctions = Vec::with_capacity(desc.junctions.len());
    for (i, jd) in desc.junctions.iter().enumerate() {
        let attached = &junction_ports[i];
        if attached.len() != jd.kind.port_count() {
            return Err(NetworkError::PortCountMismatch {
                junction: jd.id.clone(),
                kind: jd.kind,
                expected: jd.kind.port_count(),
                found: attached.len(),
            });
        }
        for name in jd.port_areas_m2.keys() {
            let known = seg_names.get(name.as_str()).is_some_and(|sid| attached.iter().any(|(s, _)| s == sid));
            if !known {
                return Err(NetworkError::UnknownSegment(name.clone()));
            }
        }
        let mut ports = Vec::with_capacity(attached.len());
        for &(sid, end) in attached {
            let seg = &segments[sid.0];
            let area = jd.port_areas_m2.get(&seg.name).copied().unwrap_or(seg.cross_section_area);
            if !(area > 0.0 && area.is_finite()) {
                return Err(NetworkError::NonPositiveGeometry(format!(
                    "junction `{}` port area {}",
                    jd.id, area
                )));
            }
            ports.push(Port { segment: sid, end, area });
        }
        junctions.push(Junction {
            id: JunctionId(i),
            name: jd.id.clone(),
            kind: jd.kind,
            ports,
        });
    }

    let mut terminals = Vec::with_capacity(desc.terminals.len());
    for (i, td) in desc.terminals.iter().enumerate() {
        let attached = &terminal_ports[i];
        if attached.len() != 1 {
            return Err(NetworkError::TerminalAttachment {
                terminal: td.id.clone(),
                found: attached.len(),
            });
        }
        if !(td.mic_speaker_distance_m > 0.0 && td.mic_speaker_distance_m.is_finite()) {
            return Err(NetworkError::InvalidTerminal {
                terminal: td.id.clone(),
                reason: format!("mic_speaker_distance_m must be > 0, got {}", td.mic_speaker_distance_m),
            });
        }
        if !(td.termination_reflection.abs() <= 1.0) {
            return Err(NetworkError::InvalidTerminal {
                terminal: td.id.clone(),
                reason: format!("|termination_reflection| must be <= 1, got {}", td.termination_reflection),
            });
        }
        let (segment, end) = attached[0];
        terminals.push(Terminal {
            id: TerminalId(i),
            name: td.id.clone(),
            segment,
            end,
            mic_speaker_distance: td.mic_speaker_distance_m,
            termination_reflection: td.termination_reflection,
        });
    }
    if terminals.len() < 2 {
        return Err(NetworkError::TooFewTerminals(terminals.len()));
    }

    // Union-find over nodes to detect cycles and connectivity.
    let n_nodes = junctions.len() + terminals.len();
    let node_index = |r: NodeRef| match r {
        NodeRef::Junction(j) => j.0,
        NodeRef::Terminal(t) => junctions.len() + t.0,
    };
    let mut parent: Vec<usize> = (0..n_nodes).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for seg in &segments {
        let a = find(&mut parent, node_index(seg.ends[0]));
        let b = find(&mut parent, node_index(seg.ends[1]));
        if a == b {
            return Err(NetworkError::CycleDetected(seg.name.clone()));
        }
        parent[a] = b;
    }
    let root = find(&mut parent, 0);
    if (1..n_nodes).any(|i| find(&mut parent, i) != root) {
        return Err(NetworkError::Disconnected);
    }

    let mut leaks = Vec::with_capacity(desc.leaks.len());
    for (i, ld) in desc.leaks.iter().enumerate() {
        let sid = *seg_names
            .get(ld.segment.as_str())
            .ok_or_else(|| NetworkError::UnknownSegment(ld.segment.clone()))?;
        let len = segments[sid.0].length;
        let bad = |reason: String| NetworkError::InvalidLeak {
            leak: ld.id.clone(),
            reason,
        };
        if !(ld.arc_m >= 0.0 && ld.arc_m <= len) {
            return Err(bad(format!("arc_m {} outside [0, {}]", ld.arc_m, len)));
        }
        if !(ld.hole_area_m2 >= 0.0 && ld.hole_area_m2.is_finite()) {
            return Err(bad("hole_area_m2 must be >= 0".into()));
        }
        if !(ld.source_level_pa >= 0.0 && ld.source_level_pa.is_finite()) {
            return Err(bad("source_level_pa must be >= 0".into()));
        }
        if !(ld.band_low_hz > 0.0 && ld.band_high_hz > ld.band_low_hz) {
            return Err(bad("band must satisfy 0 < low < high".into()));
        }
        leaks.push(LeakSpec {
            id: LeakId(i),
            name: ld.id.clone(),
            segment: sid,
            arc_position: ld.arc_m,
            effective_hole_area: ld.hole_area_m2,
            source_level: ld.source_level_pa,
            band_low_hz: ld.band_low_hz,
            band_high_hz: ld.band_high_hz,
        });
    }

    let mut net = PipeNetwork {
        medium: desc.medium,
        segments,
        junctions,
        terminals,
        leaks,
        node_distances: Vec::new(),
    };
    net.node_distances = net.compute_node_distances();
    Ok(net)
}

impl PipeNetwork {
    fn node_count(&self) -> usize {
        self.junctions.len() + self.terminals.len()
    }

    fn node_index(&self, r: NodeRef) -> usize {
        match r {
            NodeRef::Junction(j) => j.0,
            NodeRef::Terminal(t) => self.junctions.len() + t.0,
        }
    }

    fn compute_node_distances(&self) -> Vec<Vec<f64>> {
        let n = self.node_count();
        let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for seg in &self.segments {
            let a = self.node_index(seg.ends[0]);
            let b = self.node_index(seg.ends[1]);
            adj[a].push((b, seg.length));
            adj[b].push((a, seg.length));
        }
        (0..n)
            .map(|src| {
                let mut dist = vec![f64::NAN; n];
                dist[src] = 0.0;
                let mut queue = VecDeque::from([src]);
                while let Some(u) = queue.pop_front() {
                    for &(v, len) in &adj[u] {
                        if dist[v].is_nan() {
                            dist[v] = dist[u] + len;
                            queue.push_back(v);
                        }
                    }
                }
                dist
            })
            .collect()
    }

    pub fn segment(&self, id: SegmentId) -> &PipeSegment {
        &self.segments[id.0]
    }

    pub fn terminal_by_name(&self, name: &str) -> Option<&Terminal> {
        self.terminals.iter().find(|t| t.name == name)
    }

    pub fn junction_by_name(&self, name: &str) -> Option<&Junction> {
        self.junctions.iter().find(|j| j.name == name)
    }

    pub fn segment_by_name(&self, name: &str) -> Option<&PipeSegment> {
        self.segments.iter().find(|s| s.name == name)
    }

    fn end_point(&self, segment: SegmentId, end: SegmentEnd) -> NetworkPoint {
        let arc = match end {
            SegmentEnd::Start => 0.0,
            SegmentEnd::End => self.segments[segment.0].length,
        };
        NetworkPoint { segment, arc }
    }

    /// Location of a terminal's microphone.
    pub fn terminal_point(&self, id: TerminalId) -> NetworkPoint {
        let t = &self.terminals[id.0];
        self.end_point(t.segment, t.end)
    }

    pub fn junction_point(&self, id: JunctionId) -> NetworkPoint {
        let p = &self.junctions[id.0].ports[0];
        self.end_point(p.segment, p.end)
    }

    pub fn leak_point(&self, id: LeakId) -> NetworkPoint {
        let l = &self.leaks[id.0];
        NetworkPoint {
            segment: l.segment,
            arc: l.arc_position,
        }
    }

    fn check_point(&self, p: NetworkPoint) -> Result<(), NetworkError> {
        let off = NetworkError::PointOffNetwork {
            segment: p.segment.0,
            arc: p.arc,
        };
        let seg = self.segments.get(p.segment.0).ok_or(off.clone())?;
        let eps = ARC_EPS * seg.length.max(1.0);
        if !(p.arc >= -eps && p.arc <= seg.length + eps) {
            return Err(off);
        }
        Ok(())
    }

    /// Along-pipe distance between two points of the network.
    pub fn path_distance(&self, a: NetworkPoint, b: NetworkPoint) -> Result<f64, NetworkError> {
        self.check_point(a)?;
        self.check_point(b)?;
        if a.segment == b.segment {
            return Ok((a.arc - b.arc).abs());
        }
        let sa = &self.segments[a.segment.0];
        let sb = &self.segments[b.segment.0];
        let a_ends = [
            (self.node_index(sa.ends[0]), a.arc),
            (self.node_index(sa.ends[1]), sa.length - a.arc),
        ];
        let b_ends = [
            (self.node_index(sb.ends[0]), b.arc),
            (self.node_index(sb.ends[1]), sb.length - b.arc),
        ];
        let mut best = f64::INFINITY;
        for &(na, da) in &a_ends {
            for &(nb, db) in &b_ends {
                best = best.min(da + self.node_distances[na][nb] + db);
            }
        }
        Ok(best)
    }

    pub fn terminal_distance(&self, a: TerminalId, b: TerminalId) -> f64 {
        let ia = self.node_index(NodeRef::Terminal(a));
        let ib = self.node_index(NodeRef::Terminal(b));
        self.node_distances[ia][ib]
    }

    /// Largest along-pipe distance between two terminals.
    pub fn diameter(&self) -> f64 {
        let mut best: f64 = 0.0;
        for a in &self.terminals {
            for b in &self.terminals {
                best = best.max(self.terminal_distance(a.id, b.id));
            }
        }
        best
    }

    /// Pixelates every segment at `spacing`, one point per junction.
    pub fn pixelate(&self, spacing: f64) -> Result<Vec<ImagePoint>, NetworkError> {
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(NetworkError::NonPositiveSpacing(spacing));
        }
        // Lowest segment id touching each junction owns the junction pixel.
        let owner: Vec<SegmentId> = self
            .junctions
            .iter()
            .map(|j| j.ports.iter().map(|p| p.segment).min().expect("junction has ports"))
            .collect();
        let keeps_end = |seg: &PipeSegment, k: usize| match seg.ends[k] {
            NodeRef::Junction(j) => owner[j.0] == seg.id,
            NodeRef::Terminal(_) => true,
        };
        let mut points = Vec::new();
        for seg in &self.segments {
            let intervals = ((seg.length / spacing) - 1e-9).ceil().max(1.0) as usize;
            let mut arcs: Vec<f64> = (0..intervals).map(|k| k as f64 * spacing).collect();
            arcs.push(seg.length);
            let last = arcs.len() - 1;
            for (k, arc) in arcs.into_iter().enumerate() {
                if (k == 0 && !keeps_end(seg, 0)) || (k == last && !keeps_end(seg, 1)) {
                    continue;
                }
                points.push(ImagePoint {
                    segment: seg.id,
                    arc,
                    index: points.len(),
                });
            }
        }
        Ok(points)
    }
}

/// Pressure reflection coefficient for a step from `area_before` to
/// `area_after`: `(S0 - S1) / (S0 + S1)`.
///
/// `area_after` may be `0` (closed end, +1) or `+inf` (ideally open end, -1).
pub fn reflection_coefficient(area_before: f64, area_after: f64) -> Result<f64, NetworkError> {
    if !(area_before > 0.0 && area_before.is_finite()) || !(area_after >= 0.0) {
        return Err(NetworkError::NonPositiveArea(area_before, area_after));
    }
    if area_after.is_infinite() {
        return Ok(-1.0);
    }
    Ok((area_before - area_after) / (area_before + area_after))
}
