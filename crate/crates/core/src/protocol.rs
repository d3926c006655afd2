//! Cluster probing round: TDMA schedule, beacons, recording and upload,
//! run as a deterministic discrete-event simulation.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{PipeNetwork, TerminalId};
use crate::sim::{simulate, PulseSpec, SimConfig, SimError, SourceEvent};
use crate::trace::Trace;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("a cluster needs at least two nodes, got {0}")]
    ClusterTooSmall(usize),
    #[error("{repeats} repeats of {window} s do not fit in a {slot} s slot")]
    SlotTooShort { repeats: usize, window: f64, slot: f64 },
    #[error("invalid protocol config: {0}")]
    InvalidConfig(String),
    #[error("node {node} cannot handle {event} while {phase:?}")]
    UnexpectedEvent { node: usize, phase: Phase, event: String },
    #[error("schedule violation: {0}")]
    ScheduleViolation(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub start: f64,
    pub duration: f64,
}

impl Slot {
    pub fn end(&self) -> f64 {
        self.start + self.duration
    }
}

/// Measurement frame followed by the collection frame, one slot per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub measurement: Vec<Slot>,
    pub collection: Vec<Slot>,
    pub repeats: usize,
    /// Time reserved for one repeat inside a measurement slot, s.
    pub repeat_period: f64,
}

impl Schedule {
    pub fn cluster_size(&self) -> usize {
        self.measurement.len()
    }

    pub fn end(&self) -> f64 {
        self.collection.last().map(Slot::end).unwrap_or(0.0)
    }
}

pub fn make_schedule(cluster_size: usize, slot_duration: f64, repeats: usize, repeat_period: f64) -> Result<Schedule, ProtocolError> {
    if cluster_size < 2 {
        return Err(ProtocolError::ClusterTooSmall(cluster_size));
    }
    if !(slot_duration > 0.0 && repeat_period > 0.0) || repeats == 0 {
        return Err(ProtocolError::InvalidConfig("slot duration, repeat period and repeats must be positive".into()));
    }
    if repeats as f64 * repeat_period > slot_duration {
        return Err(ProtocolError::SlotTooShort {
            repeats,
            window: repeat_period,
            slot: slot_duration,
        });
    }
    let slot = |k: usize| Slot {
        start: k as f64 * slot_duration,
        duration: slot_duration,
    };
    Ok(Schedule {
        measurement: (0..cluster_size).map(slot).collect(),
        collection: (cluster_size..2 * cluster_size).map(slot).collect(),
        repeats,
        repeat_period,
    })
}

// ---------------------------------------------------------------------------
// Messages and node state machine.

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Addressee {
    Node(usize),
    Head,
}

impl fmt::Display for Addressee {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Addressee::Node(i) => write!(f, "N{i}"),
            Addressee::Head => write!(f, "HEAD"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MessageKind {
    ScheduleAssign,
    StartBeacon,
    StopBeacon,
    DataUpload,
}

impl MessageKind {
    pub fn label(self) -> &'static str {
        match self {
            MessageKind::ScheduleAssign => "SCHEDULE_ASSIGN",
            MessageKind::StartBeacon => "START_BEACON",
            MessageKind::StopBeacon => "STOP_BEACON",
            MessageKind::DataUpload => "DATA_UPLOAD",
        }
    }
}

/// One finished recording: who probed, and when recording began.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recording {
    pub active: usize,
    pub repeat: usize,
    pub start: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    None,
    Schedule(Box<Schedule>),
    /// Delay from send time until recording starts, s.
    Timer(f64),
    Upload(Vec<Recording>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub kind: MessageKind,
    pub sender: Addressee,
    pub receivers: Vec<Addressee>,
    pub payload: Payload,
    pub send_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Timer {
    SlotStart { repeat: usize },
    RecordingDone,
    CollectionStart,
    CollectionEnd,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeEvent {
    Message(Message),
    Timer { at: f64, timer: Timer },
}

impl NodeEvent {
    fn describe(&self) -> String {
        match self {
            NodeEvent::Message(m) => format!("{} from {}", m.kind.label(), m.sender),
            NodeEvent::Timer { timer, .. } => format!("{timer:?}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    AwaitSchedule,
    Idle,
    ActiveProbe,
    PassiveListen,
    Uploading,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub node: usize,
    pub cluster_size: usize,
    pub phase: Phase,
    pub schedule: Option<Schedule>,
    /// Recording in progress.
    pub session: Option<Recording>,
    /// Finished recordings waiting for upload.
    pub buffered: Vec<Recording>,
    pub clock_offset: f64,
    /// Timer value placed in START beacons, s.
    pub start_delay: f64,
}

impl NodeState {
    pub fn new(node: usize, cluster_size: usize, start_delay: f64) -> Self {
        Self {
            node,
            cluster_size,
            phase: Phase::AwaitSchedule,
            schedule: None,
            session: None,
            buffered: Vec::new(),
            clock_offset: 0.0,
            start_delay,
        }
    }

    fn peers(&self) -> Vec<Addressee> {
        (0..self.cluster_size).filter(|&j| j != self.node).map(Addressee::Node).collect()
    }
}

/// One transition of a node's state machine. Invalid events return
/// `UnexpectedEvent` and the caller keeps the old state.
pub fn node_step(state: &NodeState, event: &NodeEvent) -> Result<(NodeState, Vec<Message>), ProtocolError> {
    let mut next = state.clone();
    let me = Addressee::Node(state.node);
    let unexpected = || ProtocolError::UnexpectedEvent {
        node: state.node,
        phase: state.phase,
        event: event.describe(),
    };
    let mut out = Vec::new();
    match (state.phase, event) {
        (Phase::AwaitSchedule, NodeEvent::Message(m)) if m.kind == MessageKind::ScheduleAssign => {
            let Payload::Schedule(s) = &m.payload else {
                return Err(unexpected());
            };
            next.schedule = Some((**s).clone());
            next.phase = Phase::Idle;
        }
        (Phase::Idle, NodeEvent::Timer { at, timer: Timer::SlotStart { repeat } }) => {
            next.phase = Phase::ActiveProbe;
            next.session = Some(Recording {
                active: state.node,
                repeat: *repeat,
                start: at + state.start_delay,
            });
            out.push(Message {
                kind: MessageKind::StartBeacon,
                sender: me,
                receivers: state.peers(),
                payload: Payload::Timer(state.start_delay),
                send_time: *at,
            });
        }
        (Phase::Idle, NodeEvent::Message(m)) if m.kind == MessageKind::StartBeacon => {
            let Payload::Timer(delay) = m.payload else {
                return Err(unexpected());
            };
            let Addressee::Node(active) = m.sender else {
                return Err(unexpected());
            };
            let repeat = state.buffered.iter().filter(|r| r.active == active).count();
            next.phase = Phase::PassiveListen;
            next.session = Some(Recording {
                active,
                repeat,
                start: m.send_time + delay,
            });
        }
        (Phase::ActiveProbe, NodeEvent::Timer { at, timer: Timer::RecordingDone }) => {
            next.buffered.extend(next.session.take());
            next.phase = Phase::Idle;
            out.push(Message {
                kind: MessageKind::StopBeacon,
                sender: me,
                receivers: state.peers(),
                payload: Payload::None,
                send_time: *at,
            });
        }
        (Phase::PassiveListen, NodeEvent::Message(m))
            if m.kind == MessageKind::StopBeacon && state.session.map(|s| Addressee::Node(s.active)) == Some(m.sender) =>
        {
            next.buffered.extend(next.session.take());
            next.phase = Phase::Idle;
        }
        (Phase::Idle, NodeEvent::Timer { at, timer: Timer::CollectionStart }) => {
            next.phase = Phase::Uploading;
            out.push(Message {
                kind: MessageKind::DataUpload,
                sender: me,
                receivers: vec![Addressee::Head],
                payload: Payload::Upload(std::mem::take(&mut next.buffered)),
                send_time: *at,
            });
        }
        (Phase::Uploading, NodeEvent::Timer { timer: Timer::CollectionEnd, .. }) => {
            next.phase = Phase::Idle;
        }
        _ => return Err(unexpected()),
    }
    Ok((next, out))
}

// ---------------------------------------------------------------------------
// Event log.

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub time: f64,
    pub kind: String,
    pub sender: Addressee,
    pub receivers: Vec<Addressee>,
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rx: Vec<String> = self.receivers.iter().map(|r| r.to_string()).collect();
        write!(f, "{:.9} {} {} {}", self.time, self.kind, self.sender, rx.join(","))
    }
}

pub fn format_log(entries: &[LogEntry]) -> String {
    entries.iter().map(|e| format!("{e}\n")).collect()
}

/// Checks from the log that no two START..STOP windows overlap.
pub fn check_mutual_exclusion(entries: &[LogEntry]) -> Result<(), ProtocolError> {
    let mut active: Option<Addressee> = None;
    for e in entries {
        match e.kind.as_str() {
            "START_BEACON" => {
                if let Some(a) = active {
                    return Err(ProtocolError::ScheduleViolation(format!(
                        "{} started at {:.9} while {} active",
                        e.sender, e.time, a
                    )));
                }
                active = Some(e.sender);
            }
            "STOP_BEACON" => {
                if active != Some(e.sender) {
                    return Err(ProtocolError::ScheduleViolation(format!("stray STOP from {}", e.sender)));
                }
                active = None;
            }
            _ => {}
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Probe round.

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub pulse: PulseSpec,
    pub repeats: usize,
    pub slot_duration: f64,
    /// Recording length per repeat; defaults to `default_record_window`.
    pub record_window: Option<f64>,
    pub start_delay: f64,
    /// Fixed one-way radio latency, s.
    pub latency: f64,
    /// Per-node constant clock offsets, s (empty means synchronized).
    pub clock_offsets: Vec<f64>,
    /// Keep every repeat's raw recording.
    pub keep_raw: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            pulse: PulseSpec::default(),
            repeats: 1,
            slot_duration: 2.0,
            record_window: None,
            start_delay: 0.01,
            latency: 0.0,
            clock_offsets: Vec::new(),
            keep_raw: false,
        }
    }
}

const GUARD: f64 = 0.05;

/// Twice the network diameter in travel time, plus the pulse and a guard.
pub fn default_record_window(net: &PipeNetwork, pulse: &PulseSpec) -> f64 {
    2.0 * net.diameter() / net.medium.speed_of_sound + pulse.width + GUARD
}

/// Averaged recordings gathered by the cluster head.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset {
    pub cluster_size: usize,
    /// Terminal hosting each node.
    pub terminals: Vec<TerminalId>,
    /// r̄_i, indexed by node.
    pub reflections: Vec<Trace>,
    /// t̄_ij keyed by (active i, recording j).
    pub transmissions: BTreeMap<(usize, usize), Trace>,
    /// d_ii per node, m.
    pub mic_speaker_distances: Vec<f64>,
    pub speed_of_sound: f64,
}

impl ProbeDataset {
    pub fn fs(&self) -> f64 {
        self.reflections.first().map(|t| t.fs).unwrap_or(0.0)
    }

    /// Trace recorded at node `j` while node `i` probed.
    pub fn recording(&self, i: usize, j: usize) -> &Trace {
        if i == j {
            &self.reflections[i]
        } else {
            &self.transmissions[&(i, j)]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawRecording {
    pub active: usize,
    pub recorder: usize,
    pub repeat: usize,
    pub trace: Trace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRound {
    pub dataset: ProbeDataset,
    pub log: Vec<LogEntry>,
    pub raw: Vec<RawRecording>,
}

/// Running mean that returns the input exactly when all inputs agree.
#[derive(Debug, Clone)]
struct Welford {
    mean: Vec<f64>,
    count: usize,
}

impl Welford {
    fn new(len: usize) -> Self {
        Self {
            mean: vec![0.0; len],
            count: 0,
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let k = self.count as f64;
        for (m, v) in self.mean.iter_mut().zip(x) {
            *m += (v - *m) / k;
        }
    }
}

fn ns(t: f64) -> u64 {
    (t * 1e9).round() as u64
}

fn repeat_seed(base: u64, active: usize, repeat: usize) -> u64 {
    base.wrapping_add((1 + active as u64 * 1_000_003 + repeat as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

struct World<'a> {
    net: &'a PipeNetwork,
    nodes: &'a [TerminalId],
    sim: &'a SimConfig,
    probe: &'a ProbeConfig,
    window: f64,
    /// Simulated mic traces per (active, repeat), one per node.
    cache: HashMap<(usize, usize), Vec<Trace>>,
}

impl World<'_> {
    fn offset(&self, node: usize) -> f64 {
        self.probe.clock_offsets.get(node).copied().unwrap_or(0.0)
    }

    /// Runs the physics for one repeat: node `active` injects when its
    /// clock reaches `start`, every node records from its own `start`.
    fn recordings(&mut self, active: usize, repeat: usize, start: f64) -> Result<&Vec<Trace>, ProtocolError> {
        if !self.cache.contains_key(&(active, repeat)) {
            let pad = self.probe.clock_offsets.iter().fold(0.0f64, |a, o| a.max(o.abs()));
            let fs = self.sim.fs;
            let pad_n = (pad * fs).ceil() as usize;
            let pad = pad_n as f64 / fs;
            let cfg = SimConfig {
                duration: self.window + 2.0 * pad,
                rng_seed: repeat_seed(self.sim.rng_seed, active, repeat),
                ..*self.sim
            };
            let src = [SourceEvent::SpeakerPulse {
                terminal: self.nodes[active],
                start_time: pad - self.offset(active),
                pulse: self.probe.pulse,
            }];
            let all = simulate(self.net, &src, &cfg)?;
            let n = (self.window * fs).round() as usize;
            let traces = (0..self.nodes.len())
                .map(|j| {
                    let t = &all[self.nodes[j].0];
                    let from = ((pad - self.offset(j)) * fs).round().max(0.0) as usize;
                    let mut s = t.slice(from, n);
                    s.start_time = start;
                    s
                })
                .collect();
            self.cache.insert((active, repeat), traces);
        }
        Ok(&self.cache[&(active, repeat)])
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Queued {
    to: Addressee,
    event: NodeEvent,
}

/// Executes one full measurement and collection round.
pub fn run_probe_round(
    net: &PipeNetwork,
    nodes: &[TerminalId],
    schedule: &Schedule,
    sim: &SimConfig,
    probe: &ProbeConfig,
) -> Result<ProbeRound, ProtocolError> {
    let k = nodes.len();
    if k < 2 {
        return Err(ProtocolError::ClusterTooSmall(k));
    }
    if schedule.cluster_size() != k {
        return Err(ProtocolError::InvalidConfig(format!(
            "schedule has {} slots for {k} nodes",
            schedule.cluster_size()
        )));
    }
    if let Some(t) = nodes.iter().find(|t| t.0 >= net.terminals.len()) {
        return Err(ProtocolError::InvalidConfig(format!("no terminal {}", t.0)));
    }
    for (a, t) in nodes.iter().enumerate() {
        if nodes[..a].contains(t) {
            return Err(ProtocolError::InvalidConfig(format!("terminal {} hosts two nodes", t.0)));
        }
    }
    if probe.latency < 0.0 || probe.start_delay < probe.latency {
        return Err(ProtocolError::InvalidConfig("start delay must cover the radio latency".into()));
    }
    if probe.repeats != schedule.repeats {
        return Err(ProtocolError::InvalidConfig("repeat count differs from schedule".into()));
    }
    let window = probe.record_window.unwrap_or_else(|| default_record_window(net, &probe.pulse));
    if probe.start_delay + window + probe.latency > schedule.repeat_period + 1e-12 {
        return Err(ProtocolError::SlotTooShort {
            repeats: schedule.repeats,
            window: probe.start_delay + window + probe.latency,
            slot: schedule.repeat_period,
        });
    }

    let mut world = World {
        net,
        nodes,
        sim,
        probe,
        window,
        cache: HashMap::new(),
    };
    let mut states: Vec<NodeState> = (0..k)
        .map(|i| {
            let mut s = NodeState::new(i, k, probe.start_delay);
            s.clock_offset = world.offset(i);
            s
        })
        .collect();
    let mut queue: BTreeMap<(u64, Addressee, u64), Queued> = BTreeMap::new();
    let mut seq = 0u64;
    let mut push = |queue: &mut BTreeMap<(u64, Addressee, u64), Queued>, at: f64, to: Addressee, event: NodeEvent| {
        queue.insert((ns(at), to, seq), Queued { to, event });
        seq += 1;
    };

    let mut log = Vec::new();
    let assign = Message {
        kind: MessageKind::ScheduleAssign,
        sender: Addressee::Head,
        receivers: (0..k).map(Addressee::Node).collect(),
        payload: Payload::Schedule(Box::new(schedule.clone())),
        send_time: 0.0,
    };
    log.push(LogEntry {
        time: 0.0,
        kind: assign.kind.label().into(),
        sender: assign.sender,
        receivers: assign.receivers.clone(),
    });
    for i in 0..k {
        push(&mut queue, probe.latency, Addressee::Node(i), NodeEvent::Message(assign.clone()));
        for r in 0..schedule.repeats {
            let at = schedule.measurement[i].start + probe.latency + r as f64 * schedule.repeat_period;
            push(&mut queue, at, Addressee::Node(i), NodeEvent::Timer { at, timer: Timer::SlotStart { repeat: r } });
        }
        let c = schedule.collection[i];
        push(&mut queue, c.start, Addressee::Node(i), NodeEvent::Timer { at: c.start, timer: Timer::CollectionStart });
        push(&mut queue, c.end(), Addressee::Node(i), NodeEvent::Timer { at: c.end(), timer: Timer::CollectionEnd });
    }

    let mut uploads: Vec<(usize, Vec<Recording>)> = Vec::new();
    let mut active_node: Option<usize> = None;
    while let Some((_, Queued { to, event })) = queue.pop_first() {
        let now = match &event {
            NodeEvent::Timer { at, .. } => *at,
            NodeEvent::Message(m) => m.send_time + probe.latency,
        };
        let Addressee::Node(i) = to else {
            if let NodeEvent::Message(Message {
                sender: Addressee::Node(j),
                payload: Payload::Upload(recs),
                ..
            }) = event
            {
                uploads.push((j, recs));
            }
            continue;
        };
        let (next, msgs) = match node_step(&states[i], &event) {
            Ok(v) => v,
            Err(e) => {
                log::warn!("{e}");
                continue;
            }
        };
        if next.phase == Phase::ActiveProbe && states[i].phase != Phase::ActiveProbe {
            if let Some(a) = active_node {
                return Err(ProtocolError::ScheduleViolation(format!("node {i} probing while node {a} active")));
            }
            active_node = Some(i);
            let s = next.session.expect("active node has a session");
            let done = s.start + window;
            push(&mut queue, done, to, NodeEvent::Timer { at: done, timer: Timer::RecordingDone });
        }
        if states[i].phase == Phase::ActiveProbe && next.phase != Phase::ActiveProbe {
            active_node = None;
        }
        states[i] = next;
        for m in msgs {
            log.push(LogEntry {
                time: now,
                kind: m.kind.label().into(),
                sender: m.sender,
                receivers: m.receivers.clone(),
            });
            for &rx in &m.receivers {
                push(&mut queue, m.send_time + probe.latency, rx, NodeEvent::Message(m.clone()));
            }
        }
    }

    // Cluster head assembles the dataset from the uploads.
    let fs = sim.fs;
    let n = (window * fs).round() as usize;
    let mut sums: BTreeMap<(usize, usize), (Welford, f64)> = BTreeMap::new();
    let mut raw = Vec::new();
    uploads.sort_by_key(|u| u.0);
    for (j, recs) in &uploads {
        for rec in recs {
            let trace = world.recordings(rec.active, rec.repeat, rec.start)?[*j].clone();
            let entry = sums.entry((rec.active, *j)).or_insert_with(|| (Welford::new(n), rec.start));
            entry.0.push(&trace.samples);
            if probe.keep_raw {
                raw.push(RawRecording {
                    active: rec.active,
                    recorder: *j,
                    repeat: rec.repeat,
                    trace,
                });
            }
        }
    }
    let mut reflections = vec![None; k];
    let mut transmissions = BTreeMap::new();
    for ((i, j), (w, start)) in sums {
        if w.count != schedule.repeats {
            return Err(ProtocolError::ScheduleViolation(format!(
                "pair ({i}, {j}) has {} of {} repeats",
                w.count, schedule.repeats
            )));
        }
        let t = Trace::new(w.mean, fs, start);
        if i == j {
            reflections[i] = Some(t);
        } else {
            transmissions.insert((i, j), t);
        }
    }
    let reflections: Vec<Trace> = reflections
        .into_iter()
        .enumerate()
        .map(|(i, t)| t.ok_or_else(|| ProtocolError::ScheduleViolation(format!("no reflection for node {i}"))))
        .collect::<Result<_, _>>()?;
    if transmissions.len() != k * k - k {
        return Err(ProtocolError::ScheduleViolation(format!("{} transmissions collected", transmissions.len())));
    }
    check_mutual_exclusion(&log)?;

    Ok(ProbeRound {
        dataset: ProbeDataset {
            cluster_size: k,
            terminals: nodes.to_vec(),
            reflections,
            transmissions,
            mic_speaker_distances: nodes.iter().map(|t| net.terminals[t.0].mic_speaker_distance).collect(),
            speed_of_sound: net.medium.speed_of_sound,
        },
        log,
        raw,
    })
}
