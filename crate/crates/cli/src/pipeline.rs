//! Stage runner. Every stage reads the scenario plus artifacts persisted by
//! earlier stages, and writes its own artifacts under the output directory.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use pipescope_core::dsp::median;
use pipescope_core::imaging::{
    detect_leaks, estimate_echo_params, form_image, required_listening, Echo, FilterSpec, ImagingError, LeakHypothesis, LinearImage,
};
use pipescope_core::network::{build_network, JunctionKind, LeakId, NetworkDesc, NetworkError, PipeNetwork, TerminalId};
use pipescope_core::protocol::{format_log, make_schedule, run_probe_round, ProbeDataset, ProtocolError};
use pipescope_core::reflectometry::{
    reconstruct_topology, train_junction_models, ClassCurve, JunctionModels, ReflectometryError, TopologyEstimate,
};
use pipescope_core::sim::{simulate, SimError, SourceEvent};
use pipescope_core::trace::{read_trace_dump, write_trace_dump, Trace};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::{FilterChoice, Scenario, ScenarioError};

/// Noise recorded before the listening window starts, s. Lets the leak
/// field build up along every pipe before imaging uses it.
pub const LISTEN_WARMUP_S: f64 = 0.05;
/// Extra listening beyond what the ground-truth network needs, s. The
/// discovered network can come out slightly larger.
pub const LISTEN_MARGIN_S: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Simulate,
    Probe,
    Discover,
    Image,
    Detect,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Simulate, Stage::Probe, Stage::Discover, Stage::Image, Stage::Detect];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Probe => "probe",
            Stage::Discover => "discover",
            Stage::Image => "image",
            Stage::Detect => "detect",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s.trim())
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error("missing dependency: {0} not found (run the earlier stage first)")]
    MissingArtifact(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("node `{0}` has no terminal in the imaging network")]
    NodeNotInNetwork(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Reflectometry(#[from] ReflectometryError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

#[derive(Debug, Error)]
#[error("stage {stage} failed: {source}")]
pub struct StageFailure {
    pub stage: Stage,
    #[source]
    pub source: StageError,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: PathBuf,
    pub stages: Vec<Stage>,
    /// Image on the scenario network instead of the discovered one.
    pub ground_truth_topology: bool,
    /// Keep every raw probe repeat next to the averaged traces.
    pub dump_traces: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ok,
    Failed,
    /// Requested but not run because an earlier stage failed.
    Skipped,
    NotRequested,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: Stage,
    pub status: StageStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakReport {
    #[serde(flatten)]
    pub hypothesis: LeakHypothesis,
    /// Along-pipe distance from each node's mic, m.
    pub distance_from_node_m: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub ground_truth_topology: bool,
    pub stages: Vec<StageOutcome>,
    pub topology: Option<TopologyEstimate>,
    pub leaks: Vec<LeakReport>,
    pub config: Scenario,
}

impl RunReport {
    pub fn failed_stage(&self) -> Option<Stage> {
        self.stages.iter().find(|s| s.status == StageStatus::Failed).map(|s| s.stage)
    }
}

// ---------------------------------------------------------------------------
// Artifact helpers.

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StageError + '_ {
    move |source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            StageError::MissingArtifact(path.to_path_buf())
        } else {
            StageError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

fn create_dir(path: &Path) -> Result<(), StageError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn write_text(path: &Path, text: &str) -> Result<(), StageError> {
    fs::write(path, text).map_err(io_err(path))
}

fn read_text(path: &Path) -> Result<String, StageError> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StageError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| StageError::Malformed {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    write_text(path, &(text + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, StageError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| StageError::Malformed {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn write_trace(path: &Path, trace: &Trace, terminal: &str) -> Result<(), StageError> {
    write_trace_dump(path, trace, terminal).map_err(io_err(path))
}

fn read_trace(path: &Path) -> Result<Trace, StageError> {
    read_trace_dump(path).map(|(t, _)| t).map_err(io_err(path))
}

/// Fixed artifact layout under the output directory.
pub mod layout {
    pub const LISTEN_DIR: &str = "listen";
    pub const PROBE_DIR: &str = "probe";
    pub const DATASET: &str = "probe/dataset.json";
    pub const EVENTS: &str = "probe/events.log";
    pub const TOPOLOGY: &str = "topology.json";
    pub const MODELS: &str = "junction_models.toml";
    pub const IMAGE_CSV: &str = "image.csv";
    pub const IMAGE_JSON: &str = "image.json";
    pub const IMAGING_NETWORK: &str = "imaging_network.json";
    pub const LEAKS: &str = "leaks.json";
    pub const REPORT: &str = "report.json";
    pub const TIMING: &str = "timing.json";
}

// ---------------------------------------------------------------------------
// Junction model file.

/// On-disk model file: one table per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelFile {
    classes: BTreeMap<String, ClassCurve>,
}

pub fn models_to_toml(models: &JunctionModels) -> String {
    let file = ModelFile {
        classes: models.classes.iter().map(|(k, c)| (k.label().to_string(), *c)).collect(),
    };
    toml::to_string(&file).expect("model tables always serialize")
}

pub fn models_from_toml(text: &str, path: &Path) -> Result<JunctionModels, StageError> {
    let malformed = |message: String| StageError::Malformed {
        path: path.to_path_buf(),
        message,
    };
    let file: ModelFile = toml::from_str(text).map_err(|e| malformed(e.to_string()))?;
    let mut classes = BTreeMap::new();
    for (name, curve) in file.classes {
        let kind = JunctionKind::from_label(&name).ok_or_else(|| malformed(format!("unknown junction class `{name}`")))?;
        classes.insert(kind, curve);
    }
    Ok(JunctionModels { classes })
}

/// Runs the scenario's training sweep. Fewer than three distinct distances
/// cannot pin an exponential curve, reported as `DegenerateSamples`.
pub fn train_models(scn: &Scenario, seed: u64) -> Result<JunctionModels, StageError> {
    let mut distinct = scn.junction_models.distances_m.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(ReflectometryError::DegenerateSamples.into());
    }
    Ok(train_junction_models(&scn.junction_models.distances_m, &scn.training_rig(seed))?)
}

// ---------------------------------------------------------------------------
// Stages.

/// Seed offsets so that every stage draws an independent stream.
const PROBE_SEED_OFFSET: u64 = 1;
const TRAINING_SEED_OFFSET: u64 = 2;

pub fn listen_duration(scn: &Scenario, net: &PipeNetwork) -> f64 {
    scn.sim
        .listen_duration_s
        .unwrap_or_else(|| required_listening(net, scn.fs(), &scn.imaging_config()) + LISTEN_MARGIN_S)
}

fn stage_simulate(scn: &Scenario, out: &Path) -> Result<Vec<String>, StageError> {
    let net = scn.build_network()?;
    let nodes = scn.node_terminals()?;
    let fs = scn.fs();
    let warmup = (LISTEN_WARMUP_S * fs).round() as usize;
    let len = (listen_duration(scn, &net) * fs).round() as usize;
    let sources: Vec<SourceEvent> = (0..net.leaks.len())
        .map(|l| SourceEvent::LeakNoise {
            leak: LeakId(l),
            start_time: 0.0,
            signature: None,
        })
        .collect();
    let cfg = scn.sim_config((warmup + len) as f64 / fs, scn.seed());
    let traces = simulate(&net, &sources, &cfg)?;
    create_dir(&out.join(layout::LISTEN_DIR))?;
    let mut artifacts = Vec::new();
    for t in &nodes {
        let name = &net.terminals[t.0].name;
        let rel = format!("{}/{name}.f32", layout::LISTEN_DIR);
        write_trace(&out.join(&rel), &traces[t.0].slice(warmup, len), name)?;
        artifacts.push(rel);
    }
    log::info!("recorded {:.2} s of listening at {} nodes", len as f64 / fs, nodes.len());
    Ok(artifacts)
}

/// Index of the probe dataset files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetIndex {
    node_names: Vec<String>,
    mic_speaker_distances_m: Vec<f64>,
    speed_of_sound_mps: f64,
    fs_hz: f64,
    repeats: usize,
    reflections: Vec<String>,
    transmissions: Vec<TransmissionEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TransmissionEntry {
    active: usize,
    recorder: usize,
    file: String,
}

fn stage_probe(scn: &Scenario, out: &Path, dump_traces: bool) -> Result<Vec<String>, StageError> {
    let net = scn.build_network()?;
    let nodes = scn.node_terminals()?;
    let names = scn.node_names()?;
    let p = &scn.probe;
    let schedule = make_schedule(nodes.len(), p.slot_duration_s, p.repeats, p.repeat_period_s)?;
    let sim = scn.sim_config(p.repeat_period_s, scn.seed().wrapping_add(PROBE_SEED_OFFSET));
    let probe = pipescope_core::protocol::ProbeConfig {
        keep_raw: dump_traces,
        ..scn.probe_config()
    };
    let round = run_probe_round(&net, &nodes, &schedule, &sim, &probe)?;
    let dir = out.join(layout::PROBE_DIR);
    create_dir(&dir)?;
    let ds = &round.dataset;
    let mut artifacts = Vec::new();
    let mut reflections = Vec::new();
    for (i, r) in ds.reflections.iter().enumerate() {
        let file = format!("r_{i}.f32");
        write_trace(&dir.join(&file), r, &names[i])?;
        artifacts.push(format!("{}/{file}", layout::PROBE_DIR));
        reflections.push(file);
    }
    let mut transmissions = Vec::new();
    for (&(i, j), t) in &ds.transmissions {
        let file = format!("t_{i}_{j}.f32");
        write_trace(&dir.join(&file), t, &names[j])?;
        artifacts.push(format!("{}/{file}", layout::PROBE_DIR));
        transmissions.push(TransmissionEntry {
            active: i,
            recorder: j,
            file,
        });
    }
    if dump_traces {
        let raw_dir = dir.join("raw");
        create_dir(&raw_dir)?;
        for r in &round.raw {
            let file = format!("raw/a{}_n{}_k{}.f32", r.active, r.recorder, r.repeat);
            write_trace(&dir.join(&file), &r.trace, &names[r.recorder])?;
            artifacts.push(format!("{}/{file}", layout::PROBE_DIR));
        }
    }
    let index = DatasetIndex {
        node_names: names,
        mic_speaker_distances_m: ds.mic_speaker_distances.clone(),
        speed_of_sound_mps: ds.speed_of_sound,
        fs_hz: ds.fs(),
        repeats: p.repeats,
        reflections,
        transmissions,
    };
    write_json(&out.join(layout::DATASET), &index)?;
    write_text(&out.join(layout::EVENTS), &format_log(&round.log))?;
    artifacts.push(layout::DATASET.into());
    artifacts.push(layout::EVENTS.into());
    Ok(artifacts)
}

fn load_dataset(out: &Path) -> Result<(ProbeDataset, Vec<String>), StageError> {
    let path = out.join(layout::DATASET);
    let index: DatasetIndex = read_json(&path)?;
    let dir = out.join(layout::PROBE_DIR);
    let k = index.node_names.len();
    let reflections = index
        .reflections
        .iter()
        .map(|f| read_trace(&dir.join(f)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut transmissions = BTreeMap::new();
    for e in &index.transmissions {
        if e.active >= k || e.recorder >= k {
            return Err(StageError::Malformed {
                path,
                message: format!("transmission ({}, {}) outside {k} nodes", e.active, e.recorder),
            });
        }
        transmissions.insert((e.active, e.recorder), read_trace(&dir.join(&e.file))?);
    }
    let ds = ProbeDataset {
        cluster_size: k,
        terminals: (0..k).map(TerminalId).collect(),
        reflections,
        transmissions,
        mic_speaker_distances: index.mic_speaker_distances_m,
        speed_of_sound: index.speed_of_sound_mps,
    };
    Ok((ds, index.node_names))
}

fn stage_discover(scn: &Scenario, out: &Path) -> Result<Vec<String>, StageError> {
    let (ds, names) = load_dataset(out)?;
    let models = match &scn.junction_models.path {
        Some(p) => {
            let path = scn.resolve(p);
            models_from_toml(&read_text(&path)?, &path)?
        }
        None => train_models(scn, scn.seed().wrapping_add(TRAINING_SEED_OFFSET))?,
    };
    write_text(&out.join(layout::MODELS), &models_to_toml(&models))?;
    let mut topo = reconstruct_topology(&ds, Some(&models), &scn.topology_options())?;
    topo.terminal_names = names;
    write_json(&out.join(layout::TOPOLOGY), &topo)?;
    log::info!(
        "discovered {} junctions, worst residual {:.4} m",
        topo.junctions.len(),
        topo.max_residual
    );
    Ok(vec![layout::MODELS.into(), layout::TOPOLOGY.into()])
}

/// Speaker echo of every node from the probe transmissions it recorded:
/// median gain over all senders, delay from its own d_ii.
pub fn speaker_echoes(ds: &ProbeDataset) -> Result<Vec<Vec<Echo>>, ImagingError> {
    let c = ds.speed_of_sound;
    (0..ds.cluster_size)
        .map(|j| {
            let d = ds.mic_speaker_distances[j];
            let alphas: Vec<f64> = (0..ds.cluster_size)
                .filter(|&i| i != j)
                .filter_map(|i| estimate_echo_params(&ds.transmissions[&(i, j)], d, c).ok())
                .map(|e| e.alpha)
                .collect();
            if alphas.is_empty() {
                return Err(ImagingError::EchoNotFound);
            }
            Ok(vec![Echo {
                alpha: median(&alphas),
                tau: 2.0 * d / c,
            }])
        })
        .collect()
}

/// Network and node terminals used for imaging.
fn imaging_network(scn: &Scenario, out: &Path, ground_truth: bool) -> Result<NetworkDesc, StageError> {
    if ground_truth {
        return Ok(NetworkDesc {
            leaks: vec![],
            ..scn.network.clone()
        });
    }
    let topo: TopologyEstimate = read_json(&out.join(layout::TOPOLOGY))?;
    let medium = pipescope_core::network::MediumSpec {
        speed_of_sound: scn.imaging.speed_of_sound_mps,
        ..scn.network.medium
    };
    Ok(topo.to_network_desc(medium, scn.discovery.pipe_diameter_m, 1e-3))
}

fn node_ids(net: &PipeNetwork, names: &[String]) -> Result<Vec<TerminalId>, StageError> {
    names
        .iter()
        .map(|n| {
            net.terminal_by_name(n)
                .map(|t| t.id)
                .ok_or_else(|| StageError::NodeNotInNetwork(n.clone()))
        })
        .collect()
}

fn stage_image(scn: &Scenario, out: &Path, ground_truth: bool) -> Result<Vec<String>, StageError> {
    let names = scn.node_names()?;
    let desc = imaging_network(scn, out, ground_truth)?;
    let net = build_network(&desc)?;
    let nodes = node_ids(&net, &names)?;
    let records = names
        .iter()
        .map(|n| read_trace(&out.join(format!("{}/{n}.f32", layout::LISTEN_DIR))))
        .collect::<Result<Vec<_>, _>>()?;
    let filter = match scn.imaging.filter {
        FilterChoice::Identity => FilterSpec::Identity,
        FilterChoice::IdealEcho => FilterSpec::IdealEcho {
            echoes: speaker_echoes(&load_dataset(out)?.0)?,
        },
    };
    let cfg = pipescope_core::imaging::ImagingConfig {
        filter,
        ..scn.imaging_config()
    };
    let image = form_image(&records, &net, &nodes, &cfg)?;
    write_json(&out.join(layout::IMAGING_NETWORK), &desc)?;
    write_text(&out.join(layout::IMAGE_CSV), &image.to_csv())?;
    write_json(&out.join(layout::IMAGE_JSON), &image)?;
    Ok(vec![layout::IMAGING_NETWORK.into(), layout::IMAGE_CSV.into(), layout::IMAGE_JSON.into()])
}

fn stage_detect(scn: &Scenario, out: &Path) -> Result<Vec<String>, StageError> {
    let image: LinearImage = read_json(&out.join(layout::IMAGE_JSON))?;
    let desc: NetworkDesc = read_json(&out.join(layout::IMAGING_NETWORK))?;
    let net = build_network(&desc)?;
    let names = scn.node_names()?;
    let nodes = node_ids(&net, &names)?;
    let mut leaks = Vec::new();
    for h in detect_leaks(&image, scn.imaging.min_prominence_db) {
        let at = image.points[h.point_index].point();
        let mut distance_from_node_m = BTreeMap::new();
        for (name, t) in names.iter().zip(&nodes) {
            distance_from_node_m.insert(name.clone(), net.path_distance(net.terminal_point(*t), at)?);
        }
        leaks.push(LeakReport {
            hypothesis: h,
            distance_from_node_m,
        });
    }
    write_json(&out.join(layout::LEAKS), &leaks)?;
    Ok(vec![layout::LEAKS.into()])
}

fn run_stage(stage: Stage, scn: &Scenario, opts: &RunOptions) -> Result<Vec<String>, StageError> {
    create_dir(&opts.out)?;
    match stage {
        Stage::Simulate => stage_simulate(scn, &opts.out),
        Stage::Probe => stage_probe(scn, &opts.out, opts.dump_traces),
        Stage::Discover => stage_discover(scn, &opts.out),
        Stage::Image => stage_image(scn, &opts.out, opts.ground_truth_topology),
        Stage::Detect => stage_detect(scn, &opts.out),
    }
}

/// Runs the requested stages in pipeline order and writes `report.json`
/// (deterministic) and `timing.json` (wall clock). Returns the report and
/// the first failure, if any.
pub fn run_pipeline(scn: &Scenario, opts: &RunOptions) -> Result<(RunReport, Option<StageFailure>), StageFailure> {
    let mut outcomes = Vec::new();
    let mut timing = BTreeMap::new();
    let mut failure: Option<StageFailure> = None;
    for stage in Stage::ALL {
        if !opts.stages.contains(&stage) {
            outcomes.push(StageOutcome {
                stage,
                status: StageStatus::NotRequested,
                error: None,
                artifacts: vec![],
            });
            continue;
        }
        if failure.is_some() {
            outcomes.push(StageOutcome {
                stage,
                status: StageStatus::Skipped,
                error: None,
                artifacts: vec![],
            });
            continue;
        }
        log::info!("stage {stage}");
        let t0 = Instant::now();
        let result = run_stage(stage, scn, opts);
        timing.insert(stage.name(), t0.elapsed().as_secs_f64());
        match result {
            Ok(artifacts) => outcomes.push(StageOutcome {
                stage,
                status: StageStatus::Ok,
                error: None,
                artifacts,
            }),
            Err(source) => {
                outcomes.push(StageOutcome {
                    stage,
                    status: StageStatus::Failed,
                    error: Some(source.to_string()),
                    artifacts: vec![],
                });
                failure = Some(StageFailure { stage, source });
            }
        }
    }
    let topology = read_json(&opts.out.join(layout::TOPOLOGY)).ok();
    let leaks = read_json(&opts.out.join(layout::LEAKS)).unwrap_or_default();
    let report = RunReport {
        scenario: scn.name.clone(),
        seed: scn.seed(),
        ground_truth_topology: opts.ground_truth_topology,
        stages: outcomes,
        topology,
        leaks,
        config: scn.clone(),
    };
    let write = |stage: Stage| {
        move |source| StageFailure { stage, source }
    };
    let last = opts.stages.iter().max().copied().unwrap_or(Stage::Simulate);
    create_dir(&opts.out).map_err(write(last))?;
    write_json(&opts.out.join(layout::REPORT), &report).map_err(write(last))?;
    write_json(&opts.out.join(layout::TIMING), &timing).map_err(write(last))?;
    Ok((report, failure))
}
