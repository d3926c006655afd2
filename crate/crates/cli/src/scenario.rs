//! Scenario files: TOML with the unit in every key name.

use std::fs;
use std::path::{Path, PathBuf};

use pipescope_core::imaging::ImagingConfig;
use pipescope_core::network::{build_network, NetworkDesc, PipeNetwork, TerminalId};
use pipescope_core::protocol::ProbeConfig;
use pipescope_core::reflectometry::{TopologyOptions, TrainingRig};
use pipescope_core::sim::{PulseSpec, SimConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid `{field}`: {reason}")]
    Validation { field: String, reason: String },
}

fn invalid(field: &str, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Validation {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub fs_hz: Option<f64>,
    #[serde(default)]
    pub noise_floor_pa: f64,
    #[serde(default = "default_amplitude_floor")]
    pub amplitude_floor: f64,
    #[serde(default = "default_max_response")]
    pub max_response_s: f64,
    /// Passive listening length; defaults to what imaging needs.
    #[serde(default)]
    pub listen_duration_s: Option<f64>,
}

fn default_amplitude_floor() -> f64 {
    1e-4
}

fn default_max_response() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub pulse_width_s: f64,
    pub pulse_amplitude_pa: f64,
    pub repeats: usize,
    pub slot_duration_s: f64,
    pub repeat_period_s: f64,
    pub record_window_s: Option<f64>,
    pub start_delay_s: f64,
    pub latency_s: f64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            pulse_width_s: 1e-3,
            pulse_amplitude_pa: 1.0,
            repeats: 4,
            slot_duration_s: 2.0,
            repeat_period_s: 0.5,
            record_window_s: None,
            start_delay_s: 0.01,
            latency_s: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscoverySection {
    pub denoise: bool,
    pub dwt_levels: usize,
    pub wavelet: String,
    pub threshold_mads: f64,
    pub min_separation_s: f64,
    /// Bore assumed for the discovered pipes.
    pub pipe_diameter_m: f64,
}

impl Default for DiscoverySection {
    fn default() -> Self {
        let t = TopologyOptions::default();
        Self {
            denoise: t.denoise,
            dwt_levels: t.dwt_levels,
            wavelet: t.wavelet,
            threshold_mads: t.threshold_mads,
            min_separation_s: t.min_separation,
            pipe_diameter_m: 0.0254,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JunctionModelSection {
    /// Pre-trained model file; when absent the sweep below is run.
    pub path: Option<PathBuf>,
    pub distances_m: Vec<f64>,
    pub repeats: usize,
    pub noise_floor_pa: f64,
    pub attenuation_per_m: f64,
    pub pipe_diameter_m: f64,
    pub mic_speaker_distance_m: f64,
    pub speaker_reflection: f64,
}

impl Default for JunctionModelSection {
    fn default() -> Self {
        let rig = TrainingRig::default();
        Self {
            path: None,
            distances_m: (1..=7).map(f64::from).collect(),
            repeats: 1,
            noise_floor_pa: 0.0,
            attenuation_per_m: rig.medium.attenuation_per_meter,
            pipe_diameter_m: rig.pipe_diameter,
            mic_speaker_distance_m: rig.mic_speaker_distance,
            speaker_reflection: rig.speaker_reflection,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterChoice {
    Identity,
    /// Speaker-echo canceler with parameters estimated from probe data.
    IdealEcho,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImagingSection {
    pub speed_of_sound_mps: f64,
    pub atten_comp_rate_per_s: f64,
    pub segment_length_s: f64,
    pub realizations: usize,
    pub pixel_spacing_m: f64,
    pub filter: FilterChoice,
    pub min_prominence_db: f64,
}

impl Default for ImagingSection {
    fn default() -> Self {
        let c = ImagingConfig::default();
        Self {
            speed_of_sound_mps: c.speed_of_sound,
            atten_comp_rate_per_s: c.atten_comp_rate,
            segment_length_s: c.segment_length,
            realizations: c.realizations,
            pixel_spacing_m: c.pixel_spacing,
            filter: FilterChoice::Identity,
            min_prominence_db: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: Option<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub network: NetworkDesc,
    /// Terminals carrying a node, in node order; empty means every terminal.
    #[serde(default)]
    pub nodes: Vec<String>,
    pub sim: SimSection,
    #[serde(default)]
    pub probe: ProbeSection,
    #[serde(default)]
    pub discovery: DiscoverySection,
    #[serde(default)]
    pub junction_models: JunctionModelSection,
    #[serde(default)]
    pub imaging: ImagingSection,
    /// Directory of the scenario file; relative paths resolve against it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut s = parse_scenario(&text)?;
    s.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(s)
}

/// Parses and validates scenario text.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let s: Scenario = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((0, 0), |span| line_column(text, span.start));
        ScenarioError::Parse {
            line,
            column,
            message: e.message().to_string(),
        }
    })?;
    s.validate()?;
    Ok(s)
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

fn positive(field: &str, v: f64) -> Result<(), ScenarioError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, format!("must be > 0, got {v}")))
    }
}

fn non_negative(field: &str, v: f64) -> Result<(), ScenarioError> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, format!("must be >= 0, got {v}")))
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.seed.is_none() {
            return Err(invalid("seed", "required"));
        }
        let fs = self.sim.fs_hz.ok_or_else(|| invalid("sim.fs_hz", "required"))?;
        positive("sim.fs_hz", fs)?;
        non_negative("sim.noise_floor_pa", self.sim.noise_floor_pa)?;
        positive("sim.amplitude_floor", self.sim.amplitude_floor)?;
        positive("sim.max_response_s", self.sim.max_response_s)?;
        if let Some(d) = self.sim.listen_duration_s {
            positive("sim.listen_duration_s", d)?;
        }
        let net = build_network(&self.network).map_err(|e| invalid("network", e.to_string()))?;
        let nodes = self.node_terminals_in(&net)?;
        if nodes.len() < 2 {
            return Err(invalid("nodes", "at least two nodes are needed"));
        }
        let p = &self.probe;
        positive("probe.pulse_width_s", p.pulse_width_s)?;
        if !(p.pulse_width_s * fs >= 2.0) {
            return Err(invalid("probe.pulse_width_s", "must span at least two samples"));
        }
        positive("probe.pulse_amplitude_pa", p.pulse_amplitude_pa)?;
        if p.repeats == 0 {
            return Err(invalid("probe.repeats", "must be >= 1"));
        }
        positive("probe.slot_duration_s", p.slot_duration_s)?;
        positive("probe.repeat_period_s", p.repeat_period_s)?;
        if let Some(w) = p.record_window_s {
            positive("probe.record_window_s", w)?;
        }
        non_negative("probe.start_delay_s", p.start_delay_s)?;
        non_negative("probe.latency_s", p.latency_s)?;
        let d = &self.discovery;
        positive("discovery.threshold_mads", d.threshold_mads)?;
        positive("discovery.min_separation_s", d.min_separation_s)?;
        positive("discovery.pipe_diameter_m", d.pipe_diameter_m)?;
        let m = &self.junction_models;
        if m.path.is_none() {
            if m.distances_m.is_empty() {
                return Err(invalid("junction_models.distances_m", "the sweep needs distances"));
            }
            for &x in &m.distances_m {
                positive("junction_models.distances_m", x)?;
            }
            if m.repeats == 0 {
                return Err(invalid("junction_models.repeats", "must be >= 1"));
            }
        }
        non_negative("junction_models.noise_floor_pa", m.noise_floor_pa)?;
        non_negative("junction_models.attenuation_per_m", m.attenuation_per_m)?;
        positive("junction_models.pipe_diameter_m", m.pipe_diameter_m)?;
        non_negative("junction_models.mic_speaker_distance_m", m.mic_speaker_distance_m)?;
        let i = &self.imaging;
        positive("imaging.speed_of_sound_mps", i.speed_of_sound_mps)?;
        non_negative("imaging.atten_comp_rate_per_s", i.atten_comp_rate_per_s)?;
        positive("imaging.segment_length_s", i.segment_length_s)?;
        if !(i.segment_length_s * fs >= 16.0) {
            return Err(invalid("imaging.segment_length_s", "must span at least 16 samples"));
        }
        if i.realizations == 0 {
            return Err(invalid("imaging.realizations", "must be >= 1"));
        }
        positive("imaging.pixel_spacing_m", i.pixel_spacing_m)?;
        non_negative("imaging.min_prominence_db", i.min_prominence_db)?;
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or_default()
    }

    pub fn fs(&self) -> f64 {
        self.sim.fs_hz.unwrap_or_default()
    }

    pub fn build_network(&self) -> Result<PipeNetwork, ScenarioError> {
        build_network(&self.network).map_err(|e| invalid("network", e.to_string()))
    }

    /// Node terminal ids in node order.
    pub fn node_terminals(&self) -> Result<Vec<TerminalId>, ScenarioError> {
        self.node_terminals_in(&self.build_network()?)
    }

    fn node_terminals_in(&self, net: &PipeNetwork) -> Result<Vec<TerminalId>, ScenarioError> {
        if self.nodes.is_empty() {
            return Ok(net.terminals.iter().map(|t| t.id).collect());
        }
        let mut out = Vec::new();
        for name in &self.nodes {
            let t = net
                .terminal_by_name(name)
                .ok_or_else(|| invalid("nodes", format!("unknown terminal `{name}`")))?;
            if out.contains(&t.id) {
                return Err(invalid("nodes", format!("terminal `{name}` listed twice")));
            }
            out.push(t.id);
        }
        Ok(out)
    }

    pub fn node_names(&self) -> Result<Vec<String>, ScenarioError> {
        let net = self.build_network()?;
        Ok(self
            .node_terminals_in(&net)?
            .iter()
            .map(|t| net.terminals[t.0].name.clone())
            .collect())
    }

    pub fn sim_config(&self, duration: f64, seed: u64) -> SimConfig {
        SimConfig {
            fs: self.fs(),
            duration,
            noise_floor: self.sim.noise_floor_pa,
            rng_seed: seed,
            amplitude_floor: self.sim.amplitude_floor,
            max_response: self.sim.max_response_s,
        }
    }

    pub fn pulse(&self) -> PulseSpec {
        PulseSpec {
            width: self.probe.pulse_width_s,
            amplitude: self.probe.pulse_amplitude_pa,
            ..PulseSpec::default()
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            pulse: self.pulse(),
            repeats: self.probe.repeats,
            slot_duration: self.probe.slot_duration_s,
            record_window: self.probe.record_window_s,
            start_delay: self.probe.start_delay_s,
            latency: self.probe.latency_s,
            ..ProbeConfig::default()
        }
    }

    pub fn topology_options(&self) -> TopologyOptions {
        let d = &self.discovery;
        TopologyOptions {
            denoise: d.denoise,
            dwt_levels: d.dwt_levels,
            wavelet: d.wavelet.clone(),
            threshold_mads: d.threshold_mads,
            min_separation: d.min_separation_s,
            ..TopologyOptions::default()
        }
    }

    pub fn training_rig(&self, seed: u64) -> TrainingRig {
        let m = &self.junction_models;
        let mut rig = TrainingRig::default();
        rig.medium.speed_of_sound = self.network.medium.speed_of_sound;
        rig.medium.attenuation_per_meter = m.attenuation_per_m;
        rig.pipe_diameter = m.pipe_diameter_m;
        rig.mic_speaker_distance = m.mic_speaker_distance_m;
        rig.speaker_reflection = m.speaker_reflection;
        rig.pulse = self.pulse();
        rig.fs = self.fs();
        rig.threshold_mads = self.discovery.threshold_mads;
        rig.noise_floor = m.noise_floor_pa;
        rig.repeats = m.repeats;
        rig.seed = seed;
        rig
    }

    /// Imaging settings, without the filter (that needs probe data).
    pub fn imaging_config(&self) -> ImagingConfig {
        let i = &self.imaging;
        ImagingConfig {
            speed_of_sound: i.speed_of_sound_mps,
            atten_comp_rate: i.atten_comp_rate_per_s,
            segment_length: i.segment_length_s,
            realizations: i.realizations,
            pixel_spacing: i.pixel_spacing_m,
            ..ImagingConfig::default()
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}
