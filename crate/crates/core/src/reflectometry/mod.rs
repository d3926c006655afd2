//! Active probing analysis: denoising, correlation distances, pulse
//! labelling, junction classification and topology reconstruction.

mod correlate;
mod dwt;
mod junction;
mod pulses;
mod topology;

use std::ops::Range;

use thiserror::Error;

use crate::network::JunctionKind;

pub use correlate::{correlate_samples, cross_correlate, estimate_terminal_distance};
pub use dwt::{denoise_dwt, denoise_with, wavedec, waverec, Decomposition, Threshold, Wavelet};
pub use junction::{
    classify_junction, fit_exponential, joint_feature, rig_feature, rig_network, rig_reflection, train_junction_models, ClassCurve,
    JointFeature, JunctionModels, TrainingRig,
};
pub use pulses::{
    detect_pulses, estimate_joint_distances, label_pulses, pulse_energy_ratio, JointSearch, PulseEvent, PulseLabel,
};
pub use topology::{reconstruct_topology, JunctionEstimate, TopologyEstimate, TopologyOptions, TreeEdge};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReflectometryError {
    #[error("trace of {len} samples is shorter than {needed}")]
    TraceTooShort { len: usize, needed: usize },
    #[error("unknown wavelet {0:?}")]
    UnknownWavelet(String),
    #[error("sample rates differ: {0} Hz vs {1} Hz")]
    SampleRateMismatch(f64, f64),
    #[error("traces start at different times: {0} s vs {1} s")]
    MisalignedTraces(f64, f64),
    #[error("no injected pulse found")]
    NoInjectedPulse,
    #[error("window {0:?} is empty or out of range")]
    EmptyWindow(Range<usize>),
    #[error("injected window carries no energy")]
    ZeroInjectedEnergy,
    #[error("samples need at least two distinct distances")]
    DegenerateSamples,
    #[error("energy ratio must be positive, got {0}")]
    NonPositiveRatio(f64),
    #[error("no model for junction class {0}")]
    UntrainedModel(JunctionKind),
    #[error("incomplete dataset: {0}")]
    IncompleteDataset(String),
    #[error("inconsistent distances: {0}")]
    InconsistentDistances(String),
    #[error("training failed: {0}")]
    Training(String),
}
