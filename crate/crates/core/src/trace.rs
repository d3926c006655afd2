//! Uniformly sampled pressure traces and their on-disk dump format.
//!
//! A dump is a raw file of little-endian `f32` samples plus a JSON sidecar
//! (`<name>.json`) holding the sample rate, start time and terminal.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub samples: Vec<f64>,
    /// Sample rate, Hz.
    pub fs: f64,
    /// Absolute time of sample 0 on the shared clock, s.
    pub start_time: f64,
}

impl Trace {
    pub fn new(samples: Vec<f64>, fs: f64, start_time: f64) -> Self {
        Self {
            samples,
            fs,
            start_time,
        }
    }

    pub fn zeros(len: usize, fs: f64, start_time: f64) -> Self {
        Self::new(vec![0.0; len], fs, start_time)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.fs
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|x| x * x).sum()
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            (self.energy() / self.samples.len() as f64).sqrt()
        }
    }

    pub fn with_samples(&self, samples: Vec<f64>) -> Trace {
        Trace::new(samples, self.fs, self.start_time)
    }

    /// Sub-trace `[start, start + len)`, clamped to the available samples.
    pub fn slice(&self, start: usize, len: usize) -> Trace {
        let end = (start + len).min(self.samples.len());
        let start = start.min(end);
        Trace::new(
            self.samples[start..end].to_vec(),
            self.fs,
            self.start_time + start as f64 / self.fs,
        )
    }
}

/// Sidecar metadata written next to every dumped trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub fs_hz: f64,
    pub start_time_s: f64,
    pub terminal: String,
    pub samples: usize,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes `trace` as little-endian f32 to `path` plus `path.json` metadata.
pub fn write_trace_dump(path: &Path, trace: &Trace, terminal: &str) -> io::Result<()> {
    let mut bytes = Vec::with_capacity(trace.samples.len() * 4);
    for &x in &trace.samples {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    let meta = TraceMeta {
        fs_hz: trace.fs,
        start_time_s: trace.start_time,
        terminal: terminal.to_string(),
        samples: trace.samples.len(),
    };
    let json = serde_json::to_string_pretty(&meta).map_err(io::Error::other)?;
    fs::write(sidecar_path(path), json + "\n")
}

pub fn read_trace_dump(path: &Path) -> io::Result<(Trace, TraceMeta)> {
    let meta: TraceMeta =
        serde_json::from_slice(&fs::read(sidecar_path(path))?).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 || bytes.len() / 4 != meta.samples {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("{}: expected {} samples", path.display(), meta.samples),
        ));
    }
    let samples = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((Trace::new(samples, meta.fs_hz, meta.start_time_s), meta))
}
