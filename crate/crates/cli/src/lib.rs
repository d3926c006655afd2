//! Scenario files, the stage pipeline and the command-line glue around them.

pub mod pipeline;
pub mod scenario;

use std::path::{Path, PathBuf};

use thiserror::Error;

use pipeline::{models_to_toml, run_pipeline, train_models, RunOptions, RunReport, Stage, StageError, StageFailure};
use scenario::{load_scenario, Scenario, ScenarioError};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_STAGE: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Stage(#[from] StageFailure),
    #[error("junction training failed: {0}")]
    Training(StageError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Scenario(_) | CliError::Usage(_) => EXIT_CONFIG,
            CliError::Stage(_) | CliError::Training(_) => EXIT_STAGE,
        }
    }
}

/// Loads a scenario and applies a seed override.
pub fn prepare(path: &Path, seed: Option<u64>) -> Result<Scenario, CliError> {
    let mut scn = load_scenario(path)?;
    if seed.is_some() {
        scn.seed = seed;
    }
    Ok(scn)
}

/// Output directory: the flag, else the scenario's own, else `out` next
/// to the scenario.
pub fn output_dir(scn: &Scenario, flag: Option<&Path>) -> PathBuf {
    match (flag, &scn.output_dir) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => scn.resolve(p),
        (None, None) => scn.base_dir.join("out"),
    }
}

pub fn parse_stages(list: &str) -> Result<Vec<Stage>, CliError> {
    let mut stages = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.parse::<Stage>().map_err(CliError::Usage))
        .collect::<Result<Vec<_>, _>>()?;
    if stages.is_empty() {
        return Err(CliError::Usage("no stages given".into()));
    }
    stages.sort();
    stages.dedup();
    Ok(stages)
}

/// Runs stages and turns the first failure into an error.
pub fn run(scn: &Scenario, opts: &RunOptions) -> Result<RunReport, CliError> {
    let (report, failure) = run_pipeline(scn, opts)?;
    match failure {
        Some(f) => Err(f.into()),
        None => Ok(report),
    }
}

/// Trains the junction models of the scenario sweep and writes the model
/// file into `out`. Returns the file text.
pub fn train_junctions(scn: &Scenario, out: &Path) -> Result<String, CliError> {
    let models = train_models(scn, scn.seed()).map_err(CliError::Training)?;
    let text = models_to_toml(&models);
    std::fs::create_dir_all(out)
        .and_then(|()| std::fs::write(out.join(pipeline::layout::MODELS), &text))
        .map_err(|source| {
            CliError::Training(StageError::Io {
                path: out.to_path_buf(),
                source,
            })
        })?;
    Ok(text)
}
