//! Configuration, experiment orchestration, evaluation and export.

pub mod config;
pub mod eval;
pub mod experiment;
pub mod gradsuite;

use std::path::Path;

use thiserror::Error;

pub use config::{DatasetConfig, EvalConfig, RunConfig, SPEC_VERSION};
pub use eval::{evaluate, export_rollout, rollout_windows, scan_chamfer, RolloutWindow};
pub use experiment::{run_experiment, ExperimentManifest, FileRecord, Phase, PhaseRecord};

use crate::checkpoint::CheckpointError;
use crate::evalmetrics::MetricError;
use crate::numerics::NumericsError;
use crate::synthworld::SynthError;
use crate::tokenizer::export::ExportError;
use crate::tokenizer::TokenizerError;
use crate::worldmodel::WorldModelError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("experiment directory {0} is locked by a running process")]
    Locked(String),
    #[error("phase {phase} failed: {source}")]
    Phase {
        phase: Phase,
        source: Box<HarnessError>,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("tokenizer parameters changed during world model training")]
    TokenizerMutated,
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    WorldModel(#[from] WorldModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Export(#[from] ExportError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Cap rayon's worker count from `BEVW_THREADS`; a no-op when unset or
/// when the global pool already exists.
pub fn init_threads() {
    if let Some(n) = std::env::var("BEVW_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}

#[cfg(test)]
mod tests;
