//! File formats, sensor synchronization, deviation metrics and the
//! end-to-end robot / keypoints / fused comparison.
//!
//! Configs are TOML with the unit in every key name (`_deg`, `_m`, `_px`,
//! `_s`); traces are JSON Lines, one tagged record per line. See the book's
//! "File formats" chapter for the field-by-field layout.

mod config;
mod experiment;
mod metrics;
mod trace;

use std::path::PathBuf;

use thiserror::Error;

use crate::anthropometry::AnthropometryError;
use crate::camera::CameraError;
use crate::ergonomics::ErgonomicsError;
use crate::filter::FilterError;
use crate::sim::SimError;

pub use config::{
    CameraBlock, ExplicitExtrinsics, FilterBlock, LookAt, ModelBlock, NoiseBlock, NoiseInterpretation,
    OcclusionBlock, OutputBlock, RulaBlock, SessionConfig, TaskBlock, CONFIG_ENV,
};
pub use experiment::{
    align_truth, run_experiment, write_deviation_report, write_experiment, ComparisonRow, Experiment, RunKey, RunResult,
};
pub use metrics::{evaluate, wrap_deg, DeviationReport, Summary};
pub use trace::{
    read_jsonl, sync_traces, write_jsonl, KeypointRecord, Trace, TraceRecord,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}:{line}: {message}")]
    Trace {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("robot and keypoint traces share no time range")]
    EmptyOverlap,
    #[error("{estimates} estimates but {truth} ground-truth samples")]
    LengthMismatch { estimates: usize, truth: usize },
    #[error("invalid occlusion spec `{spec}`: {reason}")]
    Occlusion { spec: String, reason: String },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Anthropometry(#[from] AnthropometryError),
    #[error(transparent)]
    Ergonomics(#[from] ErgonomicsError),
}

/// Coarse failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad or inconsistent input.
    Data,
    /// The input was fine but a solver or estimator could not produce a result.
    Numerical,
}

impl HarnessError {
    pub fn class(&self) -> ErrorClass {
        match self {
            HarnessError::Camera(CameraError::DegenerateProjection { .. })
            | HarnessError::Camera(CameraError::DegenerateConfiguration(_))
            | HarnessError::Sim(SimError::Camera(CameraError::DegenerateProjection { .. }))
            | HarnessError::Filter(FilterError::AllParticlesInvalid)
            | HarnessError::Anthropometry(
                AnthropometryError::RankDeficient { .. }
                | AnthropometryError::NonPositiveLength { .. }
                | AnthropometryError::DegenerateProjection { .. },
            ) => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }
}

pub(crate) fn io_error(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Io { path, source }
}
