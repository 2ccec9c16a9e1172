//! Planning, parallel execution, run manifest and resume.

pub mod dataset;
pub mod manifest;
pub mod plan;
pub mod run;

use thiserror::Error;

pub use dataset::{DatasetEntry, DatasetManifest};
pub use manifest::{
    read_manifest, validate_manifest, AugRecord, ManifestHeader, RecordStatus, ValidationReport,
    Violation, MANIFEST_FILE,
};
pub use plan::{plan, AugTask};
pub use run::{
    output_relpath, render_task, run, CancelToken, CaptionGranularity, PipelineConfig, RunSummary,
    TaskError,
};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("image id {0:?} appears more than once in the dataset")]
    DuplicateImageId(String),
    #[error("class {0:?} has no superclass")]
    UnresolvableSuperclass(String),
    #[error("image id {0:?} is empty or not usable in a file name")]
    InvalidImageId(String),
    #[error("scale k must be at least 1")]
    ZeroScale,
    #[error("bad dataset listing: {0}")]
    BadDataset(String),
    #[error("cannot read dataset {path}: {detail}")]
    DatasetIo { path: String, detail: String },
    #[error("cannot read run manifest {path}: {detail}")]
    UnreadableManifest { path: String, detail: String },
    #[error("I/O failure on {path}: {detail}")]
    FatalIo { path: String, detail: String },
    #[error("output directory was produced with seed {manifest}, not {requested}")]
    SeedMismatch { manifest: u64, requested: u64 },
    #[error("task refers to image id {0:?} which is not in the dataset")]
    UnknownTask(String),
    #[error("invalid pipeline configuration: {0}")]
    InvalidConfig(String),
}
