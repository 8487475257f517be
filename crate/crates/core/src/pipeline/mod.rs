//! Run orchestration: a single JSON config, one directory of artifacts per
//! run, and a manifest of content hashes that every stage checks before it
//! reads its inputs.

mod config;
mod manifest;
mod stages;

pub use config::{
    desk_uhead, AnalysisConfig, BonConfig, CombinerConfig, CorpusConfig, DataConfig, JudgeMode,
    LexicalConfig, RunConfig,
};
pub use manifest::{validate_manifest, ArtifactEntry, DatasetManifest, MANIFEST_FILE};
pub use stages::{parse_chain, AnalysisRecord, DiversityPoint, Run, Split, Stage, REPORT_CSV, REPORT_JSON};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("unknown command: {0}")]
    UnknownCommand(String),
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("hash mismatch for {path}: {detail}")]
    HashMismatch { path: String, detail: String },
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl PipelineError {
    /// Process exit code: 2 config, 3 data, 4 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::UnknownCommand(_) | Self::ConfigInvalid(_) => 2,
            Self::HashMismatch { .. } | Self::MissingFile(_) | Self::Data(_) | Self::Io(_) => 3,
            Self::Runtime(_) => 4,
        }
    }
}

macro_rules! data_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for PipelineError {
            fn from(e: $t) -> Self {
                Self::Data(e.to_string())
            }
        }
    )*};
}

macro_rules! runtime_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for PipelineError {
            fn from(e: $t) -> Self {
                Self::Runtime(e.to_string())
            }
        }
    )*};
}

data_errors!(
    crate::taskgen::TaskError,
    crate::features::FeatureError,
    serde_json::Error
);
runtime_errors!(
    crate::toylm::LmError,
    crate::uhead::UHeadError,
    crate::tts::TtsError,
    crate::baselines::BaselineError,
    crate::eval::EvalError
);

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}
