//! The end-to-end pipeline: a TOML-configured run directory populated stage
//! by stage (synth → encode → train-gan → augment → train-classifier →
//! evaluate → report), with a JSON manifest per stage so each command can
//! verify its upstream artifacts are present and were produced under the
//! configuration currently in effect.

use std::path::PathBuf;
use thiserror::Error;

mod commands;
mod config;
mod manifest;

#[cfg(test)]
mod tests;

pub use commands::{
    cmd_augment, cmd_encode, cmd_evaluate, cmd_report, cmd_synth, cmd_train_classifier,
    cmd_train_gan, StageOutcome, STAGE_AUGMENT, STAGE_ENCODE, STAGE_EVALUATE, STAGE_REPORT,
    STAGE_SYNTH, STAGE_TRAIN_CLASSIFIER, STAGE_TRAIN_GAN,
};
pub use config::{
    load_config, parse_config, DatasetSection, EncodeSection, EvalSection, GanSection,
    ModelSection, OutputSection, PipelineConfig, SynthSection, TrainSection,
};
pub use manifest::{
    check_upstream, fingerprint, hash_file, load_manifest, manifest_path, sha256_hex,
    write_manifest, StageManifest, MANIFEST_SCHEMA,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    /// A config value is missing or out of range; `key` is the TOML path.
    #[error("config error at {key}: {reason}")]
    Config { key: String, reason: String },
    /// A required upstream artifact does not exist yet.
    #[error("missing artifact for stage {stage:?}: {path} (run the stage first)")]
    MissingArtifact { stage: String, path: PathBuf },
    /// An upstream artifact exists but no longer matches the live config.
    #[error("stale artifacts for stage {stage:?}: {detail}")]
    StaleUpstream { stage: String, detail: String },
    #[error(transparent)]
    Data(#[from] crate::dataio::DataError),
    #[error(transparent)]
    Encode(#[from] crate::gafenc::GafError),
    #[error(transparent)]
    Gan(#[from] crate::augment::AugmentError),
    #[error(transparent)]
    Model(#[from] crate::macnn::MacnnError),
    #[error(transparent)]
    Eval(#[from] crate::evalviz::EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PipelineError {
    /// Coarse error class for CLI reporting.
    pub fn category(&self) -> &'static str {
        match self {
            PipelineError::Config { .. } | PipelineError::Toml(_) => "config",
            PipelineError::MissingArtifact { .. } => "missing-artifact",
            PipelineError::StaleUpstream { .. } => "stale-artifact",
            PipelineError::Data(_) => "data",
            PipelineError::Encode(_) => "encode",
            PipelineError::Gan(_) => "gan",
            PipelineError::Model(_) => "model",
            PipelineError::Eval(_) => "eval",
            PipelineError::Io(_) => "io",
            PipelineError::Json(_) => "serialization",
        }
    }
}
