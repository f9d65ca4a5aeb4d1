//! Cached, resumable experiment pipeline over a run directory.
//!
//! [`RunConfig`] describes a whole experiment in one TOML file. [`Pipeline`]
//! executes it as six stages (train, attack, influence, features, detect,
//! eval), each of which records a content-addressed cache key and the hashes
//! of the files it wrote in the run manifest. Rerunning a stage whose key and
//! artifacts are intact is a no-op; editing any config field reruns exactly
//! the stages downstream of the change.

pub mod config;
pub mod manifest;
pub mod stages;

pub use config::{
    DatasetConfig, DatasetKind, DetectionSection, EvalSection, FeatureSection, InfluenceSection,
    ModelConfig, RunConfig,
};
pub use manifest::{hash_file, sha256_hex, stage_key, RunManifest, StageEntry, MANIFEST_FILE};
pub use stages::{Pipeline, StageName, StageOutcome, DATA_FILE, MODEL_FILE, REPORTS_DIR};
