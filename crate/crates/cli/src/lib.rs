//! Pipeline driver: configuration, stage caching, provenance manifests,
//! reports and verification.

pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod report;
pub mod verify;

pub use config::PipelineConfig;
pub use manifest::RunManifest;
pub use pipeline::{Pipeline, QaReport, StageFailure, StageStatus};
pub use verify::{verify, VerifyReport};
