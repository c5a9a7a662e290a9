#![allow(dead_code)]

use std::path::Path;

use xmprobe::PipelineConfig;

/// A pipeline small enough to run end to end in a couple of seconds.
pub fn tiny_config(artifacts: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::from_toml(include_str!("tiny.toml")).unwrap();
    cfg.paths.artifacts = artifacts.to_path_buf();
    cfg.validate().unwrap();
    cfg
}
