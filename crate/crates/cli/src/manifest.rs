//! Per-stage provenance records. A manifest names the stage's parents by
//! digest, so the manifests of one artifact directory form a DAG that
//! `verify` can re-check from the files on disk.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{json_hash, PipelineConfig};

pub const MANIFEST_DIR: &str = "manifests";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    /// Cache key: stage name, stage config and parent digests.
    pub key: String,
    /// Hash of the slice of the config this stage reads.
    pub config_hash: String,
    /// Full configuration in force when the stage ran.
    pub config: PipelineConfig,
    /// Parent stage name to the digest of its manifest.
    pub parents: BTreeMap<String, String>,
    /// Artifact-relative path to SHA-256, for every file the stage read.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    /// Excluded from the digest.
    pub wall_time_s: f64,
    pub tool_version: String,
}

impl RunManifest {
    /// Content digest with the wall time zeroed.
    pub fn digest(&self) -> String {
        json_hash(&Self { wall_time_s: 0.0, ..self.clone() })
    }

    pub fn path(root: &Path, stage: &str) -> PathBuf {
        root.join(MANIFEST_DIR).join(format!("{stage}.json"))
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let p = Self::path(root, &self.stage);
        fs::create_dir_all(p.parent().expect("manifest dir"))?;
        fs::write(&p, serde_json::to_string_pretty(self)?).with_context(|| format!("writing {}", p.display()))
    }

    pub fn read(root: &Path, stage: &str) -> Result<Option<Self>> {
        let p = Self::path(root, stage);
        if !p.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        Ok(Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?))
    }

    /// Paths whose current hash differs from the recorded one (missing
    /// files included).
    pub fn drifted_outputs(&self, root: &Path) -> Vec<String> {
        drifted(root, &self.outputs)
    }

    pub fn drifted_inputs(&self, root: &Path) -> Vec<String> {
        drifted(root, &self.inputs)
    }
}

fn drifted(root: &Path, files: &BTreeMap<String, String>) -> Vec<String> {
    files
        .iter()
        .filter(|(rel, sum)| file_sha256(&root.join(rel)).ok().as_ref() != Some(*sum))
        .map(|(rel, _)| rel.clone())
        .collect()
}

pub fn file_sha256(path: &Path) -> io::Result<String> {
    let mut h = Sha256::new();
    io::copy(&mut File::open(path)?, &mut h)?;
    Ok(hex::encode(h.finalize()))
}

/// Held while a pipeline writes into an artifact directory.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub const FILE: &'static str = ".lock";

    pub fn acquire(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let path = root.join(Self::FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => anyhow::bail!(
                "{} exists: another pipeline is using this directory (remove the file if it is stale)",
                path.display()
            ),
            Err(e) => Err(e).with_context(|| format!("creating {}", path.display())),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
