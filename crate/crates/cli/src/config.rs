//! Pipeline configuration: one TOML file, every section optional, unknown
//! keys rejected. Only the artifact path may be overridden from the
//! environment (`XMPROBE_ARTIFACTS`).

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use xmprobe_core::adapter::StageConfig;
use xmprobe_core::probe::ProbeConfig;
use xmprobe_core::saelab::{DescribeConfig, SaeTrainConfig};
use xmprobe_core::tinylm::{LmConfig, LmTrainConfig, Tokenizer};
use xmprobe_core::tinyvit::{VitConfig, VitTrainConfig};

pub const ARTIFACTS_ENV: &str = "XMPROBE_ARTIFACTS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub artifacts: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { artifacts: PathBuf::from("artifacts") }
    }
}

/// Dataset sizes. Every multimodal set draws images from its own seed stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Probability that a grid cell is filled.
    pub density: f64,
    pub corpus_docs: usize,
    /// Separate text corpus used to fit and describe the SAEs.
    pub sae_docs: usize,
    pub vit_pairs: usize,
    pub stage1_examples: usize,
    pub stage2_examples: usize,
    pub probe_examples: usize,
    pub qa_eval_examples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            density: 0.4,
            corpus_docs: 20000,
            sae_docs: 4000,
            vit_pairs: 12000,
            stage1_examples: 20000,
            stage2_examples: 8000,
            probe_examples: 2000,
            qa_eval_examples: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    #[serde(deserialize_with = "stage1_patch")]
    pub stage1: StageConfig,
    #[serde(deserialize_with = "stage2_patch")]
    pub stage2: StageConfig,
    /// Standard deviation of the untrained adapter's weights.
    pub init_std: f64,
    /// Generation budget for QA exact-match evaluation.
    pub max_answer_tokens: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { stage1: StageConfig::stage1(), stage2: StageConfig::stage2(), init_std: 0.02, max_answer_tokens: 48 }
    }
}

/// Partial stage section; absent keys keep that stage's published value.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StagePatch {
    lr: Option<f32>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    warmup_ratio: Option<f64>,
    grad_clip: Option<f32>,
}

impl StagePatch {
    fn apply(self, mut s: StageConfig) -> StageConfig {
        s.lr = self.lr.unwrap_or(s.lr);
        s.batch_size = self.batch_size.unwrap_or(s.batch_size);
        s.epochs = self.epochs.unwrap_or(s.epochs);
        s.warmup_ratio = self.warmup_ratio.unwrap_or(s.warmup_ratio);
        s.grad_clip = self.grad_clip.unwrap_or(s.grad_clip);
        s
    }
}

fn stage1_patch<'de, D: serde::Deserializer<'de>>(d: D) -> Result<StageConfig, D::Error> {
    Ok(StagePatch::deserialize(d)?.apply(StageConfig::stage1()))
}

fn stage2_patch<'de, D: serde::Deserializer<'de>>(d: D) -> Result<StageConfig, D::Error> {
    Ok(StagePatch::deserialize(d)?.apply(StageConfig::stage2()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    pub data: DataConfig,
    pub lm: LmConfig,
    pub lm_train: LmTrainConfig,
    pub vit: VitConfig,
    pub vit_train: VitTrainConfig,
    pub sae: SaeTrainConfig,
    pub describe: DescribeConfig,
    pub adapter: AdapterConfig,
    pub probe: ProbeConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            paths: Paths::default(),
            data: DataConfig::default(),
            lm: LmConfig::default(),
            lm_train: LmTrainConfig { epochs: 6, ..LmTrainConfig::default() },
            vit: VitConfig::default(),
            vit_train: VitTrainConfig { epochs: 4, ..VitTrainConfig::default() },
            sae: SaeTrainConfig::default(),
            describe: DescribeConfig::default(),
            adapter: AdapterConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("parsing config")?;
        Ok(cfg)
    }

    /// Reads `path` (defaults when `None`), applies the environment path
    /// override and validates.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        if let Some(dir) = std::env::var_os(ARTIFACTS_ENV) {
            cfg.paths.artifacts = PathBuf::from(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        ensure!(d.density > 0.0 && d.density <= 1.0, "data.density must lie in (0, 1]");
        for (name, n) in [
            ("corpus_docs", d.corpus_docs),
            ("sae_docs", d.sae_docs),
            ("vit_pairs", d.vit_pairs),
            ("stage1_examples", d.stage1_examples),
            ("stage2_examples", d.stage2_examples),
            ("probe_examples", d.probe_examples),
            ("qa_eval_examples", d.qa_eval_examples),
        ] {
            ensure!(n > 0, "data.{name} must be positive");
        }
        self.lm.validate().map_err(|e| anyhow::anyhow!("lm: {e}"))?;
        self.vit.validate().map_err(|e| anyhow::anyhow!("vit: {e}"))?;
        let vocab = Tokenizer::new().vocab_size();
        if self.lm.vocab_size != vocab {
            bail!("lm.vocab_size is {} but the tokenizer has {vocab} types", self.lm.vocab_size);
        }
        if self.vit_train.text.vocab_size != vocab {
            bail!("vit_train.text.vocab_size is {} but the tokenizer has {vocab} types", self.vit_train.text.vocab_size);
        }
        ensure!(self.vit_train.text.d == self.vit.d_vis, "vit_train.text.d must equal vit.d_vis");
        ensure!(d.vit_pairs > self.vit_train.val_pairs + 1, "data.vit_pairs must exceed vit_train.val_pairs + 1");
        ensure!(!self.sae.l1_sweep.is_empty(), "sae.l1_sweep must not be empty");
        ensure!(self.sae.d_sae > self.lm.d_model, "sae.d_sae must exceed lm.d_model");
        for (name, s) in [("stage1", &self.adapter.stage1), ("stage2", &self.adapter.stage2)] {
            ensure!(s.batch_size > 0, "adapter.{name}.batch_size must be positive");
            ensure!(s.lr >= 0.0, "adapter.{name}.lr must be non-negative");
            ensure!((0.0..=1.0).contains(&s.warmup_ratio), "adapter.{name}.warmup_ratio must lie in [0, 1]");
        }
        let p = &self.probe;
        ensure!(p.n_rs.max(p.n_align) <= d.probe_examples, "probe.n_rs and probe.n_align must not exceed data.probe_examples");
        ensure!(p.n_align > 0 && p.n_rs > 0, "probe.n_rs and probe.n_align must be positive");
        ensure!(p.k > 0, "probe.k must be positive");
        ensure!(p.batch_size > 0, "probe.batch_size must be positive");
        Ok(())
    }

    /// Seed of a named stage: the first eight bytes of
    /// `sha256("<global seed>/<stage>")`.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        stage_seed(self.seed, stage)
    }
}

pub fn stage_seed(global: u64, stage: &str) -> u64 {
    let h = Sha256::digest(format!("{global}/{stage}").as_bytes());
    u64::from_le_bytes(h[..8].try_into().expect("eight bytes"))
}

/// Hex SHA-256 of a value's canonical JSON.
pub fn json_hash<T: Serialize>(v: &T) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(v).expect("serialisable")))
}
