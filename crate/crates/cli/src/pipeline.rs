//! Stage DAG, content-addressed caching and the stage bodies.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;
use xmprobe_core::acts::{capture_text, ActivationDump};
use xmprobe_core::adapter::{qa_accuracy, train_stage1, train_stage2, AdapterWeights, StageReport, TrainItem};
use xmprobe_core::probe::{run_probe, MetricsReport, ProbeModels};
use xmprobe_core::saelab::{describe_features, train_sae_sweep, write_descriptions_csv, FeatureDescription, SaeTrainReport, SaeWeights};
use xmprobe_core::synthworld::{
    build_text_corpus, derive_seed, example_from_record, gen_image, mm_caption_record, mm_qa_record, read_records, vit_pair_record,
    write_records, MmExample, Record,
};
use xmprobe_core::tinylm::{train_lm, TinyLm, Tokenizer};
use xmprobe_core::tinyvit::{train_contrastive, ImageText, TinyVit};

use crate::config::{json_hash, PipelineConfig};
use crate::manifest::{file_sha256, DirLock, RunManifest, TOOL_VERSION};
use crate::report::write_report;

pub struct StageDef {
    pub name: &'static str,
    pub parents: &'static [&'static str],
}

/// In execution order.
pub const STAGES: [StageDef; 10] = [
    StageDef { name: "gen", parents: &[] },
    StageDef { name: "train-lm", parents: &["gen"] },
    StageDef { name: "train-vit", parents: &["gen"] },
    StageDef { name: "dump-acts", parents: &["gen", "train-lm"] },
    StageDef { name: "train-saes", parents: &["dump-acts"] },
    StageDef { name: "describe", parents: &["dump-acts", "train-saes"] },
    StageDef { name: "train-adapter-1", parents: &["gen", "train-lm", "train-vit"] },
    StageDef { name: "train-adapter-2", parents: &["gen", "train-lm", "train-vit", "train-adapter-1"] },
    StageDef {
        name: "probe",
        parents: &["gen", "train-lm", "train-vit", "train-saes", "describe", "train-adapter-1", "train-adapter-2"],
    },
    StageDef { name: "report", parents: &["train-adapter-2", "probe"] },
];

pub fn stage_def(name: &str) -> Option<&'static StageDef> {
    STAGES.iter().find(|s| s.name == name)
}

/// `target` and everything it depends on, in execution order.
pub fn ancestors(target: &str) -> Result<Vec<&'static str>> {
    let def = stage_def(target).ok_or_else(|| anyhow!("unknown stage `{target}`"))?;
    let mut need = BTreeSet::from([def.name]);
    for s in STAGES.iter().rev() {
        if need.contains(s.name) {
            need.extend(s.parents.iter().copied());
        }
    }
    Ok(STAGES.iter().map(|s| s.name).filter(|n| need.contains(n)).collect())
}

/// Artifact paths, relative to the artifact root.
pub mod paths {
    pub const CORPUS: &str = "data/corpus.jsonl";
    pub const SAE_CORPUS: &str = "data/sae_corpus.jsonl";
    pub const VIT_PAIRS: &str = "data/vit_pairs.jsonl";
    pub const STAGE1: &str = "data/stage1.jsonl";
    pub const STAGE2: &str = "data/stage2.jsonl";
    pub const PROBE: &str = "data/probe.jsonl";
    pub const QA_EVAL: &str = "data/qa_eval.jsonl";
    pub const LM: &str = "models/lm.bin";
    pub const LM_REPORT: &str = "models/lm_report.json";
    pub const VIT: &str = "models/vit.bin";
    pub const VIT_REPORT: &str = "models/vit_report.json";
    pub const SAE_REPORT: &str = "saes/report.json";
    pub const ADAPTER_RANDOM: &str = "adapter/adapter_random.bin";
    pub const ADAPTER_STAGE1: &str = "adapter/adapter_stage1.bin";
    pub const ADAPTER: &str = "adapter/adapter.bin";
    pub const STAGE1_REPORT: &str = "adapter/stage1_report.json";
    pub const STAGE2_REPORT: &str = "adapter/stage2_report.json";
    pub const QA_REPORT: &str = "adapter/qa.json";
    pub const METRICS: &str = "metrics";
    pub const METRICS_RANDOM: &str = "metrics/random";
    pub const REPORT_DIR: &str = "report";

    pub fn acts_stem(layer: usize) -> String {
        format!("acts/text_layer_{layer}")
    }

    pub fn sae(layer: usize) -> String {
        format!("saes/sae_layer_{layer}.bin")
    }

    pub fn descriptions(layer: usize, ext: &str) -> String {
        format!("descriptions/layer_{layer}.{ext}")
    }
}

/// Held-out QA exact match of the trained adapter against the controls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaReport {
    pub n_examples: usize,
    pub random: f64,
    pub stage1: f64,
    pub trained: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeStageReport {
    pub layers: Vec<SaeTrainReport>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Cached,
}

/// A stage failure, carrying the stage name.
#[derive(Debug)]
pub struct StageFailure {
    pub stage: String,
    pub source: anyhow::Error,
}

impl std::fmt::Display for StageFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage `{}` failed: {:#}", self.stage, self.source)
    }
}

impl std::error::Error for StageFailure {}

/// Files a running stage reads and writes, recorded for its manifest.
struct Ctx<'a> {
    root: &'a Path,
    cfg: &'a PipelineConfig,
    seed: u64,
    inputs: RefCell<BTreeSet<String>>,
    outputs: RefCell<BTreeSet<String>>,
}

impl Ctx<'_> {
    fn input(&self, rel: &str) -> PathBuf {
        self.inputs.borrow_mut().insert(rel.to_string());
        self.root.join(rel)
    }

    fn output(&self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        fs::create_dir_all(p.parent().expect("artifact paths have a parent"))?;
        self.outputs.borrow_mut().insert(rel.to_string());
        Ok(p)
    }

    fn write_json<T: Serialize>(&self, rel: &str, v: &T) -> Result<()> {
        fs::write(self.output(rel)?, serde_json::to_string_pretty(v)?)?;
        Ok(())
    }

    fn records(&self, rel: &str) -> Result<Vec<Record>> {
        Ok(read_records(&self.input(rel))?)
    }

    fn examples(&self, rel: &str) -> Result<Vec<MmExample>> {
        self.records(rel)?
            .iter()
            .map(|r| example_from_record(r).ok_or_else(|| anyhow!("{rel}: expected multimodal records")))
            .collect()
    }

    fn lm(&self) -> Result<TinyLm> {
        Ok(TinyLm::load(&self.input(paths::LM))?)
    }

    fn vit(&self) -> Result<TinyVit> {
        Ok(TinyVit::load(&self.input(paths::VIT))?)
    }

    fn layers(&self) -> Vec<usize> {
        (1..=self.cfg.lm.n_layers).collect()
    }
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub root: PathBuf,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Self {
        let root = cfg.paths.artifacts.clone();
        Self { cfg, root }
    }

    /// The part of the config a stage depends on, besides its parents.
    pub fn stage_config(&self, stage: &str) -> serde_json::Value {
        let c = &self.cfg;
        match stage {
            "gen" => json!({ "seed": c.seed, "data": c.data }),
            "train-lm" => json!({ "seed": c.seed, "lm": c.lm, "lm_train": c.lm_train }),
            "train-vit" => json!({ "seed": c.seed, "vit": c.vit, "vit_train": c.vit_train }),
            "train-saes" => json!({ "seed": c.seed, "sae": c.sae }),
            "describe" => json!({ "describe": c.describe }),
            "train-adapter-1" => json!({ "seed": c.seed, "init_std": c.adapter.init_std, "stage1": c.adapter.stage1 }),
            "train-adapter-2" => json!({
                "seed": c.seed,
                "stage2": c.adapter.stage2,
                "max_answer_tokens": c.adapter.max_answer_tokens,
            }),
            "probe" => json!({ "probe": c.probe }),
            _ => json!({}),
        }
    }

    fn key(&self, stage: &str, parents: &BTreeMap<String, String>) -> String {
        json_hash(&json!({
            "stage": stage,
            "tool_version": TOOL_VERSION,
            "config": self.stage_config(stage),
            "parents": parents,
        }))
    }

    /// Runs `target` and its ancestors, skipping stages whose manifest
    /// matches the current key and whose outputs are intact.
    pub fn run(&self, target: &str) -> Result<Vec<(&'static str, StageStatus)>, StageFailure> {
        let fail = |stage: &str, source: anyhow::Error| StageFailure { stage: stage.to_string(), source };
        let order = ancestors(target).map_err(|e| fail(target, e))?;
        let _lock = DirLock::acquire(&self.root).map_err(|e| fail(target, e))?;
        let mut out = Vec::new();
        for name in order {
            let status = self.run_stage(name).map_err(|e| fail(name, e))?;
            out.push((name, status));
        }
        Ok(out)
    }

    fn run_stage(&self, name: &'static str) -> Result<StageStatus> {
        let def = stage_def(name).expect("known stage");
        let mut parents = BTreeMap::new();
        for p in def.parents {
            let m = RunManifest::read(&self.root, p)?.ok_or_else(|| anyhow!("parent stage `{p}` has no manifest"))?;
            parents.insert(p.to_string(), m.digest());
        }
        let key = self.key(name, &parents);
        let old = RunManifest::read(&self.root, name)?;
        if let Some(m) = &old {
            if m.key == key && m.drifted_outputs(&self.root).is_empty() {
                log::info!("{name}: up to date");
                return Ok(StageStatus::Cached);
            }
            for rel in m.outputs.keys() {
                let _ = fs::remove_file(self.root.join(rel));
            }
        }
        log::info!("{name}: running");
        let ctx = Ctx {
            root: &self.root,
            cfg: &self.cfg,
            seed: self.cfg.stage_seed(name),
            inputs: RefCell::default(),
            outputs: RefCell::default(),
        };
        let start = Instant::now();
        match name {
            "gen" => gen(&ctx),
            "train-lm" => train_lm_stage(&ctx),
            "train-vit" => train_vit_stage(&ctx),
            "dump-acts" => dump_acts(&ctx),
            "train-saes" => train_saes(&ctx),
            "describe" => describe(&ctx),
            "train-adapter-1" => train_adapter_1(&ctx),
            "train-adapter-2" => train_adapter_2(&ctx),
            "probe" => probe(&ctx),
            "report" => report(&ctx),
            _ => unreachable!("stage table and dispatch agree"),
        }?;
        let wall_time_s = start.elapsed().as_secs_f64();
        let hash_all = |set: &BTreeSet<String>| -> Result<BTreeMap<String, String>> {
            set.iter()
                .map(|rel| Ok((rel.clone(), file_sha256(&self.root.join(rel)).with_context(|| format!("hashing {rel}"))?)))
                .collect()
        };
        let manifest = RunManifest {
            stage: name.to_string(),
            key,
            config_hash: json_hash(&self.stage_config(name)),
            config: self.cfg.clone(),
            parents,
            inputs: hash_all(&ctx.inputs.borrow())?,
            outputs: hash_all(&ctx.outputs.borrow())?,
            wall_time_s,
            tool_version: TOOL_VERSION.to_string(),
        };
        manifest.write(&self.root)?;
        log::info!("{name}: done in {wall_time_s:.1}s");
        Ok(StageStatus::Ran)
    }
}

fn gen(ctx: &Ctx) -> Result<()> {
    let (s, d) = (ctx.seed, &ctx.cfg.data);
    let density = d.density;
    let mm = |n: usize, stream: u64, f: fn(u64, f64, u64) -> Record| -> Vec<Record> {
        (0..n as u64).map(|i| f(derive_seed(s, stream, i), density, derive_seed(s, stream + 100, i))).collect()
    };
    let sets: [(&str, Vec<Record>); 7] = [
        (paths::CORPUS, build_text_corpus(d.corpus_docs, derive_seed(s, 1, 0), density)),
        (paths::SAE_CORPUS, build_text_corpus(d.sae_docs, derive_seed(s, 2, 0), density)),
        (paths::VIT_PAIRS, (0..d.vit_pairs as u64).map(|i| vit_pair_record(derive_seed(s, 3, i), density)).collect()),
        (paths::STAGE1, mm(d.stage1_examples, 4, mm_caption_record)),
        (paths::STAGE2, mm(d.stage2_examples, 5, mm_qa_record)),
        (paths::PROBE, mm(d.probe_examples, 6, mm_qa_record)),
        (paths::QA_EVAL, mm(d.qa_eval_examples, 7, mm_qa_record)),
    ];
    for (rel, records) in &sets {
        write_records(&ctx.output(rel)?, records)?;
    }
    Ok(())
}

fn train_lm_stage(ctx: &Ctx) -> Result<()> {
    let tok = Tokenizer::new();
    let docs: Vec<Vec<u32>> = ctx.records(paths::CORPUS)?.iter().filter_map(|r| tok.encode_record(r)).collect();
    let (lm, report) = train_lm(&docs, ctx.cfg.lm.clone(), &ctx.cfg.lm_train, ctx.seed)?;
    log::info!("train-lm: val loss {:.4}, unigram entropy {:.4}", report.val_loss, report.unigram_entropy);
    lm.save(&ctx.output(paths::LM)?)?;
    ctx.write_json(paths::LM_REPORT, &report)
}

fn train_vit_stage(ctx: &Ctx) -> Result<()> {
    let tok = Tokenizer::new();
    let pairs: Vec<ImageText> = ctx
        .records(paths::VIT_PAIRS)?
        .into_iter()
        .map(|r| match r {
            Record::Caption { image_seed, density, caption } => {
                Ok(ImageText { pixels: gen_image(image_seed, density).pixels, tokens: tok.tokenize(&caption) })
            }
            _ => bail!("{}: expected caption records", paths::VIT_PAIRS),
        })
        .collect::<Result<_>>()?;
    let (vit, _text, report) = train_contrastive(&pairs, ctx.cfg.vit.clone(), &ctx.cfg.vit_train, ctx.seed)?;
    log::info!("train-vit: retrieval recall@1 {:.3}", report.recall_at_1);
    vit.save(&ctx.output(paths::VIT)?)?;
    ctx.write_json(paths::VIT_REPORT, &report)
}

fn dump_acts(ctx: &Ctx) -> Result<()> {
    let tok = Tokenizer::new();
    let lm = ctx.lm()?;
    let docs: Vec<Vec<u32>> = ctx.records(paths::SAE_CORPUS)?.iter().filter_map(|r| tok.encode_record(r)).collect();
    let layers: BTreeSet<usize> = ctx.layers().into_iter().collect();
    for (l, dump) in capture_text(&lm, &docs, &layers, 32)? {
        let stem = paths::acts_stem(l);
        let stem_path = ctx.root.join(&stem);
        ctx.output(&format!("{stem}.bin"))?;
        ctx.output(&format!("{stem}.tags.json"))?;
        debug_assert_eq!(ActivationDump::tensor_path(&stem_path), ctx.root.join(format!("{stem}.bin")));
        dump.write(&stem_path)?;
    }
    Ok(())
}

fn read_dump(ctx: &Ctx, l: usize) -> Result<ActivationDump> {
    let stem = paths::acts_stem(l);
    ctx.input(&format!("{stem}.bin"));
    ctx.input(&format!("{stem}.tags.json"));
    Ok(ActivationDump::read(&ctx.root.join(stem))?)
}

fn train_saes(ctx: &Ctx) -> Result<()> {
    let mut reports = Vec::new();
    for l in ctx.layers() {
        let dump = read_dump(ctx, l)?;
        let x = dump.gather(&dump.non_bos_rows());
        let (sae, report) = train_sae_sweep(&x, dump.d_model, l, &ctx.cfg.sae, derive_seed(ctx.seed, l as u64, 0))?;
        log::info!(
            "train-saes: layer {l} l1 {} fvu {:.4} l0 {:.4}",
            report.chosen_l1,
            report.val_fvu,
            report.val_l0_fraction
        );
        sae.save(&ctx.output(&paths::sae(l))?)?;
        reports.push(report);
    }
    ctx.write_json(paths::SAE_REPORT, &SaeStageReport { layers: reports })
}

fn describe(ctx: &Ctx) -> Result<()> {
    for l in ctx.layers() {
        let dump = read_dump(ctx, l)?;
        let sae = SaeWeights::load(&ctx.input(&paths::sae(l)))?;
        let descs = describe_features(&sae, &dump, &ctx.cfg.describe)?;
        write_descriptions_csv(&ctx.output(&paths::descriptions(l, "csv"))?, &descs)?;
        ctx.write_json(&paths::descriptions(l, "json"), &descs)?;
    }
    Ok(())
}

fn train_adapter_1(ctx: &Ctx) -> Result<()> {
    let (lm, vit) = (ctx.lm()?, ctx.vit()?);
    let random = AdapterWeights::random(vit.d_vis(), lm.d_model(), ctx.cfg.adapter.init_std, derive_seed(ctx.seed, 1, 0));
    random.save(&ctx.output(paths::ADAPTER_RANDOM)?)?;
    let items = TrainItem::from_examples(&vit, &ctx.examples(paths::STAGE1)?)?;
    let (a1, report) = train_stage1(&lm, &vit, random, &items, &ctx.cfg.adapter.stage1, derive_seed(ctx.seed, 2, 0))?;
    log::info!("train-adapter-1: epoch loss {:?}", report.epoch_loss);
    a1.save(&ctx.output(paths::ADAPTER_STAGE1)?)?;
    ctx.write_json(paths::STAGE1_REPORT, &report)
}

fn train_adapter_2(ctx: &Ctx) -> Result<()> {
    let (lm, vit) = (ctx.lm()?, ctx.vit()?);
    let a1 = AdapterWeights::load(&ctx.input(paths::ADAPTER_STAGE1))?;
    let random = AdapterWeights::load(&ctx.input(paths::ADAPTER_RANDOM))?;
    let items = TrainItem::from_examples(&vit, &ctx.examples(paths::STAGE2)?)?;
    let (a2, report) = train_stage2(&lm, &vit, a1.clone(), &items, &ctx.cfg.adapter.stage2, derive_seed(ctx.seed, 1, 0))?;
    log::info!("train-adapter-2: epoch loss {:?}", report.epoch_loss);
    a2.save(&ctx.output(paths::ADAPTER)?)?;
    ctx.write_json(paths::STAGE2_REPORT, &report)?;

    let eval = TrainItem::from_examples(&vit, &ctx.examples(paths::QA_EVAL)?)?;
    let max_new = ctx.cfg.adapter.max_answer_tokens;
    let qa = QaReport {
        n_examples: eval.len(),
        random: qa_accuracy(&lm, &random, &eval, max_new)?,
        stage1: qa_accuracy(&lm, &a1, &eval, max_new)?,
        trained: qa_accuracy(&lm, &a2, &eval, max_new)?,
    };
    log::info!("train-adapter-2: QA exact match random {:.3} trained {:.3}", qa.random, qa.trained);
    ctx.write_json(paths::QA_REPORT, &qa)
}

fn probe(ctx: &Ctx) -> Result<()> {
    let (lm, vit) = (ctx.lm()?, ctx.vit()?);
    let mut saes = BTreeMap::new();
    let mut descs = BTreeMap::new();
    for l in ctx.layers() {
        saes.insert(l, SaeWeights::load(&ctx.input(&paths::sae(l)))?);
        let text = fs::read_to_string(ctx.input(&paths::descriptions(l, "json")))?;
        let d: Vec<FeatureDescription> = serde_json::from_str(&text)?;
        descs.insert(l, d);
    }
    let examples = ctx.examples(paths::PROBE)?;
    for (adapter_rel, out_rel) in [(paths::ADAPTER, paths::METRICS), (paths::ADAPTER_RANDOM, paths::METRICS_RANDOM)] {
        let adapter = AdapterWeights::load(&ctx.input(adapter_rel))?;
        let report = run_probe(ProbeModels { lm: &lm, vit: &vit, adapter: &adapter }, &saes, &descs, &examples, &ctx.cfg.probe)?;
        ctx.output(&format!("{out_rel}/metrics.json"))?;
        ctx.output(&format!("{out_rel}/metrics.csv"))?;
        report.write(&ctx.root.join(out_rel))?;
    }
    Ok(())
}

fn report(ctx: &Ctx) -> Result<()> {
    let trained = MetricsReport::read(&ctx.root.join(paths::METRICS))?;
    let random = MetricsReport::read(&ctx.root.join(paths::METRICS_RANDOM))?;
    ctx.input(&format!("{}/metrics.json", paths::METRICS));
    ctx.input(&format!("{}/metrics.json", paths::METRICS_RANDOM));
    let qa: QaReport = serde_json::from_str(&fs::read_to_string(ctx.input(paths::QA_REPORT))?)?;
    let dir = ctx.root.join(paths::REPORT_DIR);
    for f in write_report(&dir, &trained, Some(&random), Some(&qa))? {
        ctx.output(&format!("{}/{f}", paths::REPORT_DIR))?;
    }
    Ok(())
}

/// Frozen-model checksums recorded by an adapter stage.
pub fn read_stage_report(root: &Path, rel: &str) -> Result<StageReport> {
    Ok(serde_json::from_str(&fs::read_to_string(root.join(rel))?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_table_is_topologically_ordered() {
        for (i, s) in STAGES.iter().enumerate() {
            for p in s.parents {
                let j = STAGES.iter().position(|t| t.name == *p).expect("parent exists");
                assert!(j < i, "{} before {}", p, s.name);
            }
        }
    }

    #[test]
    fn ancestors_are_closed() {
        assert_eq!(ancestors("gen").unwrap(), vec!["gen"]);
        assert_eq!(ancestors("train-saes").unwrap(), vec!["gen", "train-lm", "dump-acts", "train-saes"]);
        assert_eq!(ancestors("report").unwrap().len(), STAGES.len());
        assert!(ancestors("nope").is_err());
    }

    #[test]
    fn probe_threshold_change_only_touches_probe_key() {
        let a = Pipeline::new(PipelineConfig::default());
        let mut cfg = PipelineConfig::default();
        cfg.probe.image_freq_max = 0.1;
        let b = Pipeline::new(cfg);
        for s in STAGES.iter() {
            let same = a.stage_config(s.name) == b.stage_config(s.name);
            assert_eq!(same, s.name != "probe", "{}", s.name);
        }
    }
}
