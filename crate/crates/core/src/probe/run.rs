use std::collections::{BTreeMap, BTreeSet};

use super::{
    alignment_rate, build_baseline, detect_convergence, feature_scores, filter_features, image_frequencies,
    top_k_features, GroupAccumulator, GroupRows, GroupMetrics, LayerMetrics, MetricsReport, ProbeConfig, Ranking, TokenGroup,
};
use crate::acts::{capture, ActivationDump, SeqMeta};
use crate::adapter::{assemble_patches, chat_tokens, AdapterWeights};
use crate::error::{Error, Result};
use crate::saelab::{FeatureDescription, SaeWeights};
use crate::synthworld::{ConceptSet, MmExample};
use crate::tinylm::{PositionTag, TinyLm, Tokenizer};
use crate::tinyvit::TinyVit;

#[derive(Clone, Copy)]
pub struct ProbeModels<'a> {
    pub lm: &'a TinyLm,
    pub vit: &'a TinyVit,
    pub adapter: &'a AdapterWeights,
}

/// Residual streams of the VLM inputs and their text-only baselines.
#[derive(Clone, Debug)]
pub struct ProbeActs {
    pub vlm: BTreeMap<usize, ActivationDump>,
    pub baseline: BTreeMap<usize, ActivationDump>,
    pub concepts: Vec<ConceptSet>,
}

/// Runs every example through the VLM as `<bos> visual <sep> instruction
/// <sep> answer <eos>` and its baseline through the bare LM.
pub fn capture_probe_acts(
    m: ProbeModels,
    examples: &[MmExample],
    layers: &BTreeSet<usize>,
    batch: usize,
) -> Result<ProbeActs> {
    let tok = Tokenizer::new();
    let mut vlm_in = Vec::with_capacity(examples.len());
    let mut vlm_meta = Vec::with_capacity(examples.len());
    let mut base_in = Vec::with_capacity(examples.len());
    let mut base_meta = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch.max(1)) {
        let imgs: Vec<&[f32]> = chunk.iter().map(|e| e.image.pixels.as_slice()).collect();
        for (e, p) in chunk.iter().zip(m.vit.forward_batch(&imgs)?) {
            let text = chat_tokens(&tok, &e.instruction, Some(&e.answer));
            let s = assemble_patches(&p, &text, m.lm, m.adapter)?;
            vlm_in.push(s.rows);
            vlm_meta.push(SeqMeta { tokens: s.tokens, tags: s.tags });
            let b = build_baseline(&tok, e)?;
            if b.len() > m.lm.config.max_context {
                return Err(Error::ContextOverflow { len: b.len(), max: m.lm.config.max_context });
            }
            base_in.push(m.lm.embed_tokens(&b));
            base_meta.push(SeqMeta::text(b));
        }
    }
    Ok(ProbeActs {
        vlm: capture(m.lm, &vlm_in, &vlm_meta, layers, batch)?,
        baseline: capture(m.lm, &base_in, &base_meta, layers, batch)?,
        concepts: examples.iter().map(|e| e.image.concepts).collect(),
    })
}

impl ProbeActs {
    /// Rows of one group over the first `n` examples, in example order.
    pub fn group_rows(&self, layer: usize, group: TokenGroup, n: usize) -> Result<GroupRows> {
        let (map, tag) = match group {
            TokenGroup::VlmVisual => (&self.vlm, PositionTag::Visual),
            TokenGroup::VlmText => (&self.vlm, PositionTag::Text),
            TokenGroup::TextOnlyBaseline => (&self.baseline, PositionTag::Text),
        };
        let dump = map.get(&layer).ok_or_else(|| Error::Invalid(format!("no activations captured for layer {layer}")))?;
        let mut rows = Vec::new();
        for i in 0..n.min(dump.n_seqs()) {
            for (p, t) in dump.seqs[i].tags.iter().enumerate() {
                if *t == tag {
                    rows.extend_from_slice(dump.row(i, p));
                }
            }
        }
        Ok(GroupRows { group, layer, d_model: dump.d_model, rows })
    }
}

struct SeqCodes {
    codes: Vec<f32>,
    recon: Vec<f32>,
}

fn encode_seq(sae: &SaeWeights, rows: &[f32]) -> SeqCodes {
    let codes = sae.encode_batch(rows);
    let recon = sae.decode_batch(&codes);
    SeqCodes { codes, recon }
}

/// Codes of the rows at positions tagged `tag`.
fn tagged_codes(c: &SeqCodes, tags: &[PositionTag], tag: PositionTag, d_sae: usize) -> Vec<f32> {
    let mut out = Vec::new();
    for (p, t) in tags.iter().enumerate() {
        if *t == tag {
            out.extend_from_slice(&c.codes[p * d_sae..(p + 1) * d_sae]);
        }
    }
    out
}

fn add_positions(acc: &mut GroupAccumulator, rows: &[f32], c: &SeqCodes, tags: &[PositionTag], tag: PositionTag, d: usize, s: usize) {
    for (p, t) in tags.iter().enumerate() {
        if *t == tag {
            acc.add(&rows[p * d..(p + 1) * d], &c.codes[p * s..(p + 1) * s], &c.recon[p * d..(p + 1) * d]);
        }
    }
}

fn corpus_frequencies(descs: &[FeatureDescription], d_sae: usize) -> Result<Vec<f64>> {
    let mut out = vec![f64::NAN; d_sae];
    for d in descs {
        *out.get_mut(d.feature).ok_or_else(|| Error::Shape(format!("feature {} outside dictionary of {d_sae}", d.feature)))? = d.frequency;
    }
    if out.iter().any(|f| f.is_nan()) {
        return Err(Error::Invalid("descriptions do not cover every feature".into()));
    }
    Ok(out)
}

fn layer_metrics(
    acts: &ProbeActs,
    layer: usize,
    sae: &SaeWeights,
    descs: &[FeatureDescription],
    cfg: &ProbeConfig,
) -> Result<LayerMetrics> {
    let missing = || Error::Invalid(format!("no activations captured for layer {layer}"));
    let vlm = acts.vlm.get(&layer).ok_or_else(missing)?;
    let base = acts.baseline.get(&layer).ok_or_else(missing)?;
    for dump in [vlm, base] {
        if sae.layer != dump.layer {
            return Err(Error::LayerMismatch { sae: sae.layer, acts: dump.layer });
        }
        if sae.d_model() != dump.d_model {
            return Err(Error::Shape(format!("SAE width {} but activations are {}", sae.d_model(), dump.d_model)));
        }
    }
    let (d, s) = (vlm.d_model, sae.d_sae());
    let mut accs: BTreeMap<TokenGroup, GroupAccumulator> =
        TokenGroup::ALL.iter().map(|g| (*g, GroupAccumulator::new(d, s))).collect();
    let mut vis_max = Vec::with_capacity(cfg.n_align);
    let mut vis_rank = Vec::with_capacity(cfg.n_align);
    let mut base_rank = Vec::with_capacity(cfg.n_align);
    for i in 0..cfg.n_rs.max(cfg.n_align) {
        let rows = vlm.seq_rows(i);
        let tags = &vlm.seqs[i].tags;
        let c = encode_seq(sae, rows);
        let brows = base.seq_rows(i);
        let btags = &base.seqs[i].tags;
        let bc = encode_seq(sae, brows);
        if i < cfg.n_rs {
            let acc = accs.get_mut(&TokenGroup::VlmVisual).expect("group");
            add_positions(acc, rows, &c, tags, PositionTag::Visual, d, s);
            let acc = accs.get_mut(&TokenGroup::VlmText).expect("group");
            add_positions(acc, rows, &c, tags, PositionTag::Text, d, s);
            let acc = accs.get_mut(&TokenGroup::TextOnlyBaseline).expect("group");
            add_positions(acc, brows, &bc, btags, PositionTag::Text, d, s);
        }
        if i < cfg.n_align {
            let vc = tagged_codes(&c, tags, PositionTag::Visual, s);
            let max = feature_scores(&vc, s, Ranking::Max);
            vis_rank.push(if cfg.ranking == Ranking::Max { max.clone() } else { feature_scores(&vc, s, cfg.ranking) });
            vis_max.push(max);
            base_rank.push(feature_scores(&tagged_codes(&bc, btags, PositionTag::Text, s), s, cfg.ranking));
        }
    }
    let mut groups = BTreeMap::new();
    for (g, acc) in &accs {
        if acc.n_positions() == 0 {
            continue;
        }
        groups.insert(
            *g,
            GroupMetrics { n_positions: acc.n_positions(), recon_error: acc.recon_error()?, fvu: acc.fvu()?, sparsity: acc.sparsity()? },
        );
    }
    let image_freq = image_frequencies(&vis_max, s, cfg.activation_threshold);
    let mask = filter_features(layer, &image_freq, &corpus_frequencies(descs, s)?, cfg.image_freq_max, cfg.corpus_freq_max)?;
    let concepts = &acts.concepts[..cfg.n_align];
    let mut alignment = BTreeMap::new();
    if cfg.n_align > 0 {
        for (g, scores) in [(TokenGroup::VlmVisual, &vis_rank), (TokenGroup::TextOnlyBaseline, &base_rank)] {
            let tops: Vec<Vec<usize>> = scores.iter().map(|sc| top_k_features(sc, &mask, cfg.k, cfg.activation_threshold)).collect();
            alignment.insert(g, alignment_rate(&tops, descs, concepts)?);
        }
    }
    Ok(LayerMetrics { layer, groups, alignment, kept_features: mask.n_kept() })
}

/// Metrics for every layer that has an SAE, from captured activations.
pub fn metrics_from_acts(
    acts: &ProbeActs,
    saes: &BTreeMap<usize, SaeWeights>,
    descriptions: &BTreeMap<usize, Vec<FeatureDescription>>,
    cfg: &ProbeConfig,
) -> Result<MetricsReport> {
    let need = cfg.n_rs.max(cfg.n_align);
    let have = acts.vlm.values().chain(acts.baseline.values()).map(|d| d.n_seqs()).min().unwrap_or(0).min(acts.concepts.len());
    if have < need {
        return Err(Error::Invalid(format!("{need} probe examples required, {have} captured")));
    }
    if saes.is_empty() {
        return Err(Error::Invalid("no SAEs to probe with".into()));
    }
    let mut layers = Vec::new();
    let mut d_sae = 0;
    for (&l, sae) in saes {
        let descs = descriptions.get(&l).ok_or_else(|| Error::Invalid(format!("no feature descriptions for layer {l}")))?;
        d_sae = sae.d_sae();
        layers.push(layer_metrics(acts, l, sae, descs, cfg)?);
    }
    let mut report =
        MetricsReport { config: cfg.clone(), n_rs: cfg.n_rs, n_align: cfg.n_align, d_sae, layers, convergence_layer: None };
    report.convergence_layer = detect_convergence(&report);
    Ok(report)
}

/// Captures activations for the first `max(n_rs, n_align)` examples and
/// computes the full report.
pub fn run_probe(
    m: ProbeModels,
    saes: &BTreeMap<usize, SaeWeights>,
    descriptions: &BTreeMap<usize, Vec<FeatureDescription>>,
    examples: &[MmExample],
    cfg: &ProbeConfig,
) -> Result<MetricsReport> {
    let need = cfg.n_rs.max(cfg.n_align);
    if examples.len() < need {
        return Err(Error::Invalid(format!("{need} probe examples required, {} given", examples.len())));
    }
    let layers: BTreeSet<usize> = saes.keys().copied().collect();
    let acts = capture_probe_acts(m, &examples[..need], &layers, cfg.batch_size)?;
    metrics_from_acts(&acts, saes, descriptions, cfg)
}
