//! Layer-wise probing of projected visual tokens with per-layer SAEs:
//! reconstruction error and sparsity per token group, frequency filtering of
//! features, top-k feature extraction and description alignment, and
//! detection of the layer where visual tokens start to look like text.

mod plot;
mod report;
mod run;

use serde::{Deserialize, Serialize};
use xmprobe_nn::Scalar;

use crate::error::{Error, Result};
use crate::saelab::{FeatureDescription, SaeWeights};
use crate::synthworld::{ConceptSet, MmExample};
use crate::tinylm::{Tokenizer, BOS};

pub use plot::{line_chart_svg, Series};
pub use report::{spearman, GroupMetrics, LayerMetrics, MetricsReport, TrendStats};
pub use run::{capture_probe_acts, metrics_from_acts, run_probe, ProbeActs, ProbeModels};

pub const BASELINE_PREFIX: &str = "Consider the following information: ";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenGroup {
    VlmVisual,
    VlmText,
    TextOnlyBaseline,
}

impl TokenGroup {
    pub const ALL: [TokenGroup; 3] = [TokenGroup::VlmVisual, TokenGroup::VlmText, TokenGroup::TextOnlyBaseline];

    pub fn name(self) -> &'static str {
        match self {
            TokenGroup::VlmVisual => "vlm_visual",
            TokenGroup::VlmText => "vlm_text",
            TokenGroup::TextOnlyBaseline => "text_only_baseline",
        }
    }

    /// VLM text positions trivially carry the question's concepts and are
    /// left out of alignment.
    pub fn has_alignment(self) -> bool {
        self != TokenGroup::VlmText
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ranking {
    Max,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Examples for reconstruction error and sparsity.
    pub n_rs: usize,
    /// Examples for description alignment (a prefix of the same set).
    pub n_align: usize,
    pub k: usize,
    pub image_freq_max: f64,
    pub corpus_freq_max: f64,
    /// A feature "activates" when its code exceeds this value.
    pub activation_threshold: f32,
    pub ranking: Ranking,
    pub convergence_rate_frac: f64,
    pub convergence_error_ratio: f64,
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            n_rs: 2000,
            n_align: 1000,
            k: 3,
            image_freq_max: 0.05,
            corpus_freq_max: 0.005,
            activation_threshold: 0.0,
            ranking: Ranking::Max,
            convergence_rate_frac: 0.9,
            convergence_error_ratio: 1.5,
            batch_size: 64,
        }
    }
}

/// `<bos>` + tokens of the prefix, the answer, a space and the question.
pub fn build_baseline(tok: &Tokenizer, example: &MmExample) -> Result<Vec<u32>> {
    if example.answer.trim().is_empty() {
        return Err(Error::Invalid("baseline needs a non-empty answer".into()));
    }
    if example.instruction.trim().is_empty() {
        return Err(Error::Invalid("baseline needs a non-empty instruction".into()));
    }
    let text = format!("{BASELINE_PREFIX}{} {}", example.answer, example.instruction);
    let mut out = vec![BOS];
    out.extend(tok.tokenize(&text));
    Ok(out)
}

/// Running sums for reconstruction error, FVU and sparsity of one
/// (layer, group) cell. Positions are added in a fixed order so the result
/// does not depend on batching.
#[derive(Clone, Debug)]
pub struct GroupAccumulator {
    d_model: usize,
    d_sae: usize,
    n: usize,
    sq_err: f64,
    active: u64,
    sum: Vec<f64>,
    sum_sq: f64,
}

impl GroupAccumulator {
    pub fn new(d_model: usize, d_sae: usize) -> Self {
        Self { d_model, d_sae, n: 0, sq_err: 0.0, active: 0, sum: vec![0.0; d_model], sum_sq: 0.0 }
    }

    /// Adds rows whose codes and reconstructions are already known.
    pub fn add<T: Scalar>(&mut self, rows: &[T], codes: &[T], recon: &[T]) {
        let d = self.d_model;
        for (r, x) in rows.chunks_exact(d).enumerate() {
            let xh = &recon[r * d..(r + 1) * d];
            self.sq_err += x.iter().zip(xh).map(|(a, b)| (a.f64() - b.f64()).powi(2)).sum::<f64>();
            for (s, v) in self.sum.iter_mut().zip(x) {
                *s += v.f64();
            }
            self.sum_sq += x.iter().map(|v| v.f64().powi(2)).sum::<f64>();
            self.active += codes[r * self.d_sae..(r + 1) * self.d_sae].iter().filter(|c| **c > T::zero()).count() as u64;
            self.n += 1;
        }
    }

    pub fn n_positions(&self) -> usize {
        self.n
    }

    /// Mean squared reconstruction norm over positions.
    pub fn recon_error(&self) -> Result<f64> {
        self.check()?;
        Ok(self.sq_err / self.n as f64)
    }

    /// Mean fraction of dictionary features active per position.
    pub fn sparsity(&self) -> Result<f64> {
        self.check()?;
        Ok(self.active as f64 / (self.n as f64 * self.d_sae as f64))
    }

    /// Squared error over total variance around the group mean.
    pub fn fvu(&self) -> Result<f64> {
        self.check()?;
        let n = self.n as f64;
        let mean_sq: f64 = self.sum.iter().map(|s| (s / n).powi(2)).sum();
        let var = self.sum_sq - n * mean_sq;
        Ok(if var > 0.0 { self.sq_err / var } else { f64::NAN })
    }

    fn check(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::EmptyGroup("group".into()));
        }
        Ok(())
    }
}

/// Rows of one layer at the positions of one token group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupRows {
    pub group: TokenGroup,
    pub layer: usize,
    pub d_model: usize,
    pub rows: Vec<f32>,
}

impl GroupRows {
    pub fn n(&self) -> usize {
        self.rows.len() / self.d_model.max(1)
    }

    fn accumulate(&self, sae: &SaeWeights) -> Result<GroupAccumulator> {
        if sae.layer != self.layer {
            return Err(Error::LayerMismatch { sae: sae.layer, acts: self.layer });
        }
        if sae.d_model() != self.d_model {
            return Err(Error::Shape(format!("SAE width {} but activations are {}", sae.d_model(), self.d_model)));
        }
        if self.n() == 0 {
            return Err(Error::EmptyGroup(self.group.name().into()));
        }
        // Evaluated in f64 throughout.
        let p = sae.weights.cast::<f64>();
        let x: Vec<f64> = self.rows.iter().map(|v| *v as f64).collect();
        let codes = sae.arch.encode(&p, &x, self.n());
        let recon = sae.arch.decode(&p, &codes, self.n());
        let mut acc = GroupAccumulator::new(self.d_model, sae.d_sae());
        acc.add(&x, &codes, &recon);
        Ok(acc)
    }
}

/// `E_l = (1/N) Σ ‖v − decode(encode(v))‖²` over the group's positions.
pub fn recon_error(rows: &GroupRows, sae: &SaeWeights) -> Result<f64> {
    rows.accumulate(sae)?.recon_error()
}

/// `S_l = (1/d_sae)(1/N) Σ ℓ0(encode(v))`.
pub fn sparsity(rows: &GroupRows, sae: &SaeWeights) -> Result<f64> {
    rows.accumulate(sae)?.sparsity()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureFilterMask {
    pub layer: usize,
    /// `true` for features that survive both frequency filters.
    pub keep: Vec<bool>,
    pub image_freq_max: f64,
    pub corpus_freq_max: f64,
}

impl FeatureFilterMask {
    pub fn n_kept(&self) -> usize {
        self.keep.iter().filter(|k| **k).count()
    }
}

/// Fraction of images on which each feature activates at one or more visual
/// positions. `image_max[i][f]` is feature `f`'s maximum code on image `i`.
pub fn image_frequencies(image_max: &[Vec<f32>], d_sae: usize, threshold: f32) -> Vec<f64> {
    let mut counts = vec![0usize; d_sae];
    for m in image_max {
        for (c, v) in counts.iter_mut().zip(m) {
            if *v > threshold {
                *c += 1;
            }
        }
    }
    let n = image_max.len().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

/// Masks out every feature more frequent than either threshold; equality
/// is kept.
pub fn filter_features(
    layer: usize,
    image_freq: &[f64],
    corpus_freq: &[f64],
    image_freq_max: f64,
    corpus_freq_max: f64,
) -> Result<FeatureFilterMask> {
    if image_freq.len() != corpus_freq.len() {
        return Err(Error::Shape(format!("{} image and {} corpus frequencies", image_freq.len(), corpus_freq.len())));
    }
    let keep = image_freq.iter().zip(corpus_freq).map(|(i, c)| !(*i > image_freq_max || *c > corpus_freq_max)).collect();
    Ok(FeatureFilterMask { layer, keep, image_freq_max, corpus_freq_max })
}

/// Per-feature ranking score over the rows of `codes` (`rows × d_sae`).
pub fn feature_scores(codes: &[f32], d_sae: usize, ranking: Ranking) -> Vec<f32> {
    let mut out = vec![0.0f32; d_sae];
    for row in codes.chunks_exact(d_sae) {
        for (o, v) in out.iter_mut().zip(row) {
            match ranking {
                Ranking::Max => *o = o.max(*v),
                Ranking::Sum => *o += *v,
            }
        }
    }
    out
}

/// Up to `k` unmasked features with a score above `threshold`, strongest
/// first, ties to the lower index.
pub fn top_k_features(scores: &[f32], mask: &FeatureFilterMask, k: usize, threshold: f32) -> Vec<usize> {
    let mut cand: Vec<usize> = (0..scores.len()).filter(|&f| mask.keep[f] && scores[f] > threshold).collect();
    cand.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    cand.truncate(k);
    cand
}

/// True if some feature in `top` is described by a concept of the image.
pub fn example_aligned(top: &[usize], descriptions: &[FeatureDescription], concepts: &ConceptSet) -> bool {
    top.iter().any(|&f| descriptions.get(f).is_some_and(|d| d.matches(concepts)))
}

/// Fraction of examples whose top features match their image.
pub fn alignment_rate(tops: &[Vec<usize>], descriptions: &[FeatureDescription], concepts: &[ConceptSet]) -> Result<f64> {
    if tops.len() != concepts.len() {
        return Err(Error::Shape("one concept set per example required".into()));
    }
    if tops.is_empty() {
        return Err(Error::EmptyGroup("alignment examples".into()));
    }
    let hits = tops.iter().zip(concepts).filter(|(t, c)| example_aligned(t, descriptions, c)).count();
    Ok(hits as f64 / tops.len() as f64)
}

/// Smallest layer from which, for every deeper layer too, the alignment
/// rate is at least `rate_frac` of its maximum and the visual/baseline error
/// ratio is at most `max_ratio`. `None` when alignment is zero everywhere.
pub fn convergence_layer(layers: &[usize], rate: &[f64], ratio: &[f64], rate_frac: f64, max_ratio: f64) -> Option<usize> {
    let best = rate.iter().copied().fold(0.0, f64::max);
    if best <= 0.0 {
        return None;
    }
    let ok: Vec<bool> = rate.iter().zip(ratio).map(|(r, q)| *r >= rate_frac * best && *q <= max_ratio).collect();
    let mut found = None;
    for i in (0..layers.len()).rev() {
        if !ok[i] {
            break;
        }
        found = Some(layers[i]);
    }
    found
}

/// [`convergence_layer`] over a report's visual alignment and error ratio.
pub fn detect_convergence(report: &MetricsReport) -> Option<usize> {
    let layers: Vec<usize> = report.layers.iter().map(|l| l.layer).collect();
    let rate: Vec<f64> = report.layers.iter().map(|l| l.alignment.get(&TokenGroup::VlmVisual).copied().unwrap_or(0.0)).collect();
    let ratio: Vec<f64> = report.layers.iter().map(|l| l.error_ratio().unwrap_or(f64::INFINITY)).collect();
    convergence_layer(&layers, &rate, &ratio, report.config.convergence_rate_frac, report.config.convergence_error_ratio)
}

#[cfg(test)]
mod tests;
