use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xmprobe_nn::{clip_grad_norm, cross_entropy, Adam, Linear, ParamStore, Scalar, Schedule, Segments};

use super::{assemble_patches, chat_tokens, AdapterWeights, N_VISUAL};
use crate::error::{Error, Result};
use crate::synthworld::{derive_seed, MmExample};
use crate::tinylm::{LmArch, TinyLm, Tokenizer, BOS, EOS};
use crate::tinyvit::{PatchEmbeddings, TinyVit};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fraction of steps spent in linear warmup; constant afterwards.
    pub warmup_ratio: f64,
    pub grad_clip: f32,
}

impl StageConfig {
    pub fn stage1() -> Self {
        Self { lr: 1e-3, batch_size: 32, epochs: 1, warmup_ratio: 0.03, grad_clip: 1.0 }
    }

    pub fn stage2() -> Self {
        Self { lr: 2e-5, batch_size: 16, epochs: 3, warmup_ratio: 0.0, grad_clip: 1.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
    pub lm_checksum: String,
    pub vit_checksum: String,
}

/// Frozen-ViT patch rows and the text that follows the visual block.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    pub vis: Vec<f32>,
    /// `<sep> instruction <sep> answer <eos>`.
    pub text: Vec<u32>,
    /// Index into `text` of the first answer token.
    pub answer_start: usize,
}

impl TrainItem {
    pub fn new(patches: &PatchEmbeddings, tok: &Tokenizer, instruction: &str, answer: &str) -> Self {
        let prompt = chat_tokens(tok, instruction, None);
        let text = chat_tokens(tok, instruction, Some(answer));
        Self { vis: patches.rows.clone(), answer_start: prompt.len(), text }
    }

    pub fn from_examples(vit: &TinyVit, examples: &[MmExample]) -> Result<Vec<Self>> {
        let tok = Tokenizer::new();
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(256) {
            let imgs: Vec<&[f32]> = chunk.iter().map(|e| e.image.pixels.as_slice()).collect();
            for (e, p) in chunk.iter().zip(vit.forward_batch(&imgs)?) {
                out.push(Self::new(&p, &tok, &e.instruction, &e.answer));
            }
        }
        Ok(out)
    }

    fn seq_len(&self) -> usize {
        1 + N_VISUAL + self.text.len()
    }

    /// Next-token targets and loss weights for every position; only
    /// predictions of answer tokens and the closing `<eos>` carry weight.
    pub fn targets(&self) -> (Vec<usize>, Vec<bool>) {
        let offset = 1 + N_VISUAL;
        let len = self.seq_len();
        let mut targets = vec![0usize; len];
        let mut mask = vec![false; len];
        for p in 0..len - 1 {
            let next = p + 1;
            if next >= offset + self.answer_start {
                targets[p] = self.text[next - offset] as usize;
                mask[p] = true;
            }
        }
        (targets, mask)
    }
}

/// Masked next-token loss of a batch through the frozen LM. With `grads`,
/// accumulates the gradient w.r.t. the adapter only; the LM receives none.
pub fn adapter_loss<T: Scalar>(
    lm: &LmArch,
    lp: &ParamStore<T>,
    adapter: &Linear,
    ap: &ParamStore<T>,
    items: &[&TrainItem],
    grads: Option<&mut ParamStore<T>>,
) -> Result<T> {
    if items.is_empty() {
        return Err(Error::Invalid("empty adapter batch".into()));
    }
    let d = lm.d_model;
    let segs = Segments::from_lengths(items.iter().map(|it| it.seq_len()));
    let mut x = Vec::with_capacity(segs.total_rows() * d);
    let mut targets = Vec::with_capacity(segs.total_rows());
    let mut weights = Vec::with_capacity(segs.total_rows());
    let vis: Vec<Vec<T>> = items.iter().map(|it| it.vis.iter().map(|v| T::c(*v as f64)).collect()).collect();
    for (it, v) in items.iter().zip(&vis) {
        x.extend(lm.embed(lp, &[BOS]));
        x.extend(adapter.forward(ap, v, N_VISUAL));
        x.extend(lm.embed(lp, &it.text));
        let (t, m) = it.targets();
        targets.extend(t);
        weights.extend(m.into_iter().map(|b| if b { T::one() } else { T::zero() }));
    }
    let (logits, cache) = lm.forward_train(lp, x, &segs)?;
    let (loss, dlogits) = cross_entropy(&logits, lm.vocab, &targets, &weights);
    if let Some(g) = grads {
        let dx = lm.backward(lp, &cache, &dlogits, &segs, None);
        for ((start, _), v) in segs.iter().zip(&vis) {
            let rows = &dx[(start + 1) * d..(start + 1 + N_VISUAL) * d];
            adapter.accumulate_param_grads(v, rows, N_VISUAL, g);
        }
    }
    Ok(loss)
}

fn check_frozen(stage: &str, lm: &TinyLm, vit: &TinyVit, lm_sum: &str, vit_sum: &str) -> Result<()> {
    for (which, before, after) in [("lm", lm_sum, lm.checksum()), ("vit", vit_sum, vit.checksum())] {
        if before != after {
            return Err(Error::FrozenWeightsChanged {
                stage: stage.to_string(),
                which: which.to_string(),
                before: before.to_string(),
                after,
            });
        }
    }
    Ok(())
}

/// One adapter training stage. Backbone checksums are taken up front and
/// re-verified after every epoch.
pub fn train_stage(
    stage: &str,
    lm: &TinyLm,
    vit: &TinyVit,
    adapter: AdapterWeights,
    items: &[TrainItem],
    cfg: &StageConfig,
    seed: u64,
) -> Result<(AdapterWeights, StageReport)> {
    if adapter.d_vis() != vit.d_vis() || adapter.d_model() != lm.d_model() {
        return Err(Error::Shape(format!(
            "adapter {}→{} does not connect vit width {} to lm width {}",
            adapter.d_vis(),
            adapter.d_model(),
            vit.d_vis(),
            lm.d_model()
        )));
    }
    if let Some(it) = items.iter().find(|it| it.seq_len() > lm.config.max_context) {
        return Err(Error::ContextOverflow { len: it.seq_len(), max: lm.config.max_context });
    }
    let lm_sum = lm.checksum();
    let vit_sum = vit.checksum();
    let mut adapter = adapter;
    let bs = cfg.batch_size.max(1);
    let steps_per_epoch = items.len().div_ceil(bs);
    let total = steps_per_epoch * cfg.epochs;
    let warmup = (cfg.warmup_ratio * total as f64).ceil() as usize;
    let sched = Schedule::constant_with_warmup(cfg.lr, warmup, total);
    let mut opt = Adam::for_store(&adapter.weights);
    let mut grads = adapter.weights.zeros_like();
    let mut report = StageReport { stage: stage.to_string(), ..Default::default() };
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 1, epoch as u64)));
        let mut sum = 0.0;
        for chunk in order.chunks(bs) {
            let batch: Vec<&TrainItem> = chunk.iter().map(|&i| &items[i]).collect();
            grads.zero();
            let loss = adapter_loss(&lm.arch, &lm.weights, &adapter.linear, &adapter.weights, &batch, Some(&mut grads))?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Diverged(format!("{stage}: non-finite loss {loss} at step {step}")));
            }
            clip_grad_norm(grads.flat_mut(), cfg.grad_clip);
            opt.step(adapter.weights.flat_mut(), grads.flat(), sched.lr(step));
            sum += loss as f64;
            step += 1;
        }
        check_frozen(stage, lm, vit, &lm_sum, &vit_sum)?;
        let mean = sum / steps_per_epoch.max(1) as f64;
        log::info!("{stage} epoch {epoch}: loss {mean:.4}");
        report.epoch_loss.push(mean);
    }
    report.steps = step;
    report.lm_checksum = lm_sum;
    report.vit_checksum = vit_sum;
    Ok((adapter, report))
}

/// Caption pretraining: lr 1e-3, one epoch, 3% warmup by default.
pub fn train_stage1(lm: &TinyLm, vit: &TinyVit, adapter: AdapterWeights, items: &[TrainItem], cfg: &StageConfig, seed: u64) -> Result<(AdapterWeights, StageReport)> {
    train_stage("stage1", lm, vit, adapter, items, cfg, seed)
}

/// Instruction tuning: lr 2e-5, three epochs, no warmup by default.
pub fn train_stage2(lm: &TinyLm, vit: &TinyVit, adapter: AdapterWeights, items: &[TrainItem], cfg: &StageConfig, seed: u64) -> Result<(AdapterWeights, StageReport)> {
    train_stage("stage2", lm, vit, adapter, items, cfg, seed)
}

/// Greedy exact-match accuracy of answers generated after
/// `<bos> visual <sep> instruction <sep>`.
pub fn qa_accuracy(lm: &TinyLm, adapter: &AdapterWeights, items: &[TrainItem], max_new: usize) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Invalid("no evaluation examples".into()));
    }
    let mut hits = 0usize;
    for it in items {
        let d_vis = adapter.d_vis();
        let patches = PatchEmbeddings { rows: it.vis.clone(), d: d_vis, cell_of_patch: (0..N_VISUAL).collect() };
        let prefix = assemble_patches(&patches, &it.text[..it.answer_start], lm, adapter)?;
        let out = lm.greedy_continue(&prefix.rows, max_new, EOS)?;
        let want = &it.text[it.answer_start..it.text.len() - 1];
        hits += usize::from(out == want);
    }
    Ok(hits as f64 / items.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{example_from_record, mm_qa_record};
    use crate::tinylm::{LmConfig, SEP};
    use crate::tinyvit::VitConfig;
    use xmprobe_nn::gradcheck::check_indices;

    fn models() -> (TinyLm, TinyVit) {
        let lm = TinyLm::init(LmConfig { d_model: 16, n_layers: 2, n_heads: 2, d_ff: 32, max_context: 64, ..Default::default() }, 1);
        let vit = TinyVit::init(VitConfig { d_vis: 8, n_layers: 1, n_heads: 2, d_ff: 16, ..Default::default() }, 2);
        (lm, vit)
    }

    fn items(vit: &TinyVit, n: usize, seed: u64) -> Vec<TrainItem> {
        let ex: Vec<MmExample> = (0..n as u64)
            .map(|i| example_from_record(&mm_qa_record(derive_seed(seed, 0, i), 0.4, i)).unwrap())
            .filter(|e| e.answer.split(' ').count() < 12)
            .collect();
        TrainItem::from_examples(vit, &ex).unwrap()
    }

    #[test]
    fn targets_cover_answer_and_eos_only() {
        let t = Tokenizer::new();
        let p = PatchEmbeddings { rows: vec![0.0; 72], d: 8, cell_of_patch: (0..9).collect() };
        let it = TrainItem::new(&p, &t, "What color is the star?", "red");
        let (targets, mask) = it.targets();
        // text = <sep> What color is the star ? <sep> red <eos>
        assert_eq!(it.text.len(), 10);
        let weighted: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        assert_eq!(weighted, vec![1 + 9 + 7, 1 + 9 + 8]);
        assert_eq!(targets[17], t.id("red") as usize);
        assert_eq!(targets[18], EOS as usize);
        assert_eq!(it.text[it.answer_start - 1], SEP);
    }

    #[test]
    fn gradient_matches_finite_differences_f64() {
        let (lm, vit) = models();
        let a = AdapterWeights::random(8, 16, 0.2, 3);
        let its = items(&vit, 3, 4);
        let refs: Vec<&TrainItem> = its.iter().collect();
        let (lp, ap) = (lm.weights.cast::<f64>(), a.weights.cast::<f64>());
        let mut g = ap.zeros_like();
        adapter_loss(&lm.arch, &lp, &a.linear, &ap, &refs, Some(&mut g)).unwrap();
        let idx: Vec<usize> = (0..ap.len()).step_by(13).take(12).collect();
        let r = check_indices(&idx, |i| g.flat()[i], 1e-5, |i, e| {
            let mut q = ap.clone();
            q.flat_mut()[i] += e;
            adapter_loss(&lm.arch, &lp, &a.linear, &q, &refs, None).unwrap()
        });
        assert!(r.passes(1e-4), "{r:#?}");
    }

    // With every answer target masked out the loss carries no signal, so the
    // adapter gradient is exactly zero.
    #[test]
    fn masked_positions_contribute_no_gradient() {
        let (lm, vit) = models();
        let a = AdapterWeights::random(8, 16, 0.2, 3);
        let mut its = items(&vit, 2, 5);
        for it in its.iter_mut() {
            it.answer_start = it.text.len();
        }
        let refs: Vec<&TrainItem> = its.iter().collect();
        let mut g = a.weights.zeros_like();
        let loss = adapter_loss(&lm.arch, &lm.weights, &a.linear, &a.weights, &refs, Some(&mut g)).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.flat().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_lr_and_zero_epochs_leave_weights_unchanged() {
        let (lm, vit) = models();
        let a = AdapterWeights::random(8, 16, 0.2, 3);
        let its = items(&vit, 8, 6);
        let cfg = StageConfig { lr: 0.0, ..StageConfig::stage1() };
        let (b, rep) = train_stage1(&lm, &vit, a.clone(), &its, &cfg, 1).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(rep.lm_checksum, lm.checksum());
        let cfg = StageConfig { epochs: 0, ..StageConfig::stage2() };
        let (c, _) = train_stage2(&lm, &vit, a.clone(), &its, &cfg, 1).unwrap();
        assert_eq!(a.checksum(), c.checksum());
    }

    #[test]
    fn training_is_deterministic_and_lowers_loss() {
        let (lm, vit) = models();
        let a = AdapterWeights::random(8, 16, 0.2, 3);
        let its = items(&vit, 48, 7);
        let cfg = StageConfig { epochs: 3, batch_size: 8, lr: 1e-2, ..StageConfig::stage1() };
        let (b, rep) = train_stage1(&lm, &vit, a.clone(), &its, &cfg, 2).unwrap();
        let (c, _) = train_stage1(&lm, &vit, a, &its, &cfg, 2).unwrap();
        assert_eq!(b.checksum(), c.checksum());
        assert!(rep.epoch_loss[2] < rep.epoch_loss[0], "{rep:?}");
        let acc = qa_accuracy(&lm, &b, &its[..4], 12).unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn wrong_widths_rejected() {
        let (lm, vit) = models();
        let a = AdapterWeights::random(6, 16, 0.2, 3);
        assert!(matches!(train_stage1(&lm, &vit, a, &[], &StageConfig::stage1(), 0), Err(Error::Shape(_))));
    }
}
