//! Symmetric InfoNCE pretraining of the vision tower against a small text
//! tower. Only the vision tower survives; the text tower is used for
//! retrieval evaluation and then dropped.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xmprobe_nn::layers::{log_sum_exp, softmax_inplace};
use xmprobe_nn::{clip_grad_norm, Adam, BlockShape, ParamId, ParamStore, Scalar, Schedule, Segments, Stack};

use super::{patchify, TinyVit, VitArch, VitConfig};
use crate::error::{Error, Result};
use crate::synthworld::derive_seed;
use crate::tinylm::Tokenizer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextTowerConfig {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub init_std: f64,
}

impl Default for TextTowerConfig {
    fn default() -> Self {
        Self { d: 48, n_layers: 2, n_heads: 4, d_ff: 192, vocab_size: Tokenizer::new().vocab_size(), max_len: 64, init_std: 0.05 }
    }
}

/// Bidirectional text encoder with mean pooling, plus the learnable logit scale.
#[derive(Clone, Debug)]
pub struct TextArch {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub stack: Stack,
    /// `ln` of the similarity multiplier (inverse temperature).
    pub logit_scale: ParamId,
    pub d: usize,
    pub vocab: usize,
    pub max_len: usize,
}

impl TextArch {
    pub fn build<T: Scalar>(cfg: &TextTowerConfig, store: &mut ParamStore<T>, init_temperature: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d;
        let tok_emb = store.add_normal("text.tok_emb", &[cfg.vocab_size, d], cfg.init_std, &mut rng);
        let pos_emb = store.add_normal("text.pos_emb", &[cfg.max_len, d], cfg.init_std, &mut rng);
        let shape = BlockShape { d, n_heads: cfg.n_heads, d_ff: cfg.d_ff, causal: false };
        let stack = Stack::new(store, "text", cfg.n_layers, shape, cfg.init_std, &mut rng);
        let logit_scale = store.add_filled("text.logit_scale", &[1], T::c((1.0 / init_temperature).ln()));
        Self { tok_emb, pos_emb, stack, logit_scale, d, vocab: cfg.vocab_size, max_len: cfg.max_len }
    }

    fn check(&self, seqs: &[&[u32]]) -> Result<()> {
        for s in seqs {
            if s.is_empty() {
                return Err(Error::Invalid("empty caption".into()));
            }
            if s.len() > self.max_len {
                return Err(Error::ContextOverflow { len: s.len(), max: self.max_len });
            }
        }
        Ok(())
    }

    fn input<T: Scalar>(&self, p: &ParamStore<T>, seqs: &[&[u32]]) -> Vec<T> {
        let d = self.d;
        let (emb, pos) = (p.get(self.tok_emb), p.get(self.pos_emb));
        let mut x = Vec::with_capacity(seqs.iter().map(|s| s.len()).sum::<usize>() * d);
        for s in seqs {
            for (i, t) in s.iter().enumerate() {
                let t = *t as usize;
                x.extend(emb[t * d..(t + 1) * d].iter().zip(&pos[i * d..(i + 1) * d]).map(|(a, b)| *a + *b));
            }
        }
        x
    }

    /// Mean-pooled outputs, one row per sequence.
    pub fn pooled<T: Scalar>(&self, p: &ParamStore<T>, seqs: &[&[u32]]) -> Result<Vec<T>> {
        self.check(seqs)?;
        let segs = Segments::from_lengths(seqs.iter().map(|s| s.len()));
        let out = self.stack.forward_capture(p, self.input(p, seqs), &segs, &[]).out;
        Ok(mean_pool(&out, &segs, self.d))
    }
}

fn mean_pool<T: Scalar>(rows: &[T], segs: &Segments, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); segs.len() * d];
    for (i, (start, len)) in segs.iter().enumerate() {
        let inv = T::one() / T::c(len as f64);
        for r in start..start + len {
            for j in 0..d {
                out[i * d + j] += rows[r * d + j] * inv;
            }
        }
    }
    out
}

fn mean_pool_backward<T: Scalar>(d_pooled: &[T], segs: &Segments, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); segs.total_rows() * d];
    for (i, (start, len)) in segs.iter().enumerate() {
        let inv = T::one() / T::c(len as f64);
        for r in start..start + len {
            for j in 0..d {
                out[r * d + j] = d_pooled[i * d + j] * inv;
            }
        }
    }
    out
}

fn normalize_rows<T: Scalar>(x: &[T], d: usize) -> (Vec<T>, Vec<T>) {
    let mut out = x.to_vec();
    let mut norms = Vec::with_capacity(x.len() / d);
    for row in out.chunks_exact_mut(d) {
        let n = row.iter().map(|v| *v * *v).sum::<T>().sqrt().max(T::c(1e-12));
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    (out, norms)
}

fn normalize_backward<T: Scalar>(unit: &[T], norms: &[T], d_unit: &[T], d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); unit.len()];
    for (i, n) in norms.iter().enumerate() {
        let (u, g) = (&unit[i * d..(i + 1) * d], &d_unit[i * d..(i + 1) * d]);
        let dot: T = u.iter().zip(g).map(|(a, b)| *a * *b).sum();
        for j in 0..d {
            out[i * d + j] = (g[j] - u[j] * dot) / *n;
        }
    }
    out
}

/// Symmetric InfoNCE on raw (unnormalised) image and text summaries.
#[derive(Clone, Debug)]
pub struct InfoNce<T> {
    pub loss: T,
    pub image_to_text: T,
    pub text_to_image: T,
    pub d_image: Vec<T>,
    pub d_text: Vec<T>,
    pub d_logit_scale: T,
}

/// Rows `i` of `img` and `txt` are positives; the rest of the batch are negatives.
pub fn info_nce<T: Scalar>(img: &[T], txt: &[T], d: usize, logit_scale: T) -> InfoNce<T> {
    let b = img.len() / d;
    let (z, zn) = normalize_rows(img, d);
    let (t, tn) = normalize_rows(txt, d);
    let scale = logit_scale.exp();
    let mut logits = vec![T::zero(); b * b];
    for i in 0..b {
        for j in 0..b {
            let dot: T = z[i * d..(i + 1) * d].iter().zip(&t[j * d..(j + 1) * d]).map(|(a, c)| *a * *c).sum();
            logits[i * b + j] = scale * dot;
        }
    }
    let inv_b = T::one() / T::c(b as f64);
    let half = T::c(0.5);
    let (mut l_it, mut l_ti) = (T::zero(), T::zero());
    let mut dl = vec![T::zero(); b * b];
    for i in 0..b {
        let mut row = logits[i * b..(i + 1) * b].to_vec();
        l_it += log_sum_exp(&row) - row[i];
        softmax_inplace(&mut row);
        for j in 0..b {
            let delta = if i == j { T::one() } else { T::zero() };
            dl[i * b + j] += half * inv_b * (row[j] - delta);
        }
    }
    for j in 0..b {
        let mut col: Vec<T> = (0..b).map(|i| logits[i * b + j]).collect();
        l_ti += log_sum_exp(&col) - col[j];
        softmax_inplace(&mut col);
        for i in 0..b {
            let delta = if i == j { T::one() } else { T::zero() };
            dl[i * b + j] += half * inv_b * (col[i] - delta);
        }
    }
    let (l_it, l_ti) = (l_it * inv_b, l_ti * inv_b);
    let d_logit_scale = dl.iter().zip(&logits).map(|(a, c)| *a * *c).sum();
    let mut dz = vec![T::zero(); b * d];
    let mut dt = vec![T::zero(); b * d];
    for i in 0..b {
        for j in 0..b {
            let g = dl[i * b + j] * scale;
            for k in 0..d {
                dz[i * d + k] += g * t[j * d + k];
                dt[j * d + k] += g * z[i * d + k];
            }
        }
    }
    InfoNce {
        loss: half * (l_it + l_ti),
        image_to_text: l_it,
        text_to_image: l_ti,
        d_image: normalize_backward(&z, &zn, &dz, d),
        d_text: normalize_backward(&t, &tn, &dt, d),
        d_logit_scale,
    }
}

/// Contrastive loss of a batch; `patches` holds `n × n_patches` patch rows.
/// With `grads = Some((vision, text))` both gradient stores are accumulated.
pub fn contrastive_loss<T: Scalar>(
    vit: &VitArch,
    vp: &ParamStore<T>,
    text: &TextArch,
    tp: &ParamStore<T>,
    patches: &[T],
    captions: &[&[u32]],
    grads: Option<(&mut ParamStore<T>, &mut ParamStore<T>)>,
) -> Result<T> {
    let n = captions.len();
    if n < 2 {
        return Err(Error::Invalid(format!("contrastive batch needs at least 2 pairs, got {n}")));
    }
    text.check(captions)?;
    let (d_vis, d_txt) = (vit.d, text.d);
    if d_vis != d_txt {
        return Err(Error::Shape(format!("vision width {d_vis} differs from text width {d_txt}")));
    }
    let img_segs = Segments::from_lengths(std::iter::repeat(vit.n_patches).take(n));
    let (v_out, v_cache) = vit.forward_train(vp, patches, n);
    let img = mean_pool(&v_out, &img_segs, d_vis);

    let txt_segs = Segments::from_lengths(captions.iter().map(|s| s.len()));
    let (t_out, t_cache) = text.stack.forward_train(tp, text.input(tp, captions), &txt_segs);
    let txt = mean_pool(&t_out, &txt_segs, d_txt);

    let nce = info_nce(&img, &txt, d_vis, tp.get(text.logit_scale)[0]);
    if let Some((gv, gt)) = grads {
        let dv = mean_pool_backward(&nce.d_image, &img_segs, d_vis);
        vit.backward(vp, &v_cache, patches, &dv, n, gv);

        let dt_rows = mean_pool_backward(&nce.d_text, &txt_segs, d_txt);
        let dx = text.stack.backward(tp, &t_cache, &dt_rows, &txt_segs, Some(&mut *gt));
        let d = d_txt;
        let mut r = 0;
        for s in captions {
            for (i, tok) in s.iter().enumerate() {
                let tok = *tok as usize;
                for j in 0..d {
                    gt.get_mut(text.tok_emb)[tok * d + j] += dx[r * d + j];
                    gt.get_mut(text.pos_emb)[i * d + j] += dx[r * d + j];
                }
                r += 1;
            }
        }
        gt.get_mut(text.logit_scale)[0] += nce.d_logit_scale;
    }
    Ok(nce.loss)
}

/// Text tower with its weights (kept only for evaluation).
#[derive(Clone, Debug)]
pub struct TextTower {
    pub config: TextTowerConfig,
    pub arch: TextArch,
    pub weights: ParamStore<f32>,
}

impl TextTower {
    pub fn init(config: TextTowerConfig, init_temperature: f64, seed: u64) -> Self {
        let mut weights = ParamStore::new();
        let arch = TextArch::build(&config, &mut weights, init_temperature, seed);
        Self { config, arch, weights }
    }

    pub fn logit_scale(&self) -> f32 {
        self.weights.get(self.arch.logit_scale)[0]
    }

    pub fn embed(&self, seqs: &[&[u32]]) -> Result<Vec<f32>> {
        self.arch.pooled(&self.weights, seqs)
    }
}

/// One contrastive training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageText {
    pub pixels: Vec<f32>,
    pub tokens: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VitTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub warmup_steps: usize,
    pub final_lr_frac: f32,
    pub grad_clip: f32,
    pub init_temperature: f64,
    /// Upper clamp on the similarity multiplier.
    pub max_logit_scale: f64,
    /// Pairs held out for retrieval evaluation.
    pub val_pairs: usize,
    pub retrieval_candidates: usize,
    pub text: TextTowerConfig,
}

impl Default for VitTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 128,
            lr: 2e-3,
            warmup_steps: 50,
            final_lr_frac: 0.05,
            grad_clip: 1.0,
            init_temperature: 0.07,
            max_logit_scale: 100.0,
            val_pairs: 512,
            retrieval_candidates: 256,
            text: TextTowerConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VitTrainReport {
    pub epoch_loss: Vec<f64>,
    pub recall_at_1: f64,
    pub steps: usize,
    pub logit_scale: f64,
}

fn image_summaries(vit: &TinyVit, pairs: &[&ImageText]) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(pairs.len() * vit.d_vis());
    for chunk in pairs.chunks(256) {
        let imgs: Vec<&[f32]> = chunk.iter().map(|p| p.pixels.as_slice()).collect();
        for e in vit.forward_batch(&imgs)? {
            let segs = Segments::single(e.n_rows());
            out.extend(mean_pool(&e.rows, &segs, e.d));
        }
    }
    Ok(out)
}

/// Image→text recall@1 averaged over consecutive groups of `candidates`
/// pairs (a trailing partial group is dropped unless it is the only one).
pub fn recall_at_1(vit: &TinyVit, text: &TextTower, pairs: &[ImageText], candidates: usize) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(Error::Invalid("retrieval needs at least 2 pairs".into()));
    }
    let group = candidates.clamp(2, pairs.len());
    let d = vit.d_vis();
    let mut hits = 0usize;
    let mut total = 0usize;
    for chunk in pairs.chunks(group).filter(|c| c.len() == group) {
        let refs: Vec<&ImageText> = chunk.iter().collect();
        let (z, _) = normalize_rows(&image_summaries(vit, &refs)?, d);
        let toks: Vec<&[u32]> = chunk.iter().map(|p| p.tokens.as_slice()).collect();
        let (t, _) = normalize_rows(&text.embed(&toks)?, d);
        for i in 0..group {
            let zi = &z[i * d..(i + 1) * d];
            let score = |j: usize| -> f32 { zi.iter().zip(&t[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum() };
            let best = (0..group).fold(0, |b, j| if score(j) > score(b) { j } else { b });
            hits += usize::from(best == i);
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

/// Trains the vision tower (and a throwaway text tower) with symmetric
/// InfoNCE. The last `val_pairs` pairs are held out for retrieval.
pub fn train_contrastive(
    pairs: &[ImageText],
    vcfg: VitConfig,
    tc: &VitTrainConfig,
    seed: u64,
) -> Result<(TinyVit, TextTower, VitTrainReport)> {
    vcfg.validate()?;
    if tc.batch_size < 2 {
        return Err(Error::Config("contrastive batch size must be at least 2".into()));
    }
    if tc.text.d != vcfg.d_vis {
        return Err(Error::Config(format!("text tower width {} must equal d_vis {}", tc.text.d, vcfg.d_vis)));
    }
    let n_val = tc.val_pairs.min(pairs.len() / 2);
    let (train, val) = pairs.split_at(pairs.len() - n_val);
    if train.len() < 2 {
        return Err(Error::Invalid("need at least 2 training pairs".into()));
    }
    let mut vit = TinyVit::init(vcfg, derive_seed(seed, 1, 0));
    let mut text = TextTower::init(tc.text.clone(), tc.init_temperature, derive_seed(seed, 2, 0));
    let patches: Vec<Vec<f32>> = train.iter().map(|p| patchify(&p.pixels, &vit.config)).collect::<Result<_>>()?;

    let bs = tc.batch_size.min(train.len());
    // Batches of one pair carry no negatives; drop a trailing singleton.
    let steps_per_epoch = train.len() / bs + usize::from(train.len() % bs >= 2);
    let total = steps_per_epoch * tc.epochs;
    let sched = Schedule { peak: tc.lr, warmup: tc.warmup_steps.min(total), total, cosine: true, final_frac: tc.final_lr_frac };
    let (mut opt_v, mut opt_t) = (Adam::for_store(&vit.weights), Adam::for_store(&text.weights));
    let (mut gv, mut gt) = (vit.weights.zeros_like(), text.weights.zeros_like());
    let max_scale = tc.max_logit_scale.ln() as f32;
    let mut report = VitTrainReport::default();
    let mut step = 0;
    for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 3, epoch as u64)));
        let mut sum = 0.0;
        for chunk in order.chunks(bs).filter(|c| c.len() >= 2) {
            let batch_patches: Vec<f32> = chunk.iter().flat_map(|&i| patches[i].iter().copied()).collect();
            let caps: Vec<&[u32]> = chunk.iter().map(|&i| train[i].tokens.as_slice()).collect();
            gv.zero();
            gt.zero();
            let loss = contrastive_loss(
                &vit.arch,
                &vit.weights,
                &text.arch,
                &text.weights,
                &batch_patches,
                &caps,
                Some((&mut gv, &mut gt)),
            )?;
            if !loss.is_finite() || !gv.all_finite() || !gt.all_finite() {
                return Err(Error::Diverged(format!("non-finite contrastive loss {loss} at step {step}")));
            }
            clip_grad_norm(gv.flat_mut(), tc.grad_clip);
            clip_grad_norm(gt.flat_mut(), tc.grad_clip);
            let lr = sched.lr(step);
            opt_v.step(vit.weights.flat_mut(), gv.flat(), lr);
            opt_t.step(text.weights.flat_mut(), gt.flat(), lr);
            let s = &mut text.weights.get_mut(text.arch.logit_scale)[0];
            *s = s.min(max_scale);
            sum += loss as f64;
            step += 1;
        }
        let mean = sum / steps_per_epoch.max(1) as f64;
        log::info!("vit epoch {epoch}: contrastive loss {mean:.4}");
        report.epoch_loss.push(mean);
    }
    report.steps = step;
    report.logit_scale = text.logit_scale() as f64;
    let eval = if val.len() >= 2 { val } else { train };
    report.recall_at_1 = recall_at_1(&vit, &text, eval, tc.retrieval_candidates)?;
    log::info!("vit retrieval recall@1 {:.3}", report.recall_at_1);
    Ok((vit, text, report))
}
