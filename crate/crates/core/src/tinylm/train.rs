use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xmprobe_nn::{clip_grad_norm, cross_entropy, Adam, ParamStore, Scalar, Schedule, Segments};

use super::{LmArch, LmConfig, TinyLm};
use crate::error::{Error, Result};
use crate::synthworld::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub warmup_steps: usize,
    /// Cosine decay floor as a fraction of `lr`.
    pub final_lr_frac: f32,
    pub grad_clip: f32,
    pub val_fraction: f64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self { epochs: 4, batch_size: 32, lr: 3e-3, warmup_steps: 100, final_lr_frac: 0.1, grad_clip: 1.0, val_fraction: 0.05 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LmTrainReport {
    pub epoch_train_loss: Vec<f64>,
    pub val_loss: f64,
    pub unigram_entropy: f64,
    pub steps: usize,
}

/// Mean next-token cross-entropy over every target position of `seqs`.
/// With `grads`, accumulates the full parameter gradient.
pub fn lm_loss<T: Scalar>(
    arch: &LmArch,
    p: &ParamStore<T>,
    seqs: &[&[u32]],
    grads: Option<&mut ParamStore<T>>,
) -> Result<T> {
    let seqs: Vec<&[u32]> = seqs.iter().copied().filter(|s| s.len() >= 2).collect();
    if seqs.is_empty() {
        return Err(Error::Invalid("no sequence has a next-token target".into()));
    }
    let segs = Segments::from_lengths(seqs.iter().map(|s| s.len() - 1));
    let inputs: Vec<u32> = seqs.iter().flat_map(|s| s[..s.len() - 1].iter().copied()).collect();
    let targets: Vec<usize> = seqs.iter().flat_map(|s| s[1..].iter().map(|t| *t as usize)).collect();
    let weights = vec![T::one(); targets.len()];
    let x = arch.embed(p, &inputs);
    let (logits, cache) = arch.forward_train(p, x, &segs)?;
    let (loss, dlogits) = cross_entropy(&logits, arch.vocab, &targets, &weights);
    if let Some(g) = grads {
        let dx = arch.backward(p, &cache, &dlogits, &segs, Some(&mut *g));
        let d = arch.d_model;
        let ge = g.get_mut(arch.tok_emb);
        for (r, t) in inputs.iter().enumerate() {
            let t = *t as usize;
            for j in 0..d {
                ge[t * d + j] += dx[r * d + j];
            }
        }
    }
    Ok(loss)
}

/// Entropy (nats) of the empirical distribution of next-token targets.
pub fn unigram_entropy(seqs: &[Vec<u32>]) -> f64 {
    let mut counts: HashMap<u32, usize> = HashMap::new();
    let mut total = 0usize;
    for s in seqs {
        for t in s.iter().skip(1) {
            *counts.entry(*t).or_default() += 1;
            total += 1;
        }
    }
    let mut ids: Vec<_> = counts.into_iter().collect();
    ids.sort_unstable();
    ids.iter()
        .map(|(_, c)| {
            let p = *c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

fn eval_loss(lm: &TinyLm, seqs: &[&Vec<u32>], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in seqs.chunks(batch.max(1)) {
        let refs: Vec<&[u32]> = chunk.iter().map(|s| s.as_slice()).collect();
        let n: usize = refs.iter().map(|s| s.len().saturating_sub(1)).sum();
        total += lm_loss(&lm.arch, &lm.weights, &refs, None)? as f64 * n as f64;
        count += n;
    }
    Ok(total / count.max(1) as f64)
}

/// Next-token training with Adam, warmup and cosine decay. The returned
/// model is treated as frozen by every later stage.
pub fn train_lm(
    corpus: &[Vec<u32>],
    config: LmConfig,
    tc: &LmTrainConfig,
    seed: u64,
) -> Result<(TinyLm, LmTrainReport)> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Invalid("empty corpus".into()));
    }
    if let Some(s) = corpus.iter().find(|s| s.len() > config.max_context + 1) {
        return Err(Error::ContextOverflow { len: s.len() - 1, max: config.max_context });
    }
    let mut lm = TinyLm::init(config, derive_seed(seed, 1, 0));

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 2, 0)));
    let n_val = ((corpus.len() as f64 * tc.val_fraction).round() as usize).min(corpus.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    // With no held-out split the training documents stand in for validation.
    let val_idx = if val_idx.is_empty() { train_idx } else { val_idx };
    let val: Vec<&Vec<u32>> = val_idx.iter().map(|&i| &corpus[i]).collect();
    let train_idx = train_idx.to_vec();

    let bs = tc.batch_size.max(1);
    let steps_per_epoch = train_idx.len().div_ceil(bs);
    let total = steps_per_epoch * tc.epochs;
    let sched = Schedule { peak: tc.lr, warmup: tc.warmup_steps.min(total), total, cosine: true, final_frac: tc.final_lr_frac };
    let mut opt = Adam::for_store(&lm.weights);
    let mut grads = lm.weights.zeros_like();
    let mut report = LmTrainReport { unigram_entropy: unigram_entropy(corpus), ..Default::default() };
    let mut step = 0;

    for epoch in 0..tc.epochs {
        let mut idx = train_idx.clone();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 3, epoch as u64)));
        let mut sum = 0.0;
        for chunk in idx.chunks(bs) {
            let batch: Vec<&[u32]> = chunk.iter().map(|&i| corpus[i].as_slice()).collect();
            grads.zero();
            let loss = lm_loss(&lm.arch, &lm.weights, &batch, Some(&mut grads))?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Diverged(format!("non-finite loss {loss} at step {step} (epoch {epoch})")));
            }
            clip_grad_norm(grads.flat_mut(), tc.grad_clip);
            opt.step(lm.weights.flat_mut(), grads.flat(), sched.lr(step));
            sum += loss as f64;
            step += 1;
        }
        let mean = sum / steps_per_epoch.max(1) as f64;
        log::info!("lm epoch {epoch}: train loss {mean:.4}");
        report.epoch_train_loss.push(mean);
    }
    report.steps = step;
    report.val_loss = eval_loss(&lm, &val, bs)?;
    log::info!("lm val loss {:.4} (unigram entropy {:.4})", report.val_loss, report.unigram_entropy);
    Ok((lm, report))
}
