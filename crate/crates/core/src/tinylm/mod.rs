//! From-scratch decoder-only transformer with residual-stream capture.
//!
//! The model consumes embedding rows rather than token ids so that callers
//! can splice projected image vectors into the input sequence.

mod tokenizer;
mod train;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xmprobe_nn::{BlockShape, Linear, ParamId, ParamStore, Scalar, Segments, Stack, StackCache, TensorFile};

use crate::error::{Error, Result};

pub use tokenizer::{Tokenizer, BOS, EOS, PAD, SEP, SPECIALS, UNK};
pub use train::{lm_loss, train_lm, unigram_entropy, LmTrainConfig, LmTrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub init_std: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 8,
            n_heads: 4,
            d_ff: 256,
            vocab_size: Tokenizer::new().vocab_size(),
            max_context: 160,
            init_std: 0.05,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        if self.n_layers == 0 || self.vocab_size == 0 {
            return Err(Error::Config("n_layers and vocab_size must be positive".into()));
        }
        Ok(())
    }
}

/// Which token group a sequence position belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionTag {
    Bos,
    Visual,
    Text,
}

/// Residual-stream values after selected blocks, keyed by 1-based layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActivationRecord {
    pub d_model: usize,
    pub len: usize,
    pub layers: BTreeMap<usize, Vec<f32>>,
    pub tags: Vec<PositionTag>,
}

impl ActivationRecord {
    pub fn layer(&self, l: usize) -> Option<&[f32]> {
        self.layers.get(&l).map(|v| v.as_slice())
    }

    pub fn row(&self, l: usize, pos: usize) -> Option<&[f32]> {
        self.layer(l).map(|m| &m[pos * self.d_model..(pos + 1) * self.d_model])
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn with_tags(mut self, tags: Vec<PositionTag>) -> Self {
        self.tags = tags;
        self
    }
}

/// Parameter handles of the language model; weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct LmArch {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub stack: Stack,
    pub unembed: Linear,
    pub d_model: usize,
    pub vocab: usize,
    pub max_context: usize,
}

/// Saved activations for [`LmArch::backward`].
pub struct LmCache<T> {
    stack: StackCache<T>,
    final_norm: Vec<T>,
}

impl LmArch {
    pub fn build<T: Scalar>(cfg: &LmConfig, store: &mut ParamStore<T>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let tok_emb = store.add_normal("tok_emb", &[cfg.vocab_size, d], cfg.init_std, &mut rng);
        let pos_emb = store.add_normal("pos_emb", &[cfg.max_context, d], cfg.init_std, &mut rng);
        let shape = BlockShape { d, n_heads: cfg.n_heads, d_ff: cfg.d_ff, causal: true };
        let stack = Stack::new(store, "lm", cfg.n_layers, shape, cfg.init_std, &mut rng);
        let unembed = Linear::new(store, "unembed", d, cfg.vocab_size, false, cfg.init_std, &mut rng);
        Self { tok_emb, pos_emb, stack, unembed, d_model: d, vocab: cfg.vocab_size, max_context: cfg.max_context }
    }

    pub fn n_layers(&self) -> usize {
        self.stack.n_layers()
    }

    pub fn embed<T: Scalar>(&self, p: &ParamStore<T>, tokens: &[u32]) -> Vec<T> {
        let d = self.d_model;
        let table = p.get(self.tok_emb);
        let mut out = Vec::with_capacity(tokens.len() * d);
        for t in tokens {
            let t = *t as usize;
            assert!(t < self.vocab, "token id {t} out of range");
            out.extend_from_slice(&table[t * d..(t + 1) * d]);
        }
        out
    }

    fn check_lengths(&self, segs: &Segments) -> Result<()> {
        for (_, len) in segs.iter() {
            if len > self.max_context {
                return Err(Error::ContextOverflow { len, max: self.max_context });
            }
        }
        Ok(())
    }

    fn add_positions<T: Scalar>(&self, p: &ParamStore<T>, x: &mut [T], segs: &Segments) {
        let d = self.d_model;
        let pos = p.get(self.pos_emb);
        for (start, len) in segs.iter() {
            for i in 0..len {
                let row = &mut x[(start + i) * d..(start + i + 1) * d];
                for (a, b) in row.iter_mut().zip(&pos[i * d..(i + 1) * d]) {
                    *a += *b;
                }
            }
        }
    }

    /// Training forward from input embeddings (positions are added here).
    pub fn forward_train<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        mut x: Vec<T>,
        segs: &Segments,
    ) -> Result<(Vec<T>, LmCache<T>)> {
        self.check_lengths(segs)?;
        self.add_positions(p, &mut x, segs);
        let (final_norm, stack) = self.stack.forward_train(p, x, segs);
        let logits = self.unembed.forward(p, &final_norm, segs.total_rows());
        Ok((logits, LmCache { stack, final_norm }))
    }

    /// Backpropagates `d loss / d logits`; returns the gradient w.r.t. the
    /// input embeddings. With `grads`, positional/stack/unembedding gradients
    /// are accumulated too (token-embedding gradients are the caller's job).
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        cache: &LmCache<T>,
        dlogits: &[T],
        segs: &Segments,
        mut grads: Option<&mut ParamStore<T>>,
    ) -> Vec<T> {
        let rows = segs.total_rows();
        let d_final = self.unembed.backward(p, &cache.final_norm, dlogits, rows, grads.as_deref_mut());
        let dx = self.stack.backward(p, &cache.stack, &d_final, segs, grads.as_deref_mut());
        if let Some(g) = grads {
            let d = self.d_model;
            let gp = g.get_mut(self.pos_emb);
            for (start, len) in segs.iter() {
                for i in 0..len {
                    for j in 0..d {
                        gp[i * d + j] += dx[(start + i) * d + j];
                    }
                }
            }
        }
        dx
    }

    /// Inference forward returning logits and requested residuals
    /// (`capture` holds 1-based layer indices).
    pub fn forward_capture<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        mut x: Vec<T>,
        segs: &Segments,
        capture: &BTreeSet<usize>,
    ) -> Result<(Vec<T>, Vec<Option<Vec<T>>>)> {
        self.check_lengths(segs)?;
        if let Some(&l) = capture.iter().find(|&&l| l == 0 || l > self.n_layers()) {
            return Err(Error::Invalid(format!("layer {l} outside 1..={}", self.n_layers())));
        }
        self.add_positions(p, &mut x, segs);
        let mask: Vec<bool> = (1..=self.n_layers()).map(|l| capture.contains(&l)).collect();
        let out = self.stack.forward_capture(p, x, segs, &mask);
        let logits = self.unembed.forward(p, &out.out, segs.total_rows());
        Ok((logits, out.residuals))
    }
}

/// A language model with its `f32` weights.
#[derive(Clone, Debug)]
pub struct TinyLm {
    pub config: LmConfig,
    pub arch: LmArch,
    pub weights: ParamStore<f32>,
}

pub const LM_KIND: &str = "lm";

impl TinyLm {
    pub fn init(config: LmConfig, seed: u64) -> Self {
        let mut weights = ParamStore::new();
        let arch = LmArch::build(&config, &mut weights, seed);
        Self { config, arch, weights }
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    /// Rows of the token-embedding matrix.
    pub fn embed_tokens(&self, tokens: &[u32]) -> Vec<f32> {
        self.arch.embed(&self.weights, tokens)
    }

    /// Runs one sequence of embedding rows (`len × d_model`).
    pub fn forward(&self, embeddings: &[f32], capture: &BTreeSet<usize>) -> Result<(Vec<f32>, ActivationRecord)> {
        let d = self.d_model();
        if embeddings.len() % d != 0 {
            return Err(Error::Shape(format!("embedding buffer of {} not a multiple of {d}", embeddings.len())));
        }
        let mut out = self.forward_batch(&[embeddings.to_vec()], capture)?;
        Ok(out.pop().expect("one sequence"))
    }

    pub fn forward_tokens(&self, tokens: &[u32], capture: &BTreeSet<usize>) -> Result<(Vec<f32>, ActivationRecord)> {
        self.forward(&self.embed_tokens(tokens), capture)
    }

    /// Packs several sequences into one pass; results come back in order.
    pub fn forward_batch(
        &self,
        seqs: &[Vec<f32>],
        capture: &BTreeSet<usize>,
    ) -> Result<Vec<(Vec<f32>, ActivationRecord)>> {
        let d = self.d_model();
        let v = self.config.vocab_size;
        let segs = Segments::from_lengths(seqs.iter().map(|s| s.len() / d));
        let x: Vec<f32> = seqs.concat();
        let (logits, residuals) = self.arch.forward_capture(&self.weights, x, &segs, capture)?;
        Ok(segs
            .iter()
            .map(|(start, len)| {
                let mut rec = ActivationRecord { d_model: d, len, ..Default::default() };
                for (i, r) in residuals.iter().enumerate() {
                    if let Some(r) = r {
                        rec.layers.insert(i + 1, r[start * d..(start + len) * d].to_vec());
                    }
                }
                (logits[start * v..(start + len) * v].to_vec(), rec)
            })
            .collect())
    }

    /// Greedy continuation of a prefix of embedding rows until `stop` or
    /// `max_new` tokens. The stop token is not included in the result.
    pub fn greedy_continue(&self, prefix: &[f32], max_new: usize, stop: u32) -> Result<Vec<u32>> {
        let d = self.d_model();
        let v = self.config.vocab_size;
        let mut seq = prefix.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_new {
            if seq.len() / d >= self.config.max_context {
                break;
            }
            let (logits, _) = self.forward(&seq, &BTreeSet::new())?;
            let last = &logits[logits.len() - v..];
            let next = last
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, x)| if *x > best.1 { (i, *x) } else { best })
                .0 as u32;
            if next == stop {
                break;
            }
            out.push(next);
            seq.extend_from_slice(&self.embed_tokens(&[next]));
        }
        Ok(out)
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let cfg = serde_json::to_string(&self.config).expect("config serialises");
        TensorFile::from_store(LM_KIND, &cfg, &self.weights)
    }

    pub fn from_tensor_file(f: &TensorFile) -> Result<Self> {
        if f.kind != LM_KIND {
            return Err(Error::Invalid(format!("expected `{LM_KIND}` checkpoint, found `{}`", f.kind)));
        }
        let config: LmConfig = serde_json::from_str(&f.config).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        let mut lm = Self::init(config, 0);
        f.load_into(&mut lm.weights)?;
        Ok(lm)
    }

    /// Content hash of the serialised weights and config.
    pub fn checksum(&self) -> String {
        self.to_tensor_file().checksum()
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        Ok(self.to_tensor_file().write(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::read(path)?)
    }
}
