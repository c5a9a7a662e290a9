//! The linear map from vision width to LM width, VLM sequence assembly and
//! two-stage adapter training with both backbones frozen.
//!
//! Sequence layout: `<bos> v1 .. v9 <sep> instruction <sep> answer <eos>`.

mod train;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xmprobe_nn::{Linear, ParamStore, TensorFile};

use crate::error::{Error, Result};
use crate::tinylm::{PositionTag, TinyLm, Tokenizer, BOS, EOS, PAD, SEP};
use crate::tinyvit::{PatchEmbeddings, TinyVit};

pub use train::{
    adapter_loss, qa_accuracy, train_stage, train_stage1, train_stage2, StageConfig, StageReport, TrainItem,
};

/// `rows = patch · W + b` with `W` stored `d_vis × d_model`.
#[derive(Clone, Debug)]
pub struct AdapterWeights {
    pub linear: Linear,
    pub weights: ParamStore<f32>,
}

#[derive(Serialize, Deserialize)]
struct AdapterHeader {
    d_vis: usize,
    d_model: usize,
}

pub const ADAPTER_KIND: &str = "adapter";

impl AdapterWeights {
    pub fn zeros(d_vis: usize, d_model: usize) -> Self {
        let mut weights = ParamStore::new();
        let linear = Linear { w: weights.add("adapter.weight", &[d_vis, d_model]), b: Some(weights.add("adapter.bias", &[d_model])), d_in: d_vis, d_out: d_model };
        Self { linear, weights }
    }

    /// Gaussian `W` with standard deviation `std`, zero bias.
    pub fn random(d_vis: usize, d_model: usize, std: f64, seed: u64) -> Self {
        let mut weights = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let linear = Linear::new(&mut weights, "adapter", d_vis, d_model, true, std, &mut rng);
        Self { linear, weights }
    }

    pub fn d_vis(&self) -> usize {
        self.linear.d_in
    }

    pub fn d_model(&self) -> usize {
        self.linear.d_out
    }

    pub fn w(&self) -> &[f32] {
        self.weights.get(self.linear.w)
    }

    pub fn b(&self) -> &[f32] {
        self.weights.get(self.linear.b.expect("adapter has a bias"))
    }

    /// Projects every patch row into the LM embedding space.
    pub fn project(&self, patches: &PatchEmbeddings) -> Result<Vec<f32>> {
        if patches.d != self.d_vis() {
            return Err(Error::Shape(format!("patch width {} but adapter expects {}", patches.d, self.d_vis())));
        }
        Ok(self.linear.forward(&self.weights, &patches.rows, patches.n_rows()))
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let h = AdapterHeader { d_vis: self.d_vis(), d_model: self.d_model() };
        TensorFile::from_store(ADAPTER_KIND, &serde_json::to_string(&h).expect("header"), &self.weights)
    }

    pub fn from_tensor_file(f: &TensorFile) -> Result<Self> {
        if f.kind != ADAPTER_KIND {
            return Err(Error::Invalid(format!("expected `{ADAPTER_KIND}` checkpoint, found `{}`", f.kind)));
        }
        let h: AdapterHeader = serde_json::from_str(&f.config).map_err(|e| Error::Invalid(e.to_string()))?;
        let mut a = Self::zeros(h.d_vis, h.d_model);
        f.load_into(&mut a.weights)?;
        Ok(a)
    }

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

/// LM input rows for one image plus text, with group tags.
#[derive(Clone, Debug, PartialEq)]
pub struct AssembledSequence {
    /// `len × d_model` embedding rows.
    pub rows: Vec<f32>,
    pub tags: Vec<PositionTag>,
    /// Token per position; visual positions hold `PAD`.
    pub tokens: Vec<u32>,
}

impl AssembledSequence {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }
}

/// Number of visual positions in every assembled sequence.
pub const N_VISUAL: usize = 9;

/// Text that follows the visual block: `<sep> instruction <sep>` and, when
/// an answer is given, `answer <eos>`.
pub fn chat_tokens(tok: &Tokenizer, instruction: &str, answer: Option<&str>) -> Vec<u32> {
    let mut out = vec![SEP];
    out.extend(tok.tokenize(instruction));
    out.push(SEP);
    if let Some(a) = answer {
        out.extend(tok.tokenize(a));
        out.push(EOS);
    }
    out
}

/// Assembles from precomputed patch embeddings.
pub fn assemble_patches(patches: &PatchEmbeddings, text: &[u32], lm: &TinyLm, adapter: &AdapterWeights) -> Result<AssembledSequence> {
    if patches.n_rows() != N_VISUAL {
        return Err(Error::Shape(format!("expected {N_VISUAL} patch rows, got {}", patches.n_rows())));
    }
    if adapter.d_model() != lm.d_model() {
        return Err(Error::Shape(format!("adapter emits {} but LM width is {}", adapter.d_model(), lm.d_model())));
    }
    let len = 1 + N_VISUAL + text.len();
    if len > lm.config.max_context {
        return Err(Error::ContextOverflow { len, max: lm.config.max_context });
    }
    let mut rows = lm.embed_tokens(&[BOS]);
    rows.extend(adapter.project(patches)?);
    rows.extend(lm.embed_tokens(text));
    let mut tags = vec![PositionTag::Bos];
    tags.extend([PositionTag::Visual; N_VISUAL]);
    tags.extend(std::iter::repeat(PositionTag::Text).take(text.len()));
    let mut tokens = vec![BOS];
    tokens.extend([PAD; N_VISUAL]);
    tokens.extend_from_slice(text);
    Ok(AssembledSequence { rows, tags, tokens })
}

/// `[BOS] ++ project(vit(image)) ++ embed(text)`.
pub fn assemble(pixels: &[f32], text: &[u32], lm: &TinyLm, vit: &TinyVit, adapter: &AdapterWeights) -> Result<AssembledSequence> {
    assemble_patches(&vit.forward(pixels)?, text, lm, adapter)
}
