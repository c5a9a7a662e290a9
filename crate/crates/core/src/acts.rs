//! Residual-stream activation dumps: one tensor file of rows per layer plus a
//! JSON sidecar with per-sequence tokens and position tags.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xmprobe_nn::TensorFile;

use crate::error::{Error, Result};
use crate::tinylm::{PositionTag, TinyLm, PAD};

pub const ACTS_KIND: &str = "acts";

/// Token ids and group tags of one captured sequence. Visual positions carry
/// [`PAD`] as their token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqMeta {
    pub tokens: Vec<u32>,
    pub tags: Vec<PositionTag>,
}

impl SeqMeta {
    pub fn text(tokens: Vec<u32>) -> Self {
        let tags = (0..tokens.len()).map(|i| if i == 0 { PositionTag::Bos } else { PositionTag::Text }).collect();
        Self { tokens, tags }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Activations of one layer over a set of sequences, rows concatenated.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationDump {
    pub layer: usize,
    pub d_model: usize,
    pub seqs: Vec<SeqMeta>,
    offsets: Vec<usize>,
    pub rows: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    layer: usize,
    d_model: usize,
    seqs: Vec<SeqMeta>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    layer: usize,
    d_model: usize,
}

impl ActivationDump {
    pub fn new(layer: usize, d_model: usize, seqs: Vec<SeqMeta>, rows: Vec<f32>) -> Result<Self> {
        let mut offsets = Vec::with_capacity(seqs.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for s in &seqs {
            if s.tags.len() != s.tokens.len() {
                return Err(Error::Shape("tag and token counts differ".into()));
            }
            acc += s.len();
            offsets.push(acc);
        }
        if rows.len() != acc * d_model {
            return Err(Error::Shape(format!("{} values for {acc} positions of width {d_model}", rows.len())));
        }
        Ok(Self { layer, d_model, seqs, offsets, rows })
    }

    pub fn n_seqs(&self) -> usize {
        self.seqs.len()
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len() / self.d_model
    }

    /// Global row index of position `pos` in sequence `seq`.
    pub fn row_index(&self, seq: usize, pos: usize) -> usize {
        self.offsets[seq] + pos
    }

    pub fn row(&self, seq: usize, pos: usize) -> &[f32] {
        let r = self.row_index(seq, pos);
        &self.rows[r * self.d_model..(r + 1) * self.d_model]
    }

    pub fn seq_rows(&self, seq: usize) -> &[f32] {
        &self.rows[self.offsets[seq] * self.d_model..self.offsets[seq + 1] * self.d_model]
    }

    /// Global indices of every row not tagged BOS.
    pub fn non_bos_rows(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (s, meta) in self.seqs.iter().enumerate() {
            for (p, t) in meta.tags.iter().enumerate() {
                if *t != PositionTag::Bos {
                    out.push(self.offsets[s] + p);
                }
            }
        }
        out
    }

    /// Copies the selected rows into a dense matrix.
    pub fn gather(&self, rows: &[usize]) -> Vec<f32> {
        let d = self.d_model;
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&self.rows[r * d..(r + 1) * d]);
        }
        out
    }

    pub fn tensor_path(stem: &Path) -> PathBuf {
        stem.with_extension("bin")
    }

    pub fn sidecar_path(stem: &Path) -> PathBuf {
        stem.with_extension("tags.json")
    }

    /// Writes `<stem>.bin` and `<stem>.tags.json`; returns the tensor checksum.
    pub fn write(&self, stem: &Path) -> Result<String> {
        let header = serde_json::to_string(&Header { layer: self.layer, d_model: self.d_model }).expect("header");
        let mut f = TensorFile::new(ACTS_KIND, header);
        f.push("rows", &[self.n_rows(), self.d_model], self.rows.clone());
        let sum = f.write(&Self::tensor_path(stem))?;
        let side = Sidecar { layer: self.layer, d_model: self.d_model, seqs: self.seqs.clone() };
        fs::write(Self::sidecar_path(stem), serde_json::to_vec(&side).expect("sidecar"))?;
        Ok(sum)
    }

    pub fn read(stem: &Path) -> Result<Self> {
        let f = TensorFile::read_kind(&Self::tensor_path(stem), ACTS_KIND)?;
        let header: Header = serde_json::from_str(&f.config).map_err(|e| Error::Invalid(e.to_string()))?;
        let side: Sidecar = serde_json::from_slice(&fs::read(Self::sidecar_path(stem))?)
            .map_err(|e| Error::Invalid(format!("activation sidecar: {e}")))?;
        if side.layer != header.layer || side.d_model != header.d_model {
            return Err(Error::Invalid("activation sidecar does not match its tensor file".into()));
        }
        let rows = f.get("rows").ok_or_else(|| Error::Invalid("activation dump without `rows`".into()))?;
        Self::new(header.layer, header.d_model, side.seqs, rows.data.clone())
    }
}

/// Runs every sequence through the LM (in chunks of `batch`) and collects
/// the residual stream after each requested layer.
pub fn capture(
    lm: &TinyLm,
    inputs: &[Vec<f32>],
    metas: &[SeqMeta],
    layers: &BTreeSet<usize>,
    batch: usize,
) -> Result<BTreeMap<usize, ActivationDump>> {
    if inputs.len() != metas.len() {
        return Err(Error::Shape("one SeqMeta per input sequence required".into()));
    }
    let d = lm.d_model();
    let mut rows: BTreeMap<usize, Vec<f32>> = layers.iter().map(|&l| (l, Vec::new())).collect();
    for chunk in inputs.chunks(batch.max(1)) {
        for (_, rec) in lm.forward_batch(chunk, layers)? {
            for (l, m) in rec.layers {
                rows.get_mut(&l).expect("requested layer").extend(m);
            }
        }
    }
    rows.into_iter()
        .map(|(l, r)| Ok((l, ActivationDump::new(l, d, metas.to_vec(), r)?)))
        .collect()
}

/// [`capture`] for token sequences (first token BOS).
pub fn capture_text(
    lm: &TinyLm,
    docs: &[Vec<u32>],
    layers: &BTreeSet<usize>,
    batch: usize,
) -> Result<BTreeMap<usize, ActivationDump>> {
    let inputs: Vec<Vec<f32>> = docs.iter().map(|d| lm.embed_tokens(d)).collect();
    let metas: Vec<SeqMeta> = docs.iter().map(|d| SeqMeta::text(d.clone())).collect();
    capture(lm, &inputs, &metas, layers, batch)
}

/// Placeholder token used for visual positions in [`SeqMeta`].
pub const VISUAL_TOKEN: u32 = PAD;
