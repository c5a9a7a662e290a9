//! Pre-norm transformer blocks over packed sequence batches.
//!
//! A batch is a single `rows × d` matrix holding several sequences back to
//! back; [`Segments`] records where each one starts. Dense layers run over
//! the whole matrix at once, attention runs per sequence and head.

use rand::Rng;

use crate::layers::{gelu, gelu_grad, softmax_inplace, LayerNorm, Linear, LnCache};
use crate::params::ParamStore;
use crate::scalar::{gemm, Op, Scalar};

/// `(start_row, len)` of each sequence in a packed batch.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Segments(pub Vec<(usize, usize)>);

impl Segments {
    pub fn from_lengths(lengths: impl IntoIterator<Item = usize>) -> Self {
        let mut start = 0;
        Segments(
            lengths
                .into_iter()
                .map(|l| {
                    let s = (start, l);
                    start += l;
                    s
                })
                .collect(),
        )
    }

    pub fn single(len: usize) -> Self {
        Segments(vec![(0, len)])
    }

    pub fn total_rows(&self) -> usize {
        self.0.last().map(|(s, l)| s + l).unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockShape {
    pub d: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub causal: bool,
}

#[derive(Clone, Debug)]
pub struct Block {
    pub shape: BlockShape,
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug, Default)]
pub struct BlockCache<T> {
    ln1: LnCache<T>,
    a: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Attention probabilities, one `len × len` matrix per (sequence, head).
    probs: Vec<Vec<T>>,
    o: Vec<T>,
    ln2: LnCache<T>,
    b: Vec<T>,
    u: Vec<T>,
    g: Vec<T>,
}

impl Block {
    /// Registers parameters under `name.*`. Residual-branch output
    /// projections use `out_std`, everything else `std`.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        shape: BlockShape,
        std: f64,
        out_std: f64,
        rng: &mut R,
    ) -> Self {
        assert_eq!(shape.d % shape.n_heads, 0, "d must be divisible by n_heads");
        let d = shape.d;
        Self {
            shape,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            wq: Linear::new(store, &format!("{name}.attn.q"), d, d, true, std, rng),
            wk: Linear::new(store, &format!("{name}.attn.k"), d, d, true, std, rng),
            wv: Linear::new(store, &format!("{name}.attn.v"), d, d, true, std, rng),
            wo: Linear::new(store, &format!("{name}.attn.o"), d, d, true, out_std, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), d, shape.d_ff, true, std, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), shape.d_ff, d, true, out_std, rng),
        }
    }

    fn head_dim(&self) -> usize {
        self.shape.d / self.shape.n_heads
    }

    pub fn forward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        x: &[T],
        segs: &Segments,
    ) -> (Vec<T>, BlockCache<T>) {
        let d = self.shape.d;
        let rows = x.len() / d;
        let dh = self.head_dim();
        let scale = T::one() / T::c(dh as f64).sqrt();

        let (a, ln1) = self.ln1.forward(p, x);
        let q = self.wq.forward(p, &a, rows);
        let k = self.wk.forward(p, &a, rows);
        let v = self.wv.forward(p, &a, rows);

        let mut o = vec![T::zero(); rows * d];
        let mut probs = Vec::with_capacity(segs.len() * self.shape.n_heads);
        for (start, len) in segs.iter() {
            for h in 0..self.shape.n_heads {
                let off = start * d + h * dh;
                let mut s = vec![T::zero(); len * len];
                gemm(Op::N, Op::T, len, len, dh, scale, &q[off..], d, &k[off..], d, T::zero(), &mut s, len);
                for i in 0..len {
                    let row = &mut s[i * len..(i + 1) * len];
                    if self.shape.causal {
                        row[i + 1..].iter_mut().for_each(|v| *v = T::neg_infinity());
                    }
                    softmax_inplace(row);
                }
                gemm(Op::N, Op::N, len, dh, len, T::one(), &s, len, &v[off..], d, T::zero(), &mut o[off..], d);
                probs.push(s);
            }
        }

        let attn = self.wo.forward(p, &o, rows);
        let hres: Vec<T> = x.iter().zip(&attn).map(|(a, b)| *a + *b).collect();
        let (b, ln2) = self.ln2.forward(p, &hres);
        let u = self.fc1.forward(p, &b, rows);
        let g: Vec<T> = u.iter().map(|v| gelu(*v)).collect();
        let m = self.fc2.forward(p, &g, rows);
        let y: Vec<T> = hres.iter().zip(&m).map(|(a, b)| *a + *b).collect();
        (y, BlockCache { ln1, a, q, k, v, probs, o, ln2, b, u, g })
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        c: &BlockCache<T>,
        dy: &[T],
        segs: &Segments,
        mut grads: Option<&mut ParamStore<T>>,
    ) -> Vec<T> {
        let d = self.shape.d;
        let rows = dy.len() / d;
        let dh = self.head_dim();
        let scale = T::one() / T::c(dh as f64).sqrt();

        // MLP branch.
        let dg = self.fc2.backward(p, &c.g, dy, rows, grads.as_deref_mut());
        let du: Vec<T> = dg.iter().zip(&c.u).map(|(g, u)| *g * gelu_grad(*u)).collect();
        let db = self.fc1.backward(p, &c.b, &du, rows, grads.as_deref_mut());
        let dln2 = self.ln2.backward(p, &c.ln2, &db, grads.as_deref_mut());
        let dh_res: Vec<T> = dy.iter().zip(&dln2).map(|(a, b)| *a + *b).collect();

        // Attention branch.
        let d_o = self.wo.backward(p, &c.o, &dh_res, rows, grads.as_deref_mut());
        let mut dq = vec![T::zero(); rows * d];
        let mut dk = vec![T::zero(); rows * d];
        let mut dv = vec![T::zero(); rows * d];
        let mut pi = 0;
        for (start, len) in segs.iter() {
            for h in 0..self.shape.n_heads {
                let off = start * d + h * dh;
                let pm = &c.probs[pi];
                pi += 1;
                let mut dp = vec![T::zero(); len * len];
                gemm(Op::N, Op::T, len, len, dh, T::one(), &d_o[off..], d, &c.v[off..], d, T::zero(), &mut dp, len);
                gemm(Op::T, Op::N, len, dh, len, T::one(), pm, len, &d_o[off..], d, T::zero(), &mut dv[off..], d);
                for i in 0..len {
                    let pr = &pm[i * len..(i + 1) * len];
                    let dr = &mut dp[i * len..(i + 1) * len];
                    let dot: T = pr.iter().zip(dr.iter()).map(|(a, b)| *a * *b).sum();
                    for (dv_, pv) in dr.iter_mut().zip(pr) {
                        *dv_ = *pv * (*dv_ - dot);
                    }
                }
                gemm(Op::N, Op::N, len, dh, len, scale, &dp, len, &c.k[off..], d, T::zero(), &mut dq[off..], d);
                gemm(Op::T, Op::N, len, dh, len, scale, &dp, len, &c.q[off..], d, T::zero(), &mut dk[off..], d);
            }
        }
        let mut da = self.wq.backward(p, &c.a, &dq, rows, grads.as_deref_mut());
        for (x, y) in da.iter_mut().zip(self.wk.backward(p, &c.a, &dk, rows, grads.as_deref_mut())) {
            *x += y;
        }
        for (x, y) in da.iter_mut().zip(self.wv.backward(p, &c.a, &dv, rows, grads.as_deref_mut())) {
            *x += y;
        }
        let dln1 = self.ln1.backward(p, &c.ln1, &da, grads);
        dh_res.iter().zip(&dln1).map(|(a, b)| *a + *b).collect()
    }
}

/// A stack of blocks followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct Stack {
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
}

#[derive(Clone, Debug, Default)]
pub struct StackCache<T> {
    blocks: Vec<BlockCache<T>>,
    ln_f: LnCache<T>,
}

/// Forward result of a [`Stack`].
#[derive(Clone, Debug)]
pub struct StackOutput<T> {
    /// Final-norm output, `rows × d`.
    pub out: Vec<T>,
    /// Residual stream after block `i` (0-based), present only if requested.
    pub residuals: Vec<Option<Vec<T>>>,
}

impl Stack {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        n_layers: usize,
        shape: BlockShape,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let out_std = std / (2.0 * n_layers as f64).sqrt();
        let blocks = (0..n_layers)
            .map(|i| Block::new(store, &format!("{prefix}.blocks.{i}"), shape, std, out_std, rng))
            .collect();
        let ln_f = LayerNorm::new(store, &format!("{prefix}.ln_f"), shape.d);
        Self { blocks, ln_f }
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    /// Forward pass keeping everything needed for [`Stack::backward`].
    pub fn forward_train<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        x: Vec<T>,
        segs: &Segments,
    ) -> (Vec<T>, StackCache<T>) {
        let mut h = x;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(p, &h, segs);
            caches.push(c);
            h = y;
        }
        let (out, ln_f) = self.ln_f.forward(p, &h);
        (out, StackCache { blocks: caches, ln_f })
    }

    /// Inference pass; `capture[i]` requests a copy of the residual after block `i`.
    pub fn forward_capture<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        x: Vec<T>,
        segs: &Segments,
        capture: &[bool],
    ) -> StackOutput<T> {
        let mut h = x;
        let mut residuals = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            h = b.forward(p, &h, segs).0;
            residuals.push(capture.get(i).copied().unwrap_or(false).then(|| h.clone()));
        }
        let (out, _) = self.ln_f.forward(p, &h);
        StackOutput { out, residuals }
    }

    /// Returns the gradient w.r.t. the stack input.
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        cache: &StackCache<T>,
        d_out: &[T],
        segs: &Segments,
        mut grads: Option<&mut ParamStore<T>>,
    ) -> Vec<T> {
        let mut dh = self.ln_f.backward(p, &cache.ln_f, d_out, grads.as_deref_mut());
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            dh = b.backward(p, c, &dh, segs, grads.as_deref_mut());
        }
        dh
    }
}
