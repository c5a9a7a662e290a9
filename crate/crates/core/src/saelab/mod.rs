//! Per-layer ReLU sparse autoencoders over residual-stream activations, and
//! concept descriptions of their features from max-activating contexts.

mod describe;
mod train;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use xmprobe_nn::{gemm, Op, ParamId, ParamStore, Scalar, TensorFile};

use crate::error::{Error, Result};

pub use describe::{describe_features, write_descriptions_csv, ConceptScore, DescribeConfig, FeatureDescription};
pub use train::{fvu, l0_fraction, sae_loss, train_sae, train_sae_sweep, SaeTrainConfig, SaeTrainReport, SweepPoint};

/// Parameter handles of an SAE: `f = relu((x - b_dec) W_enc + b_enc)`,
/// `x̂ = f W_dec + b_dec`. `W_dec` rows are the feature directions.
#[derive(Clone, Copy, Debug)]
pub struct SaeArch {
    pub w_enc: ParamId,
    pub b_enc: ParamId,
    pub w_dec: ParamId,
    pub b_dec: ParamId,
    pub d_model: usize,
    pub d_sae: usize,
}

impl SaeArch {
    pub fn build<T: Scalar>(store: &mut ParamStore<T>, d_model: usize, d_sae: usize) -> Self {
        Self {
            w_enc: store.add("w_enc", &[d_model, d_sae]),
            b_enc: store.add("b_enc", &[d_sae]),
            w_dec: store.add("w_dec", &[d_sae, d_model]),
            b_dec: store.add("b_dec", &[d_model]),
            d_model,
            d_sae,
        }
    }

    /// Encoder pre-activations for `rows` inputs.
    pub fn pre_activations<T: Scalar>(&self, p: &ParamStore<T>, x: &[T], rows: usize) -> Vec<T> {
        let (d, s) = (self.d_model, self.d_sae);
        let b_dec = p.get(self.b_dec);
        let centered: Vec<T> = x.chunks_exact(d).flat_map(|r| r.iter().zip(b_dec).map(|(a, b)| *a - *b)).collect();
        let mut pre: Vec<T> = p.get(self.b_enc).iter().copied().cycle().take(rows * s).collect();
        gemm(Op::N, Op::N, rows, s, d, T::one(), &centered, d, p.get(self.w_enc), s, T::one(), &mut pre, s);
        pre
    }

    pub fn encode<T: Scalar>(&self, p: &ParamStore<T>, x: &[T], rows: usize) -> Vec<T> {
        let mut f = self.pre_activations(p, x, rows);
        f.iter_mut().for_each(|v| *v = v.max(T::zero()));
        f
    }

    pub fn decode<T: Scalar>(&self, p: &ParamStore<T>, f: &[T], rows: usize) -> Vec<T> {
        let (d, s) = (self.d_model, self.d_sae);
        let mut out: Vec<T> = p.get(self.b_dec).iter().copied().cycle().take(rows * d).collect();
        gemm(Op::N, Op::N, rows, d, s, T::one(), f, s, p.get(self.w_dec), d, T::one(), &mut out, d);
        out
    }

    /// Rescales every decoder row to unit length.
    pub fn normalize_decoder<T: Scalar>(&self, p: &mut ParamStore<T>) {
        for row in p.get_mut(self.w_dec).chunks_exact_mut(self.d_model) {
            let n = row.iter().map(|v| *v * *v).sum::<T>().sqrt();
            if n > T::zero() {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
    }
}

/// Nonnegative code stored as `(feature, value)` pairs for the active features.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseCode {
    pub d_sae: usize,
    pub entries: Vec<(u32, f32)>,
}

impl SparseCode {
    pub fn from_dense(code: &[f32]) -> Self {
        let entries = code.iter().enumerate().filter(|(_, v)| **v > 0.0).map(|(i, v)| (i as u32, *v)).collect();
        Self { d_sae: code.len(), entries }
    }

    pub fn to_dense(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.d_sae];
        for (i, v) in &self.entries {
            out[*i as usize] = *v;
        }
        out
    }

    pub fn l0(&self) -> usize {
        self.entries.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SaeHeader {
    layer: usize,
    d_model: usize,
    d_sae: usize,
    l1_coefficient: f64,
}

/// A trained (or hand-built) dictionary for one LM layer.
#[derive(Clone, Debug)]
pub struct SaeWeights {
    pub layer: usize,
    pub l1_coefficient: f64,
    pub arch: SaeArch,
    pub weights: ParamStore<f32>,
}

pub const SAE_KIND: &str = "sae";

impl SaeWeights {
    /// All-zero parameters.
    pub fn zeros(layer: usize, d_model: usize, d_sae: usize) -> Self {
        let mut weights = ParamStore::new();
        let arch = SaeArch::build(&mut weights, d_model, d_sae);
        Self { layer, l1_coefficient: 0.0, arch, weights }
    }

    /// Decoder rows are random unit vectors, the encoder is their transpose
    /// and the decoder bias is `b_dec`.
    pub fn init(layer: usize, d_model: usize, d_sae: usize, b_dec: &[f32], seed: u64) -> Self {
        let mut sae = Self::zeros(layer, d_model, d_sae);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = sae.arch;
        for v in sae.weights.get_mut(a.w_dec) {
            *v = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) as f32;
        }
        a.normalize_decoder(&mut sae.weights);
        let dec = sae.weights.get(a.w_dec).to_vec();
        let enc = sae.weights.get_mut(a.w_enc);
        for f in 0..d_sae {
            for j in 0..d_model {
                enc[j * d_sae + f] = dec[f * d_model + j];
            }
        }
        sae.weights.get_mut(a.b_dec).copy_from_slice(b_dec);
        sae
    }

    pub fn d_model(&self) -> usize {
        self.arch.d_model
    }

    pub fn d_sae(&self) -> usize {
        self.arch.d_sae
    }

    pub fn encode(&self, x: &[f32]) -> Vec<f32> {
        self.arch.encode(&self.weights, x, 1)
    }

    pub fn decode(&self, code: &[f32]) -> Vec<f32> {
        self.arch.decode(&self.weights, code, 1)
    }

    pub fn encode_sparse(&self, x: &[f32]) -> SparseCode {
        SparseCode::from_dense(&self.encode(x))
    }

    pub fn encode_batch(&self, x: &[f32]) -> Vec<f32> {
        self.arch.encode(&self.weights, x, x.len() / self.d_model())
    }

    pub fn decode_batch(&self, codes: &[f32]) -> Vec<f32> {
        self.arch.decode(&self.weights, codes, codes.len() / self.d_sae())
    }

    /// `decode(encode(x))` for a batch of rows.
    pub fn reconstruct(&self, x: &[f32]) -> Vec<f32> {
        self.decode_batch(&self.encode_batch(x))
    }

    /// Largest deviation of a decoder-row norm from 1.
    pub fn decoder_norm_deviation(&self) -> f64 {
        self.weights
            .get(self.arch.w_dec)
            .chunks_exact(self.d_model())
            .map(|r| (r.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let h = SaeHeader { layer: self.layer, d_model: self.d_model(), d_sae: self.d_sae(), l1_coefficient: self.l1_coefficient };
        TensorFile::from_store(SAE_KIND, &serde_json::to_string(&h).expect("header"), &self.weights)
    }

    pub fn from_tensor_file(f: &TensorFile) -> Result<Self> {
        if f.kind != SAE_KIND {
            return Err(Error::Invalid(format!("expected `{SAE_KIND}` checkpoint, found `{}`", f.kind)));
        }
        let h: SaeHeader = serde_json::from_str(&f.config).map_err(|e| Error::Invalid(e.to_string()))?;
        let mut sae = Self::zeros(h.layer, h.d_model, h.d_sae);
        sae.l1_coefficient = h.l1_coefficient;
        f.load_into(&mut sae.weights)?;
        Ok(sae)
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

    pub fn file_name(layer: usize) -> String {
        format!("sae_layer_{layer}.bin")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_sae(seed: u64) -> SaeWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut s = SaeWeights::init(1, 6, 20, &b, seed);
        for v in s.weights.get_mut(s.arch.b_enc) {
            *v = rng.gen_range(-0.5..0.5);
        }
        s
    }

    fn naive_encode(s: &SaeWeights, x: &[f32]) -> Vec<f64> {
        let (d, n) = (s.d_model(), s.d_sae());
        let (we, be, bd) = (s.weights.get(s.arch.w_enc), s.weights.get(s.arch.b_enc), s.weights.get(s.arch.b_dec));
        (0..n)
            .map(|f| {
                let mut acc = be[f] as f64;
                for j in 0..d {
                    acc += (x[j] as f64 - bd[j] as f64) * we[j * n + f] as f64;
                }
                acc.max(0.0)
            })
            .collect()
    }

    fn naive_decode(s: &SaeWeights, c: &[f32]) -> Vec<f64> {
        let (d, n) = (s.d_model(), s.d_sae());
        let (wd, bd) = (s.weights.get(s.arch.w_dec), s.weights.get(s.arch.b_dec));
        (0..d).map(|j| bd[j] as f64 + (0..n).map(|f| c[f] as f64 * wd[f * d + j] as f64).sum::<f64>()).collect()
    }

    #[test]
    fn bias_input_with_nonpositive_encoder_bias_gives_zero_code() {
        let mut s = random_sae(1);
        s.weights.get_mut(s.arch.b_enc).iter_mut().for_each(|v| *v = -v.abs());
        let b = s.weights.get(s.arch.b_dec).to_vec();
        assert!(s.encode(&b).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_code_decodes_to_bias_exactly() {
        let s = random_sae(2);
        assert_eq!(s.decode(&vec![0.0; 20]), s.weights.get(s.arch.b_dec));
    }

    #[test]
    fn init_has_unit_decoder_rows_and_tied_encoder() {
        let s = random_sae(3);
        assert!(s.decoder_norm_deviation() < 1e-5);
        let (we, wd) = (s.weights.get(s.arch.w_enc), s.weights.get(s.arch.w_dec));
        assert_eq!(we[2 * 20 + 7], wd[7 * 6 + 2]);
    }

    proptest! {
        #[test]
        fn encode_matches_naive_loop(seed in 0u64..1000, x in prop::collection::vec(-3.0f32..3.0, 6)) {
            let s = random_sae(seed);
            for (a, b) in s.encode(&x).iter().zip(naive_encode(&s, &x)) {
                prop_assert!((*a as f64 - b).abs() < 1e-5);
            }
        }

        #[test]
        fn decode_matches_naive_loop(seed in 0u64..1000, c in prop::collection::vec(0.0f32..2.0, 20)) {
            let s = random_sae(seed);
            for (a, b) in s.decode(&c).iter().zip(naive_decode(&s, &c)) {
                prop_assert!((*a as f64 - b).abs() < 1e-4);
            }
        }

        #[test]
        fn codes_are_nonnegative_under_scaling(seed in 0u64..1000, x in prop::collection::vec(-3.0f32..3.0, 6), k in -10.0f32..10.0) {
            let s = random_sae(seed);
            let xs: Vec<f32> = x.iter().map(|v| v * k).collect();
            prop_assert!(s.encode(&xs).iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn decode_is_affine(seed in 0u64..1000, a in prop::collection::vec(0.0f32..2.0, 20), b in prop::collection::vec(0.0f32..2.0, 20)) {
            let s = random_sae(seed);
            let z = s.decode(&[0.0; 20]);
            let ab: Vec<f32> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let (da, db, dab) = (s.decode(&a), s.decode(&b), s.decode(&ab));
            for j in 0..6 {
                prop_assert!(((dab[j] - z[j]) - ((da[j] - z[j]) + (db[j] - z[j]))).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn sparse_code_roundtrip() {
        let c = SparseCode::from_dense(&[0.0, 1.5, 0.0, 2.0]);
        assert_eq!(c.l0(), 2);
        assert_eq!(c.to_dense(), vec![0.0, 1.5, 0.0, 2.0]);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let s = random_sae(4);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(SaeWeights::file_name(1));
        let sum = s.save(&p).unwrap();
        let back = SaeWeights::load(&p).unwrap();
        assert_eq!(back.checksum(), sum);
        assert_eq!(back.layer, 1);
        assert_eq!(back.encode(&[0.1; 6]), s.encode(&[0.1; 6]));
    }
}
