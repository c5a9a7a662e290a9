use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xmprobe_nn::{gemm, Adam, Op, ParamStore, Scalar};

use super::{SaeArch, SaeWeights};
use crate::error::{Error, Result};
use crate::synthworld::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaeTrainConfig {
    pub d_sae: usize,
    /// Tried from largest to smallest; the first meeting both targets wins.
    pub l1_sweep: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub fvu_target: f64,
    pub l0_target: f64,
    pub val_fraction: f64,
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        Self {
            d_sae: 512,
            l1_sweep: vec![1e-2, 3e-3, 1e-3],
            epochs: 6,
            batch_size: 256,
            lr: 1e-3,
            fvu_target: 0.15,
            l0_target: 0.05,
            val_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub l1: f64,
    pub val_fvu: f64,
    pub val_l0_fraction: f64,
    pub meets_targets: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeTrainReport {
    pub layer: usize,
    pub chosen_l1: f64,
    pub val_fvu: f64,
    pub val_l0_fraction: f64,
    pub train_fvu: f64,
    pub meets_targets: bool,
    pub n_train: usize,
    pub n_val: usize,
    pub sweep: Vec<SweepPoint>,
}

/// `mean_rows(‖x − x̂‖² / d_model + l1 · ‖f‖₁)`. With `grads`, accumulates
/// the gradient of that value.
pub fn sae_loss<T: Scalar>(
    arch: &SaeArch,
    p: &ParamStore<T>,
    x: &[T],
    rows: usize,
    l1: T,
    grads: Option<&mut ParamStore<T>>,
) -> T {
    let (d, s) = (arch.d_model, arch.d_sae);
    let pre = arch.pre_activations(p, x, rows);
    let f: Vec<T> = pre.iter().map(|v| v.max(T::zero())).collect();
    let xhat = arch.decode(p, &f, rows);
    let inv_rows = T::one() / T::c(rows as f64);
    let inv_d = T::one() / T::c(d as f64);
    let mut recon = T::zero();
    for (a, b) in xhat.iter().zip(x) {
        recon += (*a - *b) * (*a - *b);
    }
    let sparsity: T = f.iter().copied().sum();
    let loss = (recon * inv_d + l1 * sparsity) * inv_rows;

    if let Some(g) = grads {
        let scale = T::c(2.0) * inv_d * inv_rows;
        let dxhat: Vec<T> = xhat.iter().zip(x).map(|(a, b)| (*a - *b) * scale).collect();
        gemm(Op::T, Op::N, s, d, rows, T::one(), &f, s, &dxhat, d, T::one(), g.get_mut(arch.w_dec), d);
        let gbd = g.get_mut(arch.b_dec);
        for row in dxhat.chunks_exact(d) {
            for (a, v) in gbd.iter_mut().zip(row) {
                *a += *v;
            }
        }
        let mut df = vec![T::zero(); rows * s];
        gemm(Op::N, Op::T, rows, s, d, T::one(), &dxhat, d, p.get(arch.w_dec), d, T::zero(), &mut df, s);
        let l1r = l1 * inv_rows;
        for (g, v) in df.iter_mut().zip(&pre) {
            *g = if *v > T::zero() { *g + l1r } else { T::zero() };
        }
        let b_dec = p.get(arch.b_dec);
        let centered: Vec<T> = x.chunks_exact(d).flat_map(|r| r.iter().zip(b_dec).map(|(a, b)| *a - *b)).collect();
        gemm(Op::T, Op::N, d, s, rows, T::one(), &centered, d, &df, s, T::one(), g.get_mut(arch.w_enc), s);
        let mut col = vec![T::zero(); s];
        for row in df.chunks_exact(s) {
            for (a, v) in col.iter_mut().zip(row) {
                *a += *v;
            }
        }
        for (a, v) in g.get_mut(arch.b_enc).iter_mut().zip(&col) {
            *a += *v;
        }
        // Through the centring term: d/d b_dec of -(b_dec W_enc) is -W_enc · colsum(df).
        let we = p.get(arch.w_enc);
        let gbd = g.get_mut(arch.b_dec);
        for j in 0..d {
            let mut acc = T::zero();
            for k in 0..s {
                acc += we[j * s + k] * col[k];
            }
            gbd[j] -= acc;
        }
    }
    loss
}

/// Fraction of variance unexplained by `decode(encode(x))` on the rows of `x`.
pub fn fvu(sae: &SaeWeights, x: &[f32]) -> f64 {
    let d = sae.d_model();
    let rows = x.len() / d;
    let mut mean = vec![0.0f64; d];
    for r in x.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += *v as f64 / rows as f64;
        }
    }
    let mut err = 0.0;
    let mut var = 0.0;
    for chunk in x.chunks(4096 * d) {
        let xhat = sae.reconstruct(chunk);
        for (i, (a, b)) in chunk.iter().zip(&xhat).enumerate() {
            err += (*a as f64 - *b as f64).powi(2);
            var += (*a as f64 - mean[i % d]).powi(2);
        }
    }
    err / var.max(f64::MIN_POSITIVE)
}

/// Mean ℓ0 of the codes divided by `d_sae`.
pub fn l0_fraction(sae: &SaeWeights, x: &[f32]) -> f64 {
    let d = sae.d_model();
    let rows = x.len() / d;
    let mut active = 0usize;
    for chunk in x.chunks(4096 * d) {
        active += sae.encode_batch(chunk).iter().filter(|v| **v > 0.0).count();
    }
    active as f64 / (rows * sae.d_sae()) as f64
}

/// Trains one SAE with a fixed ℓ1 coefficient on every row of `x`.
///
/// Inputs are rescaled by a scalar `c` so that `E‖x/c‖² = 1` during
/// training; the scale is folded back into the biases afterwards, so the
/// returned weights act on raw activations (codes come out multiplied by `c`).
pub fn train_sae(
    x: &[f32],
    d_model: usize,
    layer: usize,
    l1: f64,
    tc: &SaeTrainConfig,
    seed: u64,
) -> Result<SaeWeights> {
    let rows = x.len() / d_model;
    if x.len() % d_model != 0 {
        return Err(Error::Shape(format!("{} values is not a whole number of {d_model}-wide rows", x.len())));
    }
    if tc.d_sae <= d_model {
        return Err(Error::Config(format!("d_sae {} must exceed d_model {d_model}", tc.d_sae)));
    }
    if rows < 10 * tc.d_sae {
        return Err(Error::Invalid(format!("{rows} activation vectors; at least {} required", 10 * tc.d_sae)));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::Invalid("non-finite activations".into()));
    }
    let sq: f64 = x.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / rows as f64;
    let c = sq.sqrt().max(1e-12);
    let xs: Vec<f32> = x.iter().map(|v| (*v as f64 / c) as f32).collect();
    let mut mean = vec![0.0f64; d_model];
    for r in xs.chunks_exact(d_model) {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += *v as f64 / rows as f64;
        }
    }
    let mean: Vec<f32> = mean.into_iter().map(|v| v as f32).collect();
    let mut sae = SaeWeights::init(layer, d_model, tc.d_sae, &mean, derive_seed(seed, 1, 0));
    sae.l1_coefficient = l1;
    let arch = sae.arch;
    let mut opt = Adam::for_store(&sae.weights);
    let mut grads = sae.weights.zeros_like();
    let bs = tc.batch_size.max(1);
    let mut batch = Vec::with_capacity(bs * d_model);
    let mut step = 0usize;
    for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..rows).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 2, epoch as u64)));
        let mut sum = 0.0;
        for chunk in order.chunks(bs) {
            batch.clear();
            for &r in chunk {
                batch.extend_from_slice(&xs[r * d_model..(r + 1) * d_model]);
            }
            grads.zero();
            let loss = sae_loss(&arch, &sae.weights, &batch, chunk.len(), l1 as f32, Some(&mut grads));
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Diverged(format!("SAE layer {layer}: non-finite loss at step {step}")));
            }
            opt.step(sae.weights.flat_mut(), grads.flat(), tc.lr);
            arch.normalize_decoder(&mut sae.weights);
            sum += loss as f64;
            step += 1;
        }
        log::debug!("sae layer {layer} l1 {l1}: epoch {epoch} loss {:.5}", sum / rows.div_ceil(bs) as f64);
    }
    let c = c as f32;
    sae.weights.get_mut(arch.b_enc).iter_mut().for_each(|v| *v *= c);
    sae.weights.get_mut(arch.b_dec).iter_mut().for_each(|v| *v *= c);
    Ok(sae)
}

/// Holds out a fraction of rows, trains one SAE per ℓ1 coefficient (largest
/// first) and keeps the first that meets the FVU and ℓ0 targets on the
/// held-out rows. If none does, the lowest-FVU candidate is returned and the
/// report says so.
pub fn train_sae_sweep(
    x: &[f32],
    d_model: usize,
    layer: usize,
    tc: &SaeTrainConfig,
    seed: u64,
) -> Result<(SaeWeights, SaeTrainReport)> {
    if tc.l1_sweep.is_empty() {
        return Err(Error::Config("empty l1 sweep".into()));
    }
    let rows = x.len() / d_model;
    let mut order: Vec<usize> = (0..rows).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 3, 0)));
    let n_val = ((rows as f64 * tc.val_fraction).round() as usize).min(rows / 2);
    let take = |idx: &[usize]| -> Vec<f32> {
        let mut out = Vec::with_capacity(idx.len() * d_model);
        let mut sorted = idx.to_vec();
        sorted.sort_unstable();
        for r in sorted {
            out.extend_from_slice(&x[r * d_model..(r + 1) * d_model]);
        }
        out
    };
    let (val, train) = (take(&order[..n_val]), take(&order[n_val..]));
    let val = if val.is_empty() { train.clone() } else { val };

    let mut l1s = tc.l1_sweep.clone();
    l1s.sort_by(|a, b| b.partial_cmp(a).expect("finite l1"));
    let mut sweep = Vec::new();
    let mut best: Option<(SaeWeights, f64)> = None;
    let mut chosen = None;
    for &l1 in &l1s {
        let sae = train_sae(&train, d_model, layer, l1, tc, seed)?;
        let (f, l0) = (fvu(&sae, &val), l0_fraction(&sae, &val));
        let ok = f <= tc.fvu_target && l0 <= tc.l0_target;
        log::info!("sae layer {layer}: l1 {l1} -> held-out fvu {f:.4}, l0 fraction {l0:.4}");
        sweep.push(SweepPoint { l1, val_fvu: f, val_l0_fraction: l0, meets_targets: ok });
        if ok {
            chosen = Some(sae);
            break;
        }
        if best.as_ref().map_or(true, |(_, bf)| f < *bf) {
            best = Some((sae, f));
        }
    }
    let meets = chosen.is_some();
    let sae = chosen.unwrap_or_else(|| best.expect("at least one candidate").0);
    if !meets {
        log::warn!("sae layer {layer}: no l1 in {:?} met fvu <= {} and l0 <= {}", l1s, tc.fvu_target, tc.l0_target);
    }
    let report = SaeTrainReport {
        layer,
        chosen_l1: sae.l1_coefficient,
        val_fvu: fvu(&sae, &val),
        val_l0_fraction: l0_fraction(&sae, &val),
        train_fvu: fvu(&sae, &train),
        meets_targets: meets,
        n_train: train.len() / d_model,
        n_val,
        sweep,
    };
    Ok((sae, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use xmprobe_nn::gradcheck::check_indices;

    #[test]
    fn gradient_matches_finite_differences_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b: Vec<f32> = (0..5).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let mut sae = SaeWeights::init(1, 5, 12, &b, 2);
        for v in sae.weights.get_mut(sae.arch.b_enc) {
            *v = rng.gen_range(-0.2..0.4);
        }
        let p = sae.weights.cast::<f64>();
        let x: Vec<f64> = (0..7 * 5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut g = p.zeros_like();
        sae_loss(&sae.arch, &p, &x, 7, 0.05, Some(&mut g));
        let idx: Vec<usize> = (0..p.len()).step_by(7).take(24).collect();
        let r = check_indices(&idx, |i| g.flat()[i], 1e-6, |i, e| {
            let mut q = p.clone();
            q.flat_mut()[i] += e;
            sae_loss(&sae.arch, &q, &x, 7, 0.05, None)
        });
        assert!(r.passes(1e-4), "{r:#?}");
    }

    #[test]
    fn one_point_fit_without_penalty() {
        let d = 6;
        let point: Vec<f32> = vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.7];
        let x: Vec<f32> = point.iter().copied().cycle().take(d * 200).collect();
        let tc = SaeTrainConfig { d_sae: 16, epochs: 5, batch_size: 32, ..Default::default() };
        let sae = train_sae(&x, d, 1, 0.0, &tc, 3).unwrap();
        let xhat = sae.reconstruct(&point);
        let err: f32 = xhat.iter().zip(&point).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(err < 1e-6, "{err}");
        assert!(sae.decoder_norm_deviation() < 1e-5);
    }

    // Low-rank data with a sparse generative structure is learnable; the
    // trained SAE must beat the mean predictor and keep unit decoder rows.
    #[test]
    fn sweep_on_sparse_synthetic_data() {
        let (d, k) = (8, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dirs: Vec<Vec<f32>> = (0..k)
            .map(|_| {
                let v: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let n = v.iter().map(|a| a * a).sum::<f32>().sqrt();
                v.into_iter().map(|a| a / n).collect()
            })
            .collect();
        let mut x = Vec::new();
        for _ in 0..1200 {
            let mut row = vec![0.3f32; d];
            for dir in &dirs {
                if rng.gen_bool(0.15) {
                    let a: f32 = rng.gen_range(0.5..2.0);
                    row.iter_mut().zip(dir).for_each(|(r, v)| *r += a * v);
                }
            }
            x.extend(row);
        }
        let tc = SaeTrainConfig { d_sae: 32, epochs: 30, batch_size: 64, lr: 3e-3, l0_target: 0.5, ..Default::default() };
        let (sae, rep) = train_sae_sweep(&x, d, 2, &tc, 1).unwrap();
        assert!(rep.val_fvu < 1.0 && rep.train_fvu < 1.0, "{rep:?}");
        assert!(rep.meets_targets, "{rep:?}");
        assert!(sae.decoder_norm_deviation() < 1e-5);
        assert_eq!(rep.sweep.first().unwrap().l1, 1e-2);
        let (sae2, _) = train_sae_sweep(&x, d, 2, &tc, 1).unwrap();
        assert_eq!(sae.checksum(), sae2.checksum());
    }

    #[test]
    fn too_few_vectors_rejected() {
        let tc = SaeTrainConfig { d_sae: 16, ..Default::default() };
        assert!(matches!(train_sae(&[0.0; 6 * 100], 6, 1, 0.0, &tc, 0), Err(Error::Invalid(_))));
        let tc = SaeTrainConfig { d_sae: 4, ..Default::default() };
        assert!(matches!(train_sae(&[0.0; 6 * 100], 6, 1, 0.0, &tc, 0), Err(Error::Config(_))));
    }
}
