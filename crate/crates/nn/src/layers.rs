//! Dense building blocks with explicit backward passes.
//!
//! All activations are row-major `rows × dim` slices. Backward functions
//! return the input gradient and, when a gradient store is supplied,
//! accumulate parameter gradients into it.

use rand::Rng;

use crate::params::{ParamId, ParamStore};
use crate::scalar::{gemm, Op, Scalar};

/// `y = x W + b` with `W` stored `d_in × d_out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Registers weights drawn from `N(0, std²)` and a zero bias.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.add_normal(format!("{name}.weight"), &[d_in, d_out], std, rng);
        let b = bias.then(|| store.add(format!("{name}.bias"), &[d_out]));
        Self { w, b, d_in, d_out }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &[T], rows: usize) -> Vec<T> {
        debug_assert_eq!(x.len(), rows * self.d_in);
        let mut y = vec![T::zero(); rows * self.d_out];
        if let Some(b) = self.b {
            let b = p.get(b);
            for row in y.chunks_exact_mut(self.d_out) {
                row.copy_from_slice(b);
            }
        }
        let beta = if self.b.is_some() { T::one() } else { T::zero() };
        gemm(
            Op::N,
            Op::N,
            rows,
            self.d_out,
            self.d_in,
            T::one(),
            x,
            self.d_in,
            p.get(self.w),
            self.d_out,
            beta,
            &mut y,
            self.d_out,
        );
        y
    }

    /// Accumulates `dW`, `db` and returns `dx`.
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        x: &[T],
        dy: &[T],
        rows: usize,
        grads: Option<&mut ParamStore<T>>,
    ) -> Vec<T> {
        if let Some(g) = grads {
            self.accumulate_param_grads(x, dy, rows, g);
        }
        let mut dx = vec![T::zero(); rows * self.d_in];
        gemm(
            Op::N,
            Op::T,
            rows,
            self.d_in,
            self.d_out,
            T::one(),
            dy,
            self.d_out,
            p.get(self.w),
            self.d_out,
            T::zero(),
            &mut dx,
            self.d_in,
        );
        dx
    }

    pub fn accumulate_param_grads<T: Scalar>(
        &self,
        x: &[T],
        dy: &[T],
        rows: usize,
        g: &mut ParamStore<T>,
    ) {
        gemm(
            Op::T,
            Op::N,
            self.d_in,
            self.d_out,
            rows,
            T::one(),
            x,
            self.d_in,
            dy,
            self.d_out,
            T::one(),
            g.get_mut(self.w),
            self.d_out,
        );
        if let Some(b) = self.b {
            let gb = g.get_mut(b);
            for row in dy.chunks_exact(self.d_out) {
                for (a, v) in gb.iter_mut().zip(row) {
                    *a += *v;
                }
            }
        }
    }
}

/// Per-row layer normalisation with learned gain and shift.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

/// Saved normalised input and reciprocal std per row.
#[derive(Clone, Debug, Default)]
pub struct LnCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = store.add_filled(format!("{name}.gamma"), &[dim], T::one());
        let beta = store.add(format!("{name}.beta"), &[dim]);
        Self { gamma, beta, dim }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &[T]) -> (Vec<T>, LnCache<T>) {
        let d = self.dim;
        let rows = x.len() / d;
        let (gamma, beta) = (p.get(self.gamma), p.get(self.beta));
        let mut y = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        let inv_d = T::one() / T::c(d as f64);
        for r in 0..rows {
            let xr = &x[r * d..(r + 1) * d];
            let mean = xr.iter().copied().sum::<T>() * inv_d;
            let var = xr.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + T::c(LN_EPS)).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (xr[j] - mean) * rs;
                xhat[r * d + j] = h;
                y[r * d + j] = h * gamma[j] + beta[j];
            }
        }
        (y, LnCache { xhat, rstd })
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        cache: &LnCache<T>,
        dy: &[T],
        grads: Option<&mut ParamStore<T>>,
    ) -> Vec<T> {
        let d = self.dim;
        let rows = dy.len() / d;
        if let Some(g) = grads {
            let mut dg = vec![T::zero(); d];
            let mut db = vec![T::zero(); d];
            for r in 0..rows {
                for j in 0..d {
                    dg[j] += dy[r * d + j] * cache.xhat[r * d + j];
                    db[j] += dy[r * d + j];
                }
            }
            for (a, v) in g.get_mut(self.gamma).iter_mut().zip(dg) {
                *a += v;
            }
            for (a, v) in g.get_mut(self.beta).iter_mut().zip(db) {
                *a += v;
            }
        }
        let gamma = p.get(self.gamma);
        let inv_d = T::one() / T::c(d as f64);
        let mut dx = vec![T::zero(); dy.len()];
        for r in 0..rows {
            let xh = &cache.xhat[r * d..(r + 1) * d];
            let dyr = &dy[r * d..(r + 1) * d];
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for j in 0..d {
                let gj = dyr[j] * gamma[j];
                sum_g += gj;
                sum_gx += gj * xh[j];
            }
            let (mg, mgx) = (sum_g * inv_d, sum_gx * inv_d);
            for j in 0..d {
                dx[r * d + j] = cache.rstd[r] * (dyr[j] * gamma[j] - mg - xh[j] * mgx);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<T: Scalar>(u: T) -> T {
    let inner = T::c(GELU_C) * (u + T::c(GELU_A) * u * u * u);
    T::c(0.5) * u * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(u: T) -> T {
    let inner = T::c(GELU_C) * (u + T::c(GELU_A) * u * u * u);
    let t = inner.tanh();
    T::c(0.5) * (T::one() + t)
        + T::c(0.5) * u * (T::one() - t * t) * T::c(GELU_C) * (T::one() + T::c(3.0 * GELU_A) * u * u)
}

/// In-place numerically stable softmax over one row.
pub fn softmax_inplace<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|v| (*v - max).exp()).sum::<T>().ln()
}

/// Weighted softmax cross-entropy over rows of `logits` (`rows × vocab`).
///
/// Rows with zero weight contribute neither loss nor gradient. Returns the
/// weight-normalised mean loss and `d loss / d logits`.
pub fn cross_entropy<T: Scalar>(
    logits: &[T],
    vocab: usize,
    targets: &[usize],
    weights: &[T],
) -> (T, Vec<T>) {
    let rows = targets.len();
    debug_assert_eq!(logits.len(), rows * vocab);
    let total: T = weights.iter().copied().sum();
    let mut dlogits = vec![T::zero(); logits.len()];
    if total <= T::zero() {
        return (T::zero(), dlogits);
    }
    let mut loss = T::zero();
    for r in 0..rows {
        let w = weights[r];
        if w == T::zero() {
            continue;
        }
        let row = &logits[r * vocab..(r + 1) * vocab];
        let lse = log_sum_exp(row);
        loss += w * (lse - row[targets[r]]);
        let drow = &mut dlogits[r * vocab..(r + 1) * vocab];
        let scale = w / total;
        for (d, l) in drow.iter_mut().zip(row) {
            *d = (*l - lse).exp() * scale;
        }
        drow[targets[r]] -= scale;
    }
    (loss / total, dlogits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_grad_matches_difference() {
        for &u in &[-3.0f64, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert!((fd - gelu_grad(u)).abs() < 1e-8, "u={u}");
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut r = vec![1.0f64, 1000.0, -5.0];
        softmax_inplace(&mut r);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(r[1] > 0.999);
    }

    #[test]
    fn cross_entropy_uniform() {
        let logits = vec![0.0f64; 8];
        let (loss, d) = cross_entropy(&logits, 4, &[1, 2], &[1.0, 0.0]);
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!(d[4..].iter().all(|v| *v == 0.0));
        assert!((d[1] + 0.75).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_rows_are_standardised() {
        let mut s = ParamStore::<f64>::new();
        let ln = LayerNorm::new(&mut s, "ln", 4);
        let (y, _) = ln.forward(&s, &[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 0.0, 1.0]);
        for row in y.chunks(4) {
            let m: f64 = row.iter().sum::<f64>() / 4.0;
            let v: f64 = row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }
}
