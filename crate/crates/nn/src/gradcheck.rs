//! Central finite differences for verifying hand-written backward passes.

/// `(f(+eps) - f(-eps)) / (2 eps)`.
pub fn central_difference(eps: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(eps) - f(-eps)) / (2.0 * eps)
}

/// `|a - b| / max(|a|, |b|)`, with a tiny floor so two zeros compare equal.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-12);
    (a - b).abs() / denom
}

/// One sampled coordinate of a gradient check.
#[derive(Clone, Debug)]
pub struct GradSample {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Result of checking a set of coordinates.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub samples: Vec<GradSample>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.samples.iter().map(|s| s.rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        !self.samples.is_empty() && self.max_rel_error() < tol
    }
}

/// Compares `analytic[i]` against a central difference of `loss_at(i, eps)`
/// for each sampled index `i`. `loss_at` must evaluate the loss with
/// coordinate `i` shifted by `eps`.
pub fn check_indices(
    indices: &[usize],
    analytic: impl Fn(usize) -> f64,
    eps: f64,
    mut loss_at: impl FnMut(usize, f64) -> f64,
) -> GradCheckReport {
    let samples = indices
        .iter()
        .map(|&i| {
            let numeric = central_difference(eps, |e| loss_at(i, e));
            let a = analytic(i);
            GradSample { index: i, analytic: a, numeric, rel_error: relative_error(a, numeric) }
        })
        .collect();
    GradCheckReport { samples }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_derivative() {
        let d = central_difference(1e-5, |e| (2.0 + e).powi(3));
        assert!((d - 12.0).abs() < 1e-8);
    }

    #[test]
    fn report_aggregates() {
        let r = check_indices(&[0, 1], |i| [2.0, 4.0][i], 1e-6, |i, e| {
            let x = [1.0, 2.0][i] + e;
            x * x
        });
        assert!(r.passes(1e-6), "{r:?}");
        assert_eq!(r.samples.len(), 2);
    }
}
