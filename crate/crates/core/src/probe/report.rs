use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ProbeConfig, TokenGroup};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub n_positions: usize,
    pub recon_error: f64,
    pub fvu: f64,
    pub sparsity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub layer: usize,
    pub groups: BTreeMap<TokenGroup, GroupMetrics>,
    /// Only for groups with [`TokenGroup::has_alignment`].
    pub alignment: BTreeMap<TokenGroup, f64>,
    pub kept_features: usize,
}

impl LayerMetrics {
    /// `E_l(vlm_visual) / E_l(text_only_baseline)`.
    pub fn error_ratio(&self) -> Option<f64> {
        let v = self.groups.get(&TokenGroup::VlmVisual)?.recon_error;
        let b = self.groups.get(&TokenGroup::TextOnlyBaseline)?.recon_error;
        (b > 0.0).then_some(v / b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: ProbeConfig,
    pub n_rs: usize,
    pub n_align: usize,
    pub d_sae: usize,
    pub layers: Vec<LayerMetrics>,
    pub convergence_layer: Option<usize>,
}

impl MetricsReport {
    pub fn layer(&self, l: usize) -> Option<&LayerMetrics> {
        self.layers.iter().find(|m| m.layer == l)
    }

    pub fn alignment(&self, group: TokenGroup) -> Vec<f64> {
        self.layers.iter().map(|l| l.alignment.get(&group).copied().unwrap_or(f64::NAN)).collect()
    }

    pub fn recon_errors(&self, group: TokenGroup) -> Vec<f64> {
        self.layers.iter().map(|l| l.groups.get(&group).map_or(f64::NAN, |g| g.recon_error)).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Invalid(format!("metrics report: {e}")))
    }

    /// One row per layer, group and metric.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,group,metric,value\n");
        for l in &self.layers {
            for (g, m) in &l.groups {
                for (name, v) in [
                    ("n_positions", m.n_positions as f64),
                    ("recon_error", m.recon_error),
                    ("fvu", m.fvu),
                    ("sparsity", m.sparsity),
                ] {
                    let _ = writeln!(s, "{},{},{name},{v}", l.layer, g.name());
                }
            }
            for (g, r) in &l.alignment {
                let _ = writeln!(s, "{},{},alignment_rate,{r}", l.layer, g.name());
            }
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.json"), self.to_json())?;
        fs::write(dir.join("metrics.csv"), self.to_csv())?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(dir.join("metrics.json"))?)
    }
}

/// Summary statistics of the per-layer curves used for trend checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendStats {
    pub n_layers: usize,
    /// Layers in each of the first and final thirds (`round(n / 3)`).
    pub third: usize,
    pub alignment_first_third: f64,
    pub alignment_final_third: f64,
    pub alignment_spearman: f64,
    pub error_ratio_first_third: f64,
    pub error_ratio_final_third: f64,
    pub convergence_layer: Option<usize>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Ranks starting at 1; tied values share their average rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; NaN when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

impl MetricsReport {
    pub fn trend(&self) -> TrendStats {
        let n = self.layers.len();
        let third = ((n as f64 / 3.0).round() as usize).max(1).min(n);
        let layer_idx: Vec<f64> = self.layers.iter().map(|l| l.layer as f64).collect();
        let align = self.alignment(TokenGroup::VlmVisual);
        let ratio: Vec<f64> = self.layers.iter().map(|l| l.error_ratio().unwrap_or(f64::NAN)).collect();
        let first = |v: &[f64]| if n == 0 { f64::NAN } else { mean(&v[..third]) };
        let last = |v: &[f64]| if n == 0 { f64::NAN } else { mean(&v[n - third..]) };
        TrendStats {
            n_layers: n,
            third,
            alignment_first_third: first(&align),
            alignment_final_third: last(&align),
            alignment_spearman: spearman(&layer_idx, &align),
            error_ratio_first_third: first(&ratio),
            error_ratio_final_third: last(&ratio),
            convergence_layer: self.convergence_layer,
        }
    }
}
