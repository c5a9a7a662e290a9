//! Human-readable summary and SVG figures from a metrics report.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{ensure, Result};
use serde_json::json;
use xmprobe_core::probe::{detect_convergence, line_chart_svg, MetricsReport, Series, TokenGroup};

use crate::pipeline::QaReport;

pub const SUMMARY_TXT: &str = "summary.txt";
pub const SUMMARY_JSON: &str = "summary.json";
pub const FIG_RECON: &str = "fig1_recon.svg";
pub const FIG_SPARSITY: &str = "fig1_sparsity.svg";
pub const FIG_ALIGNMENT: &str = "fig2_alignment.svg";

fn series(name: &str, r: &MetricsReport, f: impl Fn(&xmprobe_core::probe::LayerMetrics) -> Option<f64>) -> Series {
    Series {
        name: name.to_string(),
        points: r.layers.iter().map(|l| (l.layer as f64, f(l).unwrap_or(f64::NAN))).collect(),
    }
}

fn group_series(r: &MetricsReport, metric: fn(&xmprobe_core::probe::GroupMetrics) -> f64) -> Vec<Series> {
    TokenGroup::ALL.iter().map(|&g| series(g.name(), r, |l| l.groups.get(&g).map(metric))).collect()
}

pub fn recon_chart(r: &MetricsReport) -> String {
    line_chart_svg("Reconstruction error by layer", "layer", "E_l", &group_series(r, |m| m.recon_error))
}

pub fn sparsity_chart(r: &MetricsReport) -> String {
    line_chart_svg("Sparsity by layer", "layer", "S_l", &group_series(r, |m| m.sparsity))
}

pub fn alignment_chart(r: &MetricsReport, random: Option<&MetricsReport>) -> String {
    let mut s = vec![
        series("visual (trained)", r, |l| l.alignment.get(&TokenGroup::VlmVisual).copied()),
        series("text baseline", r, |l| l.alignment.get(&TokenGroup::TextOnlyBaseline).copied()),
    ];
    if let Some(rr) = random {
        s.push(series("visual (random adapter)", rr, |l| l.alignment.get(&TokenGroup::VlmVisual).copied()));
    }
    line_chart_svg("Feature-description alignment by layer", "layer", "alignment rate", &s)
}

fn fmt_opt(v: Option<usize>) -> String {
    v.map_or_else(|| "none".to_string(), |l| l.to_string())
}

pub fn summary_text(r: &MetricsReport, random: Option<&MetricsReport>, qa: Option<&QaReport>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "probe over {} examples (alignment over {}), d_sae {}", r.n_rs, r.n_align, r.d_sae);
    let _ = writeln!(s);
    let _ = writeln!(s, "layer  E_visual  E_text  E_base  ratio  S_visual  S_text  S_base  align_vis  align_base  kept");
    for l in &r.layers {
        let g = |t: TokenGroup| l.groups.get(&t);
        let e = |t| g(t).map_or(f64::NAN, |m| m.recon_error);
        let sp = |t| g(t).map_or(f64::NAN, |m| m.sparsity);
        let a = |t| l.alignment.get(&t).copied().unwrap_or(f64::NAN);
        let _ = writeln!(
            s,
            "{:>5}  {:>8.4}  {:>6.4}  {:>6.4}  {:>5.3}  {:>8.4}  {:>6.4}  {:>6.4}  {:>9.3}  {:>10.3}  {:>4}",
            l.layer,
            e(TokenGroup::VlmVisual),
            e(TokenGroup::VlmText),
            e(TokenGroup::TextOnlyBaseline),
            l.error_ratio().unwrap_or(f64::NAN),
            sp(TokenGroup::VlmVisual),
            sp(TokenGroup::VlmText),
            sp(TokenGroup::TextOnlyBaseline),
            a(TokenGroup::VlmVisual),
            a(TokenGroup::TextOnlyBaseline),
            l.kept_features
        );
    }
    let t = r.trend();
    let _ = writeln!(s);
    let _ = writeln!(s, "convergence layer: {}", fmt_opt(detect_convergence(r)));
    let _ = writeln!(s, "layers per third: {}", t.third);
    let _ = writeln!(
        s,
        "visual alignment, first third {:.4}, final third {:.4}, difference {:.4}",
        t.alignment_first_third,
        t.alignment_final_third,
        t.alignment_final_third - t.alignment_first_third
    );
    let _ = writeln!(s, "spearman(layer, visual alignment): {:.4}", t.alignment_spearman);
    let _ = writeln!(
        s,
        "error ratio visual/baseline, first third {:.4}, final third {:.4}",
        t.error_ratio_first_third, t.error_ratio_final_third
    );
    if let Some(rr) = random {
        let ratio_above = rr.layers.iter().filter(|l| l.error_ratio().is_some_and(|x| x > 1.0)).count();
        let max_align = rr.alignment(TokenGroup::VlmVisual).into_iter().fold(f64::NAN, f64::max);
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "random adapter: visual error above baseline at {ratio_above}/{} layers, max visual alignment {max_align:.4}",
            rr.layers.len()
        );
    }
    if let Some(q) = qa {
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "QA exact match over {} held-out examples: random {:.3}, after stage 1 {:.3}, trained {:.3}",
            q.n_examples, q.random, q.stage1, q.trained
        );
    }
    s
}

/// Writes the summary and the three figures into `dir`; returns the file
/// names. Nothing is written for an empty report.
pub fn write_report(dir: &Path, r: &MetricsReport, random: Option<&MetricsReport>, qa: Option<&QaReport>) -> Result<Vec<String>> {
    ensure!(!r.layers.is_empty(), "metrics report has no layers");
    let summary = json!({
        "convergence_layer": detect_convergence(r),
        "trend": r.trend(),
        "random_trend": random.map(MetricsReport::trend),
        "qa": qa,
    });
    let files = [
        (SUMMARY_TXT, summary_text(r, random, qa)),
        (SUMMARY_JSON, serde_json::to_string_pretty(&summary)?),
        (FIG_RECON, recon_chart(r)),
        (FIG_SPARSITY, sparsity_chart(r)),
        (FIG_ALIGNMENT, alignment_chart(r, random)),
    ];
    fs::create_dir_all(dir)?;
    for (name, body) in &files {
        fs::write(dir.join(name), body)?;
    }
    Ok(files.iter().map(|(n, _)| n.to_string()).collect())
}
