//! Evaluation reports: every metric with a BCa interval for each raw score
//! and the fused score, age-prediction error by cohort, and the per-score
//! AUC bar data.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use uad_core::metrics::{auc, auprc, bca_interval, mae_by_cohort, spec_at_full_sens, BootstrapInterval, MeanStd};
use uad_core::scoring::{fuse, ScoreTriple};
use uad_core::Error as CoreError;

use crate::error::{io_err, json_err, Result};
use crate::scores::WeightsFile;

pub const SCHEMA_VERSION: &str = "1.0.0";
/// JSON schema every report validates against.
pub const SCHEMA: &str = include_str!("../schema/eval_report.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCi {
    pub point: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub z0: f64,
    pub accel: f64,
    /// Percent with two decimals and the interval rounded to whole percent,
    /// e.g. `84.37 (80,87)`.
    pub display: String,
}

impl From<BootstrapInterval> for MetricCi {
    fn from(b: BootstrapInterval) -> Self {
        Self {
            display: format!("{:.2} ({:.0},{:.0})", 100.0 * b.point, 100.0 * b.lo, 100.0 * b.hi),
            point: b.point,
            ci_lo: b.lo,
            ci_hi: b.hi,
            z0: b.z0,
            accel: b.accel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub name: String,
    pub auc: MetricCi,
    pub auprc: MetricCi,
    pub spec_at_full_sens: MetricCi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarRow {
    pub score_name: String,
    pub auc: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationAucs {
    pub fused: f64,
    pub l_rec: f64,
    pub l_kl: f64,
    pub l_age: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: String,
    pub n_normal: usize,
    pub n_anomalous: usize,
    pub n_bootstrap: usize,
    pub bootstrap_seed: u64,
    pub level: f64,
    pub weights: WeightsFile,
    /// Metrics of the fused score.
    pub auc: MetricCi,
    pub auprc: MetricCi,
    pub spec_at_full_sens: MetricCi,
    /// Absent when the scores carry no predicted age.
    pub mae_normal: Option<MeanStd>,
    pub mae_anomalous: Option<MeanStd>,
    /// `mae_anomalous.mean / mae_normal.mean`.
    pub mae_ratio: Option<f64>,
    pub validation_auc: ValidationAucs,
    /// Raw scores first, then `fused`.
    pub scores: Vec<ScoreRow>,
    pub figure2: Vec<BarRow>,
}

fn row(name: &str, s: &[f64], labels: &[bool], n_boot: usize, level: f64, seed: u64) -> Result<ScoreRow> {
    Ok(ScoreRow {
        name: name.into(),
        auc: bca_interval(auc, s, labels, n_boot, level, seed)?.into(),
        auprc: bca_interval(auprc, s, labels, n_boot, level, seed)?.into(),
        spec_at_full_sens: bca_interval(spec_at_full_sens, s, labels, n_boot, level, seed)?.into(),
    })
}

pub fn build_report(test: &[ScoreTriple], weights: &WeightsFile, n_boot: usize, level: f64, seed: u64) -> Result<EvalReport> {
    let labels: Vec<bool> = test.iter().map(|t| t.label.is_anomalous()).collect();
    let n_anomalous = labels.iter().filter(|&&l| l).count();
    if n_anomalous == 0 || n_anomalous == labels.len() {
        return Err(CoreError::DegenerateLabels("test scores with both labels").into());
    }
    let w = weights.weights();
    let mut columns: Vec<(&str, Vec<f64>)> = vec![
        ("l_rec", test.iter().map(|t| t.l_rec).collect()),
        ("l_kl", test.iter().map(|t| t.l_kl).collect()),
    ];
    let ages = test.iter().map(|t| t.a_p).collect::<Option<Vec<f64>>>();
    if let Some(l_age) = test.iter().map(|t| t.l_age).collect::<Option<Vec<f64>>>() {
        columns.push(("l_age", l_age));
    }
    columns.push(("fused", test.iter().map(|t| fuse(t, &w)).collect::<uad_core::Result<_>>()?));

    let scores = columns
        .iter()
        .map(|(name, s)| row(name, s, &labels, n_boot, level, seed))
        .collect::<Result<Vec<_>>>()?;
    let (mae_normal, mae_anomalous) = match ages {
        Some(a_p) => {
            let a_c: Vec<f64> = test.iter().map(|t| t.a_c).collect();
            mae_by_cohort(&a_p, &a_c, &labels)?
        }
        None => (None, None),
    };
    let mae_ratio = match (mae_normal, mae_anomalous) {
        (Some(n), Some(a)) if n.mean > 0.0 => Some(a.mean / n.mean),
        _ => None,
    };
    let fused = scores.last().expect("fused row").clone();
    let figure2 = scores
        .iter()
        .map(|r| BarRow {
            score_name: r.name.clone(),
            auc: r.auc.point,
            ci_lo: r.auc.ci_lo,
            ci_hi: r.auc.ci_hi,
        })
        .collect();
    Ok(EvalReport {
        schema_version: SCHEMA_VERSION.into(),
        n_normal: labels.len() - n_anomalous,
        n_anomalous,
        n_bootstrap: n_boot,
        bootstrap_seed: seed,
        level,
        weights: weights.clone(),
        auc: fused.auc,
        auprc: fused.auprc,
        spec_at_full_sens: fused.spec_at_full_sens,
        mae_normal,
        mae_anomalous,
        mae_ratio,
        validation_auc: ValidationAucs {
            fused: weights.val_auc,
            l_rec: weights.val_auc_l_rec,
            l_kl: weights.val_auc_l_kl,
            l_age: weights.val_auc_l_age,
        },
        scores,
        figure2,
    })
}

pub fn write_report(r: &EvalReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(r).map_err(json_err(path))?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(json_err(path))
}

/// `score_name,auc,ci_lo,ci_hi`.
pub fn figure2_csv(r: &EvalReport) -> String {
    let mut s = String::from("score_name,auc,ci_lo,ci_hi\n");
    for b in &r.figure2 {
        let _ = writeln!(s, "{},{:.16e},{:.16e},{:.16e}", b.score_name, b.auc, b.ci_lo, b.ci_hi);
    }
    s
}

/// Bar chart of the per-score AUCs with their intervals as whiskers.
pub fn figure2_svg(r: &EvalReport) -> String {
    let (w, h, left, bottom, top) = (480.0, 320.0, 50.0, 40.0, 20.0);
    let plot_h = h - bottom - top;
    let slot = (w - left - 10.0) / r.figure2.len().max(1) as f64;
    let y = |v: f64| top + plot_h * (1.0 - v.clamp(0.0, 1.0));
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    for tick in 0..=5 {
        let v = tick as f64 / 5.0;
        let yv = y(v);
        let _ = writeln!(
            s,
            "<line x1=\"{left}\" x2=\"{}\" y1=\"{yv:.1}\" y2=\"{yv:.1}\" stroke=\"#ddd\"/><text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{v:.1}</text>",
            w - 10.0,
            left - 4.0,
            yv + 4.0
        );
    }
    for (i, b) in r.figure2.iter().enumerate() {
        let x = left + slot * i as f64 + slot * 0.2;
        let bw = slot * 0.6;
        let cx = x + bw / 2.0;
        let _ = writeln!(
            s,
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{bw:.1}\" height=\"{:.1}\" fill=\"#4c72b0\"/>",
            y(b.auc),
            y(0.0) - y(b.auc)
        );
        let _ = writeln!(
            s,
            "<line x1=\"{cx:.1}\" x2=\"{cx:.1}\" y1=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>",
            y(b.ci_lo),
            y(b.ci_hi)
        );
        let _ = writeln!(
            s,
            "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            h - bottom + 16.0,
            b.score_name
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{:.1}\" transform=\"rotate(-90 14 {0:.1})\" text-anchor=\"middle\">AUC</text>",
        top + plot_h / 2.0
    );
    s.push_str("</svg>\n");
    s
}
