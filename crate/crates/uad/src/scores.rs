//! Score CSVs and fusion-weight files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use uad_core::metrics::auc;
use uad_core::model::Vae;
use uad_core::scoring::{grid_search, score_sample, FusionWeights, GridSpec, LatentPolicy, ScoreTriple};
use uad_core::volume::{Label, Volume};
use uad_core::Error as CoreError;

use crate::error::{io_err, json_err, Error, Result};

pub const COLUMNS: [&str; 7] = ["subject_id", "label", "a_c", "a_p", "l_rec", "l_kl", "l_age"];

pub fn score_volumes(model: &Vae, volumes: &[Volume], policy: LatentPolicy) -> Result<Vec<ScoreTriple>> {
    Ok(volumes.iter().map(|v| score_sample(model, v, policy)).collect::<uad_core::Result<_>>()?)
}

/// 17 significant digits, enough to round-trip any f64.
fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

pub fn export_scores(scores: &[ScoreTriple], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(COLUMNS).map_err(|e| csv_err(path, e))?;
    for t in scores {
        let row = [
            t.subject_id.clone(),
            t.label.as_str().to_string(),
            num(t.a_c),
            opt_num(t.a_p),
            num(t.l_rec),
            num(t.l_kl),
            opt_num(t.l_age),
        ];
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        kind => Error::Format(format!("{}: {kind:?}", path.display())),
    }
}

pub fn import_scores(path: &Path) -> Result<Vec<ScoreTriple>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let mut col = [0usize; 7];
    for (slot, name) in col.iter_mut().zip(COLUMNS) {
        *slot = header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("{}: missing column `{name}`", path.display())))?;
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = i + 2;
        let field = |c: usize| rec.get(col[c]).unwrap_or("");
        let bad = |what: &str| Error::Format(format!("{}:{line}: {what}", path.display()));
        let parse = |c: usize| -> Result<f64> {
            field(c).parse().map_err(|_| bad(&format!("`{}` is not a number: {:?}", COLUMNS[c], field(c))))
        };
        let parse_opt = |c: usize| -> Result<Option<f64>> {
            if field(c).is_empty() {
                Ok(None)
            } else {
                parse(c).map(Some)
            }
        };
        let t = ScoreTriple {
            subject_id: field(0).to_string(),
            label: Label::parse(field(1)).ok_or_else(|| bad(&format!("unknown label {:?}", field(1))))?,
            a_c: parse(2)?,
            a_p: parse_opt(3)?,
            l_rec: parse(4)?,
            l_kl: parse(5)?,
            l_age: parse_opt(6)?,
        };
        t.validate().map_err(|e| bad(&e.to_string()))?;
        out.push(t);
    }
    Ok(out)
}

/// Contents of `weights.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsFile {
    pub alpha_a: f64,
    pub beta_a: f64,
    pub gamma_a: f64,
    /// Validation AUC of the fused score at these weights.
    pub val_auc: f64,
    pub grid_spec: String,
    /// Validation AUC of each raw score, for comparison with `val_auc`.
    pub val_auc_l_rec: f64,
    pub val_auc_l_kl: f64,
    pub val_auc_l_age: Option<f64>,
}

impl WeightsFile {
    pub fn weights(&self) -> FusionWeights {
        FusionWeights {
            alpha_a: self.alpha_a,
            beta_a: self.beta_a,
            gamma_a: self.gamma_a,
        }
    }
}

/// Grid search plus the per-score validation AUCs.
pub fn fuse_search(val: &[ScoreTriple], grid: &GridSpec) -> Result<WeightsFile> {
    let best = grid_search(val, grid)?;
    let labels: Vec<bool> = val.iter().map(|t| t.label.is_anomalous()).collect();
    let column = |f: fn(&ScoreTriple) -> f64| -> Result<f64> {
        let s: Vec<f64> = val.iter().map(f).collect();
        Ok(auc(&s, &labels)?)
    };
    let val_auc_l_age = match val.iter().map(|t| t.l_age).collect::<Option<Vec<f64>>>() {
        Some(s) => Some(auc(&s, &labels)?),
        None => None,
    };
    Ok(WeightsFile {
        alpha_a: best.weights.alpha_a,
        beta_a: best.weights.beta_a,
        gamma_a: best.weights.gamma_a,
        val_auc: best.val_auc,
        grid_spec: grid.to_string(),
        val_auc_l_rec: column(|t| t.l_rec)?,
        val_auc_l_kl: column(|t| t.l_kl)?,
        val_auc_l_age,
    })
}

pub fn write_weights(w: &WeightsFile, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(w).map_err(json_err(path))?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_weights(path: &Path) -> Result<WeightsFile> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let w: WeightsFile = serde_json::from_str(&text).map_err(json_err(path))?;
    let ok = [w.alpha_a, w.beta_a, w.gamma_a].iter().all(|x| x.is_finite() && *x >= 0.0);
    if !ok {
        return Err(CoreError::Validation(format!("{}: fusion weights must be finite and nonnegative", path.display())).into());
    }
    Ok(w)
}
