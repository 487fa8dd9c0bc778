//! Synthetic phantom datasets on disk.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use uad_core::dataset::{stratified_split, DatasetManifest, Subject};
use uad_core::phantom::{plan_subjects, realize_subject, AgePrior, AnomalyParams, PhantomParams};
use uad_core::Error as CoreError;

use crate::error::{io_err, Result};
use crate::volume_io::{write_manifest, write_volume};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOLUME_DIR: &str = "volumes";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_normal: usize,
    pub n_anomalous: usize,
    pub phantom: PhantomParams,
    pub anomaly: AnomalyParams,
    pub fractions: [f64; 3],
    pub n_bins: usize,
    /// Draw both cohorts from the healthy age prior.
    pub age_matched: bool,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_normal: 100,
            n_anomalous: 40,
            phantom: PhantomParams::default(),
            anomaly: AnomalyParams::default(),
            fractions: [0.8, 0.1, 0.1],
            n_bins: 10,
            age_matched: false,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    /// Largest bin count not above `n_bins` that leaves every bin of both
    /// cohorts one subject per split it feeds.
    pub fn effective_bins(&self) -> usize {
        let normal_splits = self.fractions.iter().filter(|f| **f > 0.0).count().max(1);
        let anomalous_splits = self.fractions[1..].iter().filter(|f| **f > 0.0).count().max(1);
        self.n_bins
            .min(self.n_normal / normal_splits)
            .min(self.n_anomalous / anomalous_splits)
            .max(1)
    }
}

/// Generates, standardizes and writes every subject under `out_dir`, then
/// writes the age-stratified manifest.
pub fn build_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<DatasetManifest> {
    if spec.n_normal < 10 || spec.n_anomalous < 4 {
        return Err(CoreError::Validation(format!(
            "need at least 10 normal and 4 anomalous subjects, got {} and {}",
            spec.n_normal, spec.n_anomalous
        ))
        .into());
    }
    spec.phantom.validate()?;
    spec.anomaly.validate()?;
    let anomalous_prior = if spec.age_matched {
        AgePrior::HEALTHY
    } else {
        AgePrior::LESION
    };
    let plans = plan_subjects(spec.n_normal, spec.n_anomalous, &spec.phantom, AgePrior::HEALTHY, anomalous_prior, spec.seed);
    let vol_dir = out_dir.join(VOLUME_DIR);
    fs::create_dir_all(&vol_dir).map_err(io_err(&vol_dir))?;
    let mut subjects = Vec::with_capacity(plans.len());
    for plan in &plans {
        let v = realize_subject(plan, &spec.phantom, &spec.anomaly)?;
        let rel = format!("{VOLUME_DIR}/{}.vol", plan.subject_id);
        write_volume(&v, &out_dir.join(&rel))?;
        subjects.push(Subject {
            path: rel,
            subject_id: plan.subject_id.clone(),
            age_years: plan.age_years,
            label: plan.label,
        });
    }
    let manifest = stratified_split(&subjects, spec.fractions, spec.effective_bins(), spec.seed)?;
    write_manifest(&manifest, &out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
