//! Dataset manifests and age-stratified train/val/test splitting.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::volume::Label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.as_str() == s)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A subject before it has been assigned to a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub path: String,
    pub subject_id: String,
    pub age_years: f64,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub subject_id: String,
    pub age_years: f64,
    pub label: Label,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub fractions: [f64; 3],
    pub n_bins: usize,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split, label: Label) -> usize {
        self.split(split).filter(|e| e.label == label).count()
    }

    /// Checks the partition invariants: train is all-normal and val/test hold
    /// both labels whenever the manifest holds both labels.
    pub fn check(&self) -> Result<()> {
        if let Some(e) = self.split(Split::Train).find(|e| e.label == Label::Anomalous) {
            return Err(Error::Stratification(format!(
                "anomalous subject {} assigned to train",
                e.subject_id
            )));
        }
        let has_anomalous = self.entries.iter().any(|e| e.label == Label::Anomalous);
        if has_anomalous {
            for split in [Split::Val, Split::Test] {
                for label in [Label::Normal, Label::Anomalous] {
                    if self.count(split, label) == 0 {
                        return Err(Error::Stratification(format!(
                            "{split} split has no {label} subjects"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

const EPS: f64 = 1e-9;

fn validate_fractions(fr: &[f64; 3]) -> Result<()> {
    if fr.iter().any(|f| !f.is_finite() || *f < 0.0) || libm::fabs(fr.iter().sum::<f64>() - 1.0) > 1e-6 {
        return Err(Error::Validation(format!(
            "split fractions {fr:?} must be nonnegative and sum to 1"
        )));
    }
    Ok(())
}

/// Splits `n` seats by `fractions`, handing remainders to the splits whose
/// running allocation lags furthest behind its target.
fn apportion(n: usize, fractions: &[f64; 3], seen_before: usize, assigned: &[usize; 3]) -> [usize; 3] {
    let mut counts: [usize; 3] = core::array::from_fn(|k| libm::floor(fractions[k] * n as f64 + EPS) as usize);
    let mut rest = n - counts.iter().sum::<usize>().min(n);
    let total = (seen_before + n) as f64;
    let mut order: Vec<usize> = (0..3).filter(|&k| fractions[k] > 0.0).collect();
    let deficit = |k: usize, c: &[usize; 3]| fractions[k] * total - (assigned[k] + c[k]) as f64;
    // stable sort keeps train, val, test order on ties
    order.sort_by(|&a, &b| deficit(b, &counts).partial_cmp(&deficit(a, &counts)).unwrap_or(core::cmp::Ordering::Equal));
    for &k in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[k] += 1;
        rest -= 1;
    }
    counts
}

/// Orders the split labels for an age-sorted bin so each split is spread
/// evenly across the bin's age range.
fn interleave(counts: &[usize; 3]) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    let mut placed = [0usize; 3];
    let mut seq = Vec::with_capacity(n);
    for j in 0..n {
        let progress = (j + 1) as f64 / n as f64;
        let k = (0..3)
            .filter(|&k| placed[k] < counts[k])
            .max_by(|&a, &b| {
                let da = counts[a] as f64 * progress - placed[a] as f64;
                let db = counts[b] as f64 * progress - placed[b] as f64;
                da.partial_cmp(&db).unwrap_or(core::cmp::Ordering::Equal).then(b.cmp(&a))
            })
            .expect("seat available");
        placed[k] += 1;
        seq.push(k);
    }
    seq
}

fn split_cohort(
    cohort: &mut [(usize, &Subject)],
    fractions: &[f64; 3],
    n_bins: usize,
    seed_path: &[u64],
    out: &mut [Option<Split>],
) -> Result<()> {
    if cohort.is_empty() {
        return Ok(());
    }
    let needed = fractions.iter().filter(|f| **f > 0.0).count();
    cohort.sort_by(|a, b| {
        a.1.age_years
            .partial_cmp(&b.1.age_years)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then_with(|| a.1.subject_id.cmp(&b.1.subject_id))
    });
    let n = cohort.len();
    let bounds: Vec<usize> = (0..=n_bins).map(|b| b * n / n_bins).collect();
    let too_small: Vec<String> = bounds
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1] - w[0] < needed)
        .map(|(b, w)| format!("bin {b}: {} entries", w[1] - w[0]))
        .collect();
    if !too_small.is_empty() {
        return Err(Error::Stratification(format!(
            "{} bins over {} entries need at least {} entries per bin; {}",
            n_bins,
            n,
            needed,
            too_small.join(", ")
        )));
    }

    let mut assigned = [0usize; 3];
    for (b, w) in bounds.windows(2).enumerate() {
        let bin = &cohort[w[0]..w[1]];
        let counts = apportion(bin.len(), fractions, w[0], &assigned);
        let seq = interleave(&counts);
        let mut path = Vec::from(seed_path);
        path.push(b as u64);
        let shift = seed::rng(seed_path[0], &path[1..]).gen_range(0..bin.len());
        for (j, (orig, _)) in bin.iter().enumerate() {
            let k = seq[(j + shift) % bin.len()];
            out[*orig] = Some(Split::ALL[k]);
        }
        for k in 0..3 {
            assigned[k] += counts[k];
        }
    }
    Ok(())
}

/// Assigns every subject to train, val or test, stratified by age.
///
/// Each label cohort is sorted by age and cut into `n_bins` equal-count
/// quantile bins. Every bin is apportioned by `fractions` independently and
/// the split labels are interleaved along the bin's age order, with a
/// seed-dependent rotation choosing which subject gets which label.
/// Anomalous subjects only go to val and test, in the ratio of those two
/// fractions.
pub fn stratified_split(
    subjects: &[Subject],
    fractions: [f64; 3],
    n_bins: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    validate_fractions(&fractions)?;
    if n_bins == 0 {
        return Err(Error::Validation("n_bins must be at least 1".into()));
    }
    if let Some(s) = subjects.iter().find(|s| !(s.age_years.is_finite() && s.age_years > 0.0)) {
        return Err(Error::Validation(format!("subject {} has invalid age {}", s.subject_id, s.age_years)));
    }

    let mut normals: Vec<(usize, &Subject)> = Vec::new();
    let mut anomalous: Vec<(usize, &Subject)> = Vec::new();
    for (i, s) in subjects.iter().enumerate() {
        match s.label {
            Label::Normal => normals.push((i, s)),
            Label::Anomalous => anomalous.push((i, s)),
        }
    }

    let mut out = alloc::vec![None; subjects.len()];
    split_cohort(&mut normals, &fractions, n_bins, &[seed, seed::tag::SPLIT, 0], &mut out)?;
    let held_out = fractions[1] + fractions[2];
    if !anomalous.is_empty() {
        if held_out <= 0.0 {
            return Err(Error::Stratification(
                "anomalous subjects present but val and test fractions are zero".into(),
            ));
        }
        let anomalous_fr = [0.0, fractions[1] / held_out, fractions[2] / held_out];
        split_cohort(&mut anomalous, &anomalous_fr, n_bins, &[seed, seed::tag::SPLIT, 1], &mut out)?;
    }

    let entries = subjects
        .iter()
        .zip(out)
        .map(|(s, split)| ManifestEntry {
            path: s.path.clone(),
            subject_id: s.subject_id.clone(),
            age_years: s.age_years,
            label: s.label,
            split: split.expect("every subject assigned"),
        })
        .collect();
    let manifest = DatasetManifest {
        seed,
        fractions,
        n_bins,
        entries,
    };
    manifest.check()?;
    Ok(manifest)
}
