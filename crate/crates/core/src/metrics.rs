//! Detection metrics, BCa bootstrap intervals and age-error summaries.
//!
//! Higher scores mean more anomalous; `labels[i]` is true for anomalous.

use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::stats::{normal_cdf, normal_quantile, quantile_sorted};
use rand::Rng;

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(crate::error::shape_err(
            alloc::format!("{} labels", scores.len()),
            alloc::format!("{}", labels.len()),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Validation("NaN score".into()));
    }
    Ok(())
}

fn class_counts(labels: &[bool]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l).count();
    (pos, labels.len() - pos)
}

/// Indices sorted by ascending score.
fn ascending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    idx
}

/// Mann–Whitney AUC with half credit for ties.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels("auc needs both classes"));
    }
    let idx = ascending(scores);
    // Twice the number of (anomalous > normal) pairs plus once per tie.
    let mut doubled: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut p, mut n) = (0u128, 0u128);
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        doubled += p * (2 * neg_below + n);
        neg_below += n;
        i = j;
    }
    Ok(doubled as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Average precision over descending unique thresholds.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (pos, _) = class_counts(labels);
    if pos == 0 {
        return Err(Error::DegenerateLabels("auprc needs at least one anomalous sample"));
    }
    let mut idx = ascending(scores);
    idx.reverse();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let t = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == t {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Fraction of normals strictly below the lowest anomalous score.
pub fn spec_at_full_sens(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels("specificity at full sensitivity needs both classes"));
    }
    let t = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(s, _)| *s)
        .fold(f64::INFINITY, f64::min);
    let below = scores.iter().zip(labels).filter(|(s, &l)| !l && **s < t).count();
    Ok(below as f64 / neg as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapInterval {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
    /// Bias correction.
    pub z0: f64,
    /// Jackknife acceleration.
    pub accel: f64,
    /// Sorted replicate statistics.
    #[serde(skip)]
    pub replicates: Vec<f64>,
    /// Resamples drawn, including redraws of undefined ones.
    pub draws: usize,
}

/// Draws bootstrap replicates of `stat`, resampling (score, label) pairs.
/// Replicate `r` uses its own sub-seed so results do not depend on order.
pub fn bootstrap_replicates<F>(stat: &F, scores: &[f64], labels: &[bool], n_boot: usize, seed: u64) -> Result<(Vec<f64>, usize)>
where
    F: Fn(&[f64], &[bool]) -> Result<f64>,
{
    let n = scores.len();
    let cap = 10 * n_boot;
    let mut draws = 0usize;
    let mut out = Vec::with_capacity(n_boot);
    let mut s = Vec::with_capacity(n);
    let mut l = Vec::with_capacity(n);
    for r in 0..n_boot {
        let mut attempt = 0u64;
        loop {
            if draws >= cap {
                return Err(Error::BootstrapDegeneracy { draws, n_boot });
            }
            draws += 1;
            let mut rng = seed::rng(seed, &[seed::tag::BOOTSTRAP, r as u64, attempt]);
            attempt += 1;
            s.clear();
            l.clear();
            for _ in 0..n {
                let k = rng.gen_range(0..n);
                s.push(scores[k]);
                l.push(labels[k]);
            }
            match stat(&s, &l) {
                Ok(v) if v.is_finite() => {
                    out.push(v);
                    break;
                }
                Ok(_) | Err(Error::DegenerateLabels(_)) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    Ok((out, draws))
}

/// Jackknife acceleration; leave-one-out sets where the statistic is
/// undefined are skipped.
fn jackknife_accel<F>(stat: &F, scores: &[f64], labels: &[bool]) -> Result<f64>
where
    F: Fn(&[f64], &[bool]) -> Result<f64>,
{
    let n = scores.len();
    let mut thetas = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut l = Vec::with_capacity(n);
    for i in 0..n {
        s.clear();
        l.clear();
        s.extend(scores.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| *v));
        l.extend(labels.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| *v));
        match stat(&s, &l) {
            Ok(v) if v.is_finite() => thetas.push(v),
            Ok(_) | Err(Error::DegenerateLabels(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if thetas.len() < 2 {
        return Ok(0.0);
    }
    let mean = thetas.iter().sum::<f64>() / thetas.len() as f64;
    let (num, den) = thetas.iter().fold((0.0, 0.0), |(a, b), t| {
        let d = mean - t;
        (a + d * d * d, b + d * d)
    });
    if den <= 0.0 {
        return Ok(0.0);
    }
    Ok(num / (6.0 * libm::pow(den, 1.5)))
}

fn check_boot_args(n_boot: usize, level: f64) -> Result<()> {
    if n_boot < 100 {
        return Err(Error::Validation(alloc::format!("n_boot = {n_boot} must be at least 100")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Validation(alloc::format!("level = {level} must lie in (0, 1)")));
    }
    Ok(())
}

/// Bias-corrected and accelerated bootstrap interval.
///
/// The bias constant counts ties with the point estimate as half below, so a
/// constant statistic gives `z0 = 0` and a zero-width interval. Endpoints are
/// clamped to contain the point estimate.
pub fn bca_interval<F>(stat: F, scores: &[f64], labels: &[bool], n_boot: usize, level: f64, seed: u64) -> Result<BootstrapInterval>
where
    F: Fn(&[f64], &[bool]) -> Result<f64>,
{
    check_boot_args(n_boot, level)?;
    check_lengths(scores, labels)?;
    let point = stat(scores, labels)?;
    let (mut reps, draws) = bootstrap_replicates(&stat, scores, labels, n_boot, seed)?;
    reps.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let below = reps.iter().filter(|&&v| v < point).count() as f64;
    let equal = reps.iter().filter(|&&v| v == point).count() as f64;
    let frac = ((below + 0.5 * equal) / reps.len() as f64).clamp(0.5 / reps.len() as f64, 1.0 - 0.5 / reps.len() as f64);
    let z0 = normal_quantile(frac);
    let accel = jackknife_accel(&stat, scores, labels)?;
    let alpha = (1.0 - level) / 2.0;
    let adjust = |q: f64| {
        let zq = normal_quantile(q);
        let denom = 1.0 - accel * (z0 + zq);
        if denom <= 0.0 {
            return if q < 0.5 { 0.0 } else { 1.0 };
        }
        normal_cdf(z0 + (z0 + zq) / denom)
    };
    let lo = quantile_sorted(&reps, adjust(alpha)).min(point);
    let hi = quantile_sorted(&reps, adjust(1.0 - alpha)).max(point);
    Ok(BootstrapInterval {
        point,
        lo,
        hi,
        level,
        z0,
        accel,
        replicates: reps,
        draws,
    })
}

/// Plain percentile bootstrap interval with the same resampling scheme.
pub fn percentile_interval<F>(stat: F, scores: &[f64], labels: &[bool], n_boot: usize, level: f64, seed: u64) -> Result<(f64, f64)>
where
    F: Fn(&[f64], &[bool]) -> Result<f64>,
{
    check_boot_args(n_boot, level)?;
    check_lengths(scores, labels)?;
    let (mut reps, _) = bootstrap_replicates(&stat, scores, labels, n_boot, seed)?;
    reps.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let alpha = (1.0 - level) / 2.0;
    Ok((quantile_sorted(&reps, alpha), quantile_sorted(&reps, 1.0 - alpha)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and population std of `|a_p - a_c|` for normals and anomalies; an
/// empty cohort gives `None`.
pub fn mae_by_cohort(a_p: &[f64], a_c: &[f64], labels: &[bool]) -> Result<(Option<MeanStd>, Option<MeanStd>)> {
    if a_p.len() != a_c.len() || a_p.len() != labels.len() {
        return Err(crate::error::shape_err(
            alloc::format!("{} ages and labels", a_p.len()),
            alloc::format!("{} chronological ages, {} labels", a_c.len(), labels.len()),
        ));
    }
    let cohort = |want: bool| {
        let errs: Vec<f64> = a_p
            .iter()
            .zip(a_c)
            .zip(labels)
            .filter(|(_, &l)| l == want)
            .map(|((p, c), _)| libm::fabs(p - c))
            .collect();
        crate::stats::mean_std(&errs).map(|(mean, std)| MeanStd { mean, std })
    };
    Ok((cohort(false), cohort(true)))
}
