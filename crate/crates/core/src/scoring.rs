//! Per-subject anomaly scores, weighted score fusion and the validation grid
//! search over fusion weights.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::auc;
use crate::model::{condition_latent, Vae, Variant};
use crate::objectives::{kl_loss, recon_loss};
use crate::seed;
use crate::volume::{Label, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTriple {
    pub subject_id: String,
    pub label: Label,
    pub a_c: f64,
    pub a_p: Option<f64>,
    pub l_rec: f64,
    pub l_kl: f64,
    /// `|a_p - a_c|`, present exactly when `a_p` is.
    pub l_age: Option<f64>,
}

impl ScoreTriple {
    pub fn validate(&self) -> Result<()> {
        match (self.a_p, self.l_age) {
            (None, None) => Ok(()),
            (Some(p), Some(l)) if l == libm::fabs(p - self.a_c) => Ok(()),
            _ => Err(Error::Validation(format!(
                "{}: l_age must be present iff a_p is, and equal |a_p - a_c|",
                self.subject_id
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub alpha_a: f64,
    pub beta_a: f64,
    pub gamma_a: f64,
}

impl FusionWeights {
    pub const KL_ONLY: FusionWeights = FusionWeights {
        alpha_a: 0.0,
        beta_a: 1.0,
        gamma_a: 0.0,
    };
}

/// `alpha_a * l_rec + beta_a * l_kl + gamma_a * l_age`.
pub fn fuse(t: &ScoreTriple, w: &FusionWeights) -> Result<f64> {
    let age = match (t.l_age, w.gamma_a > 0.0) {
        (Some(l), _) => w.gamma_a * l,
        (None, false) => 0.0,
        (None, true) => return Err(Error::MissingScore(format!("{} has no l_age but gamma_a > 0", t.subject_id))),
    };
    Ok(w.alpha_a * t.l_rec + w.beta_a * t.l_kl + age)
}

/// Candidate values for `alpha_a` and `gamma_a`; `beta_a` stays 1.
#[derive(Debug, Clone, PartialEq)]
pub enum GridSpec {
    /// `{0} ∪ {0.001·10^(k/4)}` for alpha, `{0} ∪ {0.01·10^(k/4)}` for gamma, k = 0..13.
    Geometric,
    /// Evenly spaced from 0 up to the caps.
    Linear { alpha_step: f64, gamma_step: f64 },
    Explicit { alphas: Vec<f64>, gammas: Vec<f64> },
}

pub const ALPHA_CAP: f64 = 2.0;
pub const GAMMA_CAP: f64 = 20.0;

impl GridSpec {
    fn geometric(start: f64, cap: f64) -> Vec<f64> {
        let mut v = vec![0.0];
        v.extend((0..14).map(|k| start * libm::pow(10.0, k as f64 / 4.0)).filter(|&x| x <= cap));
        v
    }

    fn linear(step: f64, cap: f64) -> Vec<f64> {
        let n = libm::floor(cap / step + 1e-9) as usize;
        (0..=n).map(|k| k as f64 * step).collect()
    }

    pub fn alphas(&self) -> Vec<f64> {
        match self {
            GridSpec::Geometric => Self::geometric(0.001, ALPHA_CAP),
            GridSpec::Linear { alpha_step, .. } => Self::linear(*alpha_step, ALPHA_CAP),
            GridSpec::Explicit { alphas, .. } => alphas.clone(),
        }
    }

    pub fn gammas(&self) -> Vec<f64> {
        match self {
            GridSpec::Geometric => Self::geometric(0.01, GAMMA_CAP),
            GridSpec::Linear { gamma_step, .. } => Self::linear(*gamma_step, GAMMA_CAP),
            GridSpec::Explicit { gammas, .. } => gammas.clone(),
        }
    }

    /// `geometric`, `linear:<step>` (gamma step 10× alpha step) or
    /// `linear:<alpha_step>,<gamma_step>`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Validation(format!("grid spec {s:?}: expected geometric or linear:<step>[,<gamma_step>]"));
        if s == "geometric" {
            return Ok(GridSpec::Geometric);
        }
        let rest = s.strip_prefix("linear:").ok_or_else(bad)?;
        let steps: Vec<f64> = rest
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let (alpha_step, gamma_step) = match steps[..] {
            [a] => (a, 10.0 * a),
            [a, g] => (a, g),
            _ => return Err(bad()),
        };
        if !(alpha_step > 0.0 && gamma_step > 0.0 && alpha_step.is_finite() && gamma_step.is_finite()) {
            return Err(bad());
        }
        Ok(GridSpec::Linear { alpha_step, gamma_step })
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GridSpec::Geometric => f.write_str("geometric"),
            GridSpec::Linear { alpha_step, gamma_step } => write!(f, "linear:{alpha_step},{gamma_step}"),
            GridSpec::Explicit { alphas, gammas } => write!(f, "explicit:{alphas:?};{gammas:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub weights: FusionWeights,
    pub val_auc: f64,
}

/// Exhaustive search for the weights maximizing validation AUC. Ties go to
/// the smaller `gamma_a`, then the smaller `alpha_a`. Gamma values are
/// skipped entirely when some triple lacks `l_age`.
pub fn grid_search(val: &[ScoreTriple], grid: &GridSpec) -> Result<GridResult> {
    let labels: Vec<bool> = val.iter().map(|t| t.label.is_anomalous()).collect();
    if !labels.iter().any(|&l| l) || !labels.iter().any(|&l| !l) {
        return Err(Error::DegenerateValidation);
    }
    let mut alphas = grid.alphas();
    let mut gammas = grid.gammas();
    alphas.sort_by(f64::total_cmp);
    gammas.sort_by(f64::total_cmp);
    if val.iter().any(|t| t.l_age.is_none()) {
        gammas.retain(|&g| g == 0.0);
    }
    if alphas.is_empty() || gammas.is_empty() {
        return Err(Error::Validation(format!("grid {grid} is empty")));
    }
    let mut best: Option<GridResult> = None;
    let mut fused = vec![0.0; val.len()];
    for &gamma_a in &gammas {
        for &alpha_a in &alphas {
            let w = FusionWeights {
                alpha_a,
                beta_a: 1.0,
                gamma_a,
            };
            for (f, t) in fused.iter_mut().zip(val) {
                *f = fuse(t, &w)?;
            }
            let a = auc(&fused, &labels)?;
            if best.as_ref().is_none_or(|b| a > b.val_auc) {
                best = Some(GridResult { weights: w, val_auc: a });
            }
        }
    }
    Ok(best.expect("nonempty grid"))
}

/// How the latent is chosen at scoring time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LatentPolicy {
    /// `z = z_mu`.
    Mean,
    /// Average `l_rec` over `n` sampled latents.
    Sample { n: usize, seed: u64 },
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Scores one preprocessed volume against a trained model.
pub fn score_sample(model: &Vae, v: &Volume, policy: LatentPolicy) -> Result<ScoreTriple> {
    let cfg = model.config();
    if v.shape != cfg.input_shape {
        return Err(Error::PipelineMismatch(format!(
            "{}: volume shape {} but model expects {}",
            v.subject_id, v.shape, cfg.input_shape
        )));
    }
    if !v.standardized {
        return Err(Error::PipelineMismatch(format!("{}: volume is not standardized", v.subject_id)));
    }
    v.validate_finite()?;
    let x = v.data_f64();
    let features = model.encode_features(&x)?;
    let post = model.encode(&x)?;
    let decode = |z: &[f64]| -> Result<Vec<f64>> {
        match cfg.variant {
            Variant::VaeAc => model.decode(&condition_latent(z, v.age_years, cfg.age_normalizer)?),
            _ => model.decode(z),
        }
    };
    let l_rec = match policy {
        LatentPolicy::Mean => recon_loss(&x, &decode(&post.z_mu)?)?,
        LatentPolicy::Sample { n, seed: s } => {
            if n == 0 {
                return Err(Error::Validation("sample-latent count must be at least 1".into()));
            }
            let sigma = post.sigma();
            let mut total = 0.0;
            for k in 0..n {
                let mut rng = seed::rng(s, &[seed::tag::SCORE, fnv1a(&v.subject_id), k as u64]);
                let z: Vec<f64> = post
                    .z_mu
                    .iter()
                    .zip(&sigma)
                    .map(|(m, sd)| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        m + sd * e
                    })
                    .collect();
                total += recon_loss(&x, &decode(&z)?)?;
            }
            total / n as f64
        }
    };
    let l_kl = kl_loss(&post.z_mu, &post.z_log_var)?;
    let a_p = match cfg.variant {
        Variant::VaeAp => Some(model.predict_age(&features)?),
        _ => None,
    };
    Ok(ScoreTriple {
        subject_id: v.subject_id.to_string(),
        label: v.label,
        a_c: v.age_years,
        a_p,
        l_rec,
        l_kl,
        l_age: a_p.map(|p| libm::fabs(p - v.age_years)),
    })
}
