//! Synthetic "aging brain" phantoms.
//!
//! A phantom is a smoothed ellipsoid of textured tissue around a dark central
//! cavity. The cavity radius is the only place age enters: it grows linearly
//! with age at `atrophy_rate`, so age must be read from morphology rather
//! than from overall intensity. Anomalies are hyperintense spheres placed
//! fully inside the brain mask.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::stats::truncated_normal_quantile;
use crate::volume::{standardize, Label, Shape, Volume};

const TISSUE: f64 = 1.0;
const CAVITY: f64 = 0.25;
const TEXTURE_AMPLITUDE: f64 = 0.03;
/// Cavity radius at the youngest age, relative to the mean brain semi-axis.
const CAVITY_FRAC: f64 = 0.2;
/// Brain semi-axes relative to `base_radius_frac * extent / 2`.
const ELLIPSOID_AXES: [f64; 3] = [1.0, 0.9, 0.95];
/// Edge width of the brain boundary in normalised ellipsoid radius.
const EDGE_WIDTH: f64 = 0.04;
/// Edge width of the cavity boundary in voxels.
const CAVITY_EDGE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub size: Shape,
    pub base_radius_frac: f64,
    /// Fractional cavity-radius growth per year above `age_range_years.0`.
    pub atrophy_rate: f64,
    /// Gaussian blur sigma, in voxels, applied to the white-noise texture.
    pub texture_smoothness: f64,
    pub noise_std: f64,
    pub age_range_years: (f64, f64),
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            size: Shape::new(32, 32, 32),
            base_radius_frac: 0.85,
            atrophy_rate: 0.012,
            texture_smoothness: 1.5,
            noise_std: 0.03,
            age_range_years: (15.0, 95.0),
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.age_range_years;
        let checks = [
            (self.size.0.iter().all(|&d| d >= 4), "size must be at least 4 per axis"),
            (self.base_radius_frac > 0.0 && self.base_radius_frac < 1.0, "base_radius_frac must lie in (0, 1)"),
            (self.atrophy_rate.is_finite() && self.atrophy_rate >= 0.0, "atrophy_rate must be >= 0"),
            (self.texture_smoothness.is_finite() && self.texture_smoothness > 0.0, "texture_smoothness must be > 0"),
            (self.noise_std.is_finite() && self.noise_std >= 0.0, "noise_std must be >= 0"),
            (lo > 0.0 && lo < hi && hi.is_finite(), "age range must satisfy 0 < lo < hi"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Validation((*msg).into())),
            None => Ok(()),
        }
    }

    fn semi_axes(&self) -> [f64; 3] {
        core::array::from_fn(|a| self.base_radius_frac * self.size.0[a] as f64 / 2.0 * ELLIPSOID_AXES[a])
    }

    fn center(&self) -> [f64; 3] {
        self.size.0.map(|d| (d as f64 - 1.0) / 2.0)
    }

    /// Cavity radius in voxels; strictly increasing in age when `atrophy_rate > 0`.
    pub fn cavity_radius(&self, age_years: f64) -> f64 {
        let axes = self.semi_axes();
        let mean_axis = axes.iter().sum::<f64>() / 3.0;
        CAVITY_FRAC * mean_axis * (1.0 + self.atrophy_rate * (age_years - self.age_range_years.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyParams {
    /// Blob radius relative to half the smallest extent.
    pub blob_radius_frac: f64,
    pub intensity_shift: f64,
    pub count: usize,
}

impl Default for AnomalyParams {
    fn default() -> Self {
        Self {
            blob_radius_frac: 0.22,
            intensity_shift: 1.0,
            count: 1,
        }
    }
}

impl AnomalyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.blob_radius_frac > 0.0 && self.blob_radius_frac < 1.0) {
            return Err(Error::Validation("blob_radius_frac must lie in (0, 1)".into()));
        }
        if !self.intensity_shift.is_finite() {
            return Err(Error::Validation("intensity_shift must be finite".into()));
        }
        if self.count == 0 {
            return Err(Error::Validation("anomaly count must be positive".into()));
        }
        Ok(())
    }

    pub fn radius(&self, shape: Shape) -> f64 {
        self.blob_radius_frac * *shape.0.iter().min().expect("3 axes") as f64 / 2.0
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let half = libm::ceil(3.0 * sigma) as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| libm::exp(-((i * i) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|x| *x /= s);
    k
}

/// Separable Gaussian blur with clamped borders.
fn blur(field: &mut [f64], shape: Shape, sigma: f64) {
    let kernel = gaussian_kernel(sigma);
    let half = (kernel.len() / 2) as isize;
    let strides = [shape.0[1] * shape.0[2], shape.0[2], 1];
    let mut line = Vec::new();
    for axis in 0..3 {
        let n = shape.0[axis];
        let stride = strides[axis];
        let others: [usize; 2] = match axis {
            0 => [1, 2],
            1 => [0, 2],
            _ => [0, 1],
        };
        for a in 0..shape.0[others[0]] {
            for b in 0..shape.0[others[1]] {
                let base = a * strides[others[0]] + b * strides[others[1]];
                line.clear();
                line.extend((0..n).map(|i| field[base + i * stride]));
                for i in 0..n {
                    let acc: f64 = kernel
                        .iter()
                        .enumerate()
                        .map(|(t, w)| {
                            let j = (i as isize + t as isize - half).clamp(0, n as isize - 1) as usize;
                            w * line[j]
                        })
                        .sum();
                    field[base + i * stride] = acc;
                }
            }
        }
    }
}

/// Generates one normal phantom at `age_years`.
///
/// The output is a pure function of `(params, age_years, seed)`; the texture
/// and noise streams depend on the seed only.
pub fn generate_phantom(params: &PhantomParams, age_years: f64, seed: u64) -> Result<Volume> {
    params.validate()?;
    let (lo, hi) = params.age_range_years;
    if !(age_years >= lo && age_years <= hi) {
        return Err(Error::Validation(format!(
            "age {age_years} outside phantom range [{lo}, {hi}]"
        )));
    }
    let shape = params.size;
    let n = shape.len();

    let mut rng = seed::rng(seed, &[seed::tag::SUBJECT, 0]);
    let mut texture: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    blur(&mut texture, shape, params.texture_smoothness);
    let (_, tex_std) = crate::stats::mean_std(&texture).expect("non-empty");
    let tex_scale = if tex_std > 0.0 { TEXTURE_AMPLITUDE / tex_std } else { 0.0 };

    let mut noise_rng = seed::rng(seed, &[seed::tag::SUBJECT, 1]);
    let axes = params.semi_axes();
    let center = params.center();
    let cavity_r = params.cavity_radius(age_years);

    let mut data = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    for (idx, tex) in texture.iter().enumerate() {
        let c = shape.coords(idx);
        let d: [f64; 3] = core::array::from_fn(|a| c[a] as f64 - center[a]);
        let rho = libm::sqrt((0..3).map(|a| (d[a] / axes[a]) * (d[a] / axes[a])).sum::<f64>());
        let dist = libm::sqrt(d.iter().map(|x| x * x).sum::<f64>());
        let brain = sigmoid((1.0 - rho) / EDGE_WIDTH);
        let tissue = TISSUE + tex_scale * tex;
        let cavity = sigmoid((cavity_r - dist) / CAVITY_EDGE);
        let mut value = brain * (tissue * (1.0 - cavity) + CAVITY * cavity);
        if params.noise_std > 0.0 {
            let e: f64 = StandardNormal.sample(&mut noise_rng);
            value += params.noise_std * e;
        }
        data.push(value as f32);
        mask.push(rho <= 1.0);
    }
    Volume::new(
        data,
        shape,
        [1.0; 3],
        mask,
        age_years,
        Label::Normal,
        format!("phantom-{seed:016x}"),
    )
}

/// Number of dark voxels near the centre, a direct measurement of the cavity.
///
/// Counts masked voxels below the tissue/cavity midpoint inside half the
/// brain radius, where the brain edge does not darken the tissue.
pub fn cavity_voxel_count(v: &Volume, params: &PhantomParams) -> usize {
    let axes = params.semi_axes();
    let center = params.center();
    let threshold = (TISSUE + CAVITY) / 2.0;
    (0..v.shape.len())
        .filter(|&idx| {
            let c = v.shape.coords(idx);
            let rho2: f64 = (0..3)
                .map(|a| {
                    let t = (c[a] as f64 - center[a]) / axes[a];
                    t * t
                })
                .sum();
            v.mask[idx] && rho2 < 0.25 && (v.data[idx] as f64) < threshold
        })
        .count()
}

/// Voxel offsets within `radius` of `center`.
fn sphere_voxels(shape: Shape, center: [f64; 3], radius: f64) -> Vec<usize> {
    let lo: [isize; 3] = core::array::from_fn(|a| libm::floor(center[a] - radius) as isize);
    let hi: [isize; 3] = core::array::from_fn(|a| libm::ceil(center[a] + radius) as isize);
    let mut out = Vec::new();
    for i in lo[0]..=hi[0] {
        for j in lo[1]..=hi[1] {
            for k in lo[2]..=hi[2] {
                let p = [i, j, k];
                let d2: f64 = (0..3).map(|a| (p[a] as f64 - center[a]) * (p[a] as f64 - center[a])).sum();
                if d2 <= radius * radius {
                    if (0..3).any(|a| p[a] < 0 || p[a] >= shape.0[a] as isize) {
                        // marker for "outside the grid"; callers reject the placement
                        out.push(usize::MAX);
                    } else {
                        out.push(shape.index(i as usize, j as usize, k as usize));
                    }
                }
            }
        }
    }
    out
}

/// Adds `count` hyperintense spheres inside the mask and relabels the volume.
///
/// Centres are drawn by rejection sampling, at most 100 attempts per blob,
/// from a stream that depends only on `seed`.
pub fn inject_anomaly(v: &Volume, params: &AnomalyParams, seed: u64) -> Result<Volume> {
    params.validate()?;
    if v.label != Label::Normal {
        return Err(Error::Validation(format!("{} is already anomalous", v.subject_id)));
    }
    const ATTEMPTS: usize = 100;
    let radius = params.radius(v.shape);
    let mut rng = seed::rng(seed, &[seed::tag::ANOMALY]);
    let mut out = v.clone();
    for _ in 0..params.count {
        let mut placed = None;
        for _ in 0..ATTEMPTS {
            let center: [f64; 3] = core::array::from_fn(|a| rng.gen_range(0.0..(v.shape.0[a] - 1) as f64));
            let voxels = sphere_voxels(v.shape, center, radius);
            if !voxels.is_empty() && voxels.iter().all(|&i| i != usize::MAX && v.mask[i]) {
                placed = Some(voxels);
                break;
            }
        }
        let voxels = placed.ok_or(Error::Placement { attempts: ATTEMPTS })?;
        if params.intensity_shift != 0.0 {
            for i in voxels {
                out.data[i] = (out.data[i] as f64 + params.intensity_shift) as f32;
            }
        }
    }
    out.label = Label::Anomalous;
    Ok(out)
}

/// Age prior for one cohort: a normal truncated to the phantom age range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgePrior {
    pub mean: f64,
    pub std: f64,
}

impl AgePrior {
    /// Healthy cohort, mean 45.44 ± 16.85 years.
    pub const HEALTHY: AgePrior = AgePrior { mean: 45.44, std: 16.85 };
    /// Lesion cohort, mean 60.31 ± 12.85 years.
    pub const LESION: AgePrior = AgePrior { mean: 60.31, std: 12.85 };
}

/// Everything needed to realize one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectPlan {
    pub index: usize,
    pub subject_id: String,
    pub label: Label,
    pub age_years: f64,
    pub seed: u64,
}

/// Draws `n` ages by stratified (one draw per quantile stratum) sampling, then
/// shuffles them; sample means land very close to the prior mean.
fn stratified_ages(n: usize, prior: AgePrior, range: (f64, f64), rng: &mut impl Rng) -> Vec<f64> {
    let mut ages: Vec<f64> = (0..n)
        .map(|i| {
            let u = (i as f64 + rng.gen::<f64>()) / n as f64;
            let a = truncated_normal_quantile(u, prior.mean, prior.std, range.0, range.1);
            // round to days so ages print compactly and round-trip exactly
            (libm::round(a * 365.25) / 365.25).clamp(range.0, range.1)
        })
        .collect();
    ages.shuffle(rng);
    ages
}

/// Ages, ids and sub-seeds for a synthetic cohort.
pub fn plan_subjects(
    n_normal: usize,
    n_anomalous: usize,
    params: &PhantomParams,
    normal_prior: AgePrior,
    anomalous_prior: AgePrior,
    seed: u64,
) -> Vec<SubjectPlan> {
    let mut plans = Vec::with_capacity(n_normal + n_anomalous);
    let cohorts = [(Label::Normal, n_normal, normal_prior, "N"), (Label::Anomalous, n_anomalous, anomalous_prior, "A")];
    for (c, (label, n, prior, tag)) in cohorts.into_iter().enumerate() {
        let mut rng = seed::rng(seed, &[seed::tag::AGE, c as u64]);
        for (i, age) in stratified_ages(n, prior, params.age_range_years, &mut rng).into_iter().enumerate() {
            let index = plans.len();
            plans.push(SubjectPlan {
                index,
                subject_id: format!("{tag}{i:04}"),
                label,
                age_years: age,
                seed: seed::derive(seed, &[seed::tag::SUBJECT, index as u64]),
            });
        }
    }
    plans
}

/// Generates, optionally lesions, and standardizes one planned subject.
pub fn realize_subject(plan: &SubjectPlan, params: &PhantomParams, anomaly: &AnomalyParams) -> Result<Volume> {
    let mut v = generate_phantom(params, plan.age_years, plan.seed)?;
    if plan.label == Label::Anomalous {
        v = inject_anomaly(&v, anomaly, plan.seed)?;
    }
    v.subject_id = plan.subject_id.clone();
    standardize(&v)
}
