//! In-memory 3D volumes and the desk-scale preprocessing steps.
//!
//! Voxels are stored in C order: the last axis varies fastest, so voxel
//! `(i, j, k)` lives at `(i * d1 + j) * d2 + k`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Extent of a 3D grid, `(d0, d1, d2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape(pub [usize; 3]);

impl Shape {
    pub const fn new(d0: usize, d1: usize, d2: usize) -> Self {
        Self([d0, d1, d2])
    }

    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.0[1] + j) * self.0[2] + k
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let k = idx % self.0[2];
        let rest = idx / self.0[2];
        [rest / self.0[1], rest % self.0[1], k]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.0[0], self.0[1], self.0[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn is_anomalous(self) -> bool {
        matches!(self, Label::Anomalous)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Anomalous => "anomalous",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "normal" => Some(Label::Normal),
            "anomalous" => Some(Label::Anomalous),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One scalar volume with its brain mask and subject metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Vec<f32>,
    pub shape: Shape,
    pub spacing_mm: [f64; 3],
    pub mask: Vec<bool>,
    pub age_years: f64,
    pub label: Label,
    pub subject_id: String,
    /// Set by [`standardize`]; scoring refuses volumes whose flag differs
    /// from what the model was trained on.
    pub standardized: bool,
}

impl Volume {
    /// Builds a volume, checking the structural invariants.
    pub fn new(
        data: Vec<f32>,
        shape: Shape,
        spacing_mm: [f64; 3],
        mask: Vec<bool>,
        age_years: f64,
        label: Label,
        subject_id: impl Into<String>,
    ) -> Result<Self> {
        let v = Self {
            data,
            shape,
            spacing_mm,
            mask,
            age_years,
            label,
            subject_id: subject_id.into(),
            standardized: false,
        };
        v.validate()?;
        Ok(v)
    }

    /// Checks shape/mask agreement, positive extents, spacing and age.
    pub fn validate(&self) -> Result<()> {
        if self.shape.0.contains(&0) {
            return Err(Error::Validation(format!("shape {} has a zero extent", self.shape)));
        }
        if self.data.len() != self.shape.len() {
            return Err(shape_err(
                format!("{} voxels for shape {}", self.shape.len(), self.shape),
                format!("{} data voxels", self.data.len()),
            ));
        }
        if self.mask.len() != self.data.len() {
            return Err(shape_err(
                format!("mask of {} voxels", self.data.len()),
                format!("mask of {} voxels", self.mask.len()),
            ));
        }
        if !self.spacing_mm.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::Validation(format!("spacing {:?} must be positive", self.spacing_mm)));
        }
        if !(self.age_years.is_finite() && self.age_years > 0.0) {
            return Err(Error::Validation(format!("age {} must be positive", self.age_years)));
        }
        Ok(())
    }

    /// Fails on any NaN or infinite voxel.
    pub fn validate_finite(&self) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Validation(format!(
                "voxel {:?} of {} is not finite",
                self.shape.coords(i),
                self.subject_id
            ))),
        }
    }

    pub fn mask_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Voxel data widened to f64, the precision the model runs at.
    pub fn data_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&x| x as f64).collect()
    }
}

/// Population mean and standard deviation of the voxels inside the mask.
pub fn masked_mean_std(v: &Volume) -> (f64, f64, usize) {
    let mut n = 0usize;
    let mut sum = 0.0f64;
    for (x, _) in v.data.iter().zip(&v.mask).filter(|(_, m)| **m) {
        sum += *x as f64;
        n += 1;
    }
    if n == 0 {
        return (0.0, 0.0, 0);
    }
    let mean = sum / n as f64;
    let var = v
        .data
        .iter()
        .zip(&v.mask)
        .filter(|(_, m)| **m)
        .map(|(x, _)| {
            let d = *x as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n as f64;
    (mean, libm::sqrt(var), n)
}

/// Zero-mean, unit-variance intensities inside the mask; background set to 0.
pub fn standardize(v: &Volume) -> Result<Volume> {
    let (mean, std, n) = masked_mean_std(v);
    if n < 2 {
        return Err(Error::DegenerateVolume(format!(
            "{}: mask has {} voxel(s), need at least 2",
            v.subject_id, n
        )));
    }
    if !std.is_finite() || std <= 0.0 {
        return Err(Error::DegenerateVolume(format!(
            "{}: zero intensity variance inside mask",
            v.subject_id
        )));
    }
    let data = v
        .data
        .iter()
        .zip(&v.mask)
        .map(|(&x, &m)| if m { ((x as f64 - mean) / std) as f32 } else { 0.0 })
        .collect();
    Ok(Volume {
        data,
        standardized: true,
        ..v.clone()
    })
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 || a == b {
        a
    } else {
        a + t * (b - a)
    }
}

fn source_coord(out: usize, factor: f64, extent: usize) -> f64 {
    let c = (out as f64 + 0.5) * factor - 0.5;
    c.clamp(0.0, (extent - 1) as f64)
}

/// Shrinks a volume by `factor` per axis with trilinear interpolation.
///
/// Output extent is `ceil(d / factor)`; output voxel centres map to source
/// coordinates `(o + 0.5) * factor - 0.5`, clamped to the grid. The mask is
/// resampled nearest-neighbour.
pub fn downsample(v: &Volume, factor: f64) -> Result<Volume> {
    if !factor.is_finite() || factor < 1.0 {
        return Err(Error::Validation(format!(
            "downsample factor must be >= 1, got {factor}"
        )));
    }
    let src = v.shape;
    let out = Shape(src.0.map(|d| libm::ceil(d as f64 / factor) as usize));

    struct Axis {
        lo: usize,
        hi: usize,
        t: f64,
        nearest: usize,
    }
    let axes: [Vec<Axis>; 3] = core::array::from_fn(|a| {
        (0..out.0[a])
            .map(|o| {
                let c = source_coord(o, factor, src.0[a]);
                let lo = libm::floor(c) as usize;
                let hi = (lo + 1).min(src.0[a] - 1);
                Axis {
                    lo,
                    hi,
                    t: c - lo as f64,
                    nearest: (libm::round(c) as usize).min(src.0[a] - 1),
                }
            })
            .collect()
    });

    let at = |i: usize, j: usize, k: usize| v.data[src.index(i, j, k)] as f64;
    let mut data = Vec::with_capacity(out.len());
    let mut mask = Vec::with_capacity(out.len());
    for a in &axes[0] {
        for b in &axes[1] {
            for c in &axes[2] {
                let plane = |i: usize| {
                    let r0 = lerp(at(i, b.lo, c.lo), at(i, b.lo, c.hi), c.t);
                    let r1 = lerp(at(i, b.hi, c.lo), at(i, b.hi, c.hi), c.t);
                    lerp(r0, r1, b.t)
                };
                let val = lerp(plane(a.lo), plane(a.hi), a.t);
                data.push(val as f32);
                mask.push(v.mask[src.index(a.nearest, b.nearest, c.nearest)]);
            }
        }
    }
    Ok(Volume {
        data,
        shape: out,
        spacing_mm: v.spacing_mm.map(|s| s * factor),
        mask,
        ..v.clone()
    })
}

/// Inclusive-exclusive index box per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub start: [usize; 3],
    pub end: [usize; 3],
}

impl BoundingBox {
    pub fn shape(&self) -> Shape {
        Shape(core::array::from_fn(|a| self.end[a] - self.start[a]))
    }
}

/// Bounding box of the true mask voxels grown by `margin`, clipped to the grid.
pub fn mask_bounds(v: &Volume, margin: usize) -> Result<BoundingBox> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (idx, _) in v.mask.iter().enumerate().filter(|(_, m)| **m) {
        any = true;
        let c = v.shape.coords(idx);
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    if !any {
        return Err(Error::DegenerateVolume(format!("{}: empty mask", v.subject_id)));
    }
    Ok(BoundingBox {
        start: core::array::from_fn(|a| lo[a].saturating_sub(margin)),
        end: core::array::from_fn(|a| (hi[a] + margin + 1).min(v.shape.0[a])),
    })
}

/// Crops away background outside the mask bounding box plus `margin` voxels.
pub fn crop_to_mask(v: &Volume, margin: usize) -> Result<Volume> {
    let bb = mask_bounds(v, margin)?;
    let out = bb.shape();
    let mut data = Vec::with_capacity(out.len());
    let mut mask = Vec::with_capacity(out.len());
    for i in bb.start[0]..bb.end[0] {
        for j in bb.start[1]..bb.end[1] {
            let row = v.shape.index(i, j, bb.start[2])..v.shape.index(i, j, bb.end[2] - 1) + 1;
            data.extend_from_slice(&v.data[row.clone()]);
            mask.extend_from_slice(&v.mask[row]);
        }
    }
    Ok(Volume {
        data,
        shape: out,
        mask,
        ..v.clone()
    })
}

/// A volume of constant value with a full mask; handy in tests and examples.
pub fn constant(shape: Shape, value: f32, age_years: f64, subject_id: &str) -> Volume {
    Volume {
        data: vec![value; shape.len()],
        shape,
        spacing_mm: [1.0; 3],
        mask: vec![true; shape.len()],
        age_years,
        label: Label::Normal,
        subject_id: subject_id.into(),
        standardized: false,
    }
}
