//! On-disk volumes and dataset manifests.
//!
//! A volume `<name>` is three files: `<name>.vol` holds the voxels as
//! little-endian float32 in C order, `<name>.mask` one byte (0 or 1) per
//! voxel, and `<name>.vol.json` the header.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use uad_core::dataset::DatasetManifest;
use uad_core::volume::{Label, Shape, Volume};

use crate::error::{io_err, json_err, Error, Result};

const FORMAT: &str = "uad-volume";
const VERSION: u32 = 1;
const DTYPE: &str = "float32le";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    dtype: String,
    shape: [usize; 3],
    spacing_mm: [f64; 3],
    age_years: f64,
    label: Label,
    subject_id: String,
    standardized: bool,
}

/// The `.vol`, `.vol.json` and `.mask` paths for a volume path given with or
/// without its `.vol` extension.
pub fn volume_paths(path: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let s = path.as_os_str().to_string_lossy();
    let base = s.strip_suffix(".vol").unwrap_or(&s);
    (
        PathBuf::from(format!("{base}.vol")),
        PathBuf::from(format!("{base}.vol.json")),
        PathBuf::from(format!("{base}.mask")),
    )
}

pub fn write_volume(v: &Volume, path: &Path) -> Result<()> {
    v.validate()?;
    v.validate_finite()?;
    let (vol, json, mask) = volume_paths(path);
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        dtype: DTYPE.into(),
        shape: v.shape.0,
        spacing_mm: v.spacing_mm,
        age_years: v.age_years,
        label: v.label,
        subject_id: v.subject_id.clone(),
        standardized: v.standardized,
    };
    let data: Vec<u8> = v.data.iter().flat_map(|x| x.to_le_bytes()).collect();
    let bits: Vec<u8> = v.mask.iter().map(|&m| m as u8).collect();
    let text = serde_json::to_string_pretty(&header).map_err(json_err(&json))?;
    fs::write(&vol, data).map_err(io_err(&vol))?;
    fs::write(&mask, bits).map_err(io_err(&mask))?;
    fs::write(&json, text + "\n").map_err(io_err(&json))?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let (vol, json, mask) = volume_paths(path);
    let text = fs::read_to_string(&json).map_err(io_err(&json))?;
    let h: Header = serde_json::from_str(&text).map_err(json_err(&json))?;
    if h.format != FORMAT || h.version != VERSION || h.dtype != DTYPE {
        return Err(Error::Format(format!(
            "{}: expected {FORMAT} v{VERSION} {DTYPE}, found {} v{} {}",
            json.display(),
            h.format,
            h.version,
            h.dtype
        )));
    }
    let shape = Shape(h.shape);
    let n = shape.len();
    let bytes = fs::read(&vol).map_err(io_err(&vol))?;
    if bytes.len() != 4 * n {
        return Err(Error::CorruptVolume(format!(
            "{}: {} bytes, shape {shape} needs {}",
            vol.display(),
            bytes.len(),
            4 * n
        )));
    }
    let data: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    if let Some(i) = data.iter().position(|x| !x.is_finite()) {
        return Err(Error::CorruptVolume(format!("{}: voxel {i} is not finite", vol.display())));
    }
    let bits = fs::read(&mask).map_err(io_err(&mask))?;
    if bits.len() != n {
        return Err(Error::CorruptVolume(format!(
            "{}: {} mask bytes, shape {shape} needs {n}",
            mask.display(),
            bits.len()
        )));
    }
    if let Some(i) = bits.iter().position(|&b| b > 1) {
        return Err(Error::CorruptVolume(format!("{}: mask byte {i} is {}", mask.display(), bits[i])));
    }
    let mut v = Volume::new(data, shape, h.spacing_mm, bits.iter().map(|&b| b == 1).collect(), h.age_years, h.label, h.subject_id)
        .map_err(|e| Error::Format(format!("{}: {e}", json.display())))?;
    v.standardized = h.standardized;
    Ok(v)
}

pub fn write_manifest(m: &DatasetManifest, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(m).map_err(json_err(path))?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(json_err(path))
}

/// Entry paths are stored relative to the manifest's directory.
pub fn entry_path(manifest_path: &Path, entry_path: &str) -> PathBuf {
    let p = Path::new(entry_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}
