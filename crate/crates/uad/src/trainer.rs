//! Training runs on disk: `config.json`, `losses.jsonl`, `ckpt_<epoch>.bin`
//! and `final.bin` inside one run directory.
//!
//! A checkpoint is the magic `UADCKPT1`, a little-endian u64 header length,
//! a JSON header holding the full training config and its hash, the
//! parameters followed by Adam's first and second moments as little-endian
//! f64, and finally the SHA-256 of that numeric payload.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uad_core::dataset::Split;
use uad_core::model::Vae;
use uad_core::optim::Adam;
use uad_core::train::{init_state, run_epoch, StepLog, TrainConfig, TrainSample, TrainState};
use uad_core::volume::{Label, Volume};
use uad_core::Error as CoreError;

use crate::error::{io_err, json_err, Error, Result};
use crate::volume_io::{entry_path, read_manifest, read_volume};

pub const CONFIG_FILE: &str = "config.json";
pub const LOSS_FILE: &str = "losses.jsonl";
pub const FINAL_FILE: &str = "final.bin";
const MAGIC: &[u8; 8] = b"UADCKPT1";

pub fn checkpoint_file(epoch: usize) -> String {
    format!("ckpt_{epoch}.bin")
}

/// SHA-256 over the config with the run-length fields (`epochs`,
/// `checkpoint_every`) zeroed, so a run may be extended by resuming.
pub fn config_hash(cfg: &TrainConfig) -> String {
    let mut c = cfg.clone();
    c.epochs = 0;
    c.checkpoint_every = 0;
    let bytes = serde_json::to_vec(&c).expect("config serializes");
    hex::encode(Sha256::digest(bytes))
}

/// Contents of `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub config_hash: String,
    pub manifest: String,
    pub train: TrainConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config_hash: String,
    config: TrainConfig,
    epoch: usize,
    step: u64,
    adam_t: u64,
    n_params: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
}

pub fn save_checkpoint(path: &Path, cfg: &TrainConfig, state: &TrainState) -> Result<()> {
    let header = CheckpointHeader {
        config_hash: config_hash(cfg),
        config: cfg.clone(),
        epoch: state.epoch,
        step: state.step,
        adam_t: state.opt.t,
        n_params: state.model.num_params(),
    };
    let head = serde_json::to_vec(&header).map_err(json_err(path))?;
    let mut payload = Vec::with_capacity(3 * 8 * header.n_params);
    for block in [state.model.params(), &state.opt.m, &state.opt.v] {
        payload.extend(block.iter().flat_map(|x| x.to_le_bytes()));
    }
    let mut bytes = Vec::with_capacity(16 + head.len() + payload.len() + 32);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(head.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&head);
    bytes.extend_from_slice(&payload);
    bytes.extend_from_slice(&Sha256::digest(&payload));
    // write-then-rename so an interrupted save never clobbers a good file
    let tmp = path.with_extension("bin.tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let bad = |what: &str| Error::Format(format!("{}: {what}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let head_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let head = bytes.get(16..16 + head_len).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(head)
        .map_err(|e| Error::ConfigMismatch(format!("{}: unreadable config header: {e}", path.display())))?;
    let actual = config_hash(&header.config);
    if actual != header.config_hash {
        return Err(Error::ConfigMismatch(format!(
            "{}: stored config hash {} does not match its config ({actual})",
            path.display(),
            header.config_hash
        )));
    }
    let n = header.n_params;
    let body = &bytes[16 + head_len..];
    if body.len() != 3 * 8 * n + 32 {
        return Err(bad("payload length does not match the parameter count"));
    }
    let (payload, digest) = body.split_at(3 * 8 * n);
    if Sha256::digest(payload).as_slice() != digest {
        return Err(bad("payload checksum mismatch"));
    }
    let floats: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let model = Vae::from_params(header.config.model.clone(), floats[..n].to_vec())?;
    let mut opt = Adam::new(header.config.adam_config(), n);
    opt.t = header.adam_t;
    opt.m.copy_from_slice(&floats[n..2 * n]);
    opt.v.copy_from_slice(&floats[2 * n..]);
    Ok(Checkpoint {
        config: header.config,
        state: TrainState {
            model,
            opt,
            epoch: header.epoch,
            step: header.step,
        },
    })
}

/// Loads one split's volumes, refusing any that the model cannot consume.
pub fn load_split(manifest_path: &Path, split: Split, cfg: &TrainConfig) -> Result<Vec<Volume>> {
    let manifest = read_manifest(manifest_path)?;
    let mut out = Vec::new();
    for e in manifest.split(split) {
        if split == Split::Train && e.label != Label::Normal {
            return Err(CoreError::Contamination(e.subject_id.clone()).into());
        }
        let v = read_volume(&entry_path(manifest_path, &e.path))?;
        check_pipeline(&v, cfg)?;
        out.push(v);
    }
    Ok(out)
}

pub(crate) fn check_pipeline(v: &Volume, cfg: &TrainConfig) -> Result<()> {
    if v.shape != cfg.model.input_shape {
        return Err(CoreError::PipelineMismatch(format!(
            "{}: volume shape {} but the model expects {}",
            v.subject_id, v.shape, cfg.model.input_shape
        ))
        .into());
    }
    if !v.standardized {
        return Err(CoreError::PipelineMismatch(format!("{}: volume is not standardized", v.subject_id)).into());
    }
    Ok(())
}

fn samples(volumes: Vec<Volume>) -> Vec<TrainSample> {
    volumes
        .into_iter()
        .map(|v| TrainSample {
            x: v.data_f64(),
            a_c: v.age_years,
            label: v.label,
            subject_id: v.subject_id,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub final_checkpoint: PathBuf,
    pub state: TrainState,
    /// Steps logged by this call (not those of earlier segments).
    pub history: Vec<StepLog>,
}

pub fn write_run_config(out_dir: &Path, cfg: &TrainConfig, manifest_path: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let rc = RunConfig {
        config_hash: config_hash(cfg),
        manifest: manifest_path.display().to_string(),
        train: cfg.clone(),
    };
    let path = out_dir.join(CONFIG_FILE);
    let text = serde_json::to_string_pretty(&rc).map_err(json_err(&path))?;
    fs::write(&path, text + "\n").map_err(io_err(&path))
}

/// Trains from scratch on the manifest's train split.
pub fn train(cfg: &TrainConfig, manifest_path: &Path, out_dir: &Path) -> Result<TrainResult> {
    cfg.validate()?;
    write_run_config(out_dir, cfg, manifest_path)?;
    let data = samples(load_split(manifest_path, Split::Train, cfg)?);
    if data.is_empty() {
        return Err(CoreError::Validation("train split is empty".into()).into());
    }
    let state = init_state(cfg, &data)?;
    let log = out_dir.join(LOSS_FILE);
    let file = File::create(&log).map_err(io_err(&log))?;
    continue_run(cfg, state, &data, out_dir, file)
}

/// Continues a checkpointed run until `cfg.epochs`, appending to the loss log.
pub fn resume(checkpoint_path: &Path, cfg: &TrainConfig, manifest_path: &Path, out_dir: &Path) -> Result<TrainResult> {
    cfg.validate()?;
    let ckpt = load_checkpoint(checkpoint_path)?;
    let (stored, wanted) = (config_hash(&ckpt.config), config_hash(cfg));
    if stored != wanted {
        return Err(Error::ConfigMismatch(format!(
            "{} was trained with config {stored}, requested {wanted}",
            checkpoint_path.display()
        )));
    }
    write_run_config(out_dir, cfg, manifest_path)?;
    let data = samples(load_split(manifest_path, Split::Train, cfg)?);
    let log = out_dir.join(LOSS_FILE);
    let file = OpenOptions::new().create(true).append(true).open(&log).map_err(io_err(&log))?;
    continue_run(cfg, ckpt.state, &data, out_dir, file)
}

fn continue_run(cfg: &TrainConfig, mut state: TrainState, data: &[TrainSample], out_dir: &Path, log: File) -> Result<TrainResult> {
    let log_path = out_dir.join(LOSS_FILE);
    let mut log = BufWriter::new(log);
    let mut history = Vec::new();
    while state.epoch < cfg.epochs {
        let mut write_err = None;
        let logs = run_epoch(&mut state, cfg, data, |s| {
            if write_err.is_none() {
                let line = serde_json::to_string(s).expect("step log serializes");
                write_err = writeln!(log, "{line}").and_then(|_| log.flush()).err();
            }
        })?;
        if let Some(e) = write_err {
            return Err(io_err(&log_path)(e));
        }
        history.extend(logs);
        if state.epoch.is_multiple_of(cfg.checkpoint_every) {
            save_checkpoint(&out_dir.join(checkpoint_file(state.epoch)), cfg, &state)?;
        }
    }
    log.flush().map_err(io_err(&log_path))?;
    let final_checkpoint = out_dir.join(FINAL_FILE);
    save_checkpoint(&final_checkpoint, cfg, &state)?;
    Ok(TrainResult {
        final_checkpoint,
        state,
        history,
    })
}

/// Parses a `losses.jsonl` file.
pub fn read_loss_log(path: &Path) -> Result<Vec<StepLog>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(json_err(path)))
        .collect()
}
