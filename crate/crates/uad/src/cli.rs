//! `uad gen-data | train | score | fuse-search | evaluate`.
//!
//! Every flag may also come from a JSON `--config` file whose keys are the
//! flag names; a flag given on the command line wins. Exit codes: 0 success,
//! 2 usage or validation error, 3 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, CommandFactory, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use uad_core::dataset::Split;
use uad_core::model::Variant;
use uad_core::scoring::{GridSpec, LatentPolicy};
use uad_core::train::{Preset, TrainConfig};
use uad_core::volume::Shape;

use crate::dataset::{build_dataset, DatasetSpec, MANIFEST_FILE, VOLUME_DIR};
use crate::error::{io_err, json_err, Error, Result};
use crate::report::{build_report, figure2_csv, figure2_svg, write_report};
use crate::run_manifest::{unix_now, RunManifest};
use crate::scores::{export_scores, fuse_search, import_scores, read_weights, score_volumes, write_weights};
use crate::trainer::{self, load_checkpoint, load_split, RunConfig, CONFIG_FILE, FINAL_FILE, LOSS_FILE};

pub const WEIGHTS_FILE: &str = "weights.json";
pub const REPORT_FILE: &str = "report.json";
pub const FIGURE_CSV: &str = "figure2.csv";
pub const FIGURE_SVG: &str = "figure2.svg";

pub fn scores_file(split: Split) -> String {
    format!("scores_{split}.csv")
}

#[derive(Debug, Parser)]
#[command(name = "uad", version, about = "Age-aware unsupervised anomaly detection on 3D volumes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom dataset and its stratified manifest.
    GenData(GenDataArgs),
    /// Train a model on the manifest's train split.
    Train(TrainArgs),
    /// Score manifest splits with a trained checkpoint.
    Score(ScoreArgs),
    /// Grid-search fusion weights on validation scores.
    FuseSearch(FuseSearchArgs),
    /// Build the evaluation report from test scores and fusion weights.
    Evaluate(EvaluateArgs),
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct GenDataArgs {
    /// JSON file of flag values.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long, action = ArgAction::SetTrue)]
    #[serde(default, skip_serializing_if = "is_false")]
    pub force: bool,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_normal: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_anomalous: Option<usize>,
    /// Train, val and test fractions, e.g. `0.8,0.1,0.1`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fractions: Option<String>,
    /// Age quantile bins per cohort (reduced when cohorts are too small).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_bins: Option<usize>,
    /// Draw anomalous subjects from the healthy age distribution.
    #[arg(long, action = ArgAction::SetTrue)]
    #[serde(default, skip_serializing_if = "is_false")]
    pub age_matched: bool,
    /// Edge length of the cubic volumes.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_std: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub atrophy_rate: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blob_radius_frac: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intensity_shift: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blob_count: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[arg(long, action = ArgAction::SetTrue)]
    #[serde(default, skip_serializing_if = "is_false")]
    pub force: bool,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_parser = ["vae", "vae-ac", "vae-ap"])]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    #[arg(long, value_parser = ["desk", "paper"])]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    /// Weight of the KL term.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    /// Weight of the age term (vae-ap).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latent_dim: Option<usize>,
    /// Encoder channels per stage, e.g. `16,32,64,128`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channels: Option<String>,
    /// Volume shape, e.g. `32,32,32`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_shape: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub age_normalizer: Option<f64>,
    /// Continue from this checkpoint up to `--epochs`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
    /// Resolve and record the configuration without training.
    #[arg(long, action = ArgAction::SetTrue)]
    #[serde(default, skip_serializing_if = "is_false")]
    pub dry_run: bool,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ScoreArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Seed for `--sample-latent`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[arg(long, action = ArgAction::SetTrue)]
    #[serde(default, skip_serializing_if = "is_false")]
    pub force: bool,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Defaults to the manifest recorded next to the checkpoint.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Comma-separated splits, e.g. `val,test`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub splits: Option<String>,
    /// Average l_rec over this many sampled latents instead of using z_mu.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample_latent: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct FuseSearchArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[arg(long, action = ArgAction::SetTrue)]
    #[serde(default, skip_serializing_if = "is_false")]
    pub force: bool,
    /// Validation scores CSV.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scores: Option<PathBuf>,
    /// `geometric`, `linear:<alpha_step>` or `linear:<alpha_step>,<gamma_step>`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<String>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct EvaluateArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Fallback for `--boot-seed`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[arg(long, action = ArgAction::SetTrue)]
    #[serde(default, skip_serializing_if = "is_false")]
    pub force: bool,
    /// Test scores CSV.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scores: Option<PathBuf>,
    /// Weights JSON from `fuse-search`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_boot: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub boot_seed: Option<u64>,
    /// Confidence level of the intervals.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub level: Option<f64>,
    /// Also render the AUC bar chart as SVG.
    #[arg(long, action = ArgAction::SetTrue)]
    #[serde(default, skip_serializing_if = "is_false")]
    pub plot: bool,
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code. Diagnostics go to standard error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                eprintln!("\n{}", usage_for(args.get(1)));
            }
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}

fn usage_for(sub: Option<&OsString>) -> String {
    let mut cmd = Cli::command();
    let name = sub.and_then(|s| s.to_str()).unwrap_or("");
    match cmd.find_subcommand_mut(name) {
        Some(sc) => sc.clone().bin_name(format!("uad {name}")).render_usage().to_string(),
        None => cmd.render_usage().to_string(),
    }
}

/// Runs one subcommand and returns its run manifest.
pub fn execute(command: Command) -> Result<RunManifest> {
    match command {
        Command::GenData(a) => gen_data(merge(a.config.clone(), &a)?),
        Command::Train(a) => train(merge(a.config.clone(), &a)?),
        Command::Score(a) => score(merge(a.config.clone(), &a)?),
        Command::FuseSearch(a) => fuse(merge(a.config.clone(), &a)?),
        Command::Evaluate(a) => evaluate(merge(a.config.clone(), &a)?),
    }
}

/// Overlays the flags given on the command line onto the config file.
fn merge<T: Serialize + DeserializeOwned>(config: Option<PathBuf>, flags: &T) -> Result<T> {
    let mut base = match &config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            let v: serde_json::Value = serde_json::from_str(&text).map_err(json_err(path))?;
            match v {
                serde_json::Value::Object(m) => m,
                _ => return Err(Error::Usage(format!("{}: config must be a JSON object", path.display()))),
            }
        }
        None => serde_json::Map::new(),
    };
    if let serde_json::Value::Object(m) = serde_json::to_value(flags).expect("flags serialize") {
        base.extend(m);
    }
    serde_json::from_value(serde_json::Value::Object(base)).map_err(|e| match &config {
        Some(path) => Error::Usage(format!("{}: {e}", path.display())),
        None => Error::Usage(e.to_string()),
    })
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

fn required<T: Clone>(v: &Option<T>, flag: &str) -> Result<T> {
    v.clone().ok_or_else(|| usage(format!("missing required flag --{flag}")))
}

fn parse_list<T: std::str::FromStr>(s: &str, flag: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| usage(format!("--{flag}: cannot parse {p:?}"))))
        .collect()
}

/// Creates `dir`, refusing a non-empty one unless `force`.
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if !force {
        if let Ok(mut entries) = fs::read_dir(dir) {
            if entries.next().is_some() {
                return Err(usage(format!("output directory not empty: {} (pass --force to reuse it)", dir.display())));
            }
        }
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn record<T: Serialize>(command: &str, seed: u64, resolved: &T, started: f64, out: &Path, artifacts: Vec<String>) -> Result<RunManifest> {
    let config = serde_json::to_value(resolved).expect("flags serialize");
    let m = RunManifest::new(command, seed, config, started, artifacts);
    m.write(out)?;
    Ok(m)
}

fn gen_data(a: GenDataArgs) -> Result<RunManifest> {
    let started = unix_now();
    let out = required(&a.out, "out")?;
    let mut spec = DatasetSpec::default();
    spec.seed = a.seed.unwrap_or(spec.seed);
    spec.n_normal = a.n_normal.unwrap_or(spec.n_normal);
    spec.n_anomalous = a.n_anomalous.unwrap_or(spec.n_anomalous);
    if let Some(f) = &a.fractions {
        let v: Vec<f64> = parse_list(f, "fractions")?;
        spec.fractions = v.try_into().map_err(|_| usage("--fractions needs three values"))?;
    }
    spec.n_bins = a.n_bins.unwrap_or(spec.n_bins);
    spec.age_matched = a.age_matched;
    if let Some(s) = a.size {
        spec.phantom.size = Shape::new(s, s, s);
    }
    spec.phantom.noise_std = a.noise_std.unwrap_or(spec.phantom.noise_std);
    spec.phantom.atrophy_rate = a.atrophy_rate.unwrap_or(spec.phantom.atrophy_rate);
    spec.anomaly.blob_radius_frac = a.blob_radius_frac.unwrap_or(spec.anomaly.blob_radius_frac);
    spec.anomaly.intensity_shift = a.intensity_shift.unwrap_or(spec.anomaly.intensity_shift);
    spec.anomaly.count = a.blob_count.unwrap_or(spec.anomaly.count);

    prepare_out(&out, a.force)?;
    build_dataset(&spec, &out)?;
    let resolved = GenDataArgs {
        config: None,
        seed: Some(spec.seed),
        out: Some(out.clone()),
        force: a.force,
        n_normal: Some(spec.n_normal),
        n_anomalous: Some(spec.n_anomalous),
        fractions: Some(spec.fractions.iter().map(f64::to_string).collect::<Vec<_>>().join(",")),
        n_bins: Some(spec.n_bins),
        age_matched: spec.age_matched,
        size: a.size,
        noise_std: Some(spec.phantom.noise_std),
        atrophy_rate: Some(spec.phantom.atrophy_rate),
        blob_radius_frac: Some(spec.anomaly.blob_radius_frac),
        intensity_shift: Some(spec.anomaly.intensity_shift),
        blob_count: Some(spec.anomaly.count),
    };
    record("gen-data", spec.seed, &resolved, started, &out, vec![MANIFEST_FILE.into(), format!("{VOLUME_DIR}/")])
}

/// The training config named by the flags.
pub fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let variant_name = a.variant.clone().unwrap_or_else(|| "vae".into());
    let variant = Variant::parse(&variant_name).ok_or_else(|| usage(format!("unknown variant {variant_name:?} (expected vae, vae-ac or vae-ap)")))?;
    let preset_name = a.preset.clone().unwrap_or_else(|| "desk".into());
    let preset = Preset::parse(&preset_name).ok_or_else(|| usage(format!("unknown preset {preset_name:?} (expected desk or paper)")))?;
    let mut cfg = TrainConfig::preset(preset, variant);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.learning_rate = a.learning_rate.unwrap_or(cfg.learning_rate);
    cfg.beta = a.beta.unwrap_or(cfg.beta);
    cfg.gamma = a.gamma.unwrap_or(cfg.gamma);
    cfg.checkpoint_every = a.checkpoint_every.unwrap_or(cfg.checkpoint_every);
    cfg.model.latent_dim = a.latent_dim.unwrap_or(cfg.model.latent_dim);
    cfg.model.age_normalizer = a.age_normalizer.unwrap_or(cfg.model.age_normalizer);
    if let Some(c) = &a.channels {
        cfg.model.channels = parse_list(c, "channels")?;
    }
    if let Some(s) = &a.input_shape {
        let d: Vec<usize> = parse_list(s, "input-shape")?;
        cfg.model.input_shape = Shape(d.try_into().map_err(|_| usage("--input-shape needs three values"))?);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<RunManifest> {
    let started = unix_now();
    let out = required(&a.out, "out")?;
    let cfg = resolve_train_config(&a)?;
    let manifest = required(&a.manifest, "manifest")?;
    let mut resolved = a.clone();
    resolved.config = None;
    resolved.seed = Some(cfg.seed);
    resolved.variant = Some(cfg.model.variant.as_str().replace('_', "-"));
    resolved.preset = Some(cfg.preset.as_str().into());
    resolved.epochs = Some(cfg.epochs);
    resolved.batch_size = Some(cfg.batch_size);
    resolved.learning_rate = Some(cfg.learning_rate);
    resolved.beta = Some(cfg.beta);
    resolved.gamma = Some(cfg.gamma);
    resolved.checkpoint_every = Some(cfg.checkpoint_every);
    resolved.latent_dim = Some(cfg.model.latent_dim);
    resolved.age_normalizer = Some(cfg.model.age_normalizer);
    resolved.channels = Some(cfg.model.channels.iter().map(usize::to_string).collect::<Vec<_>>().join(","));
    resolved.input_shape = Some(cfg.model.input_shape.0.map(|d| d.to_string()).join(","));

    if a.resume.is_none() {
        prepare_out(&out, a.force)?;
    }
    if a.dry_run {
        trainer::write_run_config(&out, &cfg, &manifest)?;
        return record("train", cfg.seed, &resolved, started, &out, vec![CONFIG_FILE.into()]);
    }
    let result = match &a.resume {
        Some(ckpt) => trainer::resume(ckpt, &cfg, &manifest, &out)?,
        None => trainer::train(&cfg, &manifest, &out)?,
    };
    let mut artifacts = vec![CONFIG_FILE.to_string(), LOSS_FILE.into()];
    let mut e = cfg.checkpoint_every;
    while e <= result.state.epoch {
        artifacts.push(trainer::checkpoint_file(e));
        e += cfg.checkpoint_every;
    }
    artifacts.push(FINAL_FILE.into());
    record("train", cfg.seed, &resolved, started, &out, artifacts)
}

fn score(a: ScoreArgs) -> Result<RunManifest> {
    let started = unix_now();
    let out = required(&a.out, "out")?;
    let ckpt_path = required(&a.checkpoint, "checkpoint")?;
    let ckpt = load_checkpoint(&ckpt_path)?;
    let manifest = match &a.manifest {
        Some(m) => m.clone(),
        None => {
            let path = ckpt_path.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE);
            let text = fs::read_to_string(&path).map_err(|_| usage("missing --manifest and no config.json next to the checkpoint"))?;
            let rc: RunConfig = serde_json::from_str(&text).map_err(json_err(&path))?;
            PathBuf::from(rc.manifest)
        }
    };
    let splits_text = a.splits.clone().unwrap_or_else(|| "val,test".into());
    let splits = splits_text
        .split(',')
        .map(|s| Split::parse(s.trim()).ok_or_else(|| usage(format!("--splits: unknown split {s:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let seed = a.seed.unwrap_or(0);
    let sample_latent = a.sample_latent.unwrap_or(0);
    let policy = match sample_latent {
        0 => LatentPolicy::Mean,
        n => LatentPolicy::Sample { n, seed },
    };
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let mut artifacts = Vec::new();
    for split in splits {
        let volumes = load_split(&manifest, split, &ckpt.config)?;
        let scores = score_volumes(&ckpt.state.model, &volumes, policy)?;
        let name = scores_file(split);
        export_scores(&scores, &out.join(&name))?;
        artifacts.push(name);
    }
    let resolved = ScoreArgs {
        config: None,
        seed: Some(seed),
        out: Some(out.clone()),
        force: a.force,
        checkpoint: Some(ckpt_path),
        manifest: Some(manifest),
        splits: Some(splits_text),
        sample_latent: Some(sample_latent),
    };
    record("score", seed, &resolved, started, &out, artifacts)
}

fn fuse(a: FuseSearchArgs) -> Result<RunManifest> {
    let started = unix_now();
    let out = required(&a.out, "out")?;
    let scores_path = required(&a.scores, "scores")?;
    let grid_text = a.grid.clone().unwrap_or_else(|| "geometric".into());
    let grid = GridSpec::parse(&grid_text)?;
    let val = import_scores(&scores_path)?;
    let w = fuse_search(&val, &grid)?;
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    write_weights(&w, &out.join(WEIGHTS_FILE))?;
    let seed = a.seed.unwrap_or(0);
    let resolved = FuseSearchArgs {
        config: None,
        seed: Some(seed),
        out: Some(out.clone()),
        force: a.force,
        scores: Some(scores_path),
        grid: Some(grid_text),
    };
    record("fuse-search", seed, &resolved, started, &out, vec![WEIGHTS_FILE.into()])
}

fn evaluate(a: EvaluateArgs) -> Result<RunManifest> {
    let started = unix_now();
    let out = required(&a.out, "out")?;
    let scores_path = required(&a.scores, "scores")?;
    let weights_path = required(&a.weights, "weights")?;
    let n_boot = a.n_boot.unwrap_or(10_000);
    let boot_seed = a.boot_seed.or(a.seed).unwrap_or(0);
    let level = a.level.unwrap_or(0.95);
    let test = import_scores(&scores_path)?;
    let weights = read_weights(&weights_path)?;
    let report = build_report(&test, &weights, n_boot, level, boot_seed)?;
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    write_report(&report, &out.join(REPORT_FILE))?;
    let csv_path = out.join(FIGURE_CSV);
    fs::write(&csv_path, figure2_csv(&report)).map_err(io_err(&csv_path))?;
    let mut artifacts = vec![REPORT_FILE.to_string(), FIGURE_CSV.into()];
    if a.plot {
        let svg = out.join(FIGURE_SVG);
        fs::write(&svg, figure2_svg(&report)).map_err(io_err(&svg))?;
        artifacts.push(FIGURE_SVG.into());
    }
    let resolved = EvaluateArgs {
        config: None,
        seed: a.seed,
        out: Some(out.clone()),
        force: a.force,
        scores: Some(scores_path),
        weights: Some(weights_path),
        n_boot: Some(n_boot),
        boot_seed: Some(boot_seed),
        level: Some(level),
        plot: a.plot,
    };
    record("evaluate", boot_seed, &resolved, started, &out, artifacts)
}
