use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use uad::core::volume::Label;
use uad::run_manifest::{RunManifest, RUN_MANIFEST_FILE};
use uad::volume_io::read_manifest;

fn uad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uad")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["gen-data", "--n-normal", "100", "--n-anomalous", "40", "--seed", "7", "--size", "12", "--out", p(out)];
    args.extend_from_slice(extra);
    uad(&args)
}

const SMALL_MODEL: [&str; 6] = ["--input-shape", "12,12,12", "--channels", "4,8", "--latent-dim", "8"];

#[test]
fn gen_data_writes_manifest_and_guards_output() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = gen(&data, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = read_manifest(&data.join("manifest.json")).unwrap();
    assert_eq!(m.entries.len(), 140);
    let rm = RunManifest::read(&data).unwrap();
    assert_eq!(rm.command, "gen-data");
    assert_eq!(rm.seed, 7);

    let o = gen(&data, &[]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("output directory not empty"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
    assert_eq!(code(&gen(&data, &["--force"])), 0);
    assert_eq!(read_manifest(&data.join("manifest.json")).unwrap(), m);
}

#[test]
fn age_matched_flag_aligns_cohort_ages() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&gen(&data, &["--age-matched"])), 0);
    let m = read_manifest(&data.join("manifest.json")).unwrap();
    let mean = |l: Label| {
        let a: Vec<f64> = m.entries.iter().filter(|e| e.label == l).map(|e| e.age_years).collect();
        a.iter().sum::<f64>() / a.len() as f64
    };
    assert!((mean(Label::Normal) - mean(Label::Anomalous)).abs() < 2.0);
}

#[test]
fn invalid_flags_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = uad(&["train", "--variant", "vae-xyz", "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));

    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"variant": "vae-xyz", "manifest": "m.json"}"#).unwrap();
    let o = uad(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("r")), "--dry-run"]);
    assert_eq!(code(&o), 2);
    assert_eq!(stderr(&o).trim_end().lines().count(), 1);

    fs::write(&cfg, r#"{"epoch": 3}"#).unwrap();
    assert_eq!(code(&uad(&["train", "--config", p(&cfg), "--dry-run"])), 2);
    assert_eq!(code(&uad(&["gen-data", "--n-normal", "3", "--out", p(&dir.path().join("g"))])), 2);
    assert_eq!(code(&uad(&["score", "--out", p(dir.path())])), 2);
}

#[test]
fn paper_preset_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = uad(&["train", "--preset", "paper", "--variant", "vae-ap", "--manifest", "m.json", "--dry-run", "--out", p(&run)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let c: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    let t = &c["train"];
    assert_eq!((t["epochs"].as_u64(), t["batch_size"].as_u64()), (Some(400), Some(32)));
    assert_eq!(t["learning_rate"].as_f64(), Some(0.001));
    assert_eq!(t["optimizer"], "adam");
    assert_eq!(t["model"]["latent_dim"].as_u64(), Some(2048));
    let rm = RunManifest::read(&run).unwrap();
    assert_eq!(rm.config["epochs"].as_u64(), Some(400));
    assert_eq!(rm.config["preset"], "paper");
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"epochs": 1, "seed": 5, "beta": 0.5, "manifest": "m.json"}"#).unwrap();
    let run = dir.path().join("run");
    let o = uad(&["train", "--config", p(&cfg), "--epochs", "2", "--dry-run", "--out", p(&run)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let c: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(c["train"]["epochs"].as_u64(), Some(2));
    assert_eq!(c["train"]["seed"].as_u64(), Some(5));
    assert_eq!(c["train"]["beta"].as_f64(), Some(0.5));
}

#[test]
fn divergence_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&gen(&data, &[])), 0);
    let manifest = data.join("manifest.json");
    let mut args = vec!["train", "--manifest", p(&manifest), "--learning-rate", "1e200", "--batch-size", "80", "--epochs", "3"];
    args.extend(SMALL_MODEL);
    let run = dir.path().join("run");
    args.extend(["--out", p(&run)]);
    let o = uad(&args);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}

#[test]
fn pipeline_composes_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    assert_eq!(code(&gen(&data, &[])), 0);
    let (manifest, run) = (data.join("manifest.json"), d.join("run"));
    let mut train = vec!["train", "--manifest", p(&manifest), "--variant", "vae", "--epochs", "2", "--out", p(&run)];
    train.extend(SMALL_MODEL);
    let o = uad(&train);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = uad(&["score", "--checkpoint", p(&d.join("run/final.bin")), "--out", p(&d.join("scores"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = uad(&["fuse-search", "--scores", p(&d.join("scores/scores_val.csv")), "--out", p(&d.join("fuse"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for out in ["eval1", "eval2"] {
        let o = uad(&[
            "evaluate",
            "--scores",
            p(&d.join("scores/scores_test.csv")),
            "--weights",
            p(&d.join("fuse/weights.json")),
            "--n-boot",
            "500",
            "--boot-seed",
            "1",
            "--plot",
            "--out",
            p(&d.join(out)),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let report = fs::read(d.join("eval1/report.json")).unwrap();
    assert_eq!(report, fs::read(d.join("eval2/report.json")).unwrap());
    assert_eq!(fs::read(d.join("eval1/figure2.csv")).unwrap(), fs::read(d.join("eval2/figure2.csv")).unwrap());
    assert!(fs::read_to_string(d.join("eval1/figure2.svg")).unwrap().starts_with("<svg"));

    let r: serde_json::Value = serde_json::from_slice(&report).unwrap();
    assert!(r["mae_normal"].is_null() && r["mae_anomalous"].is_null());
    assert!(r["auc"]["point"].is_number() && r["auprc"]["point"].is_number() && r["spec_at_full_sens"]["point"].is_number());

    for sub in ["data", "run", "scores", "fuse", "eval1"] {
        let n = fs::read_dir(d.join(sub)).unwrap().filter(|e| e.as_ref().unwrap().file_name() == RUN_MANIFEST_FILE).count();
        assert_eq!(n, 1, "{sub}");
    }

    // a run manifest's config is itself a valid config file
    let rm = RunManifest::read(&d.join("eval1")).unwrap();
    let mut cfg = rm.config.clone();
    cfg["out"] = p(&d.join("eval3")).into();
    fs::write(d.join("eval.json"), serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(code(&uad(&["evaluate", "--config", p(&d.join("eval.json"))])), 0);
    assert_eq!(report, fs::read(d.join("eval3/report.json")).unwrap());
}
