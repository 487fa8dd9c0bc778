use std::fs;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use uad::core::metrics::auc;
use uad::core::scoring::{GridSpec, ScoreTriple};
use uad::core::volume::Label;
use uad::scores::{export_scores, fuse_search, import_scores, read_weights, write_weights};
use uad::Error;

fn random_triples(n: usize, with_age: bool, seed: u64) -> Vec<ScoreTriple> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let a_c: f64 = rng.gen_range(18.0..90.0);
            let a_p = (with_age && rng.gen_bool(0.9) || with_age && i == 0).then(|| a_c + rng.gen_range(-15.0..15.0));
            ScoreTriple {
                subject_id: format!("S{i:03}"),
                label: if i % 3 == 0 { Label::Anomalous } else { Label::Normal },
                a_c,
                a_p,
                l_rec: rng.gen::<f64>() * 1e-3,
                l_kl: rng.gen::<f64>() * 50.0,
                l_age: a_p.map(|p| (p - a_c).abs()),
            }
        })
        .collect()
}

#[test]
fn hundred_triples_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.csv");
    let t = random_triples(100, true, 1);
    export_scores(&t, &p).unwrap();
    let back = import_scores(&p).unwrap();
    assert_eq!(back.len(), 100);
    for (a, b) in t.iter().zip(&back) {
        assert_eq!(a.subject_id, b.subject_id);
        assert_eq!(a.label, b.label);
        assert_eq!(a.a_p.is_some(), b.a_p.is_some());
        for (x, y) in [(a.a_c, b.a_c), (a.l_rec, b.l_rec), (a.l_kl, b.l_kl)] {
            assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0));
        }
    }
    assert_eq!(back, t);
}

#[test]
fn absent_ages_are_empty_fields() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.csv");
    export_scores(&random_triples(3, false, 2), &p).unwrap();
    let text = fs::read_to_string(&p).unwrap();
    assert!(text.starts_with("subject_id,label,a_c,a_p,l_rec,l_kl,l_age\n"));
    assert!(text.lines().nth(1).unwrap().ends_with(','));
    assert!(import_scores(&p).unwrap().iter().all(|t| t.a_p.is_none() && t.l_age.is_none()));
}

#[test]
fn missing_column_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.csv");
    fs::write(&p, "subject_id,label,a_c,a_p,l_rec,l_age\nS1,normal,40,,0.1,\n").unwrap();
    assert!(matches!(import_scores(&p), Err(Error::Format(_))));
    fs::write(&p, "subject_id,label,a_c,a_p,l_rec,l_kl,l_age\nS1,normal,forty,,0.1,2,\n").unwrap();
    assert!(matches!(import_scores(&p), Err(Error::Format(_))));
    fs::write(&p, "subject_id,label,a_c,a_p,l_rec,l_kl,l_age\nS1,sick,40,,0.1,2,\n").unwrap();
    assert!(matches!(import_scores(&p), Err(Error::Format(_))));
}

#[test]
fn header_only_is_empty() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.csv");
    fs::write(&p, "subject_id,label,a_c,a_p,l_rec,l_kl,l_age\n").unwrap();
    assert!(import_scores(&p).unwrap().is_empty());
}

#[test]
fn fused_validation_auc_dominates_each_score() {
    for seed in 0..20 {
        let mut t = random_triples(40, true, seed);
        t.iter_mut().for_each(|x| {
            if x.a_p.is_none() {
                x.a_p = Some(x.a_c);
                x.l_age = Some(0.0);
            }
        });
        let w = fuse_search(&t, &GridSpec::Geometric).unwrap();
        let labels: Vec<bool> = t.iter().map(|x| x.label.is_anomalous()).collect();
        let kl: Vec<f64> = t.iter().map(|x| x.l_kl).collect();
        assert_eq!(w.val_auc_l_kl, auc(&kl, &labels).unwrap());
        // beta_a is pinned to 1, so only the KL corner is always reachable
        assert!(w.val_auc >= w.val_auc_l_kl);
        assert_eq!(w.beta_a, 1.0);
    }
}

#[test]
fn weights_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("w.json");
    let w = fuse_search(&random_triples(30, false, 5), &GridSpec::Geometric).unwrap();
    assert_eq!(w.gamma_a, 0.0);
    assert!(w.val_auc_l_age.is_none());
    write_weights(&w, &p).unwrap();
    assert_eq!(read_weights(&p).unwrap(), w);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
    for key in ["alpha_a", "beta_a", "gamma_a", "val_auc", "grid_spec"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
}
