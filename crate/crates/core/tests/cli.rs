use std::path::Path;
use std::process::{Command, Output};

fn sits(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sits")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = sits(dir, args);
    assert!(out.status.success(), "sits {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

const SMALL: &[&str] =
    &["--seed", "2", "--set", "synth_scale=0.02", "--set", "synth_pixels_min=2", "--set", "synth_pixels_max=3"];

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

#[test]
fn synth_then_cv_writes_reports() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &with(&["synth"], SMALL));
    let cv = with(&["cv", "--data", "out/dataset.csv", "--model", "rf", "--k", "3", "--set", "rf_trees=4", "--out", "cv"], SMALL);
    ok(d.path(), &cv);
    let report = std::fs::read_to_string(d.path().join("cv/cv_report.txt")).unwrap();
    assert!(report.contains("F1"), "{report}");
    let folds = std::fs::read_to_string(d.path().join("cv/cv_folds.csv")).unwrap();
    // header, three folds, mean and ci95
    assert_eq!(folds.lines().count(), 6, "{folds}");
    assert!(d.path().join("cv/config.txt").exists());
}

#[test]
fn predict_rejects_band_mismatch() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &with(&["synth"], SMALL));
    ok(d.path(), &with(&["train", "--data", "out/dataset.csv", "--model", "rf", "--set", "rf_trees=3", "--out", "tr"], SMALL));
    std::fs::write(
        d.path().join("two_bands.csv"),
        "#classes=oak\n#bands=2\n#days=0,10\n1,1,oak,0.1,0.2,0.3,0.4,1,1\n",
    )
    .unwrap();
    let out = sits(d.path(), &["predict", "--data", "two_bands.csv", "--checkpoint", "tr/checkpoint", "--out", "p"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("band count mismatch: data has 2 bands, checkpoint expects 10"), "{err}");
    assert!(!d.path().join("p/predictions.csv").exists());
}

#[test]
fn unknown_config_key_fails() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("bad.cfg"), "colour=red\n").unwrap();
    let out = sits(d.path(), &["synth", "--config", "bad.cfg"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
}

#[test]
fn missing_data_fails_without_outputs() {
    let d = tempfile::tempdir().unwrap();
    let out = sits(d.path(), &["preprocess", "--data", "nowhere.csv", "--out", "pre"]);
    assert!(!out.status.success());
    assert!(!d.path().join("pre").exists());
}

#[test]
fn predictions_cover_every_pixel() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &with(&["synth"], SMALL));
    let train = with(
        &["train", "--data", "out/dataset.csv", "--set", "mlp_widths=8", "--set", "max_epochs=2", "--batch-size", "32", "--out", "tr"],
        SMALL,
    );
    ok(d.path(), &train);
    ok(d.path(), &["predict", "--data", "out/dataset.csv", "--checkpoint", "tr/checkpoint", "--out", "p"]);
    let data = std::fs::read_to_string(d.path().join("out/dataset.csv")).unwrap();
    let preds = std::fs::read_to_string(d.path().join("p/predictions.csv")).unwrap();
    let n_pixels = data.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(preds.lines().count(), n_pixels + 1);
    for line in preds.lines().skip(1) {
        let probs: f64 = line.split(',').skip(3).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((probs - 1.0).abs() < 1e-9, "{line}");
    }
    let log = std::fs::read_to_string(d.path().join("tr/train_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,train_loss,val_loss,lr"));
}
