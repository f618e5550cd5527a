use std::path::Path;
use std::process::{Command, Output};

fn gforest(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gforest"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = gforest(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    gforest(dir, args).status.code().unwrap()
}

fn trained(dir: &Path) {
    ok(dir, &["synth", "--domain", "ringGauss", "--seed", "1", "--out", "ring.csv"]);
    ok(dir, &["train", "--data", "ring.csv", "--out", "gf.json", "--trees", "4", "--splits", "24"]);
}

#[test]
fn train_reports_and_writes_history() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--domain", "ringGauss", "--seed", "1", "--out", "ring.csv"]);
    let out = ok(d, &["train", "--data", "ring.csv", "--out", "gf.json", "--trees", "3", "--splits", "12", "--dump"]);
    assert!(out.contains("mode: gf"));
    assert!(out.contains("splits: 12"));
    assert!(out.contains("leaves per tree:"));
    let history = std::fs::read_to_string(d.join("gf.json.history.csv")).unwrap();
    assert_eq!(history.lines().count(), 13);
    assert!(history.starts_with("iteration,tree,leaf,feature,split,poprisk"));
}

#[test]
fn zero_splits_is_a_valid_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--domain", "gridGauss", "--out", "g.csv"]);
    ok(d, &["train", "--data", "g.csv", "--out", "m.json", "--splits", "0"]);
    let csv = ok(d, &["generate", "--model", "m.json", "--data", "g.csv", "--n", "5"]);
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn zero_rows_give_a_header() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    ok(d, &["generate", "--model", "gf.json", "--data", "ring.csv", "--n", "0", "--out", "empty.csv"]);
    assert_eq!(std::fs::read_to_string(d.join("empty.csv")).unwrap(), "x,y\n");
}

#[test]
fn converted_model_needs_no_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    ok(d, &["convert", "--model", "gf.json", "--data", "ring.csv", "--out", "eogt.json"]);
    std::fs::remove_file(d.join("ring.csv")).unwrap();
    let csv = ok(d, &["generate", "--model", "eogt.json", "--n", "50", "--order", "randomized"]);
    assert_eq!(csv.lines().count(), 51);
    // The GF model cannot run without its data.
    assert_eq!(code(d, &["generate", "--model", "gf.json", "--n", "5"]), 2);
}

#[test]
fn density_of_generated_points_is_positive() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    ok(d, &["generate", "--model", "gf.json", "--data", "ring.csv", "--n", "40", "--out", "pts.csv"]);
    let out = ok(d, &["density", "--model", "gf.json", "--data", "ring.csv", "--points", "pts.csv"]);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("density,point_mass"));
    for l in lines {
        let v: f64 = l.split(',').next().unwrap().parse().unwrap();
        assert!(v.is_finite() && v > 0.0, "{l}");
    }
}

#[test]
fn impute_fills_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "synth", "--domain", "circGauss", "--out", "truth.csv", "--mcar", "0.1", "--masked-out", "masked.csv",
            "--mask-out", "mask.csv",
        ],
    );
    ok(d, &["train", "--data", "masked.csv", "--out", "m.json", "--trees", "3", "--splits", "30"]);
    ok(d, &["impute", "--model", "m.json", "--data", "masked.csv", "--input", "masked.csv", "--out", "done.csv"]);
    let done = std::fs::read_to_string(d.join("done.csv")).unwrap();
    assert!(done.lines().skip(1).all(|l| l.split(',').all(|c| !c.is_empty())));
    let metrics = ok(d, &["eval", "impute-metrics", "--imputed", "done.csv", "--truth", "truth.csv", "--mask", "mask.csv"]);
    assert!(metrics.contains("perr: absent"));
    assert!(metrics.contains("rmse: "));
}

#[test]
fn impute_without_missing_values_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    ok(d, &["impute", "--model", "gf.json", "--data", "ring.csv", "--input", "ring.csv", "--out", "same.csv"]);
    assert_eq!(std::fs::read(d.join("same.csv")).unwrap(), std::fs::read(d.join("ring.csv")).unwrap());
}

#[test]
fn lifelike_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--domain", "ringGauss", "--out", "ring.csv"]);
    let out = ok(
        d,
        &[
            "eval", "lifelike", "--data", "ring.csv", "--folds", "3", "--trees", "2", "--splits", "10", "--out", "f.csv",
            "--json", "f.json",
        ],
    );
    assert_eq!(out.lines().filter(|l| l.starts_with("fold ")).count(), 3);
    assert_eq!(std::fs::read_to_string(d.join("f.csv")).unwrap().lines().count(), 6);
    assert!(std::fs::read_to_string(d.join("f.json")).unwrap().contains("\"folds\""));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    assert_eq!(code(d, &["train", "--data", "ring.csv"]), 2);
    assert_eq!(code(d, &["train", "--data", "ring.csv", "--out", "x.json", "--loss", "hinge"]), 2);
    assert_eq!(code(d, &["train", "--data", "ring.csv", "--out", "x.json", "--trees", "0"]), 2);
    assert_eq!(code(d, &["--threads", "0", "synth", "--domain", "ringGauss", "--out", "r.csv"]), 2);
    assert_eq!(code(d, &["synth", "--domain", "nope", "--out", "r.csv"]), 2);
    assert_eq!(code(d, &["train", "--data", "absent.csv", "--out", "x.json"]), 3);
    std::fs::write(d.join("ragged.csv"), "a,b\n1,2\n3\n").unwrap();
    assert_eq!(code(d, &["train", "--data", "ragged.csv", "--out", "x.json"]), 3);
    // Same columns, different rows: the model's hash check fails.
    ok(d, &["synth", "--domain", "ringGauss", "--seed", "2", "--out", "other.csv"]);
    assert_eq!(code(d, &["generate", "--model", "gf.json", "--data", "other.csv", "--n", "3"]), 3);
}

#[test]
fn custom_missing_token() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("q.csv"), "a,b\n1.5,x\n?,y\n2.5,?\n0.5,x\n").unwrap();
    ok(d, &["--missing", "?", "train", "--data", "q.csv", "--out", "m.json", "--splits", "2"]);
    let out = ok(d, &["--missing", "?", "impute", "--model", "m.json", "--data", "q.csv", "--input", "q.csv"]);
    assert!(!out.contains('?'));
    assert_eq!(out.lines().count(), 5);
}
