use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_objectseeker")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn committed_args() -> Vec<String> {
    [
        "--annotations",
        s(&data("annotations.json")),
        "--detections",
        s(&data("detections.json")),
        "--manifest",
        s(&data("masks.json")),
        "--config",
        s(&data("golden.toml")),
    ]
    .map(String::from)
    .to_vec()
}

fn run_on_committed(cmd: &str, extra: &[&str]) -> Output {
    let mut args = vec![cmd.to_string()];
    args.extend(committed_args());
    args.extend(extra.iter().map(|a| a.to_string()));
    run(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn gen_masks_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.json");
    let o = run(&["gen-masks", "--k", "10", "--width", "128", "--height", "128", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json(&out)["masks"].as_array().unwrap().len(), 40);
    let o = run(&[
        "gen-masks", "--k", "10", "--two-patch", "true", "--width", "128", "--height", "128",
        "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(json(&out)["masks"].as_array().unwrap().len(), 820);
}

#[test]
fn synth_reproduces_committed_data() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["synth", "--k", "10", "--out-dir", s(dir.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["annotations.json", "masks.json", "detections.json"] {
        let fresh = std::fs::read(dir.path().join(name)).unwrap();
        assert!(fresh == std::fs::read(data(name)).unwrap(), "{name} differs");
    }
}

#[test]
fn empty_dataset_has_undefined_certr() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["synth", "--k", "4", "--n-images", "0", "--out-dir", s(dir.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = dir.path().join("cert.json");
    let o = run(&[
        "certify", "--k", "4", "--annotations", s(&dir.path().join("annotations.json")),
        "--width", "128", "--height", "128", "--out", s(&report),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let certr = &json(&report)["report"]["certr"]["all"];
    assert_eq!(certr["total"], 0);
    assert!(certr.get("certr").is_none());
}

#[test]
fn certify_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let (out, csv) = (dir.path().join("c.json"), dir.path().join("c.csv"));
    let o = run_on_committed("certify", &["--out", s(&out), "--csv", s(&csv)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let got = json(&out);
    let golden = json(&data("golden.json"));
    assert_eq!(got["report"]["certr"], golden["certr"]);
    assert_eq!(got["mask_manifest_hash"], golden["mask_manifest_hash"]);
    let table = std::fs::read_to_string(&csv).unwrap();
    assert!(table.starts_with("model,certified,total,certr\n"));
    assert_eq!(table.lines().count(), 5);
}

#[test]
fn eval_on_clean_synthetic_data_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("e.json");
    let o = run_on_committed("eval", &["--out", s(&out), "--target-recall", "0.9"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = &json(&out)["report"];
    assert_eq!(report["ap"], 1.0);
    assert_eq!(report["pr"].as_array().unwrap().len(), 101);
    assert!(report["certr_at_recall"]["gamma_b"].as_f64().unwrap() >= 0.9);
}

#[test]
fn infer_writes_one_entry_per_image() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("i.json");
    let o = run_on_committed("infer", &["--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let boxes = json(&out);
    let per_image = boxes.as_object().unwrap();
    assert_eq!(per_image.len(), 20);
    assert!(per_image.values().all(|v| v.as_array().unwrap().len() == 3));
}

#[test]
fn attack_sim_finds_no_violations() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a.json");
    let o = run_on_committed("attack-sim", &["--out", s(&out), "--trials", "20"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json(&out)["report"]["violations"], 0);
}

#[test]
fn bad_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.json");
    assert_eq!(code(&run_on_committed("certify", &["--out", s(&out), "--tau", "1.5"])), 1);
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "kk = 3\n").unwrap();
    let o = run(&["gen-masks", "--config", s(&cfg), "--width", "64", "--height", "64", "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    assert_eq!(code(&run(&["certify"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let other = dir.path().join("m4.json");
    assert_eq!(code(&run(&["gen-masks", "--k", "4", "--width", "128", "--height", "128", "--out", s(&other)])), 0);
    let out = dir.path().join("x.json");
    let o = run(&[
        "certify", "--annotations", s(&data("annotations.json")), "--detections",
        s(&data("detections.json")), "--manifest", s(&other), "--out", s(&out),
    ]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["certify", "--annotations", s(&dir.path().join("missing.json")), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
}
