use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flowpose::temporal::PoolingWeights;

fn flowpose(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowpose"))
        .args(args)
        .env("FLOWPOSE_THREADS", "2")
        .output()
        .expect("spawn flowpose")
}

fn ok(args: &[&str]) -> String {
    let out = flowpose(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Fails and returns the single stderr line.
fn fails(args: &[&str]) -> String {
    let out = flowpose(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(err.trim_end().lines().count(), 1, "stderr: {err}");
    assert!(err.starts_with("error: "), "stderr: {err}");
    err
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TOY_CONFIG: &str = "network = toy\niters = 12\nbatch = 4\nval_every = 6\nval_frames = 8\nrotation = 10\n";

struct Chain {
    _root: tempfile::TempDir,
    data: PathBuf,
    model: PathBuf,
    heat: PathBuf,
    warped: PathBuf,
}

fn run_chain() -> Chain {
    let root = tempfile::tempdir().unwrap();
    let p = |n: &str| root.path().join(n);
    let (data, model, heat, warped) = (p("data"), p("model"), p("heat"), p("warped"));
    let cfg = p("train.cfg");
    fs::write(&cfg, TOY_CONFIG).unwrap();
    ok(&["gen-data", "--out", s(&data), "--seed", "3", "--frames", "24", "--flow-range", "2"]);
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&model)]);
    let ckpt = model.join("checkpoint.fpnet");
    ok(&["infer", "--checkpoint", s(&ckpt), "--out", s(&heat), s(&data)]);
    ok(&["warp", "--heatmaps", s(&heat), "--flows", s(&data), "--n", "2", "--out", s(&warped)]);
    Chain {
        _root: root,
        data,
        model,
        heat,
        warped,
    }
}

#[test]
fn full_chain_emits_curves_and_manifests() {
    let c = run_chain();
    let root = c.data.parent().unwrap();
    let learned = root.join("learned");
    let pooled = root.join("pooled");
    let summed = root.join("summed");
    let evald = root.join("eval");
    let gt = c.data.join("poses.csv");
    ok(&["learn-pool", "--warped", s(&c.warped), "--targets", s(&gt), "--iterations", "200", "--out", s(&learned)]);
    let weights = learned.join("pooling_weights.csv");
    ok(&["pool", "--warped", s(&c.warped), "--mode", "parametric", "--weights", s(&weights), "--out", s(&pooled)]);
    ok(&["pool", "--warped", s(&c.warped), "--mode", "sum", "--out", s(&summed)]);
    let stdout = ok(&[
        "eval",
        "--gt",
        s(&gt),
        "--pred",
        &format!("single={}", s(&c.heat.join("poses.csv"))),
        "--pred",
        s(&pooled.join("poses.csv")),
        "--pred",
        s(&summed.join("poses.csv")),
        "--d-max",
        "10",
        "--out",
        s(&evald),
    ]);
    assert!(stdout.contains("single wrists:"));
    assert!(stdout.contains("pooled mean:"));
    let csv = fs::read_to_string(evald.join("pck.csv")).unwrap();
    assert!(csv.starts_with("method,joint,d,accuracy\n"));
    assert!(csv.contains("\nsummed,left_wrist,10,"));
    assert!(fs::read_to_string(evald.join("pck.svg")).unwrap().starts_with("<svg"));
    for dir in [&c.data, &c.model, &c.heat, &c.warped, &learned, &pooled, &evald] {
        let m = fs::read_to_string(dir.join("manifest.txt")).unwrap();
        assert!(m.contains("command = "), "{}", dir.display());
    }
    let m = fs::read_to_string(c.heat.join("manifest.txt")).unwrap();
    let hash = m.lines().find_map(|l| l.strip_prefix("checkpoint_sha256 = ")).unwrap();
    assert_eq!(hash.len(), 64);
    let train_m = fs::read_to_string(c.model.join("manifest.txt")).unwrap();
    assert!(train_m.contains(hash));
    assert!(c.model.join("curve.csv").is_file());
}

#[test]
fn center_weights_reproduce_single_frame_poses() {
    let c = run_chain();
    let names: Vec<String> = fs::read_to_string(c.warped.join("joints.txt"))
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    let w = c.data.parent().unwrap().join("center.csv");
    fs::write(&w, PoolingWeights::center(2, names.len()).to_csv(&names)).unwrap();
    let out = c.data.parent().unwrap().join("pooled");
    ok(&["pool", "--warped", s(&c.warped), "--mode", "parametric", "--weights", s(&w), "--out", s(&out)]);
    assert_eq!(
        fs::read(out.join("poses.csv")).unwrap(),
        fs::read(c.heat.join("poses.csv")).unwrap()
    );
    assert_eq!(
        fs::read(out.join("heatmap_00005.tns")).unwrap(),
        fs::read(c.heat.join("heatmap_00005.tns")).unwrap()
    );
}

#[test]
fn eval_of_labels_against_themselves_is_perfect() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let out = root.path().join("eval");
    ok(&["gen-data", "--out", s(&data), "--frames", "6"]);
    let gt = data.join("poses.csv");
    ok(&["eval", "--gt", s(&gt), "--pred", s(&gt), "--d-max", "3", "--out", s(&out)]);
    let csv = fs::read_to_string(out.join("pck.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 9 * 4);
    assert!(rows.iter().all(|r| r.ends_with(",1")), "{csv}");
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.txt")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn reruns_are_byte_identical() {
    let root = tempfile::tempdir().unwrap();
    let p = |n: &str| root.path().join(n);
    let cfg = p("train.cfg");
    fs::write(&cfg, TOY_CONFIG).unwrap();
    for run in ["a", "b"] {
        let data = p(&format!("data_{run}"));
        ok(&["gen-data", "--out", s(&data), "--seed", "9", "--frames", "16", "--flow-range", "1", "--label-jitter", "1", "--label-outliers", "0.1"]);
        ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&p(&format!("model_{run}")))]);
        ok(&["estimate-flow", "--frames", s(&data), "--iterations", "20", "--out", s(&p(&format!("flow_{run}")))]);
    }
    for stem in ["data", "model", "flow"] {
        let (a, b) = (tree(&p(&format!("{stem}_a"))), tree(&p(&format!("{stem}_b"))));
        assert!(!a.is_empty());
        assert!(a == b, "{stem} differs between runs");
    }
    assert!(p("data_a/poses_clean.csv").is_file());
    assert!(p("flow_a/flow_00003_-01.flo").is_file());
}

#[test]
fn errors_are_one_line_with_a_kind() {
    let root = tempfile::tempdir().unwrap();
    let missing = root.path().join("nope");
    let e = fails(&["infer", "--checkpoint", s(&missing.join("c.fpnet")), "--out", s(&missing), s(&missing)]);
    assert!(e.starts_with("error: io: "), "{e}");

    let cfg = root.path().join("bad.cfg");
    fs::write(&cfg, "iters = 10\nlearning_rate = 0.1\n").unwrap();
    let e = fails(&["train", "--config", s(&cfg), "--data", s(&missing), "--out", s(&missing)]);
    assert!(e.starts_with("error: config: ") && e.contains("learning_rate"), "{e}");

    fs::write(&cfg, "lr = -1\n").unwrap();
    let e = fails(&["train", "--config", s(&cfg), "--data", s(&missing), "--out", s(&missing)]);
    assert!(e.contains("`lr`"), "{e}");

    let e = fails(&["pool", "--warped", s(root.path()), "--mode", "median", "--out", s(&missing)]);
    assert!(e.starts_with("error: config: "), "{e}");

    let e = fails(&["warp", "--heatmaps", s(root.path())]);
    assert!(e.starts_with("error: usage: "), "{e}");

    let out = Command::new(env!("CARGO_BIN_EXE_flowpose"))
        .args(["eval", "--gt", "x", "--pred", "x", "--out", "y"])
        .env("FLOWPOSE_THREADS", "zero")
        .output()
        .unwrap();
    assert!(String::from_utf8_lossy(&out.stderr).contains("FLOWPOSE_THREADS"));
}
