use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
epochs = 2
batch_size = 2

[model]
depth = 2
base_channels = 4

[synth]
image_size = 16
n_source = 5
n_target = 5
axis_min = 0.28
axis_max = 0.34
wall_min = 1.5
wall_max = 2.5
center_jitter = 0.02
area_min = 0.05
area_max = 0.6
gaze_samples = 5
"#;

fn gahcda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gahcda")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = gahcda(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Runs teacher training, pseudo-labelling and adaptation into `out`.
fn pipeline(cfg: &Path, out: &Path) {
    let common = ["--profile", "desk", "--config", s(cfg), "--out", s(out)];
    let data = out.join("data");
    ok(&[&["gen-synth"][..], &common[..2], &["--config", s(cfg), "--out", s(&data)]].concat());
    let with = |cmd: &str, extra: &[&str]| {
        let mut v = vec![cmd];
        v.extend_from_slice(&common);
        v.extend_from_slice(&["--data", s(&data)]);
        v.extend_from_slice(extra);
        ok(&v)
    };
    with("train-teacher", &[]);
    let teacher = out.join("teacher.ckpt");
    with("pseudo-label", &["--teacher", s(&teacher)]);
    with("adapt", &["--teacher", s(&teacher), "--pseudo", s(&out.join("pseudo"))]);
}

#[test]
fn full_pipeline_runs_and_reproduces() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    pipeline(&cfg, &a);

    for f in ["teacher.ckpt", "teacher_manifest.json", "teacher_manifest_loss.csv", "student.ckpt", "adapt_manifest.json"] {
        assert!(a.join(f).is_file(), "{f}");
    }
    assert_eq!(fs::read_dir(a.join("pseudo")).unwrap().count(), 5);
    let adapt = json(&a.join("adapt_manifest.json"));
    assert_eq!(adapt["loss_curve"].as_array().unwrap().len(), 2);
    assert_eq!(adapt["teacher_hash"], json(&a.join("teacher_manifest.json"))["checkpoint_hash"]);

    let data = a.join("data");
    let common = ["--profile", "desk", "--config", s(&cfg), "--out", s(&a), "--data", s(&data)];
    let student = a.join("student.ckpt");
    let line = ok(&[&["evaluate"][..], &common, &["--checkpoint", s(&student), "--label", "adapted"]].concat());
    assert!(line.contains("DSC"));
    let report = json(&a.join("adapted.json"));
    assert_eq!(report["items"].as_array().unwrap().len(), 5);

    ok(&[&["dump-features"][..], &common, &["--checkpoint", s(&student), "--index", "1"]].concat());
    let dump = fs::read(a.join("features_tgt_0001.gzf")).unwrap();
    assert_eq!(&dump[..4], b"GZF1");

    ok(&["plot", "--profile", "desk", "--config", s(&cfg), "--out", s(&a)]);
    assert!(a.join("adapt_loss.svg").is_file());
    assert!(a.join("teacher_loss.svg").is_file());

    pipeline(&cfg, &b);
    for f in ["teacher.ckpt", "student.ckpt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    for (f, key) in [("teacher_manifest.json", "checkpoint_hash"), ("adapt_manifest.json", "checkpoint_hash"), ("adapt_manifest.json", "config_hash")] {
        assert_eq!(json(&a.join(f))[key], json(&b.join(f))[key], "{f} {key}");
    }
}

#[test]
fn ablate_single_mode_writes_per_seed_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = tmp.path().join("abl");
    let stdout = ok(&["ablate", "--profile", "desk", "--config", s(&cfg), "--out", s(&out), "--modes", "no-DA", "--seeds", "1"]);
    assert!(stdout.contains("DSC"));
    assert!(out.join("seed_0").join("teacher_manifest.json").is_file());
    assert!(out.join("ablate_manifest.json").is_file());
}

#[test]
fn usage_and_config_errors_exit_one() {
    assert_eq!(gahcda(&["train-teacher", "--bogus"]).status.code(), Some(1));
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let bad = gahcda(&["train-teacher", "--out", s(&out), "--set", "optimizer.lr=0"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("learning rate"));
    let unknown = gahcda(&["gen-synth", "--out", s(&out), "--set", "optimizer.beta=1"]);
    assert_eq!(unknown.status.code(), Some(1));
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = gahcda(&[
        "evaluate",
        "--config",
        s(&cfg),
        "--out",
        s(&tmp.path().join("o")),
        "--checkpoint",
        s(&tmp.path().join("nope.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_lists_config_keys() {
    let out = gahcda(&["adapt", "--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for key in ["optimizer.lr", "loss.lambda_gaa", "gaze.w_floor", "synth.gamma"] {
        assert!(text.contains(key), "{key}");
    }
}
