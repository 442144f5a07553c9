use std::path::Path;
use std::process::{Command, Output};

fn vitpeft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vitpeft"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = vitpeft(args);
    assert!(
        o.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

/// A depth-12 model small enough for a test.
fn write_config(dir: &Path, depth: usize) -> String {
    let path = dir.join(format!("d{depth}.json"));
    let json = format!(
        r#"{{"image_size": 16, "patch_size": 8, "channels": 3, "dim": 16, "depth": {depth},
            "heads": 2, "mlp_ratio": 2, "num_classes": 4}}"#
    );
    std::fs::write(&path, json).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn count_params_reports_linear_probe_size() {
    let out = ok(&[
        "count-params",
        "--config",
        "vit-b16",
        "--strategy",
        "linear",
    ]);
    assert!(out.contains("trainable 76900"), "{out}");
    assert!(out.contains("total 85875556"), "{out}");
    let out = ok(&[
        "count-params",
        "--config",
        "vit-b16",
        "--strategy",
        "blockexp-p3",
    ]);
    assert!(out.contains("trainable 21340516"), "{out}");
}

#[test]
fn surgery_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_owned();
    let config = write_config(dir.path(), 12);
    ok(&[
        "init",
        "--config",
        &config,
        "--seed",
        "3",
        "--out",
        &p("base.ckpt"),
    ]);
    ok(&[
        "expand",
        "--in",
        &p("base.ckpt"),
        "--p",
        "2",
        "--out",
        &p("exp.ckpt"),
    ]);
    let diff = ok(&[
        "verify-identity",
        "--a",
        &p("base.ckpt"),
        "--b",
        &p("exp.ckpt"),
    ]);
    assert_eq!(diff.trim(), "0");

    ok(&[
        "lora-attach",
        "--in",
        &p("base.ckpt"),
        "--r",
        "4",
        "--out",
        &p("lora.ckpt"),
    ]);
    let diff = ok(&[
        "verify-identity",
        "--a",
        &p("base.ckpt"),
        "--b",
        &p("lora.ckpt"),
        "--probes",
        "20",
    ]);
    assert_eq!(diff.trim(), "0");
    ok(&[
        "lora-merge",
        "--in",
        &p("lora.ckpt"),
        "--out",
        &p("merged.ckpt"),
    ]);
    let diff = ok(&[
        "verify-identity",
        "--a",
        &p("lora.ckpt"),
        "--b",
        &p("merged.ckpt"),
    ]);
    assert_eq!(diff.trim(), "0");

    // 12 blocks cannot be split into 5 groups
    let o = vitpeft(&[
        "expand",
        "--in",
        &p("base.ckpt"),
        "--p",
        "5",
        "--out",
        &p("bad.ckpt"),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("bad.ckpt").exists());
}

#[test]
fn train_and_evaluate_a_small_model() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_owned();
    let config = write_config(dir.path(), 2);
    ok(&["init", "--config", &config, "--out", &p("base.ckpt")]);
    ok(&[
        "lora-attach",
        "--in",
        &p("base.ckpt"),
        "--r",
        "2",
        "--out",
        &p("lora.ckpt"),
    ]);
    let log = ok(&[
        "train",
        "--ckpt",
        &p("lora.ckpt"),
        "--data",
        "toy",
        "--n",
        "80",
        "--lr",
        "0.05",
        "--steps",
        "20",
        "--eval-every",
        "10",
        "--batch-size",
        "8",
        "--out",
        &p("tuned.ckpt"),
    ]);
    assert_eq!(
        log.lines().filter(|l| l.starts_with("step ")).count(),
        2,
        "{log}"
    );
    let eval = ok(&[
        "eval-knn",
        "--ckpt",
        &p("tuned.ckpt"),
        "--source",
        "toy:0:4:80",
        "--k",
        "5",
    ]);
    assert!(eval.contains("knn_acc"), "{eval}");
    assert!(eval.contains("head_acc"), "{eval}");
}

#[test]
fn failures_map_to_exit_codes() {
    assert_eq!(vitpeft(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(
        vitpeft(&["count-params", "--config", "tiny", "--strategy", "lora-rx"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        vitpeft(&["count-params", "--config", "tiny", "--strategy", "top-9"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(vitpeft(&["--help"]).status.code(), Some(0));
    // an I/O failure is a runtime error, not a usage error
    let o = vitpeft(&[
        "expand",
        "--in",
        "/nonexistent/x.ckpt",
        "--p",
        "1",
        "--out",
        "/tmp/never.ckpt",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn reference_config_parses_back() {
    let text = ok(&["reference-config"]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["finetune"]["steps"], 2000);
    assert_eq!(v["k"], 20);
}
