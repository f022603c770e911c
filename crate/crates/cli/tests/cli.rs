use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_slicenet");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stderr),
        String::from_utf8_lossy(&out.stdout)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Synthetic data, a toy encoder and a small classifier config in `dir`.
fn fixture(dir: &Path) -> PathBuf {
    ok(
        dir,
        &[
            "synth",
            "--out",
            "data",
            "--samples",
            "12",
            "--size",
            "32",
            "--seed",
            "4",
        ],
    );
    ok(dir, &["init-weights", "--toy", "--out", "w", "--seed", "2"]);
    let cfg = dir.join("c.json");
    fs::write(
        &cfg,
        r#"{"slices": 6, "train": {"epochs": 3, "batch_size": 4, "folds": 3,
            "lstm": {"units": 8, "layers": 1, "dropout": 0.15}}}"#,
    )
    .unwrap();
    cfg
}

#[test]
fn repeated_train_reports_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fixture(d);
    for out in ["a", "b"] {
        ok(
            d,
            &[
                "train",
                "--config",
                "c.json",
                "--seed",
                "7",
                "--weights",
                "w/vit.wman",
                "--data",
                "data",
                "--out",
                out,
            ],
        );
    }
    let a = fs::read(d.join("a/report.json")).unwrap();
    let b = fs::read(d.join("b/report.json")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
    assert_eq!(
        fs::read(d.join("a/fold-2.wman")).unwrap(),
        fs::read(d.join("b/fold-2.wman")).unwrap()
    );

    ok(
        d,
        &[
            "train",
            "--config",
            "c.json",
            "--seed",
            "8",
            "--weights",
            "w/vit.wman",
            "--data",
            "data",
            "--out",
            "c",
        ],
    );
    assert_ne!(a, fs::read(d.join("c/report.json")).unwrap());
}

#[test]
fn artifacts_only_go_to_out() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fixture(d);
    let before: Vec<_> = fs::read_dir(d)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    ok(
        d,
        &[
            "extract-features",
            "--config",
            "c.json",
            "--weights",
            "w/vit.wman",
            "--data",
            "data",
            "--out",
            "f",
        ],
    );
    ok(
        d,
        &[
            "train",
            "--config",
            "c.json",
            "--data",
            "f/features.wman",
            "--out",
            "r",
            "--full",
        ],
    );
    let mut after: Vec<_> = fs::read_dir(d)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    after.retain(|n| !before.contains(n));
    after.sort();
    assert_eq!(after, ["f", "r"]);
    let mut files: Vec<String> = fs::read_dir(d.join("r"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(
        files,
        [
            "fold-0.wman",
            "fold-1.wman",
            "fold-2.wman",
            "model.wman",
            "report.json"
        ]
    );
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(d.join("r/report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["epochs"], 3);
    assert_eq!(report["folds"].as_array().unwrap().len(), 3);
}

fn probabilities(stdout: &str) -> Vec<f64> {
    let line = stdout
        .lines()
        .find_map(|l| l.strip_prefix("probabilities: "))
        .expect("probability line");
    line.split_whitespace()
        .map(|v| v.parse().unwrap())
        .collect()
}

#[test]
fn untrained_prediction_is_a_distribution() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fixture(d);
    let out = ok(
        d,
        &[
            "predict",
            "--weights",
            "w/vit.wman",
            "--volume",
            "data/s0001.bvol",
            "--slices",
            "6",
        ],
    );
    let p = probabilities(&out);
    assert_eq!(p.len(), 2);
    assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-6, "{p:?}");

    let out = ok(
        d,
        &[
            "predict",
            "--weights",
            "w/vit.wman",
            "--volume",
            "data/s0001.bvol",
            "--slices",
            "6",
            "--classes",
            "3",
        ],
    );
    let p = probabilities(&out);
    assert_eq!(p.len(), 3);
    assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-6, "{p:?}");
}

#[test]
fn checkpoint_predict_and_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fixture(d);
    ok(
        d,
        &[
            "train",
            "--config",
            "c.json",
            "--weights",
            "w/vit.wman",
            "--data",
            "data",
            "--out",
            "r",
        ],
    );
    let out = ok(
        d,
        &[
            "predict",
            "--weights",
            "w/vit.wman",
            "--checkpoint",
            "r/fold-0.wman",
            "--volume",
            "data/s0002.bvol",
            "--out",
            "p",
        ],
    );
    assert!((probabilities(&out).iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    let saved: serde_json::Value =
        serde_json::from_slice(&fs::read(d.join("p/prediction.json")).unwrap()).unwrap();
    assert_eq!(saved["probabilities"].as_array().unwrap().len(), 2);

    let out = ok(
        d,
        &[
            "evaluate",
            "--weights",
            "w/vit.wman",
            "--checkpoint",
            "r/fold-1.wman",
            "--data",
            "data",
            "--out",
            "e",
        ],
    );
    assert!(out.contains("ACC"));
    let ev: serde_json::Value =
        serde_json::from_slice(&fs::read(d.join("e/evaluation.json")).unwrap()).unwrap();
    assert_eq!(ev["samples"], 12);
}

#[test]
fn joint_training_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fixture(d);
    let out = ok(
        d,
        &[
            "train",
            "--config",
            "c.json",
            "--weights",
            "w/vit.wman",
            "--data",
            "data",
            "--out",
            "j",
            "--fine-tune-vit",
            "--epochs",
            "1",
        ],
    );
    assert!(out.contains("encoder fine-tuned"));
    let ins = ok(d, &["inspect-weights", "--weights", "j/fold-0.wman"]);
    assert!(ins.contains("kind            checkpoint"), "{ins}");
    assert!(ins.contains("encoder layers  2"), "{ins}");
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(tmp.path(), &["gradcheck"]);
    assert!(out.contains("0 failed"), "{out}");
    for name in [
        "matmul_left",
        "attention_query",
        "lstm_cell_recurrent_weights",
        "encoder_patches",
        "bi_lstm_head",
    ] {
        assert!(out.contains(name), "{name} missing");
    }
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(run(d, &["train", "--no-such-flag"]).status.code(), Some(1));
    let usage = run(d, &["frobnicate"]);
    assert_eq!(usage.status.code(), Some(1));
    assert!(!usage.stderr.is_empty());
    assert_eq!(
        run(d, &["train", "--data", "x"]).status.code(),
        Some(1),
        "missing --out"
    );

    fixture(d);
    fs::write(d.join("junk.wman"), b"not a manifest").unwrap();
    assert_eq!(
        run(d, &["inspect-weights", "--weights", "junk.wman"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        run(
            d,
            &[
                "train",
                "--config",
                "c.json",
                "--weights",
                "w/vit.wman",
                "--data",
                "data",
                "--out",
                "o",
                "--classes",
                "3"
            ]
        )
        .status
        .code(),
        Some(2)
    );
    assert_eq!(
        run(
            d,
            &[
                "predict",
                "--weights",
                "w/vit.wman",
                "--volume",
                "missing.bvol"
            ]
        )
        .status
        .code(),
        Some(2)
    );
}
