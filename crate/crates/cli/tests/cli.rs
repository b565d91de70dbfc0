//! Exit codes, dataset round trips and config precedence through the binary.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn structgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_structgen"))
        .args(args)
        .env_remove("STRUCTGEN_VLM_TOKEN")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// A tiny backbone so training runs in seconds.
fn write_small_config(path: &Path) {
    let cfg = json!({
        "backbone.image_size": 16,
        "backbone.patch_size": 4,
        "backbone.width": 32,
        "backbone.depth": 2,
        "backbone.heads": 2,
        "data.image_size": 16,
        "lora.rank": 4,
        "train.batch_size": 2,
        "train.steps": 3,
        "train.mix": [1.0],
    });
    std::fs::write(path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
}

#[test]
fn help_and_version_exit_zero() {
    let help = structgen(&["--help"]);
    assert_eq!(code(&help), 0);
    assert!(stdout(&help).contains("train.lr"), "help lists the config keys");
    assert_eq!(code(&structgen(&["--version"])), 0);
    assert_eq!(code(&structgen(&["eval", "--help"])), 0);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&structgen(&[])), 2);
    assert_eq!(code(&structgen(&["frobnicate"])), 2);
    assert_eq!(code(&structgen(&["validate-dataset", "--data", "x", "--bogus"])), 2);
    assert_eq!(
        code(&structgen(&[
            "build-dataset",
            "--kind",
            "poems",
            "--n",
            "1",
            "--seed",
            "0",
            "--out",
            "x"
        ])),
        2
    );
}

#[test]
fn config_errors_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let base = [
        "build-dataset",
        "--kind",
        "generic",
        "--n",
        "1",
        "--seed",
        "0",
        "--out",
        p(&out),
    ];
    for bad in ["no.such.key=1", "train.lr=fast", "train.lr"] {
        let mut args = base.to_vec();
        args.extend(["--set", bad]);
        assert_eq!(code(&structgen(&args)), 3, "--set {bad}");
    }
    assert!(!out.exists(), "nothing is written when the config is rejected");
}

#[test]
fn missing_inputs_exit_six() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent");
    assert_eq!(code(&structgen(&["validate-dataset", "--data", p(&missing)])), 6);
    let cfg = dir.path().join("absent.json");
    let out = dir.path().join("d");
    let args = [
        "build-dataset",
        "--kind",
        "generic",
        "--n",
        "1",
        "--seed",
        "0",
        "--out",
        p(&out),
        "--config",
        p(&cfg),
    ];
    assert_eq!(code(&structgen(&args)), 6);
}

#[test]
fn built_dataset_validates_and_tampering_is_caught() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("texting");
    let built = structgen(&[
        "build-dataset",
        "--kind",
        "texting",
        "--n",
        "3",
        "--seed",
        "11",
        "--out",
        p(&data),
    ]);
    assert_eq!(code(&built), 0, "{}", String::from_utf8_lossy(&built.stderr));
    assert!(data.join("resolved_config.json").exists());

    let ok = structgen(&["validate-dataset", "--data", p(&data)]);
    assert_eq!(code(&ok), 0);
    assert!(stdout(&ok).contains("3 records valid"));

    let records = data.join("records");
    std::fs::copy(records.join("000001/canny.png"), records.join("000000/canny.png")).unwrap();
    assert_eq!(code(&structgen(&["validate-dataset", "--data", p(&data)])), 4);
}

#[test]
fn set_overrides_config_file_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"canny.sigma": 1.5, "canny.low": 0.05}"#).unwrap();
    let out = dir.path().join("d");
    let run = structgen(&[
        "build-dataset",
        "--kind",
        "generic",
        "--n",
        "1",
        "--seed",
        "3",
        "--out",
        p(&out),
        "--config",
        p(&cfg),
        "--set",
        "canny.sigma=2.0",
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let snap = read_json(&out.join("resolved_config.json"));
    assert_eq!(snap["canny.sigma"], json!(2.0));
    assert_eq!(snap["canny.low"], json!(0.05));
    assert!(snap["canny.high"].as_f64().is_some_and(|h| h > 0.05));
}

#[test]
fn training_snapshot_reproduces_the_adapter() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.json");
    write_small_config(&cfg);
    let data = dir.path().join("generic");
    let built = structgen(&[
        "build-dataset",
        "--kind",
        "generic",
        "--n",
        "4",
        "--seed",
        "5",
        "--out",
        p(&data),
        "--config",
        p(&cfg),
    ]);
    assert_eq!(code(&built), 0, "{}", String::from_utf8_lossy(&built.stderr));

    let first = dir.path().join("run1");
    let run = structgen(&[
        "train-stage1",
        "--data",
        p(&data),
        "--out",
        p(&first),
        "--config",
        p(&cfg),
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    for f in ["adapter.bin", "loss.csv", "train_meta.json", "resolved_config.json"] {
        assert!(first.join(f).exists(), "{f} missing");
    }

    // the snapshot alone must pin every setting
    let second = dir.path().join("run2");
    let snap = first.join("resolved_config.json");
    let rerun = structgen(&[
        "train-stage1",
        "--data",
        p(&data),
        "--out",
        p(&second),
        "--config",
        p(&snap),
    ]);
    assert_eq!(code(&rerun), 0, "{}", String::from_utf8_lossy(&rerun.stderr));
    assert_eq!(
        std::fs::read(first.join("adapter.bin")).unwrap(),
        std::fs::read(second.join("adapter.bin")).unwrap()
    );
    assert_eq!(
        std::fs::read(first.join("loss.csv")).unwrap(),
        std::fs::read(second.join("loss.csv")).unwrap()
    );

    // a different seed gives a different adapter
    let third = dir.path().join("run3");
    let other = structgen(&[
        "train-stage1",
        "--data",
        p(&data),
        "--out",
        p(&third),
        "--config",
        p(&snap),
        "--set",
        "train.seed=9",
    ]);
    assert_eq!(code(&other), 0);
    assert_ne!(
        std::fs::read(first.join("adapter.bin")).unwrap(),
        std::fs::read(third.join("adapter.bin")).unwrap()
    );
}

#[test]
fn stage_mismatched_adapter_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.json");
    write_small_config(&cfg);
    let data = dir.path().join("generic");
    assert_eq!(
        code(&structgen(&[
            "build-dataset",
            "--kind",
            "generic",
            "--n",
            "2",
            "--seed",
            "8",
            "--out",
            p(&data),
            "--config",
            p(&cfg),
        ])),
        0
    );
    let t1 = dir.path().join("t1");
    assert_eq!(
        code(&structgen(&[
            "train-stage1",
            "--data",
            p(&data),
            "--out",
            p(&t1),
            "--config",
            p(&cfg)
        ])),
        0
    );
    // stage-1 adapter passed where stage 2 is expected
    let out = dir.path().join("eval");
    let run = structgen(&[
        "eval",
        "--kind",
        "ocr",
        "--data",
        p(&data),
        "--theta1",
        p(&t1),
        "--theta2",
        p(&t1),
        "--out",
        p(&out),
        "--config",
        p(&cfg),
    ]);
    assert_ne!(code(&run), 0);
    assert!(String::from_utf8_lossy(&run.stderr).contains("expected stage2"));
}
