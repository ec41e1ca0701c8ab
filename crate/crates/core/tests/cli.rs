use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use adaodm::adapt::AdaptSummary;
use adaodm::bench::ExperimentSpec;
use adaodm::data::{generate, write_csv, DomainSpec, Family};

const TINY_SPEC: &str = r#"
name = "tiny"
n_samples = 200
seeds = [0]

[train]
steps = 30
batch_size = 32

[[methods]]
method = "none"

[[methods]]
method = "adaodm"
steps_per_batch = 2
"#;

fn adaodm(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adaodm"))
        .args(args)
        .env("ADAODM_OUT_DIR", out)
        .output()
        .expect("binary runs")
}

fn write_spec(dir: &Path) -> String {
    let path = dir.join("spec.toml");
    fs::write(&path, TINY_SPEC).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn default_spec_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = adaodm(&["default-spec"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(
        ExperimentSpec::from_toml(&text).unwrap(),
        ExperimentSpec::default()
    );
}

#[test]
fn failures_print_a_json_record() {
    let dir = tempfile::tempdir().unwrap();
    let out = adaodm(&["experiment", "--spec", "/no/such/spec.toml"], dir.path());
    assert!(!out.status.success());
    let record: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(record["error"], "io");
    assert!(record["message"]
        .as_str()
        .unwrap()
        .contains("/no/such/spec.toml"));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "seeds = []").unwrap();
    let out = adaodm(&["experiment", "--spec", bad.to_str().unwrap()], dir.path());
    let record: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(record["error"], "config");
}

#[test]
fn unknown_axis_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = adaodm(&["ablate", "--axis", "width"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("width"));
}

#[test]
fn experiment_writes_result_tables() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path());
    let out_dir = dir.path().join("run");
    let out = adaodm(&["experiment", "--spec", &spec], &out_dir);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for name in ["results.csv", "summary.json", "gains.csv", "timings.csv"] {
        assert!(out_dir.join(name).is_file(), "missing {name}");
    }
    let results = fs::read_to_string(out_dir.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 3);
    assert!(results.lines().skip(1).all(|l| l.contains(",false,")));
}

#[test]
fn train_then_adapt_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path());
    let out_dir = dir.path().join("train");
    let out = adaodm(&["train", "--config", &spec], &out_dir);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(out_dir.join("model.json").is_file());
    assert!(out_dir.join("train.csv").is_file());

    let target = generate(&DomainSpec {
        family: Family::RotatedMoons,
        domain_param: 90.0,
        n_samples: 150,
        noise_sigma: 0.15,
        seed: 5,
    })
    .unwrap();
    let data = dir.path().join("target.csv");
    write_csv(&data, &[(3, &target)]).unwrap();

    let adapt_dir = dir.path().join("adapt");
    let ckpt = out_dir.join("model.json");
    let out = adaodm(
        &[
            "adapt",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--domain",
            "3",
            "--method",
            "tent",
            "--batch-size",
            "32",
        ],
        &adapt_dir,
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary: AdaptSummary =
        serde_json::from_str(&fs::read_to_string(adapt_dir.join("adapt_summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary.samples_seen, 150);
    assert_eq!(summary.batches_seen, 5);
    assert!(adapt_dir.join("adapted.json").is_file());

    let out = adaodm(
        &[
            "adapt",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--domain",
            "7",
        ],
        &adapt_dir,
    );
    let record: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(record["error"], "input");
}
