use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[phantom]
dims = [32, 32, 64]
lesion_radius = [2.0, 3.0]

[dataset]
n_patients = 5

[model]
patch_size = 16
base_channels = 4
depth = 2

[train]
total_epochs = 2
decay_start_epoch = 2
patches_per_epoch = 3
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_districtgan"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = run(dir, args);
    assert!(
        o.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str]) -> String {
    let o = run(dir, args);
    assert_eq!(o.status.code(), Some(1), "{args:?} should fail");
    String::from_utf8(o.stderr).unwrap()
}

#[test]
fn full_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("tiny.toml"), TINY).unwrap();
    let c = ["-c", "tiny.toml"];
    let with = |rest: &[&'static str]| -> Vec<&str> { c.iter().copied().chain(rest.iter().copied()).collect() };

    let out = ok(d, &with(&["phantom", "--out", "data"]));
    assert!(out.contains("train 3 / val 1 / test 1"), "{out}");

    let err = fails(d, &with(&["translate", "--manifest", "data/manifest.jsonl", "--models", "models", "--method", "proposed", "--out", "p"]));
    assert!(err.starts_with("error[orchestration]:"), "{err}");
    assert!(err.contains("head"), "{err}");

    let out = ok(d, &with(&["train", "--manifest", "data/manifest.jsonl", "--models", "models"]));
    assert_eq!(out.lines().count(), 5, "{out}");
    ok(d, &with(&["translate", "--manifest", "data/manifest.jsonl", "--models", "models", "--method", "proposed", "--out", "prop"]));
    ok(d, &with(&["translate", "--manifest", "data/manifest.jsonl", "--models", "models", "--method", "competitor", "--out", "comp"]));
    let report = ok(d, &with(&["evaluate", "--manifest", "data/manifest.jsonl", "--pred", "prop", "--pred", "comp", "--out", "eval"]));
    assert!(report.contains("whole_body"), "{report}");
    assert!(d.join("eval/summary.csv").exists());

    // Resuming a finished run reports the same checksums.
    let again = ok(d, &with(&["train", "--manifest", "data/manifest.jsonl", "--models", "models"]));
    assert_eq!(again, out);
}

#[test]
fn errors_carry_a_kind_prefix() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let err = fails(d, &["--set", "dataset.split_fractions=[0.5,0.1,0.1]", "phantom", "--out", "x"]);
    assert!(err.starts_with("error[config]:"), "{err}");
    assert!(err.contains("split_fractions"), "{err}");

    let err = fails(d, &["--set", "train.nope=1", "show-config"]);
    assert!(err.contains("nope"), "{err}");

    let err = fails(d, &["evaluate", "--manifest", "missing.json", "--pred", "p", "--out", "e"]);
    assert!(err.starts_with("error[io]:"), "{err}");
    assert!(err.contains("missing.json"), "{err}");

    let err = fails(d, &["train", "--manifest", "m.json", "--models", "m", "--scope", "torso"]);
    assert!(err.contains("torso"), "{err}");
}

#[test]
fn show_config_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let text = ok(d, &["--set", "train.seed=42", "show-config"]);
    assert!(text.contains("seed = 42"), "{text}");
    fs::write(d.join("c.toml"), &text).unwrap();
    assert_eq!(ok(d, &["-c", "c.toml", "show-config"]), text);
}
