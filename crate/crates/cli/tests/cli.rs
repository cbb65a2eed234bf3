use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cva_cli::{cmd_ablate, AblateArgs, ConfigArgs, CHECKPOINT_FILE, MANIFEST_FILE};
use cva_core::data::load_features;

fn cva(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cva"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = cva(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, task: &str, size: &str, test: &str) {
    ok(&[
        "synth",
        "--task",
        task,
        "--out",
        path(dir),
        "--size",
        size,
        "--test-size",
        test,
    ]);
}

#[test]
fn help_and_version_succeed() {
    assert!(cva(&["--help"]).status.success());
    assert!(cva(&["--version"]).status.success());
    assert_eq!(cva(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn synth_defaults_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["synth", "--out", path(&a)]);
    ok(&["synth", "--out", path(&b)]);
    for name in [
        "features.bin",
        "train.txt",
        "test.txt",
        "questions.vocab",
        "answers.vocab",
        "taxonomy.tsv",
    ] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    let features = load_features(&a.join("features.bin")).unwrap();
    assert_eq!(features.len(), 2500);
    let (_, map) = features.iter().next().unwrap();
    assert_eq!((map.regions(), map.channels()), (6, 32));
    assert_eq!(
        fs::read_to_string(a.join("train.txt"))
            .unwrap()
            .lines()
            .count(),
        2000
    );
}

#[test]
fn synth_output_root_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_cva"))
        .args(["synth", "--size", "10", "--seed", "3"])
        .env("CVA_OUTPUT_ROOT", tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(tmp
        .path()
        .join("spatial-seed3")
        .join("features.bin")
        .exists());
}

#[test]
fn invalid_synth_sizes_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cva(&["synth", "--k", "1", "--out", path(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("at least 2 regions"));
}

#[test]
fn unwritable_output_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("plain");
    fs::write(&file, "x").unwrap();
    let out = cva(&["synth", "--size", "4", "--out", path(&file.join("sub"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_variant_lists_the_valid_names() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cva(&[
        "train",
        "--variant",
        "xyz",
        "--data",
        path(tmp.path()),
        "--out",
        path(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("ca, ra, cva, cva-v"), "{err}");
}

#[test]
fn train_writes_a_rerunnable_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "mixed", "120", "30");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let stdout = ok(&[
        "train",
        "--data",
        path(&data),
        "--out",
        path(&a),
        "--variant",
        "cva-v",
        "--epochs",
        "2",
        "--seed",
        "5",
        "--set",
        "batch_size=16",
    ]);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("epoch")).count(), 2);
    let manifest = fs::read_to_string(a.join(MANIFEST_FILE)).unwrap();
    for key in [
        "variant = cva-v",
        "seed = 5",
        "batch_size = 16",
        "checkpoint = ",
        "test_accuracy = ",
        "started = ",
    ] {
        assert!(manifest.contains(key), "missing `{key}` in\n{manifest}");
    }
    // the manifest alone, including its data path, reproduces the run
    ok(&[
        "train",
        "--config",
        path(&a.join(MANIFEST_FILE)),
        "--out",
        path(&b),
    ]);
    assert_eq!(
        fs::read(a.join(CHECKPOINT_FILE)).unwrap(),
        fs::read(b.join(CHECKPOINT_FILE)).unwrap()
    );
}

#[test]
fn zero_learning_rate_gives_a_flat_curve() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "spatial", "64", "8");
    let stdout = ok(&[
        "train",
        "--data",
        path(&data),
        "--out",
        path(&tmp.path().join("r")),
        "--epochs",
        "3",
        "--lr",
        "0",
        "--set",
        "dropout=0",
    ]);
    let losses: Vec<f64> = stdout
        .lines()
        .filter(|l| l.starts_with("epoch"))
        .map(|l| l.split_whitespace().nth(5).unwrap().parse().unwrap())
        .collect();
    assert_eq!(losses.len(), 3);
    assert!(
        losses.iter().all(|l| (l - losses[0]).abs() < 1e-6),
        "{losses:?}"
    );
}

#[test]
fn eval_reports_and_degrades_without_taxonomy() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "channel", "1000", "100");
    let run = tmp.path().join("run");
    ok(&[
        "train",
        "--data",
        path(&data),
        "--out",
        path(&run),
        "--variant",
        "ca",
        "--epochs",
        "30",
    ]);
    let ckpt = run.join(CHECKPOINT_FILE);
    let tax = data.join("taxonomy.tsv");
    let full = ok(&[
        "eval",
        "--checkpoint",
        path(&ckpt),
        "--data",
        path(&data),
        "--taxonomy",
        path(&tax),
    ]);
    for row in [
        "accuracy,overall,1",
        "exact_match,overall,1",
        "wups,0.9,1",
        "wups,0.0,1",
    ] {
        assert!(full.lines().any(|l| l == row), "missing `{row}` in\n{full}");
    }
    assert_eq!(
        full,
        ok(&[
            "eval",
            "--checkpoint",
            path(&ckpt),
            "--data",
            path(&data),
            "--taxonomy",
            path(&tax)
        ])
    );

    let bare = ok(&["eval", "--checkpoint", path(&ckpt), "--data", path(&data)]);
    assert!(bare.contains("no taxonomy given"));
    assert!(!bare.contains("wups"));

    // the same weights read as another architecture
    let out = cva(&[
        "eval",
        "--checkpoint",
        path(&ckpt),
        "--data",
        path(&data),
        "--variant",
        "ra",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("spatial."));
}

#[test]
fn gradcheck_passes_and_catches_a_broken_rule() {
    let out = ok(&["gradcheck", "--variant", "cva", "--seeds", "2"]);
    assert!(out.contains("below"));
    assert_eq!(out, ok(&["gradcheck", "--variant", "cva", "--seeds", "2"]));
    let bad = cva(&["gradcheck", "--variant", "ca", "--inject-fault", "softmax"]);
    assert_eq!(bad.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("channel."));
    assert_eq!(
        cva(&["gradcheck", "--inject-fault", "nope"]).status.code(),
        Some(1)
    );
}

#[test]
fn ablation_table_shape() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("spatial");
    synth(&data, "spatial", "40", "10");
    let args = AblateArgs {
        data: vec![data],
        out: tmp.path().join("ablate"),
        seeds: 1,
        cfg: ConfigArgs {
            epochs: Some(1),
            ..ConfigArgs::default()
        },
    };
    let table = cmd_ablate(&args, &mut std::io::sink()).unwrap();
    let text = table.to_text();
    let labels: Vec<&str> = text
        .lines()
        .skip(1)
        .map(|l| l.split_whitespace().next().unwrap())
        .collect();
    assert_eq!(labels, ["CA", "RA", "CVA", "R-CVA"]);
    assert!(text.lines().skip(1).all(|l| l.ends_with("± 0.0000")));
    let csv = fs::read_to_string(tmp.path().join("ablate").join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.starts_with("stdev,")).count(), 4);
    assert!(csv
        .lines()
        .filter(|l| l.starts_with("stdev,"))
        .all(|l| l.ends_with(",0")));
}
