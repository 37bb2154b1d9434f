//! End-to-end tests of the binary: every subcommand, the exit-code
//! contract, output-directory refusal semantics, and byte-level
//! determinism of artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const DATA_ROOT_ENV: &str = "ICL_SEG_DATA_ROOT";

fn run_with_env(dir: &Path, args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_icl-seg"));
    cmd.current_dir(dir).env_remove(DATA_ROOT_ENV).args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn run(dir: &Path, args: &[&str]) -> Output {
    run_with_env(dir, args, &[])
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

/// A config small enough that a full sequence trains in seconds.
fn write_tiny_config(dir: &Path, seed: u64, classes: usize, sequence: &str) -> PathBuf {
    let text = format!(
        r#"seed = {seed}
method = "mib+cd"

[train]
epochs = 2
batch_size = 4

[model]
widths = [4, 8]
feature_dim = 4
norm_groups = 2

[sequence]
name = "{sequence}"

[synth]
num_classes = {classes}
num_tiles = 24
test_tiles = 8
size = 16
"#
    );
    let path = dir.join("tiny.toml");
    fs::write(&path, text).unwrap();
    path
}

/// Generate a dataset and train one run; returns (dataset dir, run dir).
fn synth_and_train(dir: &Path, config: &Path) -> (PathBuf, PathBuf) {
    let ds = dir.join("ds");
    let out = run(
        dir,
        &["synth", "--config", config.to_str().unwrap(), "--out", ds.to_str().unwrap()],
    );
    assert_eq!(code(&out), 0, "synth failed: {}", stderr(&out));
    let run_dir = dir.join("run");
    let out = run(
        dir,
        &[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--data",
            ds.to_str().unwrap(),
            "--run-dir",
            run_dir.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&out), 0, "train failed: {}", stderr(&out));
    (ds, run_dir)
}

#[test]
fn synth_is_idempotent_per_seed_and_refuses_without_force() {
    let tmp = TempDir::new().unwrap();
    let config = write_tiny_config(tmp.path(), 5, 4, "2-2");
    let ds = tmp.path().join("ds");
    let args = ["synth", "--config", "tiny.toml", "--out", "ds"];

    let out = run(tmp.path(), &args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("24 train and 8 test tiles"));
    let manifest = fs::read(ds.join("manifest.jsonl")).unwrap();
    let blob_name = {
        let first = fs::read_dir(ds.join("tiles")).unwrap().next().unwrap().unwrap();
        first.file_name()
    };
    let blob = fs::read(ds.join("tiles").join(&blob_name)).unwrap();

    // Rerun into the non-empty directory: refused, usage exit code.
    let out = run(tmp.path(), &args);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--force"), "{}", stderr(&out));

    // Forced rerun with the same seed is byte-identical.
    let out = run(tmp.path(), &["synth", "--config", "tiny.toml", "--out", "ds", "--force"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read(ds.join("manifest.jsonl")).unwrap(), manifest);
    assert_eq!(fs::read(ds.join("tiles").join(&blob_name)).unwrap(), blob);

    // A different seed changes the data.
    let out = run(
        tmp.path(),
        &["synth", "--config", "tiny.toml", "--out", "ds", "--force", "--seed", "6"],
    );
    assert_eq!(code(&out), 0);
    assert_ne!(fs::read(ds.join("tiles").join(&blob_name)).ok(), Some(blob));

    let _ = config;
}

#[test]
fn prepare_partitions_a_tile_store_and_refuses_rerun() {
    let tmp = TempDir::new().unwrap();
    write_tiny_config(tmp.path(), 7, 4, "2-2");
    let out = run(tmp.path(), &["synth", "--config", "tiny.toml", "--out", "ds"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let out = run(tmp.path(), &["prepare", "--config", "tiny.toml", "--input", "ds"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    for class in 1..=4 {
        assert!(text.contains(&format!("partition {class} (class_{class})")), "{text}");
    }
    let ratio_line = text
        .lines()
        .find(|l| l.starts_with("partition balance"))
        .expect("balance line");
    let ratio: f64 = ratio_line.rsplit('=').next().unwrap().trim().parse().unwrap();
    assert!(ratio <= 1.5, "partitions unbalanced: {ratio_line}");

    // Manifest now carries partition assignments.
    let manifest = fs::read_to_string(tmp.path().join("ds/manifest.jsonl")).unwrap();
    assert!(manifest.lines().all(|l| l.contains("\"partition\":")));

    // Repartitioning in place requires --force.
    let out = run(tmp.path(), &["prepare", "--config", "tiny.toml", "--input", "ds"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--force"), "{}", stderr(&out));
    let out = run(
        tmp.path(),
        &["prepare", "--config", "tiny.toml", "--input", "ds", "--force"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn prepare_tiles_raster_directories() {
    let tmp = TempDir::new().unwrap();
    write_tiny_config(tmp.path(), 0, 4, "2-2");
    let src = tmp.path().join("rasters");
    fs::create_dir(&src).unwrap();
    // Two single-class rasters: white = impervious_surfaces (1),
    // blue = building (2).
    for (stem, color) in [("area_a", [255u8, 255, 255]), ("area_b", [0, 0, 255])] {
        let img = image::RgbImage::from_fn(8, 8, |x, y| {
            image::Rgb([(x * 20) as u8, (y * 20) as u8, 64])
        });
        img.save(src.join(format!("{stem}_RGB.png"))).unwrap();
        let lab = image::RgbImage::from_pixel(8, 8, image::Rgb(color));
        lab.save(src.join(format!("{stem}_label.png"))).unwrap();
    }
    let out = run(
        tmp.path(),
        &[
            "prepare",
            "--config",
            "tiny.toml",
            "--input",
            "rasters",
            "--out",
            "ds",
            "--patch",
            "4",
            "--overlap",
            "1",
            "--test-rasters",
            "area_b",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("partition 1 (impervious_surfaces)"), "{}", stdout(&out));

    // area_b went to the test manifest, area_a to training.
    let train = fs::read_to_string(tmp.path().join("ds/manifest.jsonl")).unwrap();
    let test = fs::read_to_string(tmp.path().join("ds/test_manifest.jsonl")).unwrap();
    assert!(train.contains("area_a") && !train.contains("area_b"));
    assert!(test.contains("area_b") && !test.contains("area_a"));

    // An unknown test raster id is a data error.
    let out = run(
        tmp.path(),
        &[
            "prepare", "--config", "tiny.toml", "--input", "rasters", "--out", "ds2",
            "--test-rasters", "nope",
        ],
    );
    assert_eq!(code(&out), 3);
}

#[test]
fn train_writes_run_artifacts_and_summary_lines() {
    let tmp = TempDir::new().unwrap();
    let config = write_tiny_config(tmp.path(), 11, 4, "2-2");
    let (_ds, run_dir) = synth_and_train(tmp.path(), &config);

    for name in [
        "config.toml",
        "history.json",
        "losses.jsonl",
        "step0.ckpt",
        "step1.ckpt",
        "reports/summary.csv",
        "reports/curve.csv",
        "reports/step0_classwise.csv",
        "reports/step1_classwise.csv",
    ] {
        assert!(run_dir.join(name).exists(), "missing {name}");
    }
    // The snapshot is a loadable config that reproduces the run settings.
    let snapshot = fs::read_to_string(run_dir.join("config.toml")).unwrap();
    assert!(snapshot.contains("seed = 11"), "{snapshot}");
    // The loss log is line-delimited JSON records.
    let log = fs::read_to_string(run_dir.join("losses.jsonl")).unwrap();
    assert!(log.lines().count() > 0);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["kind"].is_string());
    }
    // Refuses to reuse the run directory without --force.
    let out = run(
        tmp.path(),
        &["train", "--config", "tiny.toml", "--data", "ds", "--run-dir", "run"],
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn train_resolves_data_root_from_environment() {
    let tmp = TempDir::new().unwrap();
    write_tiny_config(tmp.path(), 13, 2, "2");
    let out = run(tmp.path(), &["synth", "--config", "tiny.toml", "--out", "ds"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    // No --data flag anywhere: the environment supplies the root.
    let ds = tmp.path().join("ds");
    let out = run_with_env(
        tmp.path(),
        &["train", "--config", "tiny.toml", "--run-dir", "envrun"],
        &[(DATA_ROOT_ENV, ds.to_str().unwrap())],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(tmp.path().join("envrun/step0.ckpt").exists());

    // Without flag, env, or config root, it is a usage error.
    let out = run(tmp.path(), &["train", "--config", "tiny.toml"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn eval_is_deterministic_and_checks_class_space() {
    let tmp = TempDir::new().unwrap();
    let config = write_tiny_config(tmp.path(), 17, 4, "2-2");
    let (ds, run_dir) = synth_and_train(tmp.path(), &config);
    let ckpt = run_dir.join("step1.ckpt");

    let eval_args = |out: &str| {
        vec![
            "eval".to_string(),
            "--config".into(),
            "tiny.toml".into(),
            "--checkpoint".into(),
            ckpt.to_str().unwrap().into(),
            "--data".into(),
            ds.to_str().unwrap().into(),
            "--out".into(),
            out.into(),
        ]
    };
    let args1: Vec<String> = eval_args("ev1");
    let out = run(tmp.path(), &args1.iter().map(|s| s.as_str()).collect::<Vec<_>>());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    // The step-1 checkpoint covers all 4 foreground classes.
    assert!(stdout(&out).contains("4 foreground classes"), "{}", stdout(&out));

    let args2: Vec<String> = eval_args("ev2");
    let out = run(tmp.path(), &args2.iter().map(|s| s.as_str()).collect::<Vec<_>>());
    assert_eq!(code(&out), 0);
    assert_eq!(
        fs::read(tmp.path().join("ev1/reports/summary.csv")).unwrap(),
        fs::read(tmp.path().join("ev2/reports/summary.csv")).unwrap(),
        "evaluation must be deterministic"
    );

    // A dataset with a different label space is rejected as a data error.
    write_tiny_config(tmp.path(), 17, 2, "2");
    let out = run(tmp.path(), &["synth", "--config", "tiny.toml", "--out", "ds2"]);
    assert_eq!(code(&out), 0);
    let out = run(
        tmp.path(),
        &[
            "eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", "ds2", "--out", "ev3",
        ],
    );
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("class-space mismatch"), "{}", stderr(&out));

    // A missing checkpoint names the file.
    let out = run(
        tmp.path(),
        &["eval", "--checkpoint", "nothere.ckpt", "--data", ds.to_str().unwrap()],
    );
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("nothere.ckpt"), "{}", stderr(&out));
}

#[test]
fn report_reemits_byte_identically() {
    let tmp = TempDir::new().unwrap();
    let config = write_tiny_config(tmp.path(), 19, 4, "2-2");
    let (_ds, run_dir) = synth_and_train(tmp.path(), &config);

    let summary = fs::read(run_dir.join("reports/summary.csv")).unwrap();
    let curve = fs::read(run_dir.join("reports/curve.csv")).unwrap();
    fs::remove_dir_all(run_dir.join("reports")).unwrap();

    let out = run(tmp.path(), &["report", "--run", "run"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read(run_dir.join("reports/summary.csv")).unwrap(), summary);
    assert_eq!(fs::read(run_dir.join("reports/curve.csv")).unwrap(), curve);

    // A directory without history is a data error.
    let out = run(tmp.path(), &["report", "--run", "ds"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn config_show_and_check() {
    let tmp = TempDir::new().unwrap();
    let out = run(tmp.path(), &["config", "show"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    for needle in [
        "method = \"mib+cd\"",
        "epochs = 80",
        "lambda_kd = 1.0",
        "eta_inv_seg = 0.1",
        "rho_inv_kd = 0.1",
        "base_lr = 0.001",
    ] {
        assert!(text.contains(needle), "missing {needle} in:\n{text}");
    }

    // Validation lists every problem at once, exits with the usage code.
    fs::write(
        tmp.path().join("bad.toml"),
        "method = \"bogus\"\n[train]\nepochs = 0\nbase_lr = -1.0\n",
    )
    .unwrap();
    let out = run(tmp.path(), &["config", "check", "--config", "bad.toml"]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("bogus"), "{err}");
    assert!(err.contains("epochs"), "{err}");
    assert!(err.contains("base_lr"), "{err}");

    // Malformed TOML is also a usage error.
    fs::write(tmp.path().join("broken.toml"), "not toml [").unwrap();
    let out = run(tmp.path(), &["config", "check", "--config", "broken.toml"]);
    assert_eq!(code(&out), 2);

    // Unknown subcommands use the standard usage exit code.
    let out = run(tmp.path(), &["frobnicate"]);
    assert_eq!(code(&out), 2);
}
