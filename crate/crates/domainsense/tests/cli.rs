//! Black-box tests of the shipped binary: exit codes, artifact layout,
//! determinism, and the output-root resolution order.
//!
//! Each test drives the compiled executable in a temporary directory with
//! a small configuration so every invocation stays fast.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

/// A small three-domain experiment: enough structure to exercise every
/// artifact without noticeable runtime.
const SMALL_CONFIG: &str = r#"
[dataset.synthetic]
domains = 3
samples_per_domain = 40
invariant_dim = 2
spurious_dim = 2
spurious_scales = [1.0, 1.0, 1.0]
rotation_seeds = [101, 102, 103]
label_leak = [3.0, -1.5, 0.0]
label_weights = [1.0, -1.0]
label_noise_std = 0.5
master_seed = 7

[model]
layers = [4, 4, 1]
activation = "tanh"
head = "mean-squared-error"
init_seed = 100

[train]
lambda = 0.01
t_update = 2
learning_rate = 0.01
epochs = 3
batch_size = 8
"#;

fn workspace() -> (TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    fs::write(&config, SMALL_CONFIG).unwrap();
    (dir, config)
}

fn run_bin(args: &[&str], extra_env: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_domainsense"));
    // Isolate from any ambient output-root setting.
    cmd.env_remove("DOMAINSENSE_OUT");
    for (key, value) in extra_env {
        cmd.env(key, value);
    }
    cmd.args(args).output().expect("binary runs")
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("reading {}: {}", path.display(), e))
}

#[test]
fn generate_is_idempotent_and_seed_sensitive() {
    let (dir, config) = workspace();
    let out = dir.path().join("out");
    let cs = config.to_str().unwrap();
    let os = out.to_str().unwrap();

    let status = run_bin(&["generate", "--config", cs, "--out", os], &[]);
    assert_eq!(status.status.code(), Some(0));
    let dataset = out.join("dataset");
    assert!(dataset.join("manifest.json").is_file());
    assert!(dataset.join("config.toml").is_file());
    let first = read(&dataset.join("domain_d0.csv"));
    assert_eq!(first.lines().count(), 41, "header plus one row per sample");

    // Re-running over the same directory reproduces the bytes exactly.
    run_bin(&["generate", "--config", cs, "--out", os], &[]);
    assert_eq!(read(&dataset.join("domain_d0.csv")), first);

    // A different seed produces a different dataset.
    run_bin(&["generate", "--config", cs, "--out", os, "--seed", "5"], &[]);
    assert_ne!(read(&dataset.join("domain_d0.csv")), first);
}

#[test]
fn train_writes_a_self_describing_run_directory() {
    let (dir, config) = workspace();
    let out = dir.path().join("out");
    let cs = config.to_str().unwrap();
    let os = out.to_str().unwrap();

    let status = run_bin(&["train", "--config", cs, "--out", os, "--split", "1"], &[]);
    assert_eq!(status.status.code(), Some(0));

    let run_dir = out.join("train-split1-seed0");
    let summary = read(&run_dir.join("summary.txt"));
    assert!(summary.contains("mode = dynamic"));
    assert!(summary.contains("split = 1"));
    assert!(summary.contains("heldout_domain = d1"));
    assert!(summary.contains("heldout_loss = "));

    // The resolved configuration rides along and reloads cleanly.
    let persisted = read(&run_dir.join("config.toml"));
    assert!(persisted.contains("lambda = 0.01"));

    // One JSON object per epoch, final parameters, coefficient snapshots.
    let jsonl = read(&run_dir.join("metrics.jsonl"));
    assert_eq!(jsonl.lines().count(), 3);
    for line in jsonl.lines() {
        let record: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(record["epoch"].is_number());
        assert!(record["heldout"]["loss"].is_number());
    }
    let params = read(&run_dir.join("params.csv"));
    assert!(params.starts_with("segment,index,value\n"));
    // 4*4 + 4 + 4*1 + 1 = 25 parameters.
    assert_eq!(params.lines().count(), 26);
    let snapshots: Vec<_> = fs::read_dir(&run_dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("coefficients-"))
        .collect();
    assert_eq!(snapshots.len(), 2, "epochs 0 and 2 refresh with t_update=2");

    // Deterministic artifacts: rerunning reproduces parameters bit-for-bit.
    run_bin(&["train", "--config", cs, "--out", os, "--split", "1"], &[]);
    assert_eq!(read(&run_dir.join("params.csv")), params);
    assert_eq!(read(&run_dir.join("summary.txt")), summary);
}

#[test]
fn zero_strength_runs_are_labeled_as_the_baseline() {
    let (dir, config) = workspace();
    let out = dir.path().join("out");
    let zeroed = SMALL_CONFIG.replace("lambda = 0.01", "lambda = 0.0");
    fs::write(&config, zeroed).unwrap();
    let status = run_bin(
        &["train", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()],
        &[],
    );
    assert_eq!(status.status.code(), Some(0));
    let summary = read(&out.join("train-split0-seed0").join("summary.txt"));
    assert!(summary.contains("mode = erm"), "summary was:\n{}", summary);
}

#[test]
fn repeated_seeds_aggregate_into_mean_and_spread() {
    let (dir, config) = workspace();
    let out = dir.path().join("out");
    let cs = config.to_str().unwrap();
    let os = out.to_str().unwrap();
    for seed in ["1", "2", "3"] {
        let status = run_bin(&["train", "--config", cs, "--out", os, "--seed", seed], &[]);
        assert_eq!(status.status.code(), Some(0));
    }
    let aggregate = read(&out.join("aggregate-split0.txt"));
    assert!(aggregate.contains("runs = 3"));
    assert!(aggregate.contains("heldout_loss_mean = "));
    assert!(aggregate.contains("heldout_loss_std = "));
    assert!(aggregate.contains("train-split0-seed1 = "));
    assert!(aggregate.contains("train-split0-seed3 = "));
}

#[test]
fn split_out_of_range_exits_with_usage_code() {
    let (dir, config) = workspace();
    let out = dir.path().join("out");
    let status = run_bin(
        &[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--split",
            "7",
        ],
        &[],
    );
    assert_eq!(status.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&status.stderr).contains("out of range"));
}

#[test]
fn missing_dataset_directory_exits_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    fs::write(&config, "[dataset]\ncsv_dir = \"/nonexistent/dataset\"\n").unwrap();
    let status = run_bin(
        &["train", "--config", config.to_str().unwrap(), "--out", dir.path().to_str().unwrap()],
        &[],
    );
    assert_eq!(status.status.code(), Some(3));
}

#[test]
fn malformed_config_exits_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    fs::write(&config, "[train\nlambda = ").unwrap();
    let status = run_bin(&["generate", "--config", config.to_str().unwrap()], &[]);
    assert_eq!(status.status.code(), Some(3));
}

#[test]
fn injected_fault_turns_validation_red() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    fs::write(
        &config,
        "[validation]\nmc_samples = 2000\ninject_gradient_fault = true\n",
    )
    .unwrap();
    let status = run_bin(
        &[
            "validate",
            "--config",
            config.to_str().unwrap(),
            "--out",
            dir.path().join("out").to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(status.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&status.stdout);
    assert!(stdout.contains("FAIL gradient_fd"), "stdout was:\n{}", stdout);
}

#[test]
fn output_root_falls_back_to_the_environment() {
    let (dir, config) = workspace();
    let env_root = dir.path().join("from-env");
    let status = run_bin(
        &["generate", "--config", config.to_str().unwrap()],
        &[("DOMAINSENSE_OUT", env_root.as_path())],
    );
    assert_eq!(status.status.code(), Some(0));
    assert!(env_root.join("dataset").join("manifest.json").is_file());
}

#[test]
fn ablate_covers_all_splits_seeds_and_variants() {
    let (dir, config) = workspace();
    let out = dir.path().join("out");
    let status = run_bin(
        &[
            "ablate",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "9",
        ],
        &[],
    );
    assert_eq!(status.status.code(), Some(0));

    let table = read(&out.join("ablate").join("summary.csv"));
    let mut lines = table.lines();
    assert_eq!(
        lines.next().unwrap(),
        "run_id,mode,lambda,t_update,seed,split,heldout_metric"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    // 5 seeds x 3 splits x 10 deduplicated variants.
    assert_eq!(rows.len(), 150);
    for run_id in ["full", "erm", "uniform", "static"] {
        assert!(rows.iter().any(|r| r[0] == run_id), "missing variant {}", run_id);
    }
    for seed in 9..14u64 {
        let s = seed.to_string();
        assert!(rows.iter().any(|r| r[4] == s), "missing seed {}", seed);
        for split in 0..3 {
            assert!(
                out.join("ablate").join(format!("seed{}-split{}.csv", seed, split)).is_file(),
                "missing per-run table for seed {} split {}",
                seed,
                split
            );
        }
    }
    for split in ["0", "1", "2"] {
        assert!(rows.iter().any(|r| r[5] == split), "missing split {}", split);
    }
    let erm_rows: Vec<_> = rows.iter().filter(|r| r[0] == "erm").collect();
    assert!(erm_rows.iter().all(|r| r[1] == "erm" && r[2] == "0e0"));

    let summary = read(&out.join("ablate").join("summary.txt"));
    assert!(summary.contains("mean_heldout_full = "));
    assert!(summary.contains("mean_heldout_erm = "));
    assert!(summary.contains("ordering_full_uniform_erm = "));
}
