//! Command-line interface: `generate`, `train`, `validate`, and `ablate`
//! subcommands over a single TOML experiment configuration.
//!
//! Every command is deterministic given its configuration: outputs are
//! byte-identical across reruns except for fields that are explicitly
//! wall-clock measurements (the `wall_ms` entries inside `metrics.jsonl`
//! and the timings inside validation reports).  Each command persists the
//! exact resolved configuration next to its artifacts, so a result
//! directory is replayable on its own.
//!
//! Exit codes follow a scriptable contract: `0` success, `1` validation
//! failure, `2` usage or protocol error, `3` data error.  The binary's own
//! argument parser reports usage problems with exit code `2` as well.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::data::{generate, load_dataset_dir, lodo_splits, write_dataset_dir, DomainDataset};
use crate::error::{Error, Result};
use crate::sensitivity::write_sensitivity_csv;
use crate::trainer::{ablation_suite, train, write_ablation_csv, write_metrics_jsonl};
use crate::validate::run_all;

/// Number of consecutive seeds the `ablate` command covers, mirroring the
/// repeated-runs convention of the comparison protocol.
pub const ABLATE_SEEDS: u64 = 5;

/// Top-level argument structure for the `domainsense` binary.
#[derive(Debug, Parser)]
#[command(
    name = "domainsense",
    about = "Per-parameter sensitivity analysis and domain-sensitive regularization experiments",
    version
)]
pub struct Cli {
    /// Which experiment stage to run.
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Experiment configuration file; built-in defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Output root; overrides `[output] dir` and `DOMAINSENSE_OUT`.
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Seed override: sets the training seed and offsets the
    /// model-initialization and data-generation seeds by the same amount.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// The four experiment stages.
#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic domain CSVs plus manifest.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train one leave-one-domain-out split and persist its artifacts.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Index of the domain to hold out.
        #[arg(long, default_value_t = 0)]
        split: usize,
    },
    /// Run the oracle validation suite and report per-check results.
    Validate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the ablation suite over all splits and five consecutive seeds.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
    },
}

/// Executes a parsed command line and returns the process exit code.
///
/// Errors bubble up for the caller (`main`) to print and convert via
/// [`Error::exit_code`]; the `Ok` code distinguishes success (`0`) from a
/// failed validation run (`1`).
pub fn run(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Generate { common } => cmd_generate(common),
        Command::Train { common, split } => cmd_train(common, *split),
        Command::Validate { common } => cmd_validate(common),
        Command::Ablate { common } => cmd_ablate(common),
    }
}

/// Loads the configuration named by `--config` (or the defaults), without
/// applying any seed override.
fn load_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    match &common.config {
        Some(path) => ExperimentConfig::load(path),
        None => {
            let config = ExperimentConfig::default();
            config.check()?;
            Ok(config)
        }
    }
}

/// Produces the training domains from whichever dataset source the
/// configuration names.
fn load_domains(config: &ExperimentConfig) -> Result<Vec<DomainDataset>> {
    match &config.dataset.csv_dir {
        Some(dir) => load_dataset_dir(dir),
        None => generate(&config.dataset.synthetic),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("creating {}: {}", dir.display(), e),
        ))
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("writing {}: {}", path.display(), e),
        ))
    })
}

fn persist_config(dir: &Path, config: &ExperimentConfig) -> Result<()> {
    write_text(&dir.join("config.toml"), &config.to_toml_string()?)
}

fn cmd_generate(common: &CommonArgs) -> Result<i32> {
    let mut config = load_config(common)?;
    if let Some(seed) = common.seed {
        config.apply_seed(seed);
    }
    let out_root = config.resolve_out(common.out.as_deref());
    let dir = out_root.join("dataset");
    ensure_dir(&dir)?;

    let domains = generate(&config.dataset.synthetic)?;
    let paths = write_dataset_dir(&dir, &config.dataset.synthetic, &domains)?;
    persist_config(&dir, &config)?;
    for p in &paths {
        println!("wrote {}", p.display());
    }
    Ok(0)
}

fn cmd_train(common: &CommonArgs, split: usize) -> Result<i32> {
    let mut config = load_config(common)?;
    if let Some(seed) = common.seed {
        config.apply_seed(seed);
    }
    let out_root = config.resolve_out(common.out.as_deref());

    let domains = load_domains(&config)?;
    let splits = lodo_splits(&domains)?;
    if split >= splits.len() {
        return Err(Error::Protocol(format!(
            "--split {} is out of range: {} domains give splits 0..{}",
            split,
            domains.len(),
            splits.len() - 1
        )));
    }
    let (train_domains, heldout) = &splits[split];

    let run_dir = out_root.join(format!("train-split{}-seed{}", split, config.train.seed));
    ensure_dir(&run_dir)?;
    persist_config(&run_dir, &config)?;

    let (params, metrics) = train(&config.model, &config.train, train_domains, heldout)?;

    let mut jsonl = Vec::new();
    write_metrics_jsonl(&metrics, &mut jsonl)?;
    write_text(&run_dir.join("metrics.jsonl"), &String::from_utf8(jsonl).expect("json is utf-8"))?;

    for snap in &metrics.snapshots {
        let mut csv = Vec::new();
        write_sensitivity_csv(&snap.report, &mut csv)?;
        let name = format!("coefficients-epoch{:04}-step{:06}.csv", snap.epoch, snap.step);
        write_text(&run_dir.join(name), &String::from_utf8(csv).expect("csv is utf-8"))?;
    }

    let mut dump = String::from("segment,index,value\n");
    for seg in params.registry() {
        for i in 0..seg.len {
            dump.push_str(&format!(
                "{},{},{:.16e}\n",
                seg.name,
                i,
                params.values()[seg.offset + i]
            ));
        }
    }
    write_text(&run_dir.join("params.csv"), &dump)?;

    let final_metric = &metrics.final_heldout;
    let mut summary = String::new();
    summary.push_str(&format!("mode = {}\n", config.train.mode_label()));
    summary.push_str(&format!("lambda = {:e}\n", config.train.lambda));
    summary.push_str(&format!("t_update = {}\n", config.train.t_update));
    summary.push_str(&format!("learning_rate = {}\n", config.train.learning_rate));
    summary.push_str(&format!("epochs = {}\n", config.train.epochs));
    summary.push_str(&format!("batch_size = {}\n", config.train.batch_size));
    summary.push_str(&format!("seed = {}\n", config.train.seed));
    summary.push_str(&format!("split = {}\n", split));
    summary.push_str(&format!("heldout_domain = {}\n", final_metric.id));
    summary.push_str(&format!("heldout_loss = {:.16e}\n", final_metric.loss));
    if let Some(acc) = final_metric.accuracy {
        summary.push_str(&format!("heldout_accuracy = {:.16e}\n", acc));
    }
    write_text(&run_dir.join("summary.txt"), &summary)?;

    aggregate_split_runs(&out_root, split)?;

    println!(
        "split {} heldout {} loss {:.6} -> {}",
        split,
        final_metric.id,
        final_metric.loss,
        run_dir.display()
    );
    Ok(0)
}

/// Pools every completed run of one split under the output root into a
/// mean-and-spread report, so repeated seeds aggregate the way the
/// comparison protocol expects.
fn aggregate_split_runs(out_root: &Path, split: usize) -> Result<()> {
    let prefix = format!("train-split{}-seed", split);
    let mut losses: Vec<(String, f64)> = Vec::new();
    for entry in fs::read_dir(out_root)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if !name.starts_with(&prefix) {
            continue;
        }
        let summary = entry.path().join("summary.txt");
        let Ok(text) = fs::read_to_string(&summary) else {
            continue;
        };
        for line in text.lines() {
            if let Some(value) = line.strip_prefix("heldout_loss = ") {
                if let Ok(loss) = value.trim().parse::<f64>() {
                    losses.push((name.clone(), loss));
                }
                break;
            }
        }
    }
    if losses.is_empty() {
        return Ok(());
    }
    losses.sort_by(|a, b| a.0.cmp(&b.0));
    let n = losses.len() as f64;
    let mean = losses.iter().map(|(_, l)| l).sum::<f64>() / n;
    let std = if losses.len() > 1 {
        (losses.iter().map(|(_, l)| (l - mean) * (l - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut report = format!("runs = {}\n", losses.len());
    report.push_str(&format!("heldout_loss_mean = {:.6e}\n", mean));
    report.push_str(&format!("heldout_loss_std = {:.6e}\n", std));
    for (name, loss) in &losses {
        report.push_str(&format!("{} = {:.6e}\n", name, loss));
    }
    write_text(&out_root.join(format!("aggregate-split{}.txt", split)), &report)
}

fn cmd_validate(common: &CommonArgs) -> Result<i32> {
    let mut config = load_config(common)?;
    if let Some(seed) = common.seed {
        config.validation.seed = seed;
    }
    let out_root = config.resolve_out(common.out.as_deref());
    let dir = out_root.join("validation");
    ensure_dir(&dir)?;
    persist_config(&dir, &config)?;

    let report = run_all(&config.validation);
    let text = report.render_text();
    print!("{}", text);
    write_text(&dir.join("report.txt"), &text)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Contract(format!("serializing validation report: {}", e)))?;
    write_text(&dir.join("report.json"), &json)?;

    if report.all_passed() {
        println!("all {} checks passed", report.checks.len());
        Ok(0)
    } else {
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        eprintln!("failed checks: {}", failed.join(", "));
        Ok(1)
    }
}

fn cmd_ablate(common: &CommonArgs) -> Result<i32> {
    let config = load_config(common)?;
    let out_root = config.resolve_out(common.out.as_deref());
    let dir = out_root.join("ablate");
    ensure_dir(&dir)?;
    persist_config(&dir, &config)?;

    let base_seed = common.seed.unwrap_or(config.train.seed);
    let mut combined = String::from("run_id,mode,lambda,t_update,seed,split,heldout_metric\n");
    // Core-variant sums for the qualitative summary, keyed by mode label.
    let mut mode_totals: Vec<(&str, f64, usize)> =
        vec![("full", 0.0, 0), ("uniform", 0.0, 0), ("static", 0.0, 0), ("erm", 0.0, 0)];

    for offset in 0..ABLATE_SEEDS {
        let mut seeded = config.clone();
        seeded.apply_seed(base_seed + offset);
        let domains = load_domains(&seeded)?;
        let splits = lodo_splits(&domains)?;
        for (split, (train_domains, heldout)) in splits.iter().enumerate() {
            let rows = ablation_suite(&seeded.model, &seeded.train, train_domains, heldout)?;
            let table: Vec<_> = rows.iter().map(|(row, _)| row.clone()).collect();
            let mut csv = Vec::new();
            write_ablation_csv(&table, &mut csv)?;
            write_text(
                &dir.join(format!("seed{}-split{}.csv", seeded.train.seed, split)),
                &String::from_utf8(csv).expect("csv is utf-8"),
            )?;
            for row in &table {
                combined.push_str(&format!(
                    "{},{},{:e},{},{},{},{:.16e}\n",
                    row.run_id, row.mode, row.lambda, row.t_update, row.seed, split, row.heldout_metric
                ));
                for entry in mode_totals.iter_mut() {
                    if entry.0 == row.run_id {
                        entry.1 += row.heldout_metric;
                        entry.2 += 1;
                    }
                }
            }
        }
    }
    write_text(&dir.join("summary.csv"), &combined)?;

    let mut summary = String::new();
    for (label, total, count) in &mode_totals {
        if *count > 0 {
            summary.push_str(&format!(
                "mean_heldout_{} = {:.6e}\n",
                label,
                total / *count as f64
            ));
        }
    }
    let mean_of = |label: &str| {
        mode_totals
            .iter()
            .find(|(l, _, c)| *l == label && *c > 0)
            .map(|(_, t, c)| t / *c as f64)
    };
    if let (Some(full), Some(uniform), Some(erm)) =
        (mean_of("full"), mean_of("uniform"), mean_of("erm"))
    {
        let ordered = full <= uniform && uniform <= erm;
        summary.push_str(&format!(
            "ordering_full_uniform_erm = {}\n",
            if ordered { "satisfied" } else { "violated" }
        ));
    }
    write_text(&dir.join("summary.txt"), &summary)?;
    print!("{}", summary);
    println!("wrote {}", dir.join("summary.csv").display());
    Ok(0)
}
