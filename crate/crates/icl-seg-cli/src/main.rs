//! Command-line front end: synthetic data generation, dataset
//! preparation, sequence training, checkpoint evaluation, and report
//! emission.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 runtime (training/checkpoint/IO) error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use icl_seg::checkpoint::load_checkpoint;
use icl_seg::config::ExperimentConfig;
use icl_seg::metrics::{emit_report, MetricsReport};
use icl_seg::raster::{
    load_potsdam_layout, make_task_sequence, partition_disjoint, potsdam_label_space,
    remap_to_set, tile_raster, write_dataset, DatasetMeta, LabelSpace, StoredDataset, Tile,
    TileRecord,
};
use icl_seg::segnet::SegNetConfig;
use icl_seg::trainer::{
    eval_confusion, partition_rng, run_sequence, ClassLayout, RunData, TrainConfig,
};
use icl_seg::{Error, Result};

/// Environment variable overriding the dataset root (below `--data`).
const DATA_ROOT_ENV: &str = "ICL_SEG_DATA_ROOT";

#[derive(Parser)]
#[command(
    name = "icl-seg",
    version,
    about = "Incremental-class learning for semantic segmentation",
    after_help = "Data root resolution: --data flag, then $ICL_SEG_DATA_ROOT, then data.root in the config."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (TOML); built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override the config's seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Override the method preset (ft, ft-unbiased-cd, mib, mib+cd,
    /// mib+seg-only, mib+kd-only, offline).
    #[arg(long, global = true, value_name = "NAME")]
    method: Option<String>,

    /// Override the class sequence (e.g. "2-2", "3-2-1", "5S").
    #[arg(long, global = true, value_name = "NAME")]
    sequence: Option<String>,

    /// Overwrite non-empty output directories.
    #[arg(long, global = true)]
    force: bool,

    /// Force deterministic mode: stable run names, no wall-clock anywhere.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic tile dataset from the config's [synth] section.
    Synth {
        /// Dataset directory to write (falls back to the data root).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Tile source rasters (or partition an existing tile store) into a
    /// training-ready dataset with disjoint single-class partitions.
    Prepare {
        /// Source: an aerial-benchmark raster directory, or a tile store.
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
        /// Dataset directory to write (tile stores update in place).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Patch size for raster tiling.
        #[arg(long, default_value_t = 512, value_name = "N")]
        patch: usize,
        /// Overlap between adjacent patches.
        #[arg(long, default_value_t = 12, value_name = "N")]
        overlap: usize,
        /// Raster ids reserved for the test split (comma-separated).
        #[arg(long, value_delimiter = ',', value_name = "IDS")]
        test_rasters: Vec<String>,
    },
    /// Train the configured method over the class sequence.
    Train {
        /// Dataset directory (falls back to the data root).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Run directory (default: <run_root>/<method>_<sequence>_seed<N>).
        #[arg(long, value_name = "DIR")]
        run_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset's test manifest.
    Eval {
        /// Checkpoint file (step<t>.ckpt from a training run).
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Dataset directory (falls back to the data root).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Report directory (default: <run_root>/eval_step<t>).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Re-emit report tables from a run's saved history.
    Report {
        /// Run directory containing history.json.
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
    },
    /// Inspect or validate configuration.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Subcommand)]
enum ConfigAction {
    /// Print the resolved configuration (built-in defaults when no
    /// --config is given).
    Show,
    /// Validate the configuration, listing every problem at once.
    Check,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) => 2,
        Error::Data(_) | Error::Json(_) | Error::Image(_) => 3,
        _ => 4,
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Synth { out } => cmd_synth(&cfg, out.as_deref(), cli.force),
        Command::Prepare {
            input,
            out,
            patch,
            overlap,
            test_rasters,
        } => cmd_prepare(
            &cfg,
            input,
            out.as_deref(),
            *patch,
            *overlap,
            test_rasters,
            cli.force,
        ),
        Command::Train { data, run_dir } => {
            cmd_train(&cfg, data.as_deref(), run_dir.as_deref(), cli.force)
        }
        Command::Eval {
            checkpoint,
            data,
            out,
        } => cmd_eval(&cfg, checkpoint, data.as_deref(), out.as_deref(), cli.force),
        Command::Report { run } => cmd_report(run),
        Command::Config { action } => match action {
            ConfigAction::Show => {
                print!("{}", cfg.to_toml_string());
                Ok(())
            }
            ConfigAction::Check => {
                println!("configuration ok");
                Ok(())
            }
        },
    }
}

/// Load the config file (or defaults) and fold in the CLI overrides.
fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(method) = &cli.method {
        cfg.method = method.clone();
    }
    if let Some(sequence) = &cli.sequence {
        cfg.sequence.name = sequence.clone();
        cfg.sequence.explicit = None;
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Flag, then environment, then config file.
fn resolve_data_root(flag: Option<&Path>, cfg: &ExperimentConfig) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p.to_path_buf());
    }
    if let Ok(v) = std::env::var(DATA_ROOT_ENV) {
        if !v.is_empty() {
            return Ok(PathBuf::from(v));
        }
    }
    cfg.data.root.clone().ok_or_else(|| {
        Error::invalid(format!(
            "no dataset directory: pass --data/--out, set ${DATA_ROOT_ENV}, \
             or set data.root in the config"
        ))
    })
}

/// Create `dir`, refusing to reuse a non-empty one without --force.
fn ensure_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && std::fs::read_dir(dir)?.next().is_some() && !force {
        return Err(Error::invalid(format!(
            "output directory {} is not empty; pass --force to overwrite",
            dir.display()
        )));
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Every artifact directory carries the fully resolved configuration.
fn write_snapshot(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::write(dir.join("config.toml"), cfg.to_toml_string())?;
    Ok(())
}

fn sequence_label(cfg: &ExperimentConfig) -> String {
    if cfg.sequence.explicit.is_some() {
        "explicit".to_string()
    } else {
        cfg.sequence.name.clone()
    }
}

/// Deterministic runs get a stable name; otherwise prefix with seconds
/// since the epoch so successive runs never collide.
fn run_dir_name(cfg: &ExperimentConfig, stem: &str) -> String {
    if cfg.deterministic {
        stem.to_string()
    } else {
        let now = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        format!("{now}_{stem}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn cmd_synth(cfg: &ExperimentConfig, out: Option<&Path>, force: bool) -> Result<()> {
    let out = resolve_data_root(out, cfg)?;
    let labels = LabelSpace::generic(cfg.synth.num_classes);
    let total = cfg.synth.num_tiles + cfg.synth.test_tiles;
    let synth = cfg.synth.to_synth_config(total);
    let tiles = icl_seg::raster::generate_synthetic_dataset(cfg.seed, &synth, &labels)?;
    let (train, test) = tiles.split_at(cfg.synth.num_tiles);
    let meta = DatasetMeta {
        version: 1,
        labels,
        channels: cfg.synth.channels,
        patch: cfg.synth.size,
        seed: cfg.seed,
    };
    ensure_output_dir(&out, force)?;
    write_dataset(&out, &meta, train, test)?;
    write_snapshot(&out, cfg)?;
    println!(
        "synth: wrote {} train and {} test tiles ({} classes, {}x{}) to {}",
        train.len(),
        test.len(),
        cfg.synth.num_classes,
        cfg.synth.size,
        cfg.synth.size,
        out.display()
    );
    Ok(())
}

fn cmd_prepare(
    cfg: &ExperimentConfig,
    input: &Path,
    out: Option<&Path>,
    patch: usize,
    overlap: usize,
    test_rasters: &[String],
    force: bool,
) -> Result<()> {
    if input.join("meta.json").exists() {
        prepare_store(cfg, input, out, force)
    } else {
        prepare_rasters(cfg, input, out, patch, overlap, test_rasters, force)
    }
}

/// Assign partitions to an existing tile store, in place by default.
fn prepare_store(
    cfg: &ExperimentConfig,
    input: &Path,
    out: Option<&Path>,
    force: bool,
) -> Result<()> {
    let ds = StoredDataset::open(input)?;
    let already = ds.train.iter().any(|r| r.partition.is_some());
    let out = out.unwrap_or(input);
    if out == input {
        if already && !force {
            return Err(Error::invalid(format!(
                "{} is already partitioned; pass --force to repartition",
                input.display()
            )));
        }
    } else {
        ensure_output_dir(out, force)?;
    }
    let train = ds.load(&ds.train)?;
    let test = ds.load(&ds.test)?;
    let (kept, dropped, counts) = partition_tiles(cfg.seed, train, &ds.meta.labels)?;
    write_dataset(out, &ds.meta, &kept, &test)?;
    write_snapshot(out, cfg)?;
    print_partitions(&counts, &ds.meta.labels, dropped);
    println!("prepare: dataset ready at {}", out.display());
    Ok(())
}

/// Tile a raster directory and write a fresh partitioned dataset.
fn prepare_rasters(
    cfg: &ExperimentConfig,
    input: &Path,
    out: Option<&Path>,
    patch: usize,
    overlap: usize,
    test_rasters: &[String],
    force: bool,
) -> Result<()> {
    let out = resolve_data_root(out, cfg)?;
    let rasters = load_potsdam_layout(input)?;
    let labels = potsdam_label_space();
    let channels = rasters[0].channels();
    for r in &rasters {
        if r.channels() != channels {
            return Err(Error::data(format!(
                "raster {} has {} channels, {} has {channels}; all must match",
                r.id,
                r.channels(),
                rasters[0].id
            )));
        }
    }
    for id in test_rasters {
        if !rasters.iter().any(|r| &r.id == id) {
            return Err(Error::data(format!("test raster {id} not found in input")));
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for r in &rasters {
        let tiles = tile_raster(r, patch, overlap)?;
        if test_rasters.contains(&r.id) {
            test.extend(tiles);
        } else {
            train.extend(tiles);
        }
    }
    let (kept, dropped, counts) = partition_tiles(cfg.seed, train, &labels)?;
    let meta = DatasetMeta {
        version: 1,
        labels,
        channels,
        patch,
        seed: cfg.seed,
    };
    ensure_output_dir(&out, force)?;
    write_dataset(&out, &meta, &kept, &test)?;
    write_snapshot(&out, cfg)?;
    print_partitions(&counts, &meta.labels, dropped);
    println!("prepare: dataset ready at {}", out.display());
    Ok(())
}

/// Run the disjoint-partition protocol with the same RNG stream training
/// will use, so the printed counts describe the actual split.
fn partition_tiles(
    seed: u64,
    tiles: Vec<Tile>,
    labels: &LabelSpace,
) -> Result<(Vec<Tile>, usize, BTreeMap<u8, usize>)> {
    let records: Vec<TileRecord> = tiles.iter().map(|t| t.record.clone()).collect();
    let mut rng = partition_rng(seed);
    let partitions = partition_disjoint(&records, labels, &mut rng)?;
    let counts: BTreeMap<u8, usize> = partitions.iter().map(|(c, v)| (*c, v.len())).collect();
    let mut assigned: BTreeMap<String, TileRecord> = partitions
        .into_values()
        .flatten()
        .map(|r| (r.id.clone(), r))
        .collect();
    let mut kept = Vec::new();
    let mut dropped = 0usize;
    for tile in tiles {
        match assigned.remove(&tile.record.id) {
            Some(record) => kept.push(Tile {
                record,
                pixels: tile.pixels,
                labels: tile.labels,
            }),
            None => dropped += 1,
        }
    }
    Ok((kept, dropped, counts))
}

fn print_partitions(counts: &BTreeMap<u8, usize>, labels: &LabelSpace, dropped: usize) {
    for (&class, &n) in counts {
        let name = labels.name_of(class).unwrap_or("?");
        println!("partition {class} ({name}): {n} tiles");
    }
    if counts.len() > 1 {
        let max = counts.values().max().copied().unwrap_or(0);
        let min = counts.values().min().copied().unwrap_or(0);
        if min > 0 {
            println!("partition balance max/min = {:.2}", max as f64 / min as f64);
        }
    }
    if dropped > 0 {
        println!("dropped {dropped} background-only tiles");
    }
}

fn cmd_train(
    cfg: &ExperimentConfig,
    data: Option<&Path>,
    run_dir: Option<&Path>,
    force: bool,
) -> Result<()> {
    let root = resolve_data_root(data, cfg)?;
    let ds = StoredDataset::open(&root)?;
    let train = ds.load(&ds.train)?;
    let test = ds.load(&ds.test)?;
    let plan = cfg.sequence.plan()?;
    let seq = make_task_sequence(&plan, &ds.meta.labels)?;
    let (tcfg, offline) = TrainConfig::from_experiment(cfg)?;
    let base = SegNetConfig {
        in_channels: ds.meta.channels,
        num_classes: 2,
        widths: cfg.model.widths.clone(),
        blocks_per_stage: cfg.model.blocks_per_stage,
        feature_dim: cfg.model.feature_dim,
        norm_groups: cfg.model.norm_groups,
        seed: cfg.seed,
    };

    let run_dir = match run_dir {
        Some(p) => p.to_path_buf(),
        None => {
            let stem = format!("{}_{}_seed{}", cfg.method, sequence_label(cfg), cfg.seed);
            cfg.run_root.join(run_dir_name(cfg, &stem))
        }
    };
    ensure_output_dir(&run_dir, force)?;
    write_snapshot(&run_dir, cfg)?;

    let data = RunData {
        labels: &ds.meta.labels,
        train: &train,
        test: &test,
    };
    let outcome = run_sequence(&data, &seq, &base, &tcfg, offline, Some(&run_dir))?;

    let mut history = serde_json::to_string_pretty(&outcome.reports)?;
    history.push('\n');
    std::fs::write(run_dir.join("history.json"), history)?;
    emit_report(&run_dir.join("reports"), &outcome.reports)?;

    for (report, summary) in outcome.reports.iter().zip(&outcome.summaries) {
        println!(
            "step {}: test micro_f1 {} macro_f1 {} (best val {:.4} at epoch {})",
            report.step,
            fmt_opt(report.micro_f1),
            fmt_opt(report.macro_f1),
            summary.best_val_micro,
            summary.best_epoch
        );
    }
    println!("artifacts: {}", run_dir.display());
    Ok(())
}

fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    data: Option<&Path>,
    out: Option<&Path>,
    force: bool,
) -> Result<()> {
    if !checkpoint.is_file() {
        return Err(Error::data(format!(
            "checkpoint file not found: {}",
            checkpoint.display()
        )));
    }
    let (net, meta) = load_checkpoint(checkpoint)?;
    let root = resolve_data_root(data, cfg)?;
    let ds = StoredDataset::open(&root)?;
    if ds.meta.labels != meta.labels {
        return Err(Error::data(format!(
            "class-space mismatch: checkpoint was trained on {:?}, dataset has {:?}",
            meta.labels, ds.meta.labels
        )));
    }
    if ds.meta.channels != net.config().in_channels {
        return Err(Error::data(format!(
            "channel mismatch: checkpoint expects {} input channels, dataset has {}",
            net.config().in_channels,
            ds.meta.channels
        )));
    }
    if ds.test.is_empty() {
        return Err(Error::data(format!(
            "dataset {} has no test manifest",
            root.display()
        )));
    }
    let layout = ClassLayout::from_channels(meta.channel_classes.clone())?;
    let tiles: Vec<Tile> = ds
        .load(&ds.test)?
        .into_iter()
        .map(|t| Tile {
            labels: remap_to_set(&t.labels, layout.channel_classes(), cfg.data.ignore_index),
            ..t
        })
        .collect();
    let cm = eval_confusion(
        &net,
        &tiles,
        &layout,
        meta.labels.num_classes(),
        cfg.data.ignore_index,
    )?;
    let report = MetricsReport::from_matrix(meta.step, &cm, &meta.labels, layout.channel_classes())?;

    let out = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let stem = format!("eval_step{}_seed{}", meta.step, cfg.seed);
            cfg.run_root.join(run_dir_name(cfg, &stem))
        }
    };
    ensure_output_dir(&out, force)?;
    write_snapshot(&out, cfg)?;
    let mut history = serde_json::to_string_pretty(&std::slice::from_ref(&report))?;
    history.push('\n');
    std::fs::write(out.join("history.json"), history)?;
    emit_report(&out.join("reports"), std::slice::from_ref(&report))?;

    println!(
        "step {}: {} foreground classes, test micro_f1 {} macro_f1 {}",
        meta.step,
        layout.num_channels() - 1,
        fmt_opt(report.micro_f1),
        fmt_opt(report.macro_f1)
    );
    println!("artifacts: {}", out.display());
    Ok(())
}

fn cmd_report(run: &Path) -> Result<()> {
    let path = run.join("history.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    let reports: Vec<MetricsReport> = serde_json::from_str(&text)
        .map_err(|e| Error::data(format!("malformed {}: {e}", path.display())))?;
    if reports.is_empty() {
        return Err(Error::data(format!("{} holds no reports", path.display())));
    }
    let files = emit_report(&run.join("reports"), &reports)?;
    for f in &files {
        println!("wrote {}", f.display());
    }
    Ok(())
}
