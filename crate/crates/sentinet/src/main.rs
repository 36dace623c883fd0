//! Command-line surface binding the pipeline end to end: preprocessing,
//! anomaly injection, two-stage training, streaming detection, scoring,
//! the contrast-weight sweep, cost accounting, and plot-data export.
//!
//! Every command honors `--seed` and `--config`; flags can also come from
//! `SENTINET_*` environment variables (`SENTINET_SEED`, `SENTINET_CONFIG`).
//! Exit codes: 0 success, 2 usage or validation failure, 3 artifact
//! incompatibility (hash or config mismatch), 4 runtime divergence,
//! 1 anything else.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use ndarray::Array2;

use sentinet::backbone::BackboneConfig;
use sentinet::checkpoint::{self, CheckpointError};
use sentinet::config::{load_config, render_config, ConfigError, RunConfig};
use sentinet::dataset::{
    load_dataset, save_dataset, DatasetError, DatasetManifest, DatasetSplit, GraphSample,
};
use sentinet::detect::{detect_stream, detect_windows, DetectOptions};
use sentinet::discriminator::{write_detections, DetectionRecord, DiscriminatorConfig};
use sentinet::flops::{count_flops, discriminator_episode_flops, CostMode, FlopsLedger};
use sentinet::inject::{
    inject_anomalies, read_injection_log, write_injection_log, InjectError, InjectionRecord,
};
use sentinet::pipeline::{
    align_timestamps, build_adjacency, enumerate_windows, read_positions_csv, read_raw_csv,
    split_dataset, zscore_normalize, AdjacencyRule, PipelineError,
};
use sentinet::trainer::{evaluate, omega_sweep, run_stage1, run_stage2, TrainError};

// ---- exit-code mapping ---------------------------------------------------------

/// Library failures folded into the documented exit codes.
enum CliError {
    /// Bad flags, bad config, bad data: exit 2.
    Validation(anyhow::Error),
    /// Artifacts that do not belong together: exit 3.
    Compat(anyhow::Error),
    /// Training blew up: exit 4.
    Divergence(anyhow::Error),
    /// Everything else (I/O and friends): exit 1.
    Other(anyhow::Error),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Compat(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    fn message(&self) -> &anyhow::Error {
        match self {
            CliError::Validation(e)
            | CliError::Compat(e)
            | CliError::Divergence(e)
            | CliError::Other(e) => e,
        }
    }

    fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(anyhow!(msg.into()))
    }

    fn compat(msg: impl Into<String>) -> Self {
        CliError::Compat(anyhow!(msg.into()))
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Other(e)
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Io(_) => CliError::Other(e.into()),
            _ => CliError::Validation(e.into()),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(_) => CliError::Other(e.into()),
            _ => CliError::Validation(e.into()),
        }
    }
}

impl From<InjectError> for CliError {
    fn from(e: InjectError) -> Self {
        match e {
            InjectError::Io(_) | InjectError::Json(_) => CliError::Other(e.into()),
            _ => CliError::Validation(e.into()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Version { .. } | DatasetError::HashMismatch { .. } => {
                CliError::Compat(e.into())
            }
            DatasetError::Inconsistent(_) => CliError::Validation(e.into()),
            _ => CliError::Other(e.into()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Version { .. }
            | CheckpointError::HashMismatch { .. }
            | CheckpointError::BadTensor { .. }
            | CheckpointError::ConfigMismatch { .. } => CliError::Compat(e.into()),
            _ => CliError::Other(e.into()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Alignment { .. } => CliError::Validation(e.into()),
            TrainError::Compat(_) => CliError::Compat(e.into()),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::Divergence { .. } => CliError::Divergence(e.into()),
            _ => CliError::Other(e.into()),
        }
    }
}

// ---- argument surface ----------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "sentinet",
    version,
    about = "Spatiotemporal anomaly detection over multi-node sensor streams",
    propagate_version = true
)]
struct Cli {
    /// Base RNG seed; overrides every seed in the config file.
    #[arg(long, global = true, env = "SENTINET_SEED")]
    seed: Option<u64>,
    /// Flat key=value configuration file.
    #[arg(long, global = true, env = "SENTINET_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Align, window, normalize, and split a raw CSV into a dataset directory.
    Preprocess(PreprocessArgs),
    /// Inject synthetic anomalies into a dataset and label a fraction of them.
    Inject(InjectArgs),
    /// Stage 1 only: contrastive pretraining of the encoder.
    Pretrain(PretrainArgs),
    /// Both stages: pretraining plus few-shot detection training.
    Train(TrainArgs),
    /// Score a dataset or a raw series with a trained model.
    Detect(DetectArgs),
    /// Score detection records against a dataset's ground truth.
    Eval(EvalArgs),
    /// Train stage 2 across a grid of contrast weights and seeds.
    Sweep(SweepArgs),
    /// Analytic forward-pass cost, parallel and per-step recurrent.
    Flops(FlopsArgs),
    /// Export one node's series with truth and predicted flags as CSV.
    Plotdata(PlotdataArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    /// Raw CSV: timestamp,node_id,<modality>,…
    #[arg(long)]
    input: PathBuf,
    /// Grid spacing in seconds.
    #[arg(long, default_value_t = 1.0)]
    interval: f64,
    /// Decimation factor: each length-k·W segment yields k phase windows.
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Steps per window after decimation.
    #[arg(long, default_value_t = 64)]
    window: usize,
    /// Sensor coordinates CSV (node_id,x,y); omitted means a complete graph.
    #[arg(long)]
    positions: Option<PathBuf>,
    /// Edge rule over positions: `knn:K` or `radius:R`.
    #[arg(long, default_value = "knn:2")]
    adjacency: String,
    /// Train,validation,test fractions.
    #[arg(long, default_value = "0.7,0.2,0.1")]
    ratios: String,
    /// Dataset directory to create.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InjectArgs {
    /// Dataset directory to read.
    #[arg(long)]
    data: PathBuf,
    /// Directory for the injected dataset (also receives injections.jsonl).
    #[arg(long)]
    out: PathBuf,
    /// Fraction of (window, node) slots receiving an anomaly.
    #[arg(long)]
    rate: Option<f64>,
    /// Fraction of slots carrying a supervision label.
    #[arg(long)]
    labeled: Option<f64>,
    /// Spike size in window-σ units.
    #[arg(long)]
    magnitude: Option<f64>,
    /// Five comma-separated mixture weights: point, collective, contextual,
    /// intra-correlation, inter-correlation.
    #[arg(long)]
    type_mix: Option<String>,
}

#[derive(Args)]
struct PretrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and metrics.
    #[arg(long)]
    out: PathBuf,
    /// Override the configured stage-1 epoch count.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (must already carry injected labels).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints, metrics, and summary.json.
    #[arg(long)]
    out: PathBuf,
    /// Reuse an existing stage-1 checkpoint instead of pretraining.
    #[arg(long)]
    stage1: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    /// Stage-2 checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory, or a raw CSV for sliding-window mode.
    #[arg(long)]
    input: PathBuf,
    /// Detection records, one JSON object per line.
    #[arg(long)]
    out: PathBuf,
    /// Score at or above which a node is flagged.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Steps between emissions in sliding-window mode.
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Sliding window length; must match the model's trained window.
    #[arg(long, default_value_t = 300)]
    window: usize,
    /// Labeled dataset supplying the support set (defaults to --input when
    /// that is a dataset directory).
    #[arg(long)]
    support: Option<PathBuf>,
    /// Grid spacing for raw-CSV alignment in sliding-window mode.
    #[arg(long, default_value_t = 1.0)]
    interval: f64,
}

#[derive(Args)]
struct EvalArgs {
    /// Detection records produced by `detect`.
    #[arg(long)]
    detections: PathBuf,
    /// Dataset directory holding the ground truth.
    #[arg(long)]
    data: PathBuf,
    /// Optional JSON report path (report always prints to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Stage-1 checkpoint every cell starts from.
    #[arg(long)]
    stage1: PathBuf,
    /// Comma-separated contrast weights.
    #[arg(long, default_value = "0.0,0.2,0.4,0.6,0.8")]
    omegas: String,
    /// Comma-separated seeds.
    #[arg(long, default_value = "0")]
    seeds: String,
    /// Output directory: per-cell subdirectories plus sweep.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FlopsArgs {
    /// Sensor nodes.
    #[arg(long, default_value_t = 8)]
    nodes: usize,
    /// Modalities per node; must divide the configured model width.
    #[arg(long, default_value_t = 2)]
    modalities: usize,
    /// Window length.
    #[arg(long, default_value_t = 64)]
    window: usize,
    /// Also itemize one discriminator episode with this many members.
    #[arg(long)]
    episode: Option<usize>,
}

#[derive(Args)]
struct PlotdataArgs {
    /// Detection records produced by `detect` (with their .meta.json sidecar).
    #[arg(long)]
    detections: PathBuf,
    /// Dataset directory the detections were computed from.
    #[arg(long)]
    raw: PathBuf,
    /// Node to export.
    #[arg(long)]
    node: usize,
    /// CSV output path.
    #[arg(long)]
    out: PathBuf,
}

// ---- shared plumbing -----------------------------------------------------------

/// Config file (when given) with the global seed override applied to every
/// seed-bearing field.
fn effective_config(cli_config: &Option<PathBuf>, cli_seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut cfg = match cli_config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli_seed {
        cfg.train.seed = seed;
        cfg.inject.rng_seed = seed;
    }
    Ok(cfg)
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|e| CliError::validation(format!("bad {what} entry {s:?}: {e}")))
        })
        .collect()
}

fn parse_adjacency(raw: &str) -> Result<AdjacencyRule, CliError> {
    let (kind, value) = raw
        .split_once(':')
        .ok_or_else(|| CliError::validation(format!("adjacency must be knn:K or radius:R, got {raw:?}")))?;
    match kind {
        "knn" => {
            let k = value
                .parse()
                .map_err(|e| CliError::validation(format!("bad knn count {value:?}: {e}")))?;
            Ok(AdjacencyRule::Knn(k))
        }
        "radius" => {
            let r = value
                .parse()
                .map_err(|e| CliError::validation(format!("bad radius {value:?}: {e}")))?;
            Ok(AdjacencyRule::Radius(r))
        }
        other => Err(CliError::validation(format!(
            "unknown adjacency rule {other:?}; use knn:K or radius:R"
        ))),
    }
}

/// Sidecar next to a detections file recording what produced it.
#[derive(serde::Serialize, serde::Deserialize)]
struct DetectionsMeta {
    model: String,
    /// `data_hash` of the scored dataset; absent in sliding-window mode.
    data_hash: Option<String>,
    threshold: f64,
    /// Emission stride; 0 in whole-window mode.
    stride: usize,
    window: usize,
}

fn meta_path(detections: &Path) -> PathBuf {
    let mut name = detections.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    detections.with_file_name(name)
}

/// Pull the encoder and discriminator configs back out of a stage-2
/// checkpoint's config echo.
fn model_configs(echo: &serde_json::Value) -> Result<(BackboneConfig, DiscriminatorConfig), CliError> {
    let bb: BackboneConfig = serde_json::from_value(
        echo.get("backbone")
            .cloned()
            .ok_or_else(|| CliError::compat("checkpoint records no encoder config"))?,
    )
    .map_err(|e| CliError::Compat(anyhow!("checkpoint encoder config does not parse: {e}")))?;
    let disc: DiscriminatorConfig = serde_json::from_value(
        echo.get("discriminator").cloned().ok_or_else(|| {
            CliError::compat(
                "checkpoint records no discriminator config — detection needs a stage-2 checkpoint",
            )
        })?,
    )
    .map_err(|e| CliError::Compat(anyhow!("checkpoint discriminator config does not parse: {e}")))?;
    Ok((bb, disc))
}

fn print_ledger(title: &str, ledger: &FlopsLedger) {
    println!("{title}: {} FLOPs ({:.3} MFLOPs)", ledger.total(), ledger.mflops());
    for (module, flops) in ledger.by_module() {
        println!("  {module:<12} {flops}");
    }
}

// ---- commands ------------------------------------------------------------------

fn cmd_preprocess(args: &PreprocessArgs, seed: Option<u64>) -> Result<(), CliError> {
    let ratios: Vec<f64> = parse_list(&args.ratios, "ratio")?;
    if ratios.len() != 3 {
        return Err(CliError::validation(format!(
            "ratios wants three fractions, got {}",
            ratios.len()
        )));
    }
    let rule = parse_adjacency(&args.adjacency)?;
    let raw = read_raw_csv(&args.input)?;
    if raw.records.is_empty() {
        return Err(CliError::validation("input CSV holds no data rows"));
    }
    let nodes = raw.records.iter().map(|r| r.node_id).max().unwrap() + 1;
    let modalities = raw.modality_names.len();
    let span = raw
        .records
        .iter()
        .map(|r| r.timestamp)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| {
            (lo.min(t), hi.max(t))
        });
    let series = align_timestamps(&raw.records, args.interval, span, nodes, modalities)?;
    let filled = series.fill_mask.iter().filter(|&&b| b).count();

    let adjacency: Array2<f64> = match &args.positions {
        None => Array2::ones((nodes, nodes)),
        Some(path) => {
            let positions = read_positions_csv(path)?;
            if positions.nrows() != nodes {
                return Err(CliError::validation(format!(
                    "positions file lists {} nodes, input has {nodes}",
                    positions.nrows()
                )));
            }
            let (a, isolated) = build_adjacency(&positions, rule)?;
            for node in isolated {
                eprintln!("warning: node {node} has no neighbor under {rule:?}");
            }
            a
        }
    };

    let windows = enumerate_windows(&series, args.k, args.window)?;
    let samples: Vec<GraphSample> = windows
        .iter()
        .map(|w| {
            zscore_normalize(w).map(|nw| GraphSample {
                adjacency: adjacency.clone(),
                x: nw.x,
                truth: None,
                labels: None,
                origin_time: nw.origin_time,
                phase: nw.phase,
            })
        })
        .collect::<Result<_, _>>()?;
    let split = split_dataset(samples, (ratios[0], ratios[1], ratios[2]))?;

    let mut meta = BTreeMap::new();
    meta.insert("input".into(), args.input.display().to_string());
    meta.insert("interval".into(), format!("{}", args.interval));
    meta.insert("k".into(), format!("{}", args.k));
    meta.insert("adjacency".into(), args.adjacency.clone());
    meta.insert("ratios".into(), args.ratios.clone());
    meta.insert("seed".into(), format!("{}", seed.unwrap_or(0)));
    meta.insert("interpolated_points".into(), format!("{filled}"));
    let manifest = save_dataset(&args.out, &split, meta)?;
    let (tr, va, te) = manifest.counts;
    println!(
        "wrote {} windows ({tr} train / {va} validation / {te} test) to {}",
        tr + va + te,
        args.out.display()
    );
    println!("data hash {}", manifest.data_hash);
    Ok(())
}

fn cmd_inject(args: &InjectArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let (mut split, old_manifest) = load_dataset(&args.data)?;
    let mut spec = cfg.inject.clone();
    if let Some(rate) = args.rate {
        spec.injection_rate = rate;
    }
    if let Some(labeled) = args.labeled {
        spec.labeled_fraction = labeled;
    }
    if let Some(magnitude) = args.magnitude {
        spec.magnitude = magnitude;
    }
    if let Some(mix) = &args.type_mix {
        let weights: Vec<f64> = parse_list(mix, "type_mix")?;
        spec.type_mix = weights
            .try_into()
            .map_err(|v: Vec<f64>| CliError::validation(format!("type_mix wants 5 weights, got {}", v.len())))?;
    }
    let log = inject_anomalies(&mut split, &spec)?;

    let mut meta = old_manifest.meta.clone();
    meta.insert("injection_rate".into(), format!("{}", spec.injection_rate));
    meta.insert("labeled_fraction".into(), format!("{}", spec.labeled_fraction));
    meta.insert("injection_seed".into(), format!("{}", spec.rng_seed));
    let manifest = save_dataset(&args.out, &split, meta)?;
    write_injection_log(&args.out.join("injections.jsonl"), &log)?;
    println!(
        "injected {} anomalies across {} windows; log at {}",
        log.len(),
        split.total(),
        args.out.join("injections.jsonl").display()
    );
    println!("data hash {}", manifest.data_hash);
    Ok(())
}

fn cmd_pretrain(args: &PretrainArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let (split, manifest) = load_dataset(&args.data)?;
    let mut train_cfg = cfg.train.clone();
    if let Some(epochs) = args.epochs {
        train_cfg.stage1_epochs = epochs;
    }
    let bb_cfg = cfg
        .backbone
        .build(manifest.nodes, manifest.modalities, manifest.window);
    let outcome = run_stage1(&train_cfg, &bb_cfg, &cfg.pretrain, &split, &args.out)?;
    println!(
        "stage 1 done: best epoch {} (validation loss {:.6}), last loss {:.6}",
        outcome.best_epoch, outcome.best_val_loss, outcome.last_val_loss
    );
    println!("best checkpoint {}", outcome.best_path.display());
    Ok(())
}

fn cmd_train(args: &TrainArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let (split, manifest) = load_dataset(&args.data)?;
    let bb_cfg = cfg
        .backbone
        .build(manifest.nodes, manifest.modalities, manifest.window);
    let disc_cfg = cfg.disc.build(bb_cfg.gat_out, cfg.train.omega);

    let (stage1_path, stage1_summary) = match &args.stage1 {
        Some(path) => (path.clone(), None),
        None => {
            let s1 = run_stage1(&cfg.train, &bb_cfg, &cfg.pretrain, &split, &args.out)?;
            println!(
                "stage 1 done: best epoch {} (validation loss {:.6})",
                s1.best_epoch, s1.best_val_loss
            );
            (
                s1.best_path.clone(),
                Some(serde_json::json!({
                    "best_epoch": s1.best_epoch,
                    "best_val_loss": s1.best_val_loss,
                    "last_val_loss": s1.last_val_loss,
                    "checkpoint": s1.best_path,
                })),
            )
        }
    };

    let s2 = run_stage2(&cfg.train, &bb_cfg, &disc_cfg, &split, &stage1_path, &args.out)?;
    let summary = serde_json::json!({
        "config": render_config(cfg),
        "data_hash": manifest.data_hash,
        "stage1": stage1_summary,
        "stage2": {
            "best_epoch": s2.best_epoch,
            "best_val_f1": s2.best_val_f1,
            "last_val_f1": s2.last_val_f1,
            "test": s2.test_report,
            "freeze_intact": s2.freeze_hash == s2.final_hash,
            "skipped_batches": s2.skipped_batches,
            "best_checkpoint": s2.best_path,
            "last_checkpoint": s2.last_path,
        },
    });
    fs::write(
        args.out.join("summary.json"),
        serde_json::to_string_pretty(&summary).context("summary serialization")?,
    )
    .context("writing summary.json")?;
    println!(
        "stage 2 done: best epoch {} (validation F1 {:.4})",
        s2.best_epoch, s2.best_val_f1
    );
    println!(
        "test precision {:.4} recall {:.4} F1 {:.4}",
        s2.test_report.precision, s2.test_report.recall, s2.test_report.f1
    );
    println!("summary at {}", args.out.join("summary.json").display());
    Ok(())
}

fn cmd_detect(args: &DetectArgs, cfg: &RunConfig, seed: Option<u64>) -> Result<(), CliError> {
    let (echo, store) = checkpoint::load(&args.model)?;
    let (bb_cfg, disc_cfg) = model_configs(&echo)?;
    let opts = DetectOptions {
        threshold: args.threshold,
        chunk: cfg.train.eval_chunk,
        seed: seed.unwrap_or(cfg.train.seed),
    };

    let dataset_mode = args.input.join("manifest.json").exists();
    let (records, meta) = if dataset_mode {
        let (split, manifest) = load_dataset(&args.input)?;
        if (manifest.nodes, manifest.modalities, manifest.window)
            != (bb_cfg.nodes, bb_cfg.modalities, bb_cfg.window)
        {
            return Err(CliError::compat(format!(
                "dataset shape ({}, {}, {}) does not match the model's ({}, {}, {})",
                manifest.nodes,
                manifest.modalities,
                manifest.window,
                bb_cfg.nodes,
                bb_cfg.modalities,
                bb_cfg.window
            )));
        }
        let support_split;
        let support: &[GraphSample] = match &args.support {
            Some(dir) => {
                support_split = load_dataset(dir)?.0;
                &support_split.train
            }
            None => &split.train,
        };
        let all: Vec<GraphSample> = split.all().cloned().collect();
        let records = detect_windows(&store, &bb_cfg, &disc_cfg, &all, support, &opts)?;
        let meta = DetectionsMeta {
            model: args.model.display().to_string(),
            data_hash: Some(manifest.data_hash.clone()),
            threshold: args.threshold,
            stride: 0,
            window: bb_cfg.window,
        };
        (records, meta)
    } else {
        if args.window != bb_cfg.window {
            return Err(CliError::compat(format!(
                "sliding window {} does not match the model's trained window {}",
                args.window, bb_cfg.window
            )));
        }
        let support_dir = args.support.as_ref().ok_or_else(|| {
            CliError::validation("sliding-window mode needs --support pointing to a labeled dataset")
        })?;
        let support = load_dataset(support_dir)?.0;
        let raw = read_raw_csv(&args.input)?;
        let records = if raw.records.is_empty() {
            Vec::new()
        } else {
            let nodes = bb_cfg.nodes;
            let modalities = bb_cfg.modalities;
            let span = raw
                .records
                .iter()
                .map(|r| r.timestamp)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| {
                    (lo.min(t), hi.max(t))
                });
            let series = align_timestamps(&raw.records, args.interval, span, nodes, modalities)?;
            // One global z-score per (node, modality): sliding windows share
            // state, so the training-time per-window normalization cannot
            // apply here.
            let mut data = series.data;
            for n in 0..nodes {
                for m in 0..modalities {
                    let t = data.shape()[2];
                    let mean = (0..t).map(|i| data[[n, m, i]]).sum::<f64>() / t as f64;
                    let var =
                        (0..t).map(|i| (data[[n, m, i]] - mean).powi(2)).sum::<f64>() / t as f64;
                    let denom = var.sqrt().max(sentinet::pipeline::SIGMA_FLOOR);
                    for i in 0..t {
                        data[[n, m, i]] = (data[[n, m, i]] - mean) / denom;
                    }
                }
            }
            let adjacency = Array2::ones((nodes, nodes));
            detect_stream(
                &store,
                &bb_cfg,
                &disc_cfg,
                &data,
                &adjacency,
                &support.train,
                args.stride,
                &opts,
            )?
        };
        let meta = DetectionsMeta {
            model: args.model.display().to_string(),
            data_hash: None,
            threshold: args.threshold,
            stride: args.stride,
            window: args.window,
        };
        (records, meta)
    };

    write_detections(&args.out, &records).context("writing detections")?;
    fs::write(
        meta_path(&args.out),
        serde_json::to_string_pretty(&meta).context("meta serialization")?,
    )
    .context("writing detections sidecar")?;
    println!("wrote {} detection records to {}", records.len(), args.out.display());
    Ok(())
}

fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>, CliError> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading detections {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| CliError::validation(format!("detections line {}: {e}", i + 1)))
        })
        .collect()
}

/// Refuse detections whose sidecar was computed from different data.
fn check_detections_hash(detections: &Path, manifest: &DatasetManifest) -> Result<(), CliError> {
    let sidecar = meta_path(detections);
    if !sidecar.exists() {
        return Ok(());
    }
    let meta: DetectionsMeta = serde_json::from_str(
        &fs::read_to_string(&sidecar).with_context(|| format!("reading {}", sidecar.display()))?,
    )
    .map_err(|e| CliError::validation(format!("bad sidecar {}: {e}", sidecar.display())))?;
    match meta.data_hash {
        Some(h) if h != manifest.data_hash => Err(CliError::compat(format!(
            "detections were computed from different data:\n  detections: {h}\n  dataset:    {}",
            manifest.data_hash
        ))),
        _ => Ok(()),
    }
}

fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let (split, manifest) = load_dataset(&args.data)?;
    check_detections_hash(&args.detections, &manifest)?;
    let records = read_detections(&args.detections)?;
    let samples: Vec<&GraphSample> = split.all().collect();
    let mut predictions = Vec::with_capacity(records.len());
    let mut truth = Vec::with_capacity(records.len());
    for r in &records {
        let sample = samples.get(r.sample_id).ok_or_else(|| {
            CliError::validation(format!(
                "detection references window {} but the dataset holds {}",
                r.sample_id,
                samples.len()
            ))
        })?;
        let t = sample
            .truth
            .as_ref()
            .ok_or_else(|| CliError::validation("dataset carries no ground truth; run inject first"))?;
        let label = t.get(r.node_id).ok_or_else(|| {
            CliError::validation(format!(
                "detection references node {} but windows hold {} nodes",
                r.node_id,
                t.len()
            ))
        })?;
        predictions.push(r.label);
        truth.push(*label);
    }
    let report = evaluate(&predictions, &truth)?;
    let rendered = serde_json::to_string_pretty(&report).context("report serialization")?;
    println!("{rendered}");
    if let Some(out) = &args.out {
        fs::write(out, &rendered).context("writing report")?;
    }
    Ok(())
}

fn cmd_sweep(args: &SweepArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let (split, manifest) = load_dataset(&args.data)?;
    let omegas: Vec<f64> = parse_list(&args.omegas, "omega")?;
    let seeds: Vec<u64> = parse_list(&args.seeds, "seed")?;
    let bb_cfg = cfg
        .backbone
        .build(manifest.nodes, manifest.modalities, manifest.window);
    let disc_cfg = cfg.disc.build(bb_cfg.gat_out, cfg.train.omega);
    let rows = omega_sweep(
        &cfg.train, &bb_cfg, &disc_cfg, &split, &args.stage1, &omegas, &seeds, &args.out,
    )?;
    fs::write(
        args.out.join("sweep.json"),
        serde_json::to_string_pretty(&rows).context("sweep serialization")?,
    )
    .context("writing sweep.json")?;
    println!("{:>8}  {:>8}  {:>8}  per-seed F1", "omega", "mean F1", "spread");
    for row in &rows {
        let per_seed: Vec<String> = row
            .per_seed
            .iter()
            .map(|(s, f)| format!("s{s}={f:.4}"))
            .collect();
        println!(
            "{:>8.2}  {:>8.4}  {:>8.4}  {}",
            row.omega,
            row.mean_f1,
            row.spread,
            per_seed.join(" ")
        );
    }
    Ok(())
}

fn cmd_flops(args: &FlopsArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let bb_cfg = cfg.backbone.build(args.nodes, args.modalities, args.window);
    bb_cfg.validate().map_err(|e| CliError::Validation(e.into()))?;
    let parallel = count_flops(&bb_cfg, CostMode::ParallelWindow);
    let recurrent = count_flops(&bb_cfg, CostMode::RecurrentStep);
    print_ledger(
        &format!("parallel forward, full window of {}", bb_cfg.window),
        &parallel,
    );
    println!();
    print_ledger("recurrent forward, per step", &recurrent);
    if let Some(members) = args.episode {
        let disc_cfg = cfg.disc.build(bb_cfg.gat_out, cfg.train.omega);
        println!();
        print_ledger(
            &format!("discriminator episode, {members} members"),
            &discriminator_episode_flops(&disc_cfg, members),
        );
    }
    Ok(())
}

/// One exported CSV row: a step of one node's series with its flags.
struct PlotRow {
    time: f64,
    values: Vec<f64>,
    truth: u8,
    predicted: u8,
}

/// Join dataset windows, optional step-level injection log, and detection
/// labels into per-step rows for one node, in storage order.
fn plot_rows(
    split: &DatasetSplit,
    manifest: &DatasetManifest,
    injections: Option<&[InjectionRecord]>,
    detections: &[DetectionRecord],
    node: usize,
) -> Vec<PlotRow> {
    // Grid spacing between consecutive window steps: the preprocess grid
    // interval times the decimation factor, when the manifest records them.
    let interval: f64 = manifest
        .meta
        .get("interval")
        .and_then(|s| s.parse().ok())
        .unwrap_or(1.0);
    let k: f64 = manifest.meta.get("k").and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let step = interval * k;

    let mut predicted: BTreeMap<usize, u8> = BTreeMap::new();
    for r in detections {
        if r.node_id == node {
            predicted.insert(r.sample_id, r.label);
        }
    }
    let mut rows = Vec::new();
    for (si, sample) in split.all().enumerate() {
        let window_truth = sample.truth.as_ref().map(|t| t[node]).unwrap_or(0);
        // Step-level truth from the log when available, else the window flag
        // on every step.
        let mut step_truth = vec![window_truth; sample.window()];
        if let Some(log) = injections {
            step_truth.fill(0);
            for rec in log.iter().filter(|r| r.window_index == si && r.node == node) {
                for t in rec.start..(rec.start + rec.length).min(sample.window()) {
                    step_truth[t] = 1;
                }
            }
        }
        let pred = predicted.get(&si).copied().unwrap_or(0);
        for t in 0..sample.window() {
            rows.push(PlotRow {
                time: sample.origin_time + t as f64 * step,
                values: (0..sample.modalities()).map(|m| sample.x[[node, m, t]]).collect(),
                truth: step_truth[t],
                predicted: pred,
            });
        }
    }
    rows
}

fn cmd_plotdata(args: &PlotdataArgs) -> Result<(), CliError> {
    let (split, manifest) = load_dataset(&args.raw)?;
    if args.node >= manifest.nodes {
        return Err(CliError::validation(format!(
            "node {} out of range: dataset holds {} nodes",
            args.node, manifest.nodes
        )));
    }
    check_detections_hash(&args.detections, &manifest)?;
    let detections = read_detections(&args.detections)?;
    let log_path = args.raw.join("injections.jsonl");
    let log = if log_path.exists() {
        Some(read_injection_log(&log_path)?)
    } else {
        None
    };
    let rows = plot_rows(&split, &manifest, log.as_deref(), &detections, args.node);

    let mut out = String::new();
    out.push_str("time");
    for m in 0..manifest.modalities {
        out.push_str(&format!(",m{m}"));
    }
    out.push_str(",truth_label,predicted_label\n");
    for row in &rows {
        out.push_str(&format!("{}", row.time));
        for v in &row.values {
            out.push_str(&format!(",{v}"));
        }
        out.push_str(&format!(",{},{}\n", row.truth, row.predicted));
    }
    fs::write(&args.out, out).context("writing plot CSV")?;
    println!("wrote {} rows for node {} to {}", rows.len(), args.node, args.out.display());
    Ok(())
}

// ---- entry ---------------------------------------------------------------------

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = effective_config(&cli.config, cli.seed)?;
    match &cli.command {
        Command::Preprocess(args) => cmd_preprocess(args, cli.seed),
        Command::Inject(args) => cmd_inject(args, &cfg),
        Command::Pretrain(args) => cmd_pretrain(args, &cfg),
        Command::Train(args) => cmd_train(args, &cfg),
        Command::Detect(args) => cmd_detect(args, &cfg, cli.seed),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args, &cfg),
        Command::Flops(args) => cmd_flops(args, &cfg),
        Command::Plotdata(args) => cmd_plotdata(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {:#}", e.message());
            ExitCode::from(e.code())
        }
    }
}
