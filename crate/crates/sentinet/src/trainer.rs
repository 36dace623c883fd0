//! Two-stage training orchestration.
//!
//! Stage 1 pretrains the encoder with the subgraph-contrast objective and
//! keeps two checkpoints: the best epoch by validation loss and the final
//! one. Stage 2 loads a stage-1 checkpoint, adds the dual-graph
//! discriminator, trains both jointly for `freeze_backbone_after` epochs,
//! then freezes the encoder — provably, via a content hash over its
//! parameters — and finishes on the discriminator alone.
//!
//! Everything downstream of a seed is deterministic: the same config and
//! dataset produce byte-identical metrics streams, so regressions show up
//! as a one-line diff.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backbone::{
    backbone_forward_taped, forward_parallel, init_backbone, to_time_major, BackboneConfig,
    BackboneError,
};
use crate::checkpoint::{self, config_diff, CheckpointError};
use crate::dataset::{DatasetSplit, GraphSample};
use crate::discriminator::{
    episode_losses, init_discriminator, sample_episode, AnomalyBuffer, DiscError,
    DiscriminatorConfig, EpisodeBatch, EpisodeMeta,
};
use crate::pretrain::{
    append_metrics, pretrain_eval, pretrain_step, PretrainConfig, PretrainError, PretrainMetrics,
};
use crate::seeds::{derive_seed, derive_seed2};
use crate::tensor::nn::{hex_string, Adam, ParamStore, Session};
use crate::tensor::tape::Var;

// Seed salts so the independent random streams never collide.
const SALT_S1_INIT: u64 = 11;
const SALT_S1_SHUFFLE: u64 = 12;
const SALT_S1_STEP: u64 = 13;
const SALT_S1_VAL: u64 = 14;
const SALT_S2_INIT: u64 = 21;
const SALT_S2_SHUFFLE: u64 = 22;
const SALT_S2_EPISODE: u64 = 23;
pub(crate) const SALT_SUPPORT: u64 = 24;

/// Samples embedded per plain forward pass during evaluation.
const EMBED_BATCH: usize = 16;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("prediction/truth length mismatch: {predictions} predictions vs {truth} truth labels")]
    Alignment { predictions: usize, truth: usize },
    #[error("stage {stage} diverged: non-finite loss at epoch {epoch}, step {step}")]
    Divergence { stage: u8, epoch: usize, step: usize },
    #[error("checkpoint does not match the requested configuration: {0}")]
    Compat(String),
    #[error("frozen encoder parameters changed during epoch {epoch}")]
    FreezeViolated { epoch: usize },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Pretrain(#[from] PretrainError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Discriminator(#[from] DiscError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

// ---- configuration -------------------------------------------------------------

/// Orchestration knobs shared by both stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Joint epochs before the encoder freezes; the remaining
    /// `stage2_epochs − freeze_backbone_after` epochs train the
    /// discriminator alone.
    pub freeze_backbone_after: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Contrast weight in the stage-2 joint objective.
    pub omega: f64,
    pub seed: u64,
    /// Optional cap on optimizer steps per epoch; `None` walks every batch.
    pub max_batches_per_epoch: Option<usize>,
    /// Query slots per evaluation episode.
    pub eval_chunk: usize,
    /// Stop a stage early after this many epochs without validation
    /// improvement; `None` (the default) always runs the full schedule.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 200,
            stage2_epochs: 100,
            freeze_backbone_after: 30,
            batch_size: 16,
            learning_rate: 1e-4,
            omega: 0.4,
            seed: 0,
            max_batches_per_epoch: None,
            eval_chunk: 64,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.stage1_epochs == 0 || self.stage2_epochs == 0 {
            return Err(TrainError::Config("both stages need at least one epoch".into()));
        }
        if self.freeze_backbone_after >= self.stage2_epochs {
            return Err(TrainError::Config(format!(
                "freeze_backbone_after ({}) must be below stage2_epochs ({}) so the frozen phase is non-empty",
                self.freeze_backbone_after, self.stage2_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(TrainError::Config(format!(
                "omega must lie in [0, 1], got {}",
                self.omega
            )));
        }
        if self.eval_chunk == 0 {
            return Err(TrainError::Config("eval_chunk must be positive".into()));
        }
        if self.max_batches_per_epoch == Some(0) {
            return Err(TrainError::Config(
                "max_batches_per_epoch must be positive when set".into(),
            ));
        }
        Ok(())
    }
}

// ---- metrics -------------------------------------------------------------------

/// Confusion counts and the derived rates for one evaluation pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

impl MetricsReport {
    /// Rates from raw counts; any zero denominator yields 0, not NaN.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let rate = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = rate(tp, tp + fp);
        let recall = rate(tp, tp + fn_);
        Self {
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1: f1_score(precision, recall),
        }
    }
}

/// Score binary predictions against ground truth (both label `1` as
/// anomalous). The two slices must describe the same nodes in the same
/// order; a length mismatch is an alignment bug, not a score of zero.
pub fn evaluate(predictions: &[u8], truth: &[u8]) -> Result<MetricsReport, TrainError> {
    if predictions.len() != truth.len() {
        return Err(TrainError::Alignment {
            predictions: predictions.len(),
            truth: truth.len(),
        });
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &t) in predictions.iter().zip(truth) {
        match (p, t) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => tn += 1,
        }
    }
    Ok(MetricsReport::from_counts(tp, fp, fn_, tn))
}

/// One line of the stage-2 metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Metrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub frozen: bool,
    pub seed: u64,
}

// ---- shared helpers ------------------------------------------------------------

/// Content hash over the encoder's parameters only (names prefixed
/// `backbone.`), in store order. Equal hashes mean bit-identical weights.
pub fn backbone_param_hash(store: &ParamStore) -> String {
    let mut h = Sha256::new();
    for (name, value) in store.iter() {
        if !name.starts_with("backbone.") {
            continue;
        }
        h.update(name.as_bytes());
        h.update([0u8]);
        for &dim in value.shape() {
            h.update((dim as u64).to_le_bytes());
        }
        for &x in value.iter() {
            h.update(x.to_le_bytes());
        }
    }
    hex_string(&h.finalize())
}

/// Stack sample tensors into one `(B, N, M, W)` batch.
fn batch_tensor(samples: &[&GraphSample]) -> ArrayD<f64> {
    let (n, m, w) = (samples[0].nodes(), samples[0].modalities(), samples[0].window());
    let mut x = Array4::<f64>::zeros((samples.len(), n, m, w));
    for (b, s) in samples.iter().enumerate() {
        x.index_axis_mut(Axis(0), b).assign(&s.x);
    }
    x.into_dyn()
}

fn adjacencies(samples: &[&GraphSample]) -> Vec<Array2<f64>> {
    samples.iter().map(|s| s.adjacency.clone()).collect()
}

/// Supervision labels flattened in slot order (sample-major, node-minor).
fn flat_labels(samples: &[&GraphSample]) -> Vec<Option<u8>> {
    let mut out = Vec::with_capacity(samples.len() * samples[0].nodes());
    for s in samples {
        match &s.labels {
            Some(l) => out.extend(l.iter().copied()),
            None => out.extend(std::iter::repeat(None).take(s.nodes())),
        }
    }
    out
}

/// Embed a list of samples without a tape, returning the flat `(B·N, d)`
/// slot matrix. Batched internally to bound tensor sizes.
fn embed_plain(
    store: &ParamStore,
    bb_cfg: &BackboneConfig,
    samples: &[GraphSample],
) -> Result<Array2<f64>, TrainError> {
    let n = bb_cfg.nodes;
    let d = bb_cfg.gat_out;
    let mut out = Array2::<f64>::zeros((samples.len() * n, d));
    for (start, chunk) in samples.chunks(EMBED_BATCH).enumerate().map(|(i, c)| (i * EMBED_BATCH, c)) {
        let refs: Vec<&GraphSample> = chunk.iter().collect();
        let emb = forward_parallel(store, bb_cfg, &batch_tensor(&refs), &adjacencies(&refs))?;
        let flat = emb
            .into_shape_with_order(IxDyn(&[chunk.len() * n, d]))
            .expect("embedding is (B, N, d)");
        for (row, src) in flat.rows().into_iter().enumerate() {
            out.row_mut(start * n + row).assign(&src);
        }
    }
    Ok(out)
}

/// Member features on the tape: slot rows come from the live embedding so
/// gradients reach the encoder; buffer and padding rows enter as constants.
fn member_matrix_taped(
    sess: &mut Session,
    flat: Var,
    assembled: &Array2<f64>,
    meta: &EpisodeMeta,
    slots: usize,
) -> Var {
    let extra_rows: Vec<usize> = meta
        .ids
        .iter()
        .enumerate()
        .filter(|(_, id)| id.is_none())
        .map(|(i, _)| i)
        .collect();
    let mapped: Vec<usize> = meta
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| match id {
            Some(s) => *s,
            None => slots + extra_rows.iter().position(|&r| r == i).unwrap(),
        })
        .collect();
    let ext = if extra_rows.is_empty() {
        flat
    } else {
        let d = assembled.ncols();
        let mut extra = Array2::<f64>::zeros((extra_rows.len(), d));
        for (e, &row) in extra_rows.iter().enumerate() {
            extra.row_mut(e).assign(&assembled.row(row));
        }
        let flat_t = sess.tape.transpose_last2(flat);
        let extra_t = sess.tape.constant(extra.t().to_owned().into_dyn());
        let joined = sess.tape.concat_last(&[flat_t, extra_t]);
        sess.tape.transpose_last2(joined)
    };
    sess.tape.gather0(ext, &mapped)
}

// ---- stage 1 -------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Stage1Outcome {
    pub best_path: PathBuf,
    pub last_path: PathBuf,
    pub metrics_path: PathBuf,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub last_val_loss: f64,
    pub history: Vec<PretrainMetrics>,
}

fn stage1_config_echo(bb_cfg: &BackboneConfig, pre_cfg: &PretrainConfig) -> serde_json::Value {
    serde_json::json!({ "backbone": bb_cfg, "pretrain": pre_cfg })
}

/// Contrastive pretraining over the train split with per-epoch validation.
///
/// Writes `stage1_metrics.jsonl` (header line with batch size and learning
/// rate, then one record per epoch), `stage1_best.json` (lowest validation
/// loss; ties keep the earlier epoch) and `stage1_last.json` into `out_dir`.
pub fn run_stage1(
    cfg: &TrainConfig,
    bb_cfg: &BackboneConfig,
    pre_cfg: &PretrainConfig,
    split: &DatasetSplit,
    out_dir: &Path,
) -> Result<Stage1Outcome, TrainError> {
    cfg.validate()?;
    bb_cfg.validate()?;
    if split.train.is_empty() {
        return Err(TrainError::Config("stage 1 needs a non-empty train split".into()));
    }
    fs::create_dir_all(out_dir)?;
    let best_path = out_dir.join("stage1_best.json");
    let last_path = out_dir.join("stage1_last.json");
    let metrics_path = out_dir.join("stage1_metrics.jsonl");

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SALT_S1_INIT));
    init_backbone(&mut store, &mut rng, bb_cfg);
    let mut opt = Adam::new(cfg.learning_rate);
    let echo = stage1_config_echo(bb_cfg, pre_cfg);

    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    writeln!(
        metrics,
        "{}",
        serde_json::json!({
            "stage": 1,
            "batch_size": cfg.batch_size,
            "lr": cfg.learning_rate,
            "seed": cfg.seed,
        })
    )?;

    let cap = cfg.max_batches_per_epoch.unwrap_or(usize::MAX);
    let mut history = Vec::with_capacity(cfg.stage1_epochs);
    let mut best: Option<(usize, f64)> = None;
    let mut last_val = f64::INFINITY;
    let mut since_best = 0usize;
    for epoch in 0..cfg.stage1_epochs {
        let mut order: Vec<usize> = (0..split.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed2(
            cfg.seed,
            SALT_S1_SHUFFLE,
            epoch as u64,
        )));
        let mut total = 0.0;
        let mut episodes = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).take(cap).enumerate() {
            let batch: Vec<&GraphSample> = chunk.iter().map(|&i| &split.train[i]).collect();
            let step_seed =
                derive_seed2(derive_seed(cfg.seed, SALT_S1_STEP), epoch as u64, step as u64);
            let out = pretrain_step(&batch, &mut store, bb_cfg, pre_cfg, &mut opt, step_seed)?;
            if !out.mean_loss.is_finite() {
                return Err(TrainError::Divergence { stage: 1, epoch, step });
            }
            total += out.mean_loss * out.episodes as f64;
            episodes += out.episodes;
        }
        let mean_loss = if episodes == 0 { 0.0 } else { total / episodes as f64 };
        let line = PretrainMetrics {
            epoch,
            mean_loss,
            lr: cfg.learning_rate,
            seed: cfg.seed,
        };
        append_metrics(&mut metrics, &line)?;
        history.push(line);

        // Validation loss on fixed episodes so epochs are comparable; with
        // no validation split the train loss stands in.
        let val = if split.validation.is_empty() {
            mean_loss
        } else {
            let mut total = 0.0;
            let mut count = 0usize;
            for chunk in split.validation.chunks(cfg.batch_size) {
                let batch: Vec<&GraphSample> = chunk.iter().collect();
                let out = pretrain_eval(
                    &batch,
                    &store,
                    bb_cfg,
                    pre_cfg,
                    derive_seed(cfg.seed, SALT_S1_VAL),
                )?;
                total += out.mean_loss * out.episodes as f64;
                count += out.episodes;
            }
            if count == 0 { mean_loss } else { total / count as f64 }
        };
        if !val.is_finite() {
            return Err(TrainError::Divergence { stage: 1, epoch, step: usize::MAX });
        }
        last_val = val;
        if best.map_or(true, |(_, b)| val < b) {
            best = Some((epoch, val));
            checkpoint::save(&best_path, &echo, &store)?;
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience.is_some_and(|p| since_best >= p) {
                break;
            }
        }
    }
    checkpoint::save(&last_path, &echo, &store)?;
    metrics.flush()?;
    let (best_epoch, best_val_loss) = best.expect("at least one epoch ran");
    Ok(Stage1Outcome {
        best_path,
        last_path,
        metrics_path,
        best_epoch,
        best_val_loss,
        last_val_loss: last_val,
        history,
    })
}

// ---- stage 2 -------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Stage2Outcome {
    pub best_path: PathBuf,
    pub last_path: PathBuf,
    pub metrics_path: PathBuf,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub last_val_f1: f64,
    /// Test-split report under the best checkpoint.
    pub test_report: MetricsReport,
    /// Encoder hash captured when the freeze began.
    pub freeze_hash: String,
    /// Encoder hash after the last epoch; equals `freeze_hash` or training
    /// aborted with [`TrainError::FreezeViolated`].
    pub final_hash: String,
    pub history: Vec<Stage2Metrics>,
    /// Batches skipped because they held too few labeled nodes to form an
    /// episode.
    pub skipped_batches: usize,
}

/// Labeled support drawn once from the train split, as `(sample, node)`
/// slots; re-embedded whenever the encoder moves.
pub(crate) struct SupportSlots {
    pub(crate) normal: Vec<(usize, usize)>,
    pub(crate) anomalous: Vec<(usize, usize)>,
}

pub(crate) fn choose_support_slots(
    train: &[GraphSample],
    k: usize,
    seed: u64,
) -> Result<SupportSlots, TrainError> {
    let mut normal = Vec::new();
    let mut anomalous = Vec::new();
    for (si, sample) in train.iter().enumerate() {
        for (node, label) in sample.labeled_nodes() {
            match label {
                0 => normal.push((si, node)),
                _ => anomalous.push((si, node)),
            }
        }
    }
    if normal.len() < k || anomalous.len() < k {
        return Err(TrainError::Config(format!(
            "evaluation support needs {k} labeled normal and {k} labeled anomalous nodes in the train split, found {} and {}",
            normal.len(),
            anomalous.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    normal.shuffle(&mut rng);
    anomalous.shuffle(&mut rng);
    normal.truncate(k);
    anomalous.truncate(k);
    Ok(SupportSlots { normal, anomalous })
}

/// Embedded support vectors under the current parameters.
pub(crate) struct SupportSet {
    pub(crate) normal: Vec<(usize, Array1<f64>)>,
    pub(crate) anomalous: Vec<(usize, Array1<f64>)>,
}

pub(crate) fn embed_support(
    store: &ParamStore,
    bb_cfg: &BackboneConfig,
    train: &[GraphSample],
    slots: &SupportSlots,
) -> Result<SupportSet, TrainError> {
    let mut unique: Vec<usize> = slots
        .normal
        .iter()
        .chain(&slots.anomalous)
        .map(|&(si, _)| si)
        .collect();
    unique.sort_unstable();
    unique.dedup();
    let samples: Vec<GraphSample> = unique.iter().map(|&si| train[si].clone()).collect();
    let flat = embed_plain(store, bb_cfg, &samples)?;
    let n = bb_cfg.nodes;
    let row = |si: usize, node: usize| {
        let pos = unique.binary_search(&si).expect("sample was embedded");
        flat.row(pos * n + node).to_owned()
    };
    Ok(SupportSet {
        normal: slots.normal.iter().map(|&(si, nd)| (si * n + nd, row(si, nd))).collect(),
        anomalous: slots
            .anomalous
            .iter()
            .map(|&(si, nd)| (si * n + nd, row(si, nd)))
            .collect(),
    })
}

/// Classify every node of every sample against a fixed support set,
/// returning aligned `(predictions, truth)` vectors in slot order.
fn classify_split(
    store: &ParamStore,
    bb_cfg: &BackboneConfig,
    disc_cfg: &DiscriminatorConfig,
    samples: &[GraphSample],
    support: &SupportSet,
    chunk: usize,
    precomputed: Option<&Array2<f64>>,
) -> Result<(Vec<u8>, Vec<u8>), TrainError> {
    let n = bb_cfg.nodes;
    let owned;
    let flat = match precomputed {
        Some(f) => f,
        None => {
            owned = embed_plain(store, bb_cfg, samples)?;
            &owned
        }
    };
    let mut truth = Vec::with_capacity(samples.len() * n);
    for (si, sample) in samples.iter().enumerate() {
        let t = sample.truth.as_ref().ok_or_else(|| {
            TrainError::Config(format!(
                "sample {si} carries no ground truth; run injection before evaluating"
            ))
        })?;
        truth.extend(t.iter().copied());
    }
    let slots = samples.len() * n;
    let mut predictions = vec![0u8; slots];
    for start in (0..slots).step_by(chunk) {
        let end = (start + chunk).min(slots);
        let episode = EpisodeBatch {
            support_normal: support.normal.clone(),
            support_anomalous: support
                .anomalous
                .iter()
                .map(|(id, x)| (Some(*id), x.clone()))
                .collect(),
            query_labeled: Vec::new(),
            query_unlabeled: (start..end).map(|s| (s, flat.row(s).to_owned())).collect(),
        };
        let (x, meta) = episode.assemble(None)?;
        for decision in crate::discriminator::classify_nodes(store, disc_cfg, &x, &meta)? {
            let id = decision.id.expect("chunk queries carry slot ids");
            if (start..end).contains(&id) {
                predictions[id] = decision.label;
            }
        }
    }
    Ok((predictions, truth))
}

fn stage2_config_echo(
    cfg: &TrainConfig,
    bb_cfg: &BackboneConfig,
    disc_cfg: &DiscriminatorConfig,
) -> serde_json::Value {
    serde_json::json!({ "backbone": bb_cfg, "discriminator": disc_cfg, "train": cfg })
}

/// Few-shot detection training on top of a stage-1 checkpoint.
///
/// Loads the encoder, refuses it if the checkpoint's recorded shape differs
/// from `bb_cfg`, then runs `stage2_epochs` of episode training. The first
/// `freeze_backbone_after` epochs update encoder and discriminator
/// together; afterwards the encoder is frozen and its parameter hash is
/// re-checked every epoch. Writes `stage2_metrics.jsonl`,
/// `stage2_best.json` (highest validation F1) and `stage2_last.json`.
pub fn run_stage2(
    cfg: &TrainConfig,
    bb_cfg: &BackboneConfig,
    disc_cfg_in: &DiscriminatorConfig,
    split: &DatasetSplit,
    stage1: &Path,
    out_dir: &Path,
) -> Result<Stage2Outcome, TrainError> {
    cfg.validate()?;
    bb_cfg.validate()?;
    let mut disc_cfg = disc_cfg_in.clone();
    disc_cfg.omega = cfg.omega;
    disc_cfg
        .validate()
        .map_err(|e| TrainError::Config(e.to_string()))?;
    if disc_cfg.feature_dim != bb_cfg.gat_out {
        return Err(TrainError::Config(format!(
            "discriminator feature_dim ({}) must match the encoder output width ({})",
            disc_cfg.feature_dim, bb_cfg.gat_out
        )));
    }
    if split.train.is_empty() || split.validation.is_empty() || split.test.is_empty() {
        return Err(TrainError::Config(
            "stage 2 needs non-empty train, validation, and test splits".into(),
        ));
    }
    fs::create_dir_all(out_dir)?;
    let best_path = out_dir.join("stage2_best.json");
    let last_path = out_dir.join("stage2_last.json");
    let metrics_path = out_dir.join("stage2_metrics.jsonl");

    // Encoder from stage 1; the shape recorded there must be the shape
    // we are about to run.
    let (echo_in, mut store) = checkpoint::load(stage1)?;
    let expected = serde_json::to_value(bb_cfg).expect("config serializes");
    let got = echo_in.get("backbone").cloned().unwrap_or(serde_json::Value::Null);
    if got != expected {
        return Err(TrainError::Compat(config_diff(&expected, &got)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SALT_S2_INIT));
    init_discriminator(&mut store, &mut rng, &disc_cfg);
    let mut opt = Adam::new(cfg.learning_rate);
    let echo = stage2_config_echo(cfg, bb_cfg, &disc_cfg);

    let support_slots = choose_support_slots(&split.train, disc_cfg.k, derive_seed(cfg.seed, SALT_SUPPORT))?;
    let mut buffer = AnomalyBuffer::new(disc_cfg.buffer_capacity)
        .map_err(TrainError::Discriminator)?;

    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    writeln!(
        metrics,
        "{}",
        serde_json::json!({
            "stage": 2,
            "batch_size": cfg.batch_size,
            "lr": cfg.learning_rate,
            "omega": cfg.omega,
            "seed": cfg.seed,
        })
    )?;

    let n = bb_cfg.nodes;
    let cap = cfg.max_batches_per_epoch.unwrap_or(usize::MAX);
    let mut history = Vec::with_capacity(cfg.stage2_epochs);
    let mut best: Option<(usize, f64)> = None;
    let mut last_f1 = 0.0;
    let mut skipped_batches = 0usize;
    let mut total_episodes = 0usize;
    let mut freeze_hash: Option<String> = None;
    // Once frozen, embeddings stop moving; cache them.
    let mut train_cache: Option<Array2<f64>> = None;
    let mut val_cache: Option<Array2<f64>> = None;
    let mut support_cache: Option<SupportSet> = None;
    let mut since_best = 0usize;

    for epoch in 0..cfg.stage2_epochs {
        let frozen = epoch >= cfg.freeze_backbone_after;
        if frozen && freeze_hash.is_none() {
            freeze_hash = Some(backbone_param_hash(&store));
            train_cache = Some(embed_plain(&store, bb_cfg, &split.train)?);
            val_cache = Some(embed_plain(&store, bb_cfg, &split.validation)?);
            support_cache = Some(embed_support(&store, bb_cfg, &split.train, &support_slots)?);
        }

        let mut order: Vec<usize> = (0..split.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed2(
            cfg.seed,
            SALT_S2_SHUFFLE,
            epoch as u64,
        )));
        let mut total = 0.0;
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).take(cap).enumerate() {
            let samples: Vec<&GraphSample> = chunk.iter().map(|&i| &split.train[i]).collect();
            let labels = flat_labels(&samples);
            let ep_seed = derive_seed2(
                derive_seed(cfg.seed, SALT_S2_EPISODE),
                epoch as u64,
                step as u64,
            );
            let mut sess = Session::new();
            let (members, meta) = if frozen {
                let cache = train_cache.as_ref().expect("cache set at freeze");
                let mut feats = Array2::<f64>::zeros((chunk.len() * n, bb_cfg.gat_out));
                for (b, &si) in chunk.iter().enumerate() {
                    for node in 0..n {
                        feats.row_mut(b * n + node).assign(&cache.row(si * n + node));
                    }
                }
                let episode = match sample_episode(&feats, &labels, &mut buffer, disc_cfg.k, ep_seed)
                {
                    Ok(e) => e,
                    Err(DiscError::Episode { .. }) | Err(DiscError::Shortage { .. }) => {
                        skipped_batches += 1;
                        continue;
                    }
                    Err(e) => return Err(e.into()),
                };
                // A batch whose labels all land in support leaves nothing for
                // the query cross-entropy; skip it like any other shortage.
                if episode.query_labeled.is_empty() {
                    skipped_batches += 1;
                    continue;
                }
                let (x, meta) = episode.assemble(None)?;
                (sess.tape.constant(x.into_dyn()), meta)
            } else {
                let x = batch_tensor(&samples);
                let xv = sess.tape.constant(to_time_major(&x));
                let emb = backbone_forward_taped(&mut sess, &store, bb_cfg, xv, &adjacencies(&samples))?;
                let slots = samples.len() * n;
                let flat = sess.tape.reshape(emb, &[slots, bb_cfg.gat_out]);
                let plain: Array2<f64> = sess
                    .tape
                    .value(flat)
                    .clone()
                    .into_dimensionality()
                    .expect("flat embedding is 2-D");
                let episode = match sample_episode(&plain, &labels, &mut buffer, disc_cfg.k, ep_seed)
                {
                    Ok(e) => e,
                    Err(DiscError::Episode { .. }) | Err(DiscError::Shortage { .. }) => {
                        skipped_batches += 1;
                        continue;
                    }
                    Err(e) => return Err(e.into()),
                };
                if episode.query_labeled.is_empty() {
                    skipped_batches += 1;
                    continue;
                }
                let (x_assembled, meta) = episode.assemble(None)?;
                let members = member_matrix_taped(&mut sess, flat, &x_assembled, &meta, slots);
                (members, meta)
            };
            let out = episode_losses(&mut sess, &store, &disc_cfg, members, &meta)?;
            let loss = sess.tape.scalar(out.joint);
            if !loss.is_finite() {
                return Err(TrainError::Divergence { stage: 2, epoch, step });
            }
            let grads = sess.tape.backward(out.joint);
            let updates = sess.collect_grads(&grads);
            opt.step(&mut store, &updates);
            total += loss;
            batches += 1;
            total_episodes += 1;
        }
        let mean_loss = if batches == 0 { 0.0 } else { total / batches as f64 };

        if frozen {
            let now = backbone_param_hash(&store);
            if Some(&now) != freeze_hash.as_ref() {
                return Err(TrainError::FreezeViolated { epoch });
            }
        }

        // Validation under the current parameters.
        let support = match (&support_cache, frozen) {
            (Some(s), true) => SupportSet {
                normal: s.normal.clone(),
                anomalous: s.anomalous.clone(),
            },
            _ => embed_support(&store, bb_cfg, &split.train, &support_slots)?,
        };
        let (preds, truth) = classify_split(
            &store,
            bb_cfg,
            &disc_cfg,
            &split.validation,
            &support,
            cfg.eval_chunk,
            if frozen { val_cache.as_ref() } else { None },
        )?;
        let report = evaluate(&preds, &truth)?;
        last_f1 = report.f1;
        let line = Stage2Metrics {
            epoch,
            mean_loss,
            precision: report.precision,
            recall: report.recall,
            f1: report.f1,
            frozen,
            seed: cfg.seed,
        };
        writeln!(metrics, "{}", serde_json::to_string(&line).expect("metrics serialize"))?;
        history.push(line);
        if best.map_or(true, |(_, b)| report.f1 > b) {
            best = Some((epoch, report.f1));
            checkpoint::save(&best_path, &echo, &store)?;
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience.is_some_and(|p| since_best >= p) {
                break;
            }
        }
    }
    if total_episodes == 0 {
        return Err(TrainError::Config(format!(
            "no batch ever held {k} labeled normal nodes plus an anomaly source; label more nodes or lower k",
            k = disc_cfg.k
        )));
    }
    checkpoint::save(&last_path, &echo, &store)?;
    metrics.flush()?;

    let final_hash = backbone_param_hash(&store);
    let freeze_hash = freeze_hash.expect("freeze phase is non-empty by validation");
    let (best_epoch, best_val_f1) = best.expect("at least one epoch ran");

    // Score the test split under the best checkpoint.
    let (_, best_store) = checkpoint::load(&best_path)?;
    let support = embed_support(&best_store, bb_cfg, &split.train, &support_slots)?;
    let (preds, truth) = classify_split(
        &best_store,
        bb_cfg,
        &disc_cfg,
        &split.test,
        &support,
        cfg.eval_chunk,
        None,
    )?;
    let test_report = evaluate(&preds, &truth)?;

    Ok(Stage2Outcome {
        best_path,
        last_path,
        metrics_path,
        best_epoch,
        best_val_f1,
        last_val_f1: last_f1,
        test_report,
        freeze_hash,
        final_hash,
        history,
        skipped_batches,
    })
}

// ---- contrast-weight sweep -----------------------------------------------------

/// Aggregated result for one contrast weight across seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub omega: f64,
    pub mean_f1: f64,
    /// `max − min` F1 across seeds.
    pub spread: f64,
    pub per_seed: Vec<(u64, f64)>,
}

/// Train stage 2 once per `(omega, seed)` cell — all from the same stage-1
/// checkpoint — and aggregate test F1 per omega. Cells run concurrently;
/// each writes its metrics under `out_dir/cell_w{omega}_s{seed}/`.
pub fn omega_sweep(
    cfg: &TrainConfig,
    bb_cfg: &BackboneConfig,
    disc_cfg: &DiscriminatorConfig,
    split: &DatasetSplit,
    stage1: &Path,
    omegas: &[f64],
    seeds: &[u64],
    out_dir: &Path,
) -> Result<Vec<SweepRow>, TrainError> {
    if omegas.len() < 2 {
        return Err(TrainError::Config(format!(
            "a sweep needs at least two contrast weights, got {}",
            omegas.len()
        )));
    }
    if seeds.is_empty() {
        return Err(TrainError::Config("a sweep needs at least one seed".into()));
    }
    fs::create_dir_all(out_dir)?;
    let cells: Vec<(f64, u64)> = omegas
        .iter()
        .flat_map(|&w| seeds.iter().map(move |&s| (w, s)))
        .collect();
    let results: Vec<((f64, u64), f64)> = cells
        .par_iter()
        .map(|&(omega, seed)| {
            let mut cell_cfg = cfg.clone();
            cell_cfg.omega = omega;
            cell_cfg.seed = seed;
            let cell_dir = out_dir.join(format!("cell_w{omega:.2}_s{seed}"));
            let outcome = run_stage2(&cell_cfg, bb_cfg, disc_cfg, split, stage1, &cell_dir)?;
            Ok(((omega, seed), outcome.test_report.f1))
        })
        .collect::<Result<_, TrainError>>()?;
    let rows = omegas
        .iter()
        .map(|&omega| {
            let per_seed: Vec<(u64, f64)> = results
                .iter()
                .filter(|((w, _), _)| *w == omega)
                .map(|((_, s), f1)| (*s, *f1))
                .collect();
            let mean_f1 = per_seed.iter().map(|(_, f)| f).sum::<f64>() / per_seed.len() as f64;
            let spread = per_seed
                .iter()
                .map(|(_, f)| *f)
                .fold(f64::NEG_INFINITY, f64::max)
                - per_seed.iter().map(|(_, f)| *f).fold(f64::INFINITY, f64::min);
            SweepRow {
                omega,
                mean_f1,
                spread,
                per_seed,
            }
        })
        .collect();
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;
    use tempfile::TempDir;

    // ---- dataset builders ----

    fn ring_adjacency(n: usize) -> Array2<f64> {
        let mut a = Array2::eye(n);
        for i in 0..n {
            a[[i, (i + 1) % n]] = 1.0;
            a[[(i + 1) % n, i]] = 1.0;
        }
        a
    }

    /// Windows of mild noise, with `anomalous` nodes swapped to a loud
    /// square wave. Truth everywhere; labels on an alternating subset so
    /// every window carries labeled normals and anomalies globally.
    fn make_sample(n: usize, m: usize, w: usize, rng: &mut ChaCha8Rng, anomalous: &[usize], label_all: bool) -> GraphSample {
        let mut x = Array3::<f64>::zeros((n, m, w));
        for node in 0..n {
            let loud = anomalous.contains(&node);
            for mod_ in 0..m {
                for t in 0..w {
                    let base: f64 = rng.gen_range(-0.3..0.3);
                    x[[node, mod_, t]] = if loud {
                        base + if t % 2 == 0 { 4.0 } else { -4.0 }
                    } else {
                        base
                    };
                }
            }
        }
        let truth: Vec<u8> = (0..n).map(|i| u8::from(anomalous.contains(&i))).collect();
        let labels: Vec<Option<u8>> = (0..n)
            .map(|i| {
                if label_all || i % 2 == 0 {
                    Some(u8::from(anomalous.contains(&i)))
                } else {
                    None
                }
            })
            .collect();
        GraphSample {
            adjacency: ring_adjacency(n),
            x,
            truth: Some(truth),
            labels: Some(labels),
            origin_time: 0.0,
            phase: 0,
        }
    }

    fn make_split(train: usize, val: usize, test: usize, n: usize, m: usize, w: usize) -> DatasetSplit {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut build = |count: usize| {
            (0..count)
                .map(|i| {
                    let anomalous = vec![i % n];
                    make_sample(n, m, w, &mut rng, &anomalous, true)
                })
                .collect::<Vec<_>>()
        };
        DatasetSplit {
            train: build(train),
            validation: build(val),
            test: build(test),
        }
    }

    fn small_backbone(n: usize, m: usize, w: usize) -> BackboneConfig {
        let mut bb = BackboneConfig::with_shape(n, m, w, 8);
        bb.layers = 1;
        bb.heads = 2;
        bb
    }

    fn small_train(seed: u64) -> TrainConfig {
        TrainConfig {
            stage1_epochs: 2,
            stage2_epochs: 4,
            freeze_backbone_after: 2,
            batch_size: 4,
            learning_rate: 1e-3,
            omega: 0.4,
            seed,
            max_batches_per_epoch: None,
            eval_chunk: 16,
            patience: None,
        }
    }

    fn small_disc(dim: usize) -> DiscriminatorConfig {
        let mut d = DiscriminatorConfig::with_dim(dim);
        d.k = 2;
        d.layers = 2;
        d
    }

    // ---- metrics ----

    #[test]
    fn report_arithmetic_and_pinned_f1() {
        let r = evaluate(&[1, 1, 0, 0, 1], &[1, 0, 0, 1, 1]).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_, r.tn), (2, 1, 1, 1));
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-12);

        // Published figures for the hardware benchmark: precision 0.8987
        // and recall 0.9210 combine to F1 0.9097.
        let f1 = f1_score(0.8987, 0.9210);
        assert!((f1 - 0.9097).abs() < 5e-4, "F1 = {f1}");

        let zeros = evaluate(&[0, 0], &[0, 0]).unwrap();
        assert_eq!((zeros.precision, zeros.recall, zeros.f1), (0.0, 0.0, 0.0));

        let perfect = evaluate(&[1, 0, 1], &[1, 0, 1]).unwrap();
        assert_eq!(perfect.f1, 1.0);

        match evaluate(&[0], &[0, 1]) {
            Err(TrainError::Alignment { predictions: 1, truth: 2 }) => {}
            other => panic!("expected alignment error, got {other:?}"),
        }
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        for bad in [
            TrainConfig { freeze_backbone_after: 100, ..ok.clone() },
            TrainConfig { freeze_backbone_after: 120, ..ok.clone() },
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { learning_rate: 0.0, ..ok.clone() },
            TrainConfig { learning_rate: f64::NAN, ..ok.clone() },
            TrainConfig { omega: 1.5, ..ok.clone() },
            TrainConfig { stage1_epochs: 0, ..ok.clone() },
            TrainConfig { eval_chunk: 0, ..ok.clone() },
            TrainConfig { max_batches_per_epoch: Some(0), ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(TrainError::Config(_))), "{bad:?}");
        }
    }

    // ---- stage 1 ----

    #[test]
    fn stage1_writes_deterministic_metrics_and_checkpoints() {
        let split = make_split(8, 4, 4, 6, 2, 8);
        let bb = small_backbone(6, 2, 8);
        let pre = PretrainConfig { k_neg: 2, walk_len: 2, ..Default::default() };
        let cfg = small_train(3);

        let run = |dir: &Path| run_stage1(&cfg, &bb, &pre, &split, dir).unwrap();
        let d1 = TempDir::new().unwrap();
        let d2 = TempDir::new().unwrap();
        let o1 = run(d1.path());
        let o2 = run(d2.path());

        let m1 = fs::read(&o1.metrics_path).unwrap();
        let m2 = fs::read(&o2.metrics_path).unwrap();
        assert_eq!(m1, m2, "same seed must produce byte-identical metrics");
        assert_eq!(o1.history.len(), cfg.stage1_epochs);
        assert!(o1.best_val_loss <= o1.last_val_loss + 1e-12);

        // The header records the run shape; each line parses as JSON.
        let text = String::from_utf8(m1).unwrap();
        let mut lines = text.lines();
        let header: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
        assert_eq!(header["batch_size"], 4);
        assert_eq!(header["lr"], 1e-3);
        assert_eq!(header["stage"], 1);
        assert_eq!(lines.count(), cfg.stage1_epochs);

        // Both checkpoints load and echo the encoder shape.
        let (echo, store) = checkpoint::load(&o1.best_path).unwrap();
        assert_eq!(echo["backbone"], serde_json::to_value(&bb).unwrap());
        assert!(store.get("backbone.gat.w").is_some());
        checkpoint::load(&o1.last_path).unwrap();

        // A different seed must change the stream.
        let d3 = TempDir::new().unwrap();
        let other = run_stage1(&TrainConfig { seed: 4, ..cfg.clone() }, &bb, &pre, &split, d3.path()).unwrap();
        assert_ne!(fs::read(&other.metrics_path).unwrap(), m2);
    }

    #[test]
    fn stage1_without_validation_split_falls_back_to_train_loss() {
        let mut split = make_split(6, 0, 2, 6, 2, 8);
        split.validation.clear();
        let bb = small_backbone(6, 2, 8);
        let pre = PretrainConfig { k_neg: 2, walk_len: 2, ..Default::default() };
        let mut cfg = small_train(1);
        cfg.stage1_epochs = 1;
        let dir = TempDir::new().unwrap();
        let out = run_stage1(&cfg, &bb, &pre, &split, dir.path()).unwrap();
        assert_eq!(out.best_val_loss, out.history[0].mean_loss);
    }

    // ---- stage 2 ----

    #[test]
    fn stage2_trains_freezes_and_reports() {
        let split = make_split(8, 4, 4, 6, 2, 8);
        let bb = small_backbone(6, 2, 8);
        let pre = PretrainConfig { k_neg: 2, walk_len: 2, ..Default::default() };
        let mut cfg = small_train(5);
        cfg.stage1_epochs = 1;
        cfg.omega = 0.7;
        let disc = small_disc(bb.gat_out);

        let dir = TempDir::new().unwrap();
        let s1 = run_stage1(&cfg, &bb, &pre, &split, dir.path()).unwrap();
        let s1_store = checkpoint::load(&s1.best_path).unwrap().1;
        let hash_before = backbone_param_hash(&s1_store);

        let out = run_stage2(&cfg, &bb, &disc, &split, &s1.best_path, dir.path()).unwrap();

        // The joint phase really moved the encoder; the frozen phase
        // really did not.
        assert_ne!(out.freeze_hash, hash_before, "encoder never updated before the freeze");
        assert_eq!(out.freeze_hash, out.final_hash);

        assert_eq!(out.history.len(), cfg.stage2_epochs);
        for (e, line) in out.history.iter().enumerate() {
            assert_eq!(line.frozen, e >= cfg.freeze_backbone_after);
            assert_eq!(line.seed, cfg.seed);
            assert!(line.f1.is_finite());
        }
        assert!(out.best_val_f1 >= out.history[0].f1 - 1e-12);

        // Metrics stream: header carries the contrast weight.
        let text = fs::read_to_string(&out.metrics_path).unwrap();
        let header: serde_json::Value =
            serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(header["omega"], 0.7);
        assert_eq!(header["stage"], 2);

        // Checkpoint config echo carries the plumbed contrast weight.
        let (echo, _) = checkpoint::load(&out.best_path).unwrap();
        assert_eq!(echo["train"]["omega"], 0.7);
        assert_eq!(echo["discriminator"]["omega"], 0.7);
        assert_eq!(echo["backbone"], serde_json::to_value(&bb).unwrap());

        // The test report is a valid confusion table over every test slot.
        let total = out.test_report.tp + out.test_report.fp + out.test_report.fn_ + out.test_report.tn;
        assert_eq!(total, split.test.len() * 6);
    }

    #[test]
    fn stage2_is_deterministic_per_seed() {
        let split = make_split(6, 3, 2, 6, 2, 8);
        let bb = small_backbone(6, 2, 8);
        let pre = PretrainConfig { k_neg: 2, walk_len: 2, ..Default::default() };
        let mut cfg = small_train(9);
        cfg.stage1_epochs = 1;
        cfg.stage2_epochs = 2;
        cfg.freeze_backbone_after = 1;
        let disc = small_disc(bb.gat_out);

        let dir = TempDir::new().unwrap();
        let s1 = run_stage1(&cfg, &bb, &pre, &split, dir.path()).unwrap();
        let a = TempDir::new().unwrap();
        let b = TempDir::new().unwrap();
        let oa = run_stage2(&cfg, &bb, &disc, &split, &s1.best_path, a.path()).unwrap();
        let ob = run_stage2(&cfg, &bb, &disc, &split, &s1.best_path, b.path()).unwrap();
        assert_eq!(
            fs::read(&oa.metrics_path).unwrap(),
            fs::read(&ob.metrics_path).unwrap()
        );
        assert_eq!(oa.test_report, ob.test_report);
    }

    #[test]
    fn stage2_aborts_on_non_finite_loss() {
        let mut split = make_split(4, 2, 2, 6, 2, 8);
        split.train[0].x[[0, 0, 0]] = f64::NAN;
        let bb = small_backbone(6, 2, 8);
        let pre = PretrainConfig { k_neg: 2, walk_len: 2, ..Default::default() };
        let mut cfg = small_train(2);
        cfg.stage1_epochs = 1;
        cfg.batch_size = 4; // one batch holds every sample, poison included
        let disc = small_disc(bb.gat_out);

        let dir = TempDir::new().unwrap();
        // Stage 1 would also trip on the NaN; pretrain on a clean copy.
        let clean = make_split(4, 2, 2, 6, 2, 8);
        let s1 = run_stage1(&cfg, &bb, &pre, &clean, dir.path()).unwrap();
        match run_stage2(&cfg, &bb, &disc, &split, &s1.best_path, dir.path()) {
            Err(TrainError::Divergence { stage: 2, epoch: 0, .. }) => {}
            other => panic!("expected stage-2 divergence at epoch 0, got {other:?}"),
        }
    }

    #[test]
    fn stage2_refuses_mismatched_checkpoints() {
        let split = make_split(4, 2, 2, 6, 2, 8);
        let bb = small_backbone(6, 2, 8);
        let pre = PretrainConfig { k_neg: 2, walk_len: 2, ..Default::default() };
        let mut cfg = small_train(1);
        cfg.stage1_epochs = 1;
        let dir = TempDir::new().unwrap();
        let s1 = run_stage1(&cfg, &bb, &pre, &split, dir.path()).unwrap();

        let mut other = bb.clone();
        other.d_model = 16;
        other.cr_value_width = 8;
        let disc = small_disc(other.gat_out);
        match run_stage2(&cfg, &other, &disc, &split, &s1.best_path, dir.path()) {
            Err(TrainError::Compat(diff)) => {
                assert!(diff.contains("d_model"), "diff should name the field: {diff}");
            }
            other => panic!("expected a compatibility refusal, got {other:?}"),
        }
    }

    // ---- sweep ----

    #[test]
    fn omega_sweep_runs_cells_and_aggregates() {
        let split = make_split(6, 3, 3, 6, 2, 8);
        let bb = small_backbone(6, 2, 8);
        let pre = PretrainConfig { k_neg: 2, walk_len: 2, ..Default::default() };
        let mut cfg = small_train(1);
        cfg.stage1_epochs = 1;
        cfg.stage2_epochs = 2;
        cfg.freeze_backbone_after = 1;
        let disc = small_disc(bb.gat_out);

        let dir = TempDir::new().unwrap();
        let s1 = run_stage1(&cfg, &bb, &pre, &split, dir.path()).unwrap();
        let sweep_dir = dir.path().join("sweep");
        let rows = omega_sweep(
            &cfg,
            &bb,
            &disc,
            &split,
            &s1.best_path,
            &[0.2, 0.6],
            &[1, 2],
            &sweep_dir,
        )
        .unwrap();

        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].omega, 0.2);
        assert_eq!(rows[1].omega, 0.6);
        for row in &rows {
            assert_eq!(row.per_seed.len(), 2);
            let mean = row.per_seed.iter().map(|(_, f)| f).sum::<f64>() / 2.0;
            assert!((row.mean_f1 - mean).abs() < 1e-12);
            let hi = row.per_seed.iter().map(|(_, f)| *f).fold(f64::NEG_INFINITY, f64::max);
            let lo = row.per_seed.iter().map(|(_, f)| *f).fold(f64::INFINITY, f64::min);
            assert!((row.spread - (hi - lo)).abs() < 1e-12);
            for (seed, _) in &row.per_seed {
                let cell = sweep_dir.join(format!("cell_w{:.2}_s{seed}", row.omega));
                assert!(cell.join("stage2_metrics.jsonl").is_file());
            }
        }

        // Degenerate grids are refused.
        assert!(matches!(
            omega_sweep(&cfg, &bb, &disc, &split, &s1.best_path, &[0.4], &[1], &sweep_dir),
            Err(TrainError::Config(_))
        ));
        assert!(matches!(
            omega_sweep(&cfg, &bb, &disc, &split, &s1.best_path, &[0.2, 0.4], &[], &sweep_dir),
            Err(TrainError::Config(_))
        ));
    }

    #[test]
    fn patience_stops_early_but_defaults_off() {
        let split = make_split(6, 3, 2, 6, 2, 8);
        let bb = small_backbone(6, 2, 8);
        let pre = PretrainConfig { k_neg: 2, walk_len: 2, ..Default::default() };
        let mut cfg = small_train(1);
        cfg.stage1_epochs = 4;
        cfg.patience = Some(1);
        let dir = TempDir::new().unwrap();
        let out = run_stage1(&cfg, &bb, &pre, &split, dir.path()).unwrap();
        // Either the loss kept improving (all epochs ran) or it stopped
        // one epoch after the best one — never later.
        assert!(out.history.len() <= cfg.stage1_epochs);
        if out.history.len() < cfg.stage1_epochs {
            assert_eq!(out.history.len(), out.best_epoch + 2);
        }
        assert!(TrainConfig::default().patience.is_none());
    }
}
