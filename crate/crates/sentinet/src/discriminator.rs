//! Few-shot anomaly discriminator over a pair of coupled episode graphs.
//!
//! Every episode holds `K` labeled-normal and `K` labeled-anomalous support
//! members plus query members. Two dense graphs are built over all members:
//!
//! * the *instance* graph carries per-member features `concat(x, y)` and
//!   edge weights from squared feature differences;
//! * the *distribution* graph carries, per member, a soft membership vector
//!   over the `2K` support slots, so each node tracks how it relates to the
//!   labeled set as a whole.
//!
//! Propagation alternates `L` times — instance edges, distribution nodes,
//! distribution edges, instance nodes — with a distinct MLP per role per
//! round, and edge weights chained multiplicatively through sigmoid factors
//! so they stay in `(0, 1)`. Labels are read out at every round from both
//! graphs, trained with depth-weighted cross-entropy plus a support-level
//! contrastive term, and combined at inference by averaging both graphs'
//! anomaly mass.
//!
//! A bounded FIFO buffer of past anomaly embeddings backfills the anomalous
//! support set when a batch holds fewer than `K` labeled anomalies.
//!
//! Conventions fixed here:
//! * The distribution-node update concatenates a member's instance-edge
//!   weights toward the *support slots only*. Width stays `4K` regardless of
//!   query count, and predictions are equivariant to query order.
//! * The per-round label readout `ĥ` is one shared linear head on instance
//!   features.
//! * The contrastive term exponentiates temperature-scaled dot products;
//!   with raw dot-product sums the temperature would cancel out.

use std::collections::VecDeque;
use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::nn::{init_linear, init_mlp2, linear, mlp2, MlpHead, ParamStore, Session};
use crate::tensor::tape::Var;

#[derive(Debug, Error)]
pub enum DiscError {
    #[error("invalid discriminator config: {0}")]
    Config(String),
    #[error("requested {requested} entries, only {available} available")]
    Shortage { available: usize, requested: usize },
    #[error("episode needs {needed} members of this role, only {available} available")]
    Episode { available: usize, needed: usize },
    #[error("contract violation: {0}")]
    Contract(&'static str),
}

// ---- anomaly buffer ------------------------------------------------------------

/// Bounded FIFO of anomalous embeddings kept across batches.
#[derive(Debug, Clone)]
pub struct AnomalyBuffer {
    capacity: usize,
    entries: VecDeque<Array1<f64>>,
}

impl AnomalyBuffer {
    pub fn new(capacity: usize) -> Result<Self, DiscError> {
        if capacity == 0 {
            return Err(DiscError::Config("buffer capacity must be at least 1".into()));
        }
        Ok(Self {
            capacity,
            entries: VecDeque::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Append, evicting the oldest entry once full.
    pub fn push(&mut self, v: Array1<f64>) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(v);
    }

    /// The `count` most recent entries, oldest of them first, left in place.
    pub fn take(&self, count: usize) -> Result<Vec<Array1<f64>>, DiscError> {
        if count > self.entries.len() {
            return Err(DiscError::Shortage {
                available: self.entries.len(),
                requested: count,
            });
        }
        Ok(self
            .entries
            .iter()
            .skip(self.entries.len() - count)
            .cloned()
            .collect())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Array1<f64>> {
        self.entries.iter()
    }
}

// ---- configuration -------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// Embedding width fed into the episode graphs.
    pub feature_dim: usize,
    /// Support shots per class.
    pub k: usize,
    /// Propagation rounds (`L`).
    pub layers: usize,
    /// Instance-graph readout mix between edge evidence and the linear head.
    pub lambda1: f64,
    /// Distribution-graph readout mix between edge and membership evidence.
    pub lambda2: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Joint-loss share of the contrastive term.
    pub omega: f64,
    pub buffer_capacity: usize,
}

impl DiscriminatorConfig {
    pub fn with_dim(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            k: 5,
            layers: 5,
            lambda1: 0.5,
            lambda2: 0.5,
            tau: 0.1,
            omega: 0.4,
            buffer_capacity: 64,
        }
    }

    pub fn validate(&self) -> Result<(), DiscError> {
        let fail = |m: String| Err(DiscError::Config(m));
        if self.feature_dim == 0 {
            return fail("feature_dim must be positive".into());
        }
        if self.k == 0 {
            return fail("support shots k must be at least 1".into());
        }
        if self.layers == 0 {
            return fail("at least one propagation round is required".into());
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("omega", self.omega),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.tau > 0.0) {
            return fail(format!("temperature must be positive, got {}", self.tau));
        }
        if self.buffer_capacity == 0 {
            return fail("buffer capacity must be at least 1".into());
        }
        Ok(())
    }

    /// Instance-node feature width: embedding plus the 2-wide label slice.
    pub fn ins_width(&self) -> usize {
        self.feature_dim + 2
    }

    /// Distribution-node feature width: one slot per support member.
    pub fn dis_width(&self) -> usize {
        2 * self.k
    }
}

/// Register every MLP of the propagation stack plus the shared readout head.
/// Edge factors (`ins`, `dis`) exist for rounds `0..=L`; node updates
/// (`i2d`, `d2i`) for rounds `1..=L`; each round owns distinct parameters.
pub fn init_discriminator<R: rand::Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    cfg: &DiscriminatorConfig,
) {
    for l in 0..=cfg.layers {
        init_mlp2(store, rng, &format!("disc.l{l}.ins"), cfg.ins_width(), 1);
        init_mlp2(store, rng, &format!("disc.l{l}.dis"), cfg.dis_width(), 1);
        if l >= 1 {
            init_mlp2(store, rng, &format!("disc.l{l}.i2d"), 2 * cfg.dis_width(), cfg.dis_width());
            init_mlp2(store, rng, &format!("disc.l{l}.d2i"), 2 * cfg.ins_width(), cfg.ins_width());
        }
    }
    init_linear(store, rng, "disc.head", cfg.ins_width(), 2, true);
}

// ---- episode sampling ----------------------------------------------------------

/// One sampled episode; members keep their flattened slot id where they have
/// one (buffer-sourced anomalies do not).
#[derive(Debug, Clone)]
pub struct EpisodeBatch {
    pub support_normal: Vec<(usize, Array1<f64>)>,
    pub support_anomalous: Vec<(Option<usize>, Array1<f64>)>,
    pub query_labeled: Vec<(usize, Array1<f64>, u8)>,
    pub query_unlabeled: Vec<(usize, Array1<f64>)>,
}

impl EpisodeBatch {
    pub fn k(&self) -> usize {
        self.support_normal.len()
    }

    /// The contrast anchor: the first sampled normal.
    pub fn anchor(&self) -> &Array1<f64> {
        &self.support_normal[0].1
    }

    /// Remaining support normals.
    pub fn positives(&self) -> Vec<Array1<f64>> {
        self.support_normal[1..].iter().map(|(_, x)| x.clone()).collect()
    }

    /// All support anomalies.
    pub fn negatives(&self) -> Vec<Array1<f64>> {
        self.support_anomalous.iter().map(|(_, x)| x.clone()).collect()
    }

    /// Stack members into one matrix (support normals, support anomalies,
    /// labeled queries, unlabeled queries, then zero-padding up to `pad_to`)
    /// and describe the layout.
    pub fn assemble(&self, pad_to: Option<usize>) -> Result<(Array2<f64>, EpisodeMeta), DiscError> {
        let k = self.k();
        let d = self.support_normal[0].1.len();
        let real = 2 * k + self.query_labeled.len() + self.query_unlabeled.len();
        let n = match pad_to {
            Some(p) if p < real => {
                return Err(DiscError::Episode {
                    available: p,
                    needed: real,
                })
            }
            Some(p) => p,
            None => real,
        };
        let mut x = Array2::zeros((n, d));
        let mut labels = vec![None; n];
        let mut ids = vec![None; n];
        let mut active = vec![false; n];
        let mut row = 0;
        for (id, v) in &self.support_normal {
            x.row_mut(row).assign(v);
            labels[row] = Some(0);
            ids[row] = Some(*id);
            active[row] = true;
            row += 1;
        }
        for (id, v) in &self.support_anomalous {
            x.row_mut(row).assign(v);
            labels[row] = Some(1);
            ids[row] = *id;
            active[row] = true;
            row += 1;
        }
        for (id, v, y) in &self.query_labeled {
            x.row_mut(row).assign(v);
            labels[row] = Some(*y);
            ids[row] = Some(*id);
            active[row] = true;
            row += 1;
        }
        for (id, v) in &self.query_unlabeled {
            x.row_mut(row).assign(v);
            ids[row] = Some(*id);
            active[row] = true;
            row += 1;
        }
        Ok((
            x,
            EpisodeMeta {
                k,
                n,
                labels,
                ids,
                active,
            },
        ))
    }
}

/// Layout of an assembled episode: the first `2k` rows are support (normals
/// then anomalies), the rest queries and padding.
#[derive(Debug, Clone)]
pub struct EpisodeMeta {
    pub k: usize,
    pub n: usize,
    /// Per member; support rows always carry `Some`, padding never does.
    pub labels: Vec<Option<u8>>,
    /// Flattened slot ids for traceability; `None` for buffer rows/padding.
    pub ids: Vec<Option<usize>>,
    pub active: Vec<bool>,
}

impl EpisodeMeta {
    pub fn support(&self) -> usize {
        2 * self.k
    }

    /// One-hot class matrix of the support rows, `(2K, 2)`.
    pub fn support_onehot(&self) -> Array2<f64> {
        let mut y = Array2::zeros((self.support(), 2));
        for i in 0..self.support() {
            y[[i, self.labels[i].unwrap() as usize]] = 1.0;
        }
        y
    }

    /// Active non-support member indices.
    pub fn query_indices(&self) -> Vec<usize> {
        (self.support()..self.n).filter(|&i| self.active[i]).collect()
    }

    pub fn labeled_queries(&self) -> Vec<(usize, u8)> {
        self.query_indices()
            .into_iter()
            .filter_map(|i| self.labels[i].map(|y| (i, y)))
            .collect()
    }
}

/// Draw a balanced episode: `K` labeled normals and `K` labeled anomalies
/// uniformly without replacement, topping up anomalies from the buffer's
/// most recent entries. Remaining labeled slots become labeled queries,
/// unlabeled slots unlabeled queries; the anchor is the first drawn normal.
/// Afterwards every labeled anomaly of this batch is pushed to the buffer.
pub fn sample_episode(
    features: &Array2<f64>,
    labels: &[Option<u8>],
    buffer: &mut AnomalyBuffer,
    k: usize,
    seed: u64,
) -> Result<EpisodeBatch, DiscError> {
    if k == 0 {
        return Err(DiscError::Episode {
            available: 0,
            needed: 1,
        });
    }
    if features.shape()[0] != labels.len() {
        return Err(DiscError::Config(format!(
            "feature rows ({}) and labels ({}) disagree",
            features.shape()[0],
            labels.len()
        )));
    }
    let normal_ids: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Some(0)).collect();
    let anom_ids: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Some(1)).collect();
    if normal_ids.len() < k {
        return Err(DiscError::Episode {
            available: normal_ids.len(),
            needed: k,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normals = normal_ids.clone();
    normals.shuffle(&mut rng);
    let picked_normal = &normals[..k];
    let mut anoms = anom_ids.clone();
    anoms.shuffle(&mut rng);
    let picked_anom = &anoms[..anom_ids.len().min(k)];
    let shortfall = k - picked_anom.len();
    let backfill = if shortfall > 0 {
        buffer.take(shortfall).map_err(|_| DiscError::Shortage {
            available: picked_anom.len() + buffer.len(),
            requested: k,
        })?
    } else {
        Vec::new()
    };

    let row = |i: usize| features.row(i).to_owned();
    let support_normal: Vec<(usize, Array1<f64>)> =
        picked_normal.iter().map(|&i| (i, row(i))).collect();
    let mut support_anomalous: Vec<(Option<usize>, Array1<f64>)> =
        picked_anom.iter().map(|&i| (Some(i), row(i))).collect();
    support_anomalous.extend(backfill.into_iter().map(|v| (None, v)));

    let in_support = |i: usize| picked_normal.contains(&i) || picked_anom.contains(&i);
    let mut query_labeled: Vec<(usize, Array1<f64>, u8)> = (0..labels.len())
        .filter(|&i| labels[i].is_some() && !in_support(i))
        .map(|i| (i, row(i), labels[i].unwrap()))
        .collect();
    query_labeled.sort_by_key(|(i, _, _)| *i);
    let query_unlabeled: Vec<(usize, Array1<f64>)> = (0..labels.len())
        .filter(|&i| labels[i].is_none())
        .map(|i| (i, row(i)))
        .collect();

    for &i in &anom_ids {
        buffer.push(row(i));
    }
    Ok(EpisodeBatch {
        support_normal,
        support_anomalous,
        query_labeled,
        query_unlabeled,
    })
}

// ---- graph propagation ---------------------------------------------------------

/// Tensors of one propagation round.
#[derive(Debug, Clone, Copy)]
pub struct DualGraphs {
    /// `(n, d+2)` instance-node features.
    pub v_ins: Var,
    /// `(n, n)` instance-edge weights in `(0, 1)`.
    pub e_ins: Var,
    /// `(n, 2K)` distribution-node membership vectors.
    pub v_dis: Var,
    /// `(n, n)` distribution-edge weights in `(0, 1)`.
    pub e_dis: Var,
}

/// `(n, n, w)` tensor of elementwise squared differences between all member
/// pairs of a `(n, w)` feature matrix.
fn pairwise_sqdiff(sess: &mut Session, v: Var) -> Var {
    let shape = sess.tape.value(v).shape().to_vec();
    let (n, w) = (shape[0], shape[1]);
    let vi = sess.tape.reshape(v, &[n, 1, w]);
    let vi = sess.tape.broadcast_to(vi, &[n, n, w]);
    let vj = sess.tape.reshape(v, &[1, n, w]);
    let vj = sess.tape.broadcast_to(vj, &[n, n, w]);
    let diff = sess.tape.sub(vi, vj);
    sess.tape.square(diff)
}

/// Sigmoid edge factor `(n, n)` from pairwise squared node differences.
fn edge_factor(sess: &mut Session, store: &ParamStore, prefix: &str, v: Var) -> Var {
    let n = sess.tape.value(v).shape()[0];
    let sq = pairwise_sqdiff(sess, v);
    let raw = mlp2(sess, store, prefix, sq, MlpHead::Sigmoid);
    sess.tape.reshape(raw, &[n, n])
}

/// Zero-diagonal aggregation mask excluding inactive (padded) columns.
fn aggregation_mask(meta: &EpisodeMeta) -> ArrayD<f64> {
    let n = meta.n;
    let mut c = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if i != j && meta.active[j] {
                c[[i, j]] = 1.0;
            }
        }
    }
    c.into_dyn()
}

/// Build layer-0 graphs. Instance nodes are `concat(x, y)` with a zero label
/// slice for queries; distribution nodes are same-label indicators over the
/// support slots for support members and uniform `1/(2K)` for the rest; both
/// edge sets come from sigmoid MLPs on pairwise squared differences.
pub fn init_graphs(
    sess: &mut Session,
    store: &ParamStore,
    cfg: &DiscriminatorConfig,
    x: Var,
    meta: &EpisodeMeta,
) -> Result<DualGraphs, DiscError> {
    cfg.validate()?;
    let shape = sess.tape.value(x).shape().to_vec();
    if shape != [meta.n, cfg.feature_dim] {
        return Err(DiscError::Config(format!(
            "episode features are {shape:?}, expected [{}, {}]",
            meta.n, cfg.feature_dim
        )));
    }
    if meta.k != cfg.k {
        return Err(DiscError::Config(format!(
            "episode has k={}, config expects k={}",
            meta.k, cfg.k
        )));
    }
    let n = meta.n;
    let s = meta.support();

    // Label slice: one-hot for support members, zeros for queries/padding.
    let mut y0 = Array2::zeros((n, 2));
    for i in 0..s {
        y0[[i, meta.labels[i].unwrap() as usize]] = 1.0;
    }
    let yv = sess.tape.constant(y0.into_dyn());
    let v_ins = sess.tape.concat_last(&[x, yv]);
    let e_ins = edge_factor(sess, store, "disc.l0.ins", v_ins);

    let mut d0 = Array2::from_elem((n, s), 1.0 / s as f64);
    for i in 0..s {
        for j in 0..s {
            d0[[i, j]] = if meta.labels[i] == meta.labels[j] { 1.0 } else { 0.0 };
        }
    }
    let v_dis = sess.tape.constant(d0.into_dyn());
    let e_dis = edge_factor(sess, store, "disc.l0.dis", v_dis);
    Ok(DualGraphs {
        v_ins,
        e_ins,
        v_dis,
        e_dis,
    })
}

/// One alternating round: instance edges, distribution nodes, distribution
/// edges, instance nodes — each with round-`l` parameters.
pub fn propagate_layer(
    sess: &mut Session,
    store: &ParamStore,
    cfg: &DiscriminatorConfig,
    prev: &DualGraphs,
    l: usize,
    meta: &EpisodeMeta,
) -> Result<DualGraphs, DiscError> {
    if l == 0 || l > cfg.layers {
        return Err(DiscError::Config(format!(
            "round {l} outside the configured stack of {} rounds",
            cfg.layers
        )));
    }
    let s = meta.support();

    // Instance edges: fresh similarity factor times the running chain.
    let factor_ins = edge_factor(sess, store, &format!("disc.l{l}.ins"), prev.v_ins);
    let e_ins = sess.tape.mul(factor_ins, prev.e_ins);

    // Distribution nodes: previous membership joined with this member's
    // instance-edge weights toward the support slots.
    let support_edges = sess.tape.slice_last(e_ins, 0, s);
    let i2d_in = sess.tape.concat_last(&[prev.v_dis, support_edges]);
    let v_dis = mlp2(sess, store, &format!("disc.l{l}.i2d"), i2d_in, MlpHead::Identity);

    // Distribution edges from the *previous* membership vectors.
    let factor_dis = edge_factor(sess, store, &format!("disc.l{l}.dis"), prev.v_dis);
    let e_dis = sess.tape.mul(factor_dis, prev.e_dis);

    // Instance nodes: previous features joined with distribution-edge-
    // weighted neighbor features (self and padding excluded).
    let mask = aggregation_mask(meta);
    let masked = sess.tape.mul_const(e_dis, mask);
    let agg = sess.tape.matmul(masked, prev.v_ins);
    let d2i_in = sess.tape.concat_last(&[prev.v_ins, agg]);
    let v_ins = mlp2(sess, store, &format!("disc.l{l}.d2i"), d2i_in, MlpHead::Identity);

    Ok(DualGraphs {
        v_ins,
        e_ins,
        v_dis,
        e_dis,
    })
}

/// Label logits for every member at one round, before softmax:
/// instance-graph logits mix edge-aggregated support labels with the shared
/// linear head; distribution-graph logits mix edge-aggregated labels with
/// the membership vector's label mass.
pub fn predict_logits(
    sess: &mut Session,
    store: &ParamStore,
    cfg: &DiscriminatorConfig,
    g: &DualGraphs,
    meta: &EpisodeMeta,
) -> Result<(Var, Var), DiscError> {
    if meta.support() == 0 {
        return Err(DiscError::Contract("prediction needs a non-empty support set"));
    }
    let s = meta.support();
    let ys = sess.tape.constant(meta.support_onehot().into_dyn());

    let ins_edges = sess.tape.slice_last(g.e_ins, 0, s);
    let ins_agg = sess.tape.matmul(ins_edges, ys);
    let ins_agg = sess.tape.scale(ins_agg, cfg.lambda1);
    let head = linear(sess, store, "disc.head", g.v_ins);
    let head = sess.tape.scale(head, 1.0 - cfg.lambda1);
    let ins_logits = sess.tape.add(ins_agg, head);

    let dis_edges = sess.tape.slice_last(g.e_dis, 0, s);
    let dis_agg = sess.tape.matmul(dis_edges, ys);
    let dis_agg = sess.tape.scale(dis_agg, cfg.lambda2);
    let mass = sess.tape.matmul(g.v_dis, ys);
    let mass = sess.tape.scale(mass, 1.0 - cfg.lambda2);
    let dis_logits = sess.tape.add(dis_agg, mass);
    Ok((ins_logits, dis_logits))
}

// ---- losses --------------------------------------------------------------------

/// Cross-entropy summed over the labeled query members, from `(n, 2)` logits.
fn labeled_query_ce(sess: &mut Session, logits: Var, meta: &EpisodeMeta) -> Result<Var, DiscError> {
    let labeled = meta.labeled_queries();
    if labeled.is_empty() {
        return Err(DiscError::Contract("loss needs at least one labeled query member"));
    }
    let idx: Vec<usize> = labeled.iter().map(|&(i, _)| i).collect();
    let logp = sess.tape.log_softmax_last(logits);
    let rows = sess.tape.gather0(logp, &idx);
    let mut onehot = Array2::zeros((idx.len(), 2));
    for (r, &(_, y)) in labeled.iter().enumerate() {
        onehot[[r, y as usize]] = 1.0;
    }
    let picked = sess.tape.mul_const(rows, onehot.into_dyn());
    let total = sess.tape.sum_all(picked);
    Ok(sess.tape.neg(total))
}

/// Support-level contrast: `−log Σ_pos exp(a·v/τ) / Σ_neg exp(a·v/τ)`,
/// max-subtracted. Unbounded below by design — positives and negatives are
/// separate sets.
pub fn contrastive_loss(
    anchor: &Array1<f64>,
    positives: &[Array1<f64>],
    negatives: &[Array1<f64>],
    tau: f64,
) -> Result<f64, DiscError> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(DiscError::Contract("contrast needs non-empty positive and negative sets"));
    }
    if !(tau > 0.0) {
        return Err(DiscError::Config(format!("temperature must be positive, got {tau}")));
    }
    let logits = |set: &[Array1<f64>]| -> Vec<f64> { set.iter().map(|v| anchor.dot(v) / tau).collect() };
    let lse = |ls: &[f64]| -> f64 {
        let m = ls.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + ls.iter().map(|&l| (l - m).exp()).sum::<f64>().ln()
    };
    Ok(lse(&logits(negatives)) - lse(&logits(positives)))
}

/// Taped version of [`contrastive_loss`] over member-row vectors.
pub fn contrastive_loss_taped(
    sess: &mut Session,
    anchor: Var,
    positives: &[Var],
    negatives: &[Var],
    tau: f64,
) -> Result<Var, DiscError> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(DiscError::Contract("contrast needs non-empty positive and negative sets"));
    }
    if !(tau > 0.0) {
        return Err(DiscError::Config(format!("temperature must be positive, got {tau}")));
    }
    let side = |set: &[Var], sess: &mut Session| -> Var {
        let logits: Vec<Var> = set
            .iter()
            .map(|&v| {
                let d = sess.tape.dot(anchor, v);
                sess.tape.scale(d, 1.0 / tau)
            })
            .collect();
        let stacked = sess.tape.stack_scalars(&logits);
        sess.tape.logsumexp_last(stacked)
    };
    let neg = side(negatives, sess);
    let pos = side(positives, sess);
    Ok(sess.tape.sub(neg, pos))
}

/// Depth weights `1/2^(L−l)` for rounds `l = 1..=L`: late rounds dominate.
pub fn layer_weights(layers: usize) -> Vec<f64> {
    (1..=layers).map(|l| 1.0 / f64::powi(2.0, (layers - l) as i32)).collect()
}

/// `ω·contrast + (1−ω)·Σ_l 1/2^(L−l) (ins_l + dis_l)` on plain numbers.
pub fn joint_loss(omega: f64, contrast: f64, per_layer: &[(f64, f64)]) -> Result<f64, DiscError> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(DiscError::Config(format!("omega must lie in [0, 1], got {omega}")));
    }
    let graph: f64 = layer_weights(per_layer.len())
        .iter()
        .zip(per_layer)
        .map(|(w, (ins, dis))| w * (ins + dis))
        .sum();
    Ok(omega * contrast + (1.0 - omega) * graph)
}

/// Everything one training step needs from a single episode.
#[derive(Debug)]
pub struct EpisodeOutputs {
    pub joint: Var,
    pub contrast: Var,
    /// `(instance CE, distribution CE)` per round, `l = 1..=L`.
    pub per_layer: Vec<(Var, Var)>,
    /// Round-`L` class probabilities, `(n, 2)` each.
    pub final_ins: Var,
    pub final_dis: Var,
}

/// Run the full differentiable episode: init, `L` rounds, per-round losses,
/// support contrast, and the depth-weighted joint objective.
pub fn episode_losses(
    sess: &mut Session,
    store: &ParamStore,
    cfg: &DiscriminatorConfig,
    x: Var,
    meta: &EpisodeMeta,
) -> Result<EpisodeOutputs, DiscError> {
    cfg.validate()?;
    if cfg.k < 2 {
        return Err(DiscError::Contract("contrast needs k ≥ 2 so the positive set is non-empty"));
    }
    let mut g = init_graphs(sess, store, cfg, x, meta)?;
    let mut per_layer = Vec::with_capacity(cfg.layers);
    let mut last_logits = None;
    for l in 1..=cfg.layers {
        g = propagate_layer(sess, store, cfg, &g, l, meta)?;
        let (ins_logits, dis_logits) = predict_logits(sess, store, cfg, &g, meta)?;
        let ins_ce = labeled_query_ce(sess, ins_logits, meta)?;
        let dis_ce = labeled_query_ce(sess, dis_logits, meta)?;
        per_layer.push((ins_ce, dis_ce));
        last_logits = Some((ins_logits, dis_logits));
    }

    // Support rows on the tape: anchor is row 0, positives rows 1..K,
    // negatives rows K..2K.
    let row = |sess: &mut Session, i: usize| -> Var {
        let r = sess.tape.gather0(x, &[i]);
        sess.tape.reshape(r, &[cfg.feature_dim])
    };
    let anchor = row(sess, 0);
    let positives: Vec<Var> = (1..cfg.k).map(|i| row(sess, i)).collect();
    let negatives: Vec<Var> = (cfg.k..2 * cfg.k).map(|i| row(sess, i)).collect();
    let contrast = contrastive_loss_taped(sess, anchor, &positives, &negatives, cfg.tau)?;

    let weights = layer_weights(cfg.layers);
    let mut graph_total: Option<Var> = None;
    for (w, (ins, dis)) in weights.iter().zip(&per_layer) {
        let pair = sess.tape.add(*ins, *dis);
        let pair = sess.tape.scale(pair, *w);
        graph_total = Some(match graph_total {
            Some(t) => sess.tape.add(t, pair),
            None => pair,
        });
    }
    let graph_total = graph_total.unwrap();
    let graph_part = sess.tape.scale(graph_total, 1.0 - cfg.omega);
    let cont_part = sess.tape.scale(contrast, cfg.omega);
    let joint = sess.tape.add(graph_part, cont_part);

    let (ins_logits, dis_logits) = last_logits.unwrap();
    let final_ins = sess.tape.softmax_last(ins_logits);
    let final_dis = sess.tape.softmax_last(dis_logits);
    Ok(EpisodeOutputs {
        joint,
        contrast,
        per_layer,
        final_ins,
        final_dis,
    })
}

// ---- inference -----------------------------------------------------------------

/// Mean of the two graphs' anomaly masses; anomalous at or above ½.
pub fn decision_score(ins_anomalous: f64, dis_anomalous: f64) -> (f64, u8) {
    let score = 0.5 * (ins_anomalous + dis_anomalous);
    (score, u8::from(score >= 0.5))
}

/// Verdict for one query member.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeDecision {
    /// Index into the episode's member order.
    pub member: usize,
    /// Flattened slot id, when the member has one.
    pub id: Option<usize>,
    pub score: f64,
    pub label: u8,
}

/// Gradient-free classification of every active query member.
pub fn classify_nodes(
    store: &ParamStore,
    cfg: &DiscriminatorConfig,
    x: &Array2<f64>,
    meta: &EpisodeMeta,
) -> Result<Vec<NodeDecision>, DiscError> {
    cfg.validate()?;
    let mut sess = Session::frozen();
    let xv = sess.tape.constant(x.clone().into_dyn());
    let mut g = init_graphs(&mut sess, store, cfg, xv, meta)?;
    for l in 1..=cfg.layers {
        g = propagate_layer(&mut sess, store, cfg, &g, l, meta)?;
    }
    let (ins_logits, dis_logits) = predict_logits(&mut sess, store, cfg, &g, meta)?;
    let ins = sess.tape.softmax_last(ins_logits);
    let dis = sess.tape.softmax_last(dis_logits);
    let ins = sess.tape.value(ins);
    let dis = sess.tape.value(dis);
    Ok(meta
        .query_indices()
        .into_iter()
        .map(|i| {
            let (score, label) = decision_score(ins[IxDyn(&[i, 1])], dis[IxDyn(&[i, 1])]);
            NodeDecision {
                member: i,
                id: meta.ids[i],
                score,
                label,
            }
        })
        .collect())
}

// ---- detection records ---------------------------------------------------------

/// One line of the detection output stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub sample_id: usize,
    pub node_id: usize,
    pub score: f64,
    pub label: u8,
    pub threshold: f64,
}

pub fn write_detections(path: &Path, records: &[DetectionRecord]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut f, rec).map_err(std::io::Error::other)?;
        f.write_all(b"\n")?;
    }
    f.flush()
}

pub fn read_detections(path: &Path) -> std::io::Result<Vec<DetectionRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(std::io::Error::other)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::nn::Adam;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand::Rng;

    fn vecd(vals: &[f64]) -> Array1<f64> {
        Array1::from_vec(vals.to_vec())
    }

    #[test]
    fn buffer_evicts_oldest_and_takes_most_recent() {
        let mut b = AnomalyBuffer::new(2).unwrap();
        b.push(vecd(&[1.0]));
        b.push(vecd(&[2.0]));
        b.push(vecd(&[3.0]));
        let held: Vec<f64> = b.iter().map(|v| v[0]).collect();
        assert_eq!(held, vec![2.0, 3.0]);
        assert_eq!(b.take(1).unwrap()[0][0], 3.0);
        match b.take(3) {
            Err(DiscError::Shortage {
                available,
                requested,
            }) => assert_eq!((available, requested), (2, 3)),
            other => panic!("expected shortage, got {other:?}"),
        }
        assert!(matches!(AnomalyBuffer::new(0), Err(DiscError::Config(_))));
    }

    /// The buffer always equals the tail of the push history — checked
    /// against a plain list-slicing oracle over a long random run.
    #[test]
    fn buffer_matches_list_slicing_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut buf = AnomalyBuffer::new(64).unwrap();
        let mut history: Vec<f64> = Vec::new();
        for i in 0..10_000 {
            let v = rng.gen_range(-1.0..1.0);
            buf.push(vecd(&[v]));
            history.push(v);
            if i % 997 == 0 {
                let tail = &history[history.len().saturating_sub(64)..];
                let held: Vec<f64> = buf.iter().map(|v| v[0]).collect();
                assert_eq!(held, tail);
                assert!(buf.len() <= buf.capacity());
            }
        }
        let tail = &history[history.len() - 64..];
        let held: Vec<f64> = buf.iter().map(|v| v[0]).collect();
        assert_eq!(held, tail);
        // take() returns the most recent `count`, oldest of them first.
        let last5: Vec<f64> = buf.take(5).unwrap().iter().map(|v| v[0]).collect();
        assert_eq!(last5, history[history.len() - 5..]);
    }

    /// Feature matrix with recognizable rows: row i = [i, i, …].
    fn tagged_features(s: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((s, d), |(i, _)| i as f64)
    }

    #[test]
    fn episode_sampling_counts_roles_and_partitions() {
        let feats = tagged_features(12, 3);
        // 5 normals, 3 anomalies, 4 unlabeled.
        let labels: Vec<Option<u8>> = vec![
            Some(0), Some(0), Some(0), Some(0), Some(0),
            Some(1), Some(1), Some(1),
            None, None, None, None,
        ];
        let mut buf = AnomalyBuffer::new(8).unwrap();
        let ep = sample_episode(&feats, &labels, &mut buf, 2, 42).unwrap();
        assert_eq!(ep.support_normal.len(), 2);
        assert_eq!(ep.support_anomalous.len(), 2);
        assert_eq!(ep.query_labeled.len(), 4);
        assert_eq!(ep.query_unlabeled.len(), 4);

        // Roles partition the slots exactly once.
        let mut seen: Vec<usize> = ep
            .support_normal
            .iter()
            .map(|(i, _)| *i)
            .chain(ep.support_anomalous.iter().map(|(i, _)| i.unwrap()))
            .chain(ep.query_labeled.iter().map(|(i, _, _)| *i))
            .chain(ep.query_unlabeled.iter().map(|(i, _)| *i))
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..12).collect::<Vec<_>>());

        // The anchor is the first drawn normal, and rows carry slot values.
        assert_eq!(ep.anchor()[0], ep.support_normal[0].0 as f64);
        assert_eq!(ep.positives().len(), 1);
        assert_eq!(ep.negatives().len(), 2);

        // All three batch anomalies were pushed afterwards.
        assert_eq!(buf.len(), 3);

        // Same seed reproduces the draw; a different seed changes it.
        let mut buf2 = AnomalyBuffer::new(8).unwrap();
        let ep2 = sample_episode(&feats, &labels, &mut buf2, 2, 42).unwrap();
        let ids = |e: &EpisodeBatch| {
            (
                e.support_normal.iter().map(|(i, _)| *i).collect::<Vec<_>>(),
                e.support_anomalous.iter().map(|(i, _)| *i).collect::<Vec<_>>(),
            )
        };
        assert_eq!(ids(&ep), ids(&ep2));
        let mut buf3 = AnomalyBuffer::new(8).unwrap();
        let mut any_differs = false;
        for seed in 0..20 {
            let e = sample_episode(&feats, &labels, &mut buf3, 2, seed).unwrap();
            if ids(&e) != ids(&ep) {
                any_differs = true;
            }
        }
        assert!(any_differs, "20 different seeds never changed the draw");
    }

    #[test]
    fn episode_backfills_from_buffer_and_reports_shortages() {
        let feats = tagged_features(6, 2);
        // 3 normals, 1 anomaly, 2 unlabeled.
        let labels: Vec<Option<u8>> = vec![Some(0), Some(0), Some(0), Some(1), None, None];
        let mut buf = AnomalyBuffer::new(4).unwrap();
        buf.push(vecd(&[100.0, 100.0]));
        buf.push(vecd(&[200.0, 200.0]));

        let ep = sample_episode(&feats, &labels, &mut buf, 2, 7).unwrap();
        assert_eq!(ep.support_anomalous.len(), 2);
        // One from the batch (tagged with its id), one most-recent from the buffer.
        assert_eq!(ep.support_anomalous[0].0, Some(3));
        assert_eq!(ep.support_anomalous[1].0, None);
        assert_eq!(ep.support_anomalous[1].1[0], 200.0);

        // Without the buffer, the same draw is a shortage, not a panic.
        let mut empty = AnomalyBuffer::new(4).unwrap();
        match sample_episode(&feats, &labels, &mut empty, 2, 7) {
            Err(DiscError::Shortage {
                available,
                requested,
            }) => assert_eq!((available, requested), (1, 2)),
            other => panic!("expected shortage, got {other:?}"),
        }

        // Normal shortfall and K = 0 are episode errors.
        let few_normals: Vec<Option<u8>> = vec![Some(0), Some(1), Some(1), Some(1), None, None];
        let mut buf = AnomalyBuffer::new(4).unwrap();
        assert!(matches!(
            sample_episode(&feats, &few_normals, &mut buf, 2, 0),
            Err(DiscError::Episode { available: 1, needed: 2 })
        ));
        assert!(matches!(
            sample_episode(&feats, &labels, &mut buf, 0, 0),
            Err(DiscError::Episode { .. })
        ));
    }

    fn tiny_cfg(d: usize, k: usize, layers: usize) -> DiscriminatorConfig {
        DiscriminatorConfig {
            feature_dim: d,
            k,
            layers,
            ..DiscriminatorConfig::with_dim(d)
        }
    }

    fn init_store(cfg: &DiscriminatorConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_discriminator(&mut store, &mut rng, cfg);
        store
    }

    /// Hand-built episode: K normals at +1, K anomalies at −1 (with jitter),
    /// queries in between.
    fn crafted_episode(d: usize, k: usize, labeled: &[u8], unlabeled: usize) -> EpisodeBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut mk = |center: f64| -> Array1<f64> {
            Array1::from_iter((0..d).map(|_| center + rng.gen_range(-0.2..0.2)))
        };
        EpisodeBatch {
            support_normal: (0..k).map(|i| (i, mk(1.0))).collect(),
            support_anomalous: (0..k).map(|i| (Some(k + i), mk(-1.0))).collect(),
            query_labeled: labeled
                .iter()
                .enumerate()
                .map(|(i, &y)| (2 * k + i, mk(if y == 0 { 1.0 } else { -1.0 }), y))
                .collect(),
            query_unlabeled: (0..unlabeled)
                .map(|i| (2 * k + labeled.len() + i, mk(0.0)))
                .collect(),
        }
    }

    #[test]
    fn layer_zero_graphs_match_the_construction_rules() {
        let cfg = tiny_cfg(3, 5, 2);
        let store = init_store(&cfg, 1);
        let ep = crafted_episode(3, 5, &[0, 1], 1);
        let (x, meta) = ep.assemble(None).unwrap();
        let mut sess = Session::frozen();
        let xv = sess.tape.constant(x.clone().into_dyn());
        let g = init_graphs(&mut sess, &store, &cfg, xv, &meta).unwrap();

        let v_ins = sess.tape.value(g.v_ins).clone();
        let v_dis = sess.tape.value(g.v_dis).clone();
        let e_ins = sess.tape.value(g.e_ins).clone();
        let e_dis = sess.tape.value(g.e_dis).clone();

        // Support label slices are one-hot; query label slices are zero.
        assert_eq!(v_ins[IxDyn(&[0, 3])], 1.0);
        assert_eq!(v_ins[IxDyn(&[0, 4])], 0.0);
        assert_eq!(v_ins[IxDyn(&[5, 3])], 0.0);
        assert_eq!(v_ins[IxDyn(&[5, 4])], 1.0);
        for q in 10..13 {
            assert_eq!(v_ins[IxDyn(&[q, 3])], 0.0, "query {q} label slice");
            assert_eq!(v_ins[IxDyn(&[q, 4])], 0.0);
        }

        // Query membership is uniform 1/(2K) = 0.1 for K = 5; support rows
        // are same-class indicators.
        for j in 0..10 {
            assert_abs_diff_eq!(v_dis[IxDyn(&[10, j])], 0.1, epsilon = 1e-15);
            let expect = if j < 5 { 1.0 } else { 0.0 };
            assert_eq!(v_dis[IxDyn(&[0, j])], expect);
            assert_eq!(v_dis[IxDyn(&[5, j])], 1.0 - expect);
        }

        // Edges live in (0, 1) and inherit the symmetry of squared
        // differences.
        for i in 0..meta.n {
            for j in 0..meta.n {
                for e in [&e_ins, &e_dis] {
                    let v = e[IxDyn(&[i, j])];
                    assert!(v > 0.0 && v < 1.0, "edge ({i},{j}) = {v}");
                    assert_abs_diff_eq!(v, e[IxDyn(&[j, i])], epsilon = 1e-12);
                }
            }
        }
    }

    /// Two members with identical instance features get the same edge weight
    /// as the sigmoid MLP evaluated on the zero vector.
    #[test]
    fn identical_members_reduce_to_the_zero_difference_edge() {
        let cfg = tiny_cfg(3, 2, 1);
        let store = init_store(&cfg, 2);
        let mut ep = crafted_episode(3, 2, &[0], 0);
        // Force two identical normals and remember that no label differs.
        let clone = ep.support_normal[0].1.clone();
        ep.support_normal[1].1 = clone;
        let (x, meta) = ep.assemble(None).unwrap();
        let mut sess = Session::frozen();
        let xv = sess.tape.constant(x.into_dyn());
        let g = init_graphs(&mut sess, &store, &cfg, xv, &meta).unwrap();
        let e = sess.tape.value(g.e_ins).clone();

        // Direct evaluation of the layer-0 edge MLP on a zero input.
        let zero = sess.tape.constant(ArrayD::zeros(IxDyn(&[1, cfg.ins_width()])));
        let direct = mlp2(&mut sess, &store, "disc.l0.ins", zero, MlpHead::Sigmoid);
        let direct = sess.tape.value(direct)[IxDyn(&[0, 0])];
        assert_abs_diff_eq!(e[IxDyn(&[0, 1])], direct, epsilon = 1e-12);
    }

    /// Edge chains factorize: log e_L = log e_0 + Σ_l log factor_l, where
    /// each factor is the round's sigmoid MLP on the stored node features.
    #[test]
    fn edge_chaining_factorizes_across_rounds() {
        let cfg = tiny_cfg(2, 1, 3);
        let store = init_store(&cfg, 3);
        // 3-member episode: 2 support + 1 labeled query (k = 1).
        let ep = crafted_episode(2, 1, &[1], 0);
        let (x, meta) = ep.assemble(None).unwrap();
        let mut sess = Session::frozen();
        let xv = sess.tape.constant(x.into_dyn());
        let mut g = init_graphs(&mut sess, &store, &cfg, xv, &meta).unwrap();
        let mut chain = sess.tape.value(g.e_ins).clone().mapv(f64::ln);
        for l in 1..=3 {
            let prev_v = g.v_ins;
            g = propagate_layer(&mut sess, &store, &cfg, &g, l, &meta).unwrap();
            let factor = edge_factor(&mut sess, &store, &format!("disc.l{l}.ins"), prev_v);
            chain += &sess.tape.value(factor).mapv(f64::ln);
            let e_log = sess.tape.value(g.e_ins).mapv(f64::ln);
            for i in 0..meta.n {
                for j in 0..meta.n {
                    assert_abs_diff_eq!(
                        e_log[IxDyn(&[i, j])],
                        chain[IxDyn(&[i, j])],
                        epsilon = 1e-10
                    );
                }
            }
        }
    }

    #[test]
    fn predictions_are_distributions_with_pinned_endpoints() {
        let d = 3;
        let base = tiny_cfg(d, 2, 2);
        let store = init_store(&base, 4);
        let ep = crafted_episode(d, 2, &[0, 1], 2);
        let (x, meta) = ep.assemble(None).unwrap();

        let probs_for = |cfg: &DiscriminatorConfig| -> (ArrayD<f64>, ArrayD<f64>, ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) {
            let mut sess = Session::frozen();
            let xv = sess.tape.constant(x.clone().into_dyn());
            let mut g = init_graphs(&mut sess, &store, cfg, xv, &meta).unwrap();
            for l in 1..=cfg.layers {
                g = propagate_layer(&mut sess, &store, cfg, &g, l, &meta).unwrap();
            }
            let (ins_logits, dis_logits) = predict_logits(&mut sess, &store, cfg, &g, &meta).unwrap();
            let ins = sess.tape.softmax_last(ins_logits);
            let dis = sess.tape.softmax_last(dis_logits);
            (
                sess.tape.value(ins).clone(),
                sess.tape.value(dis).clone(),
                sess.tape.value(g.e_ins).clone(),
                sess.tape.value(g.e_dis).clone(),
                sess.tape.value(g.v_dis).clone(),
            )
        };

        // Rows are distributions for the defaults.
        let (ins, dis, _, _, _) = probs_for(&base);
        for i in 0..meta.n {
            assert_abs_diff_eq!(ins[IxDyn(&[i, 0])] + ins[IxDyn(&[i, 1])], 1.0, epsilon = 1e-9);
            assert_abs_diff_eq!(dis[IxDyn(&[i, 0])] + dis[IxDyn(&[i, 1])], 1.0, epsilon = 1e-9);
        }

        // λ1 = 1: the instance readout is exactly softmax of edge-summed
        // support labels.
        let cfg1 = DiscriminatorConfig {
            lambda1: 1.0,
            ..base.clone()
        };
        let (ins1, _, e_ins, _, _) = probs_for(&cfg1);
        let q = 4; // first query row (2K = 4)
        let s0: f64 = (0..2).map(|j| e_ins[IxDyn(&[q, j])]).sum();
        let s1: f64 = (2..4).map(|j| e_ins[IxDyn(&[q, j])]).sum();
        let z = s0.exp() + s1.exp();
        assert_abs_diff_eq!(ins1[IxDyn(&[q, 0])], s0.exp() / z, epsilon = 1e-9);
        assert_abs_diff_eq!(ins1[IxDyn(&[q, 1])], s1.exp() / z, epsilon = 1e-9);

        // λ2 = 0: the distribution readout ignores its edges and softmaxes
        // the membership label mass.
        let cfg2 = DiscriminatorConfig {
            lambda2: 0.0,
            ..base.clone()
        };
        let (_, dis0, _, _, v_dis) = probs_for(&cfg2);
        let m0: f64 = (0..2).map(|j| v_dis[IxDyn(&[q, j])]).sum();
        let m1: f64 = (2..4).map(|j| v_dis[IxDyn(&[q, j])]).sum();
        let z = m0.exp() + m1.exp();
        assert_abs_diff_eq!(dis0[IxDyn(&[q, 0])], m0.exp() / z, epsilon = 1e-9);
        assert_abs_diff_eq!(dis0[IxDyn(&[q, 1])], m1.exp() / z, epsilon = 1e-9);
    }

    /// Cross-entropy closed forms on crafted logits: uniform rows cost
    /// `ln 2` each, a saturated-correct row costs nearly nothing, and an
    /// episode without labeled queries is a contract error.
    #[test]
    fn cross_entropy_closed_forms() {
        let d = 2;
        let cfg = tiny_cfg(d, 1, 1);
        let store = init_store(&cfg, 5);
        let same = vecd(&[0.5, -0.5]);
        let ep = EpisodeBatch {
            support_normal: vec![(0, same.clone())],
            support_anomalous: vec![(Some(1), same.clone())],
            query_labeled: vec![(2, same.clone(), 0), (3, same.clone(), 1)],
            query_unlabeled: vec![],
        };
        let (x, meta) = ep.assemble(None).unwrap();

        // Zero logits ⇒ uniform predictions ⇒ ln 2 per labeled query.
        let mut sess = Session::frozen();
        let zeros = sess.tape.constant(ArrayD::zeros(IxDyn(&[meta.n, 2])));
        let ce = labeled_query_ce(&mut sess, zeros, &meta).unwrap();
        assert_abs_diff_eq!(sess.tape.scalar(ce), 2.0 * (2.0f64).ln(), epsilon = 1e-12);

        // Saturated correct logits ⇒ CE below 1e−8.
        let mut sat = Array2::zeros((meta.n, 2));
        sat[[2, 0]] = 25.0; // labeled 0
        sat[[3, 1]] = 25.0; // labeled 1
        let satv = sess.tape.constant(sat.into_dyn());
        let ce = labeled_query_ce(&mut sess, satv, &meta).unwrap();
        assert!(sess.tape.scalar(ce) <= 1e-8);

        // No labeled queries at all is a contract error.
        let bare = EpisodeBatch {
            query_labeled: vec![],
            query_unlabeled: vec![(2, same.clone()), (3, same)],
            ..ep
        };
        let (x2, meta2) = bare.assemble(None).unwrap();
        let mut sess = Session::frozen();
        let xv = sess.tape.constant(x2.into_dyn());
        let g = init_graphs(&mut sess, &store, &cfg, xv, &meta2).unwrap();
        let (ins_logits, _) = predict_logits(&mut sess, &store, &cfg, &g, &meta2).unwrap();
        assert!(matches!(
            labeled_query_ce(&mut sess, ins_logits, &meta2),
            Err(DiscError::Contract(_))
        ));
        drop(x);
    }

    #[test]
    fn contrastive_loss_closed_forms() {
        // All dot products zero with equal set sizes ⇒ loss is exactly 0.
        let a = vecd(&[0.0, 0.0]);
        let p = vec![vecd(&[1.0, 0.0]), vecd(&[0.0, 1.0])];
        let n = vec![vecd(&[-1.0, 0.0]), vecd(&[0.0, -1.0])];
        assert_abs_diff_eq!(contrastive_loss(&a, &p, &n, 0.1).unwrap(), 0.0, epsilon = 1e-12);

        // Raising a positive similarity strictly lowers the loss.
        let a = vecd(&[1.0, 0.5]);
        let p = vec![vecd(&[0.2, 0.1]), vecd(&[0.0, 0.3])];
        let n = vec![vecd(&[0.1, -0.2]), vecd(&[-0.4, 0.1])];
        let l0 = contrastive_loss(&a, &p, &n, 0.2).unwrap();
        let mut p_up = p.clone();
        p_up[0][0] += 0.1;
        assert!(contrastive_loss(&a, &p_up, &n, 0.2).unwrap() < l0);

        // τ → ∞ approaches −log(|pos| / |neg|).
        let p3 = vec![p[0].clone(), p[1].clone(), vecd(&[0.5, 0.5])];
        let limit = -( (3.0f64 / 2.0).ln() );
        assert_abs_diff_eq!(
            contrastive_loss(&a, &p3, &n, 1e6).unwrap(),
            limit,
            epsilon = 1e-6
        );

        // Contract and config errors.
        assert!(matches!(
            contrastive_loss(&a, &[], &n, 0.1),
            Err(DiscError::Contract(_))
        ));
        assert!(matches!(
            contrastive_loss(&a, &p, &n, 0.0),
            Err(DiscError::Config(_))
        ));

        // The taped version agrees with the plain one.
        let mut sess = Session::new();
        let av = sess.tape.constant(a.clone().into_dyn());
        let pv: Vec<Var> = p.iter().map(|v| sess.tape.constant(v.clone().into_dyn())).collect();
        let nv: Vec<Var> = n.iter().map(|v| sess.tape.constant(v.clone().into_dyn())).collect();
        let lt = contrastive_loss_taped(&mut sess, av, &pv, &nv, 0.2).unwrap();
        assert_abs_diff_eq!(sess.tape.scalar(lt), l0, epsilon = 1e-12);
    }

    #[test]
    fn joint_loss_weights_and_endpoints() {
        assert_eq!(layer_weights(5), vec![1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0, 1.0 / 2.0, 1.0]);

        // All per-layer losses 1 ⇒ graph part is 2·(31/16).
        let ones = vec![(1.0, 1.0); 5];
        assert_abs_diff_eq!(joint_loss(0.0, 123.0, &ones).unwrap(), 2.0 * 31.0 / 16.0, epsilon = 1e-12);
        assert_abs_diff_eq!(joint_loss(1.0, 123.0, &ones).unwrap(), 123.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            joint_loss(0.4, 10.0, &ones).unwrap(),
            0.4 * 10.0 + 0.6 * 2.0 * 31.0 / 16.0,
            epsilon = 1e-12
        );
        assert!(matches!(joint_loss(1.5, 0.0, &ones), Err(DiscError::Config(_))));
    }

    /// Permuting query members permutes predictions identically and leaves
    /// the losses unchanged.
    #[test]
    fn query_permutation_equivariance() {
        let d = 3;
        let cfg = tiny_cfg(d, 2, 3);
        let store = init_store(&cfg, 6);
        let ep = crafted_episode(d, 2, &[0, 1], 2);
        let (x, meta) = ep.assemble(None).unwrap();

        // Permute the 4 query rows (members 4..8).
        let perm = [6usize, 4, 7, 5];
        let mut x_p = x.clone();
        let mut meta_p = meta.clone();
        for (slot, &src) in perm.iter().enumerate() {
            x_p.row_mut(4 + slot).assign(&x.row(src));
            meta_p.labels[4 + slot] = meta.labels[src];
            meta_p.ids[4 + slot] = meta.ids[src];
        }

        let outputs = |x: &Array2<f64>, meta: &EpisodeMeta| {
            let mut sess = Session::new();
            let xv = sess.tape.constant(x.clone().into_dyn());
            let out = episode_losses(&mut sess, &store, &cfg, xv, meta).unwrap();
            let ins = sess.tape.value(out.final_ins).clone();
            let joint = sess.tape.scalar(out.joint);
            (ins, joint)
        };
        let (ins_a, joint_a) = outputs(&x, &meta);
        let (ins_b, joint_b) = outputs(&x_p, &meta_p);
        assert_abs_diff_eq!(joint_a, joint_b, epsilon = 1e-12);
        for (slot, &src) in perm.iter().enumerate() {
            for c in 0..2 {
                assert_abs_diff_eq!(
                    ins_b[IxDyn(&[4 + slot, c])],
                    ins_a[IxDyn(&[src, c])],
                    epsilon = 1e-12
                );
            }
        }
    }

    /// Padding with masked members changes nothing for the real members.
    #[test]
    fn padded_members_are_inert() {
        let d = 3;
        let cfg = tiny_cfg(d, 2, 2);
        let store = init_store(&cfg, 7);
        let ep = crafted_episode(d, 2, &[0, 1], 1);
        let (x, meta) = ep.assemble(None).unwrap();
        let (x_pad, meta_pad) = ep.assemble(Some(meta.n + 3)).unwrap();
        assert_eq!(meta_pad.active[meta.n..], [false, false, false]);

        let run = |x: &Array2<f64>, meta: &EpisodeMeta| {
            let mut sess = Session::new();
            let xv = sess.tape.constant(x.clone().into_dyn());
            let out = episode_losses(&mut sess, &store, &cfg, xv, meta).unwrap();
            (
                sess.tape.scalar(out.joint),
                sess.tape.value(out.final_ins).clone(),
                sess.tape.value(out.final_dis).clone(),
            )
        };
        let (joint_a, ins_a, dis_a) = run(&x, &meta);
        let (joint_b, ins_b, dis_b) = run(&x_pad, &meta_pad);
        assert_abs_diff_eq!(joint_a, joint_b, epsilon = 1e-12);
        for i in 0..meta.n {
            for c in 0..2 {
                assert_abs_diff_eq!(ins_a[IxDyn(&[i, c])], ins_b[IxDyn(&[i, c])], epsilon = 1e-12);
                assert_abs_diff_eq!(dis_a[IxDyn(&[i, c])], dis_b[IxDyn(&[i, c])], epsilon = 1e-12);
            }
        }
        // Classification skips the padded members.
        let dec = classify_nodes(&store, &cfg, &x_pad, &meta_pad).unwrap();
        assert_eq!(dec.len(), 3);
        assert!(dec.iter().all(|d| d.member < meta.n));
    }

    #[test]
    fn decision_rule_pinned_cases() {
        assert_eq!(decision_score(0.9, 0.9), (0.9, 1));
        let (s, l) = decision_score(0.2, 0.6);
        assert_abs_diff_eq!(s, 0.4, epsilon = 1e-15);
        assert_eq!(l, 0);
        assert_eq!(decision_score(0.5, 0.5), (0.5, 1));
    }

    /// Gradients of the joint loss with respect to every discriminator
    /// parameter match central finite differences on a 6-member episode.
    #[test]
    fn joint_gradients_match_finite_differences() {
        let d = 3;
        let cfg = tiny_cfg(d, 2, 2);
        let store = init_store(&cfg, 8);
        // 6 members: 4 support + 1 labeled query + 1 unlabeled query.
        let ep = crafted_episode(d, 2, &[1], 1);
        let (x, meta) = ep.assemble(None).unwrap();

        let loss_of = |st: &ParamStore| -> f64 {
            let mut sess = Session::new();
            let xv = sess.tape.constant(x.clone().into_dyn());
            let out = episode_losses(&mut sess, st, &cfg, xv, &meta).unwrap();
            sess.tape.scalar(out.joint)
        };

        let mut sess = Session::new();
        let xv = sess.tape.constant(x.clone().into_dyn());
        let out = episode_losses(&mut sess, &store, &cfg, xv, &meta).unwrap();
        let grads = sess.tape.backward(out.joint);
        let collected = sess.collect_grads(&grads);

        // h balances truncation against roundoff; rel-error floor keeps
        // near-zero gradients from amplifying FD noise.
        let h = 1e-5;
        let mut checked = 0usize;
        for (idx, g) in &collected {
            let name = store.iter().nth(*idx).unwrap().0.to_string();
            let len = store.value_at(*idx).len();
            // Sample a few coordinates per tensor to keep the test quick.
            let stride = (len / 7).max(1);
            for flat in (0..len).step_by(stride) {
                let mut plus = store.clone();
                plus.value_at_mut(*idx).as_slice_mut().unwrap()[flat] += h;
                let mut minus = store.clone();
                minus.value_at_mut(*idx).as_slice_mut().unwrap()[flat] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let got = g.as_slice().unwrap()[flat];
                let rel = (got - fd).abs() / fd.abs().max(1e-6);
                assert!(
                    rel <= 1e-4,
                    "{name}[{flat}]: analytic {got:.3e} vs fd {fd:.3e} (rel {rel:.2e})"
                );
                checked += 1;
            }
        }
        assert!(checked > 50, "only {checked} coordinates were exercised");
    }

    /// A few optimizer steps on one crafted episode drive the joint loss
    /// down and the final query predictions toward their labels.
    #[test]
    fn episode_training_reduces_loss() {
        let d = 3;
        let cfg = tiny_cfg(d, 2, 2);
        let mut store = init_store(&cfg, 9);
        let ep = crafted_episode(d, 2, &[0, 1], 0);
        let (x, meta) = ep.assemble(None).unwrap();
        let mut opt = Adam::new(5e-3);
        let mut losses = Vec::new();
        for _ in 0..40 {
            let mut sess = Session::new();
            let xv = sess.tape.constant(x.clone().into_dyn());
            let out = episode_losses(&mut sess, &store, &cfg, xv, &meta).unwrap();
            losses.push(sess.tape.scalar(out.joint));
            let grads = sess.tape.backward(out.joint);
            let updates = sess.collect_grads(&grads);
            opt.step(&mut store, &updates);
        }
        assert!(
            losses[39] < losses[0],
            "joint loss went {:.4} → {:.4}",
            losses[0],
            losses[39]
        );
        let decisions = classify_nodes(&store, &cfg, &x, &meta).unwrap();
        assert_eq!(decisions.len(), 2);
        // The labeled queries carry labels 0 and 1 in member order.
        assert_eq!(decisions[0].label, 0, "score {:.3}", decisions[0].score);
        assert_eq!(decisions[1].label, 1, "score {:.3}", decisions[1].score);
    }

    #[test]
    fn detection_records_round_trip_with_exact_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("detections.jsonl");
        let recs = vec![
            DetectionRecord {
                sample_id: 4,
                node_id: 2,
                score: 0.75,
                label: 1,
                threshold: 0.5,
            },
            DetectionRecord {
                sample_id: 5,
                node_id: 0,
                score: 0.25,
                label: 0,
                threshold: 0.5,
            },
        ];
        write_detections(&path, &recs).unwrap();
        assert_eq!(read_detections(&path).unwrap(), recs);
        let first = std::fs::read_to_string(&path).unwrap().lines().next().unwrap().to_string();
        let v: serde_json::Value = serde_json::from_str(&first).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort_unstable();
        assert_eq!(keys, ["label", "node_id", "sample_id", "score", "threshold"]);
    }
}
