//! Temporal–cross-modal backbone: a stack of retention layers fused across
//! granularities and aggregated over the sensor graph.
//!
//! One layer applies pre-norm MSR and CR blocks with residual connections:
//!
//! ```text
//!   Y1 = MSR(LN(X)) + X        // temporal mixing, per node
//!   Y2 = CR(LN(Y1)) + Y1       // cross-modal mixing, per node and step
//! ```
//!
//! The `L` per-layer outputs are stacked along the feature axis and fused by
//! a two-linear pyramid (`dL → d` per step, mean-pool over the window, then
//! `d → d`), and a single-head graph attention pass mixes node embeddings
//! over the adjacency. The whole composition exists in two numerically
//! equivalent forms: a parallel one for training (differentiable through the
//! tape) and a recurrent one for streaming, which carries per-layer retention
//! states plus a ring of the last `W` per-step outputs.

use std::collections::VecDeque;

use ndarray::{Array2, ArrayD, Axis, IxDyn, Slice};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cross::{cr_parallel_taped, cr_recurrent_step, CrossRetentionParams, CrossState, TapedCross};
use crate::retention::{
    head_gammas, msr_recurrent_step, RetentionHeadParams, RetentionState, TapedHead, GN_EPS,
};
use crate::tensor::func;
use crate::tensor::tape::Var;
use crate::tensor::{ParamStore, Session};

/// Slope of the LeakyReLU inside graph-attention logits.
pub const GAT_LEAKY_SLOPE: f64 = 0.2;
/// Additive logit mask for non-neighbors; exp(·) underflows to exactly 0.
const NEG_MASK: f64 = -1e30;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("invalid backbone config: {0}")]
    Config(String),
    #[error("shape mismatch on {axis}: expected {expected}, got {got}")]
    Shape {
        axis: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("adjacency row {node} is all zeros; every node must keep its self-loop")]
    SelfLoop { node: usize },
    #[error("stream not warm: {remaining} more step(s) needed before a window embedding exists")]
    Warmup { remaining: usize },
}

/// Static shape of the backbone. All widths are in scalars, not bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Retention layer count `L`.
    pub layers: usize,
    /// MSR heads per layer.
    pub heads: usize,
    /// Model width `d`; the per-step feature axis everywhere between the
    /// input embedding and the fusion head.
    pub d_model: usize,
    /// CR value width per modality; the residual wiring forces
    /// `cr_value_width · modalities == d_model`.
    pub cr_value_width: usize,
    /// Modalities per node (`M ≥ 2`; the cross block needs a foreign key).
    pub modalities: usize,
    /// Nodes per graph.
    pub nodes: usize,
    /// Window length `W`.
    pub window: usize,
    /// Graph-attention output width (the embedding width seen downstream).
    pub gat_out: usize,
}

impl BackboneConfig {
    /// Three-layer two-head backbone sized for a given dataset shape.
    pub fn with_shape(nodes: usize, modalities: usize, window: usize, d_model: usize) -> Self {
        Self {
            layers: 3,
            heads: 2,
            d_model,
            cr_value_width: d_model / modalities.max(1),
            modalities,
            nodes,
            window,
            gat_out: d_model,
        }
    }

    /// Per-modality slab width `d / M`.
    pub fn slab_width(&self) -> usize {
        self.d_model / self.modalities
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        let fail = |msg: String| Err(BackboneError::Config(msg));
        if self.layers == 0 {
            return fail("layer count must be at least 1".into());
        }
        if self.heads == 0 {
            return fail("head count must be at least 1".into());
        }
        if self.modalities < 2 {
            return fail(format!(
                "cross-retention needs at least 2 modalities, got {}",
                self.modalities
            ));
        }
        if self.nodes == 0 || self.window == 0 || self.gat_out == 0 {
            return fail("node count, window, and gat_out must be positive".into());
        }
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return fail(format!(
                "model width must be positive and even for rotary pairing, got {}",
                self.d_model
            ));
        }
        if self.d_model % self.heads != 0 {
            return fail(format!(
                "head count {} must divide model width {}",
                self.heads, self.d_model
            ));
        }
        if self.d_model % self.modalities != 0 {
            return fail(format!(
                "modality count {} must divide model width {} (equal feature slabs)",
                self.modalities, self.d_model
            ));
        }
        if self.cr_value_width * self.modalities != self.d_model {
            return fail(format!(
                "cr_value_width {} × modalities {} must equal model width {} for the residual",
                self.cr_value_width, self.modalities, self.d_model
            ));
        }
        Ok(())
    }
}

// ---- parameter registration ----------------------------------------------------

/// Register every backbone parameter under `backbone.*`. Layout:
/// per-modality input embeddings (`1 → d/M`), per-layer MSR head and CR
/// modality projections, the two fusion linears, and the GAT weight plus its
/// split attention vector.
pub fn init_backbone<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &BackboneConfig) {
    cfg.validate().expect("init_backbone needs a valid config");
    let d = cfg.d_model;
    let dm = cfg.slab_width();
    for j in 0..cfg.modalities {
        crate::tensor::nn::init_linear(store, rng, &format!("backbone.embed.m{j}"), 1, dm, true);
    }
    for l in 0..cfg.layers {
        for i in 0..cfg.heads {
            let p = format!("backbone.l{l}.msr.h{i}");
            store.insert(&format!("{p}.wq"), crate::tensor::nn::xavier_uniform(rng, d, d, &[d, d]));
            store.insert(&format!("{p}.wk"), crate::tensor::nn::xavier_uniform(rng, d, d, &[d, d]));
            store.insert(
                &format!("{p}.wv"),
                crate::tensor::nn::xavier_uniform(rng, d, d / cfg.heads, &[d, d / cfg.heads]),
            );
        }
        for j in 0..cfg.modalities {
            let p = format!("backbone.l{l}.cr.m{j}");
            store.insert(&format!("{p}.wq"), crate::tensor::nn::xavier_uniform(rng, dm, d, &[dm, d]));
            store.insert(&format!("{p}.wk"), crate::tensor::nn::xavier_uniform(rng, dm, d, &[dm, d]));
            store.insert(
                &format!("{p}.wv"),
                crate::tensor::nn::xavier_uniform(rng, dm, cfg.cr_value_width, &[dm, cfg.cr_value_width]),
            );
        }
    }
    crate::tensor::nn::init_linear(store, rng, "backbone.fpn.l1", d * cfg.layers, d, true);
    crate::tensor::nn::init_linear(store, rng, "backbone.fpn.l2", d, d, true);
    store.insert(
        "backbone.gat.w",
        crate::tensor::nn::xavier_uniform(rng, d, cfg.gat_out, &[d, cfg.gat_out]),
    );
    // e_ij = LeakyReLU(aᵀ[Wh_i ∥ Wh_j]) split as a = [a_src; a_dst], so the
    // logit matrix is the broadcast sum of two N-vectors.
    store.insert(
        "backbone.gat.asrc",
        crate::tensor::nn::xavier_uniform(rng, 2 * cfg.gat_out, 1, &[cfg.gat_out, 1]),
    );
    store.insert(
        "backbone.gat.adst",
        crate::tensor::nn::xavier_uniform(rng, 2 * cfg.gat_out, 1, &[cfg.gat_out, 1]),
    );
}

fn msr_head_params(store: &ParamStore, cfg: &BackboneConfig, l: usize) -> Vec<RetentionHeadParams> {
    let gammas = head_gammas(cfg.heads).expect("validated head count");
    (0..cfg.heads)
        .map(|i| {
            let p = format!("backbone.l{l}.msr.h{i}");
            let fetch = |s: &str| {
                store
                    .get(&format!("{p}.{s}"))
                    .expect("backbone not initialized")
                    .clone()
                    .into_dimensionality()
                    .expect("projection is 2-D")
            };
            RetentionHeadParams {
                w_q: fetch("wq"),
                w_k: fetch("wk"),
                w_v: fetch("wv"),
                gamma: gammas[i],
            }
        })
        .collect()
}

fn cr_layer_params(store: &ParamStore, cfg: &BackboneConfig, l: usize) -> CrossRetentionParams {
    let fetch = |j: usize, s: &str| -> Array2<f64> {
        store
            .get(&format!("backbone.l{l}.cr.m{j}.{s}"))
            .expect("backbone not initialized")
            .clone()
            .into_dimensionality()
            .expect("projection is 2-D")
    };
    let m = cfg.modalities;
    CrossRetentionParams::new(
        (0..m).map(|j| fetch(j, "wq")).collect(),
        (0..m).map(|j| fetch(j, "wk")).collect(),
        (0..m).map(|j| fetch(j, "wv")).collect(),
    )
    .expect("registered projections are consistent")
}

// ---- shared taped building blocks ----------------------------------------------

/// Rearrange a `(B, N, M, W)` sample batch into the time-major `(B, N, W, M)`
/// layout the forward passes consume.
pub fn to_time_major(x: &ArrayD<f64>) -> ArrayD<f64> {
    assert_eq!(x.ndim(), 4, "expected (B, N, M, W)");
    x.clone()
        .permuted_axes(&[0, 1, 3, 2][..])
        .as_standard_layout()
        .to_owned()
}

/// Per-modality input embedding: modality `j`'s scalar series maps to feature
/// slab `j` (width `d/M`), keeping the feature axis modality-partitioned.
fn embed_taped(sess: &mut Session, store: &ParamStore, cfg: &BackboneConfig, x: Var) -> Var {
    let slabs: Vec<Var> = (0..cfg.modalities)
        .map(|j| {
            let xj = sess.tape.slice_last(x, j, 1);
            crate::tensor::nn::linear(sess, store, &format!("backbone.embed.m{j}"), xj)
        })
        .collect();
    sess.tape.concat_last(&slabs)
}

fn bind_msr_heads(sess: &mut Session, store: &ParamStore, cfg: &BackboneConfig, l: usize) -> Vec<TapedHead> {
    let gammas = head_gammas(cfg.heads).expect("validated head count");
    (0..cfg.heads)
        .map(|i| {
            let p = format!("backbone.l{l}.msr.h{i}");
            TapedHead {
                w_q: sess.param(store, &format!("{p}.wq")),
                w_k: sess.param(store, &format!("{p}.wk")),
                w_v: sess.param(store, &format!("{p}.wv")),
                gamma: gammas[i],
            }
        })
        .collect()
}

fn bind_cr(sess: &mut Session, store: &ParamStore, cfg: &BackboneConfig, l: usize) -> TapedCross {
    let grab = |sess: &mut Session, s: &str| -> Vec<Var> {
        (0..cfg.modalities)
            .map(|j| sess.param(store, &format!("backbone.l{l}.cr.m{j}.{s}")))
            .collect()
    };
    TapedCross {
        w_q: grab(sess, "wq"),
        w_k: grab(sess, "wk"),
        w_v: grab(sess, "wv"),
        gamma: crate::cross::CR_GAMMA,
    }
}

/// One retention layer in parallel form: pre-norm MSR and CR, each residual.
fn layer_taped(sess: &mut Session, store: &ParamStore, cfg: &BackboneConfig, l: usize, x: Var) -> Var {
    let heads = bind_msr_heads(sess, store, cfg, l);
    let ln1 = sess.tape.layer_norm(x, GN_EPS);
    let msr = crate::retention::msr_parallel_taped(&mut sess.tape, ln1, &heads);
    let y1 = sess.tape.add(x, msr);

    let cross = bind_cr(sess, store, cfg, l);
    let ln2 = sess.tape.layer_norm(y1, GN_EPS);
    let cr = cr_parallel_taped(&mut sess.tape, ln2, &cross);
    sess.tape.add(y1, cr)
}

/// Stack the `L` layer outputs to width `dL`, fuse per step, mean-pool the
/// window, and fuse the modality-partitioned feature axis: `(B,N,W,d)×L →
/// (B,N,d)`.
pub fn fpn_fuse_taped(sess: &mut Session, store: &ParamStore, layer_outputs: &[Var]) -> Var {
    assert!(!layer_outputs.is_empty(), "fusion needs at least one layer output");
    let stacked = sess.tape.concat_last(layer_outputs);
    let per_step = crate::tensor::nn::linear(sess, store, "backbone.fpn.l1", stacked);
    let per_step = sess.tape.relu(per_step);
    let pooled = sess.tape.mean_axis(per_step, 2);
    let fused = crate::tensor::nn::linear(sess, store, "backbone.fpn.l2", pooled);
    sess.tape.relu(fused)
}

/// Validate a batch of adjacencies (`len 1` broadcasts over the batch) and
/// build the additive `(B, N, N)` softmax mask.
fn adjacency_mask(adjs: &[Array2<f64>], b: usize, n: usize) -> Result<ArrayD<f64>, BackboneError> {
    if adjs.is_empty() || (adjs.len() != 1 && adjs.len() != b) {
        return Err(BackboneError::Shape {
            axis: "adjacency count (1 or B)",
            expected: b,
            got: adjs.len(),
        });
    }
    for a in adjs {
        if a.nrows() != n || a.ncols() != n {
            return Err(BackboneError::Shape {
                axis: "adjacency side (N)",
                expected: n,
                got: a.nrows().max(a.ncols()),
            });
        }
        for i in 0..n {
            if (0..n).all(|j| a[[i, j]] == 0.0) {
                return Err(BackboneError::SelfLoop { node: i });
            }
        }
    }
    let mut mask = ArrayD::zeros(IxDyn(&[b, n, n]));
    for bi in 0..b {
        let a = if adjs.len() == 1 { &adjs[0] } else { &adjs[bi] };
        for i in 0..n {
            for j in 0..n {
                if a[[i, j]] == 0.0 {
                    mask[[bi, i, j]] = NEG_MASK;
                }
            }
        }
    }
    Ok(mask)
}

/// Batched single-head graph attention over `(B, N, d_in)` features.
pub fn gat_taped(
    sess: &mut Session,
    store: &ParamStore,
    x: Var,
    adjs: &[Array2<f64>],
) -> Result<Var, BackboneError> {
    let shape = sess.tape.value(x).shape().to_vec();
    assert_eq!(shape.len(), 3, "gat input must be (B, N, d_in)");
    let (b, n) = (shape[0], shape[1]);
    let mask = adjacency_mask(adjs, b, n)?;

    let w = sess.param(store, "backbone.gat.w");
    let a_src = sess.param(store, "backbone.gat.asrc");
    let a_dst = sess.param(store, "backbone.gat.adst");
    let wh = sess.tape.matmul(x, w);
    let src = sess.tape.matmul(wh, a_src); // (B, N, 1)
    let dst = sess.tape.matmul(wh, a_dst);
    let dst_row = sess.tape.transpose_last2(dst); // (B, 1, N)
    let src_b = sess.tape.broadcast_to(src, &[b, n, n]);
    let dst_b = sess.tape.broadcast_to(dst_row, &[b, n, n]);
    let logits = sess.tape.add(src_b, dst_b);
    let logits = sess.tape.leaky_relu(logits, GAT_LEAKY_SLOPE);
    let masked = sess.tape.add_const(logits, mask);
    let alpha = sess.tape.softmax_last(masked);
    let mixed = sess.tape.matmul(alpha, wh);
    Ok(sess.tape.elu(mixed, 1.0))
}

/// Full differentiable forward: embed, run `L` retention layers, fuse, and
/// aggregate over the graph. `x` is time-major `(B, N, W, M)`; the result is
/// `(B, N, gat_out)`.
pub fn backbone_forward_taped(
    sess: &mut Session,
    store: &ParamStore,
    cfg: &BackboneConfig,
    x: Var,
    adjs: &[Array2<f64>],
) -> Result<Var, BackboneError> {
    cfg.validate()?;
    let shape = sess.tape.value(x).shape().to_vec();
    if shape.len() != 4 || shape[2] != cfg.window || shape[3] != cfg.modalities || shape[1] != cfg.nodes {
        return Err(BackboneError::Shape {
            axis: "input (B, N, W, M) vs config",
            expected: cfg.nodes * cfg.window * cfg.modalities,
            got: shape.iter().skip(1).product(),
        });
    }
    let mut z = embed_taped(sess, store, cfg, x);
    let mut layer_outputs = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        z = layer_taped(sess, store, cfg, l, z);
        layer_outputs.push(z);
    }
    let fused = fpn_fuse_taped(sess, store, &layer_outputs);
    gat_taped(sess, store, fused, adjs)
}

// ---- plain entry points --------------------------------------------------------

/// Training-form forward without a gradient: `x` is `(B, N, M, W)` in sample
/// layout, output `(B, N, gat_out)`.
pub fn forward_parallel(
    store: &ParamStore,
    cfg: &BackboneConfig,
    x: &ArrayD<f64>,
    adjs: &[Array2<f64>],
) -> Result<ArrayD<f64>, BackboneError> {
    let mut sess = Session::frozen();
    let xv = sess.tape.constant(to_time_major(x));
    let out = backbone_forward_taped(&mut sess, store, cfg, xv, adjs)?;
    Ok(sess.tape.value(out).clone())
}

/// Multi-granularity fusion on plain arrays (each `(B, N, W, d)`).
pub fn fpn_fuse(
    store: &ParamStore,
    cfg: &BackboneConfig,
    layer_outputs: &[ArrayD<f64>],
) -> Result<ArrayD<f64>, BackboneError> {
    if layer_outputs.len() != cfg.layers {
        return Err(BackboneError::Shape {
            axis: "layer output count (L)",
            expected: cfg.layers,
            got: layer_outputs.len(),
        });
    }
    let first = layer_outputs[0].shape();
    for o in layer_outputs {
        if o.shape() != first {
            return Err(BackboneError::Shape {
                axis: "layer output shape agreement",
                expected: first.iter().product(),
                got: o.shape().iter().product(),
            });
        }
    }
    let mut sess = Session::frozen();
    let vars: Vec<Var> = layer_outputs
        .iter()
        .map(|o| sess.tape.constant(o.clone()))
        .collect();
    let out = fpn_fuse_taped(&mut sess, store, &vars);
    Ok(sess.tape.value(out).clone())
}

/// Single-graph attention pass on plain arrays; returns the attention matrix
/// alongside the aggregated features so callers can inspect the weights.
pub fn gat_attention(
    store: &ParamStore,
    x: &Array2<f64>,
    a: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>), BackboneError> {
    let w = store.get("backbone.gat.w").expect("backbone not initialized");
    if x.ncols() != w.shape()[0] {
        return Err(BackboneError::Shape {
            axis: "gat input width",
            expected: w.shape()[0],
            got: x.ncols(),
        });
    }
    let mut sess = Session::frozen();
    let xv = sess
        .tape
        .constant(x.clone().into_dyn().insert_axis(Axis(0)).to_owned());
    let out = gat_taped(&mut sess, store, xv, std::slice::from_ref(a))?;
    let n = x.nrows();
    let g = w.shape()[1];
    let out2 = sess
        .tape
        .value(out)
        .clone()
        .into_shape_with_order(IxDyn(&[n, g]))
        .unwrap()
        .into_dimensionality()
        .unwrap();

    // Recompute α with the same kernels for the inspection path.
    let wh = x.dot(&w.clone().into_dimensionality::<ndarray::Ix2>().unwrap());
    let a_src: Array2<f64> = store.get("backbone.gat.asrc").unwrap().clone().into_dimensionality().unwrap();
    let a_dst: Array2<f64> = store.get("backbone.gat.adst").unwrap().clone().into_dimensionality().unwrap();
    let src = wh.dot(&a_src);
    let dst = wh.dot(&a_dst);
    let mut logits = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let e = src[[i, 0]] + dst[[j, 0]];
            let e = if e >= 0.0 { e } else { GAT_LEAKY_SLOPE * e };
            logits[[i, j]] = if a[[i, j]] == 0.0 { NEG_MASK } else { e };
        }
    }
    let alpha2: Array2<f64> = func::softmax_last(&logits.into_dyn()).into_dimensionality().unwrap();
    Ok((alpha2, out2))
}

/// Single-graph attention aggregation `(N, d_in) → (N, gat_out)`.
pub fn gat_forward(
    store: &ParamStore,
    x: &Array2<f64>,
    a: &Array2<f64>,
) -> Result<Array2<f64>, BackboneError> {
    gat_attention(store, x, a).map(|(_, out)| out)
}

// ---- streaming form ------------------------------------------------------------

/// Ring of the last `W` per-step layer outputs, one buffer per layer.
#[derive(Debug, Clone)]
pub struct LayerOutputRing {
    bufs: Vec<VecDeque<ArrayD<f64>>>,
    window: usize,
}

impl LayerOutputRing {
    fn new(layers: usize, window: usize) -> Self {
        Self {
            bufs: (0..layers).map(|_| VecDeque::with_capacity(window + 1)).collect(),
            window,
        }
    }

    fn push(&mut self, layer: usize, out: ArrayD<f64>) {
        let buf = &mut self.bufs[layer];
        buf.push_back(out);
        if buf.len() > self.window {
            buf.pop_front();
        }
    }

    /// Steps currently buffered (equal across layers by construction).
    pub fn len(&self) -> usize {
        self.bufs.first().map_or(0, |b| b.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concatenate layer `l`'s buffered steps into `(B, N, W, d)`.
    fn window_of(&self, layer: usize) -> ArrayD<f64> {
        let views: Vec<_> = self.bufs[layer].iter().map(|o| o.view()).collect();
        ndarray::concatenate(Axis(2), &views).unwrap().into_dyn()
    }
}

/// All mutable state of one recurrent stream: per-layer retention and
/// cross-retention states plus the layer-output ring.
pub struct StreamState {
    msr: Vec<Vec<RetentionState>>,
    cr: Vec<CrossState>,
    ring: LayerOutputRing,
    step: usize,
    batch: usize,
}

impl StreamState {
    pub fn new(cfg: &BackboneConfig, batch: usize) -> Self {
        let d = cfg.d_model;
        let msr = (0..cfg.layers)
            .map(|_| {
                (0..cfg.heads)
                    .map(|_| RetentionState::zeros(batch, cfg.nodes, d, d / cfg.heads))
                    .collect()
            })
            .collect();
        let cr = (0..cfg.layers)
            .map(|_| CrossState::zeros(batch, cfg.nodes, cfg.modalities, d, cfg.cr_value_width))
            .collect();
        Self {
            msr,
            cr,
            ring: LayerOutputRing::new(cfg.layers, cfg.window),
            step: 0,
            batch,
        }
    }

    /// Steps consumed since creation.
    pub fn steps_seen(&self) -> usize {
        self.step
    }

    pub fn ring(&self) -> &LayerOutputRing {
        &self.ring
    }
}

/// Advance the stream by one observation `x_t` of shape `(B, N, M)`.
pub fn stream_step(
    store: &ParamStore,
    cfg: &BackboneConfig,
    state: &mut StreamState,
    x_t: &ArrayD<f64>,
) -> Result<(), BackboneError> {
    cfg.validate()?;
    if x_t.ndim() != 3
        || x_t.shape()[0] != state.batch
        || x_t.shape()[1] != cfg.nodes
        || x_t.shape()[2] != cfg.modalities
    {
        return Err(BackboneError::Shape {
            axis: "step input (B, N, M)",
            expected: state.batch * cfg.nodes * cfg.modalities,
            got: x_t.len(),
        });
    }
    // Embed: modality j's scalar lands in feature slab j.
    let x4 = x_t.clone().insert_axis(Axis(2)); // (B, N, 1, M)
    let slabs: Vec<ArrayD<f64>> = (0..cfg.modalities)
        .map(|j| {
            let xj = x4.slice_axis(Axis(3), Slice::from(j..j + 1)).to_owned();
            let w = store
                .get(&format!("backbone.embed.m{j}.w"))
                .expect("backbone not initialized");
            let b = store
                .get(&format!("backbone.embed.m{j}.b"))
                .expect("backbone not initialized");
            func::matmul(&xj.into_dyn(), w) + b
        })
        .collect();
    let views: Vec<_> = slabs.iter().map(|s| s.view()).collect();
    let mut z = ndarray::concatenate(Axis(3), &views).unwrap().into_dyn();

    for l in 0..cfg.layers {
        let heads = msr_head_params(store, cfg, l);
        let ln1 = func::group_norm(&z, 1, GN_EPS);
        let msr = msr_recurrent_step(&ln1, &mut state.msr[l], &heads)
            .expect("stream states sized from the same config");
        let y1 = &z + &msr;
        let cross = cr_layer_params(store, cfg, l);
        let ln2 = func::group_norm(&y1, 1, GN_EPS);
        let cr = cr_recurrent_step(&ln2, &mut state.cr[l], &cross)
            .expect("stream states sized from the same config");
        let y2 = &y1 + &cr;
        state.ring.push(l, y2.clone());
        z = y2;
    }
    state.step += 1;
    Ok(())
}

/// Embed the current ring contents: fusion plus graph attention over the last
/// `W` steps. Errors until the stream has seen `W` steps.
pub fn stream_embed(
    store: &ParamStore,
    cfg: &BackboneConfig,
    state: &StreamState,
    adjs: &[Array2<f64>],
) -> Result<ArrayD<f64>, BackboneError> {
    if state.ring.len() < cfg.window {
        return Err(BackboneError::Warmup {
            remaining: cfg.window - state.ring.len(),
        });
    }
    let mut sess = Session::frozen();
    let vars: Vec<Var> = (0..cfg.layers)
        .map(|l| sess.tape.constant(state.ring.window_of(l)))
        .collect();
    let fused = fpn_fuse_taped(&mut sess, store, &vars);
    let out = gat_taped(&mut sess, store, fused, adjs)?;
    Ok(sess.tape.value(out).clone())
}

/// Run a whole `(B, N, M, W)` window through a fresh stream and embed it;
/// numerically equivalent to [`forward_parallel`] within 1e-6.
pub fn forward_streamed(
    store: &ParamStore,
    cfg: &BackboneConfig,
    x: &ArrayD<f64>,
    adjs: &[Array2<f64>],
) -> Result<ArrayD<f64>, BackboneError> {
    cfg.validate()?;
    if x.ndim() != 4 {
        return Err(BackboneError::Shape {
            axis: "input rank (B, N, M, W)",
            expected: 4,
            got: x.ndim(),
        });
    }
    let b = x.shape()[0];
    let mut state = StreamState::new(cfg, b);
    for t in 0..x.shape()[3] {
        let x_t = x
            .slice_axis(Axis(3), Slice::from(t..t + 1))
            .to_owned()
            .into_shape_with_order(IxDyn(&[b, cfg.nodes, cfg.modalities]))
            .unwrap();
        stream_step(store, cfg, &mut state, &x_t)?;
    }
    stream_embed(store, cfg, &state, adjs)
}
