//! Cross-retention (CR): each modality's queries attend to the summed keys
//! of every *other* modality, under the same decay mask as temporal
//! retention.
//!
//! Three forms produce the same numbers: a per-modality loop
//! ([`cr_parallel`]), a batched form that builds the foreign-key sum as
//! `sum − self` ([`cr_parallel_batched`], equal widths only), and a recurrent
//! form with one `d×d_v` state per modality ([`cr_recurrent_step`]).

use ndarray::{Array2, ArrayD, Axis, IxDyn, Slice};
use thiserror::Error;

use crate::retention::{build_decay_mask, RotaryEncoding, GN_EPS, ROTARY_BASE};
use crate::tensor::func;
use crate::tensor::tape::{Tape, Var};

/// Fixed cross-retention decay, `1 − 2^{−5}`, shared by every layer.
pub const CR_GAMMA: f64 = 1.0 - 0.03125;

#[derive(Debug, Error)]
pub enum CrossError {
    #[error("cross-retention needs at least two modalities, got {0}")]
    TooFewModalities(usize),
    #[error("shape mismatch on {axis}: expected {expected}, got {got}")]
    Shape {
        axis: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("modalities have unequal widths {0:?}; use cr_parallel for heterogeneous slabs")]
    UnequalWidths(Vec<usize>),
    #[error("state mismatch: {0}")]
    State(String),
}

/// Per-modality projections. Slab `i` of the input has width `d_i`
/// (`w_q[i]` is `d_i × d`); all modalities share the key width `d` and the
/// value width `d_v`.
#[derive(Debug, Clone)]
pub struct CrossRetentionParams {
    pub w_q: Vec<Array2<f64>>,
    pub w_k: Vec<Array2<f64>>,
    pub w_v: Vec<Array2<f64>>,
    pub gamma: f64,
}

impl CrossRetentionParams {
    pub fn new(
        w_q: Vec<Array2<f64>>,
        w_k: Vec<Array2<f64>>,
        w_v: Vec<Array2<f64>>,
    ) -> Result<Self, CrossError> {
        let m = w_q.len();
        if m < 2 {
            return Err(CrossError::TooFewModalities(m));
        }
        if w_k.len() != m {
            return Err(CrossError::Shape {
                axis: "W_K modality count",
                expected: m,
                got: w_k.len(),
            });
        }
        if w_v.len() != m {
            return Err(CrossError::Shape {
                axis: "W_V modality count",
                expected: m,
                got: w_v.len(),
            });
        }
        let d = w_q[0].ncols();
        let d_v = w_v[0].ncols();
        for i in 0..m {
            if w_q[i].ncols() != d {
                return Err(CrossError::Shape {
                    axis: "W_Q cols (shared d)",
                    expected: d,
                    got: w_q[i].ncols(),
                });
            }
            if w_k[i].ncols() != d {
                return Err(CrossError::Shape {
                    axis: "W_K cols (shared d)",
                    expected: d,
                    got: w_k[i].ncols(),
                });
            }
            if w_v[i].ncols() != d_v {
                return Err(CrossError::Shape {
                    axis: "W_V cols (shared d_v)",
                    expected: d_v,
                    got: w_v[i].ncols(),
                });
            }
            if w_k[i].nrows() != w_q[i].nrows() || w_v[i].nrows() != w_q[i].nrows() {
                return Err(CrossError::Shape {
                    axis: "per-modality input width d_i",
                    expected: w_q[i].nrows(),
                    got: w_k[i].nrows().max(w_v[i].nrows()),
                });
            }
        }
        Ok(Self {
            w_q,
            w_k,
            w_v,
            gamma: CR_GAMMA,
        })
    }

    pub fn modality_count(&self) -> usize {
        self.w_q.len()
    }

    /// Input slab widths `d_i` in modality order.
    pub fn widths(&self) -> Vec<usize> {
        self.w_q.iter().map(|w| w.nrows()).collect()
    }

    pub fn key_width(&self) -> usize {
        self.w_q[0].ncols()
    }

    pub fn value_width(&self) -> usize {
        self.w_v[0].ncols()
    }
}

/// Recurrent CR state: one `(B, N, d, d_v)` slab per modality.
#[derive(Debug, Clone)]
pub struct CrossState {
    pub s: Vec<ArrayD<f64>>,
    pub step: usize,
}

impl CrossState {
    pub fn zeros(b: usize, n: usize, m: usize, d: usize, d_v: usize) -> Self {
        Self {
            s: (0..m).map(|_| ArrayD::zeros(IxDyn(&[b, n, d, d_v]))).collect(),
            step: 0,
        }
    }
}

fn validate_input(x: &ArrayD<f64>, params: &CrossRetentionParams) -> Result<(), CrossError> {
    if x.ndim() != 4 {
        return Err(CrossError::Shape {
            axis: "input rank (want B×N×W×Σd_i)",
            expected: 4,
            got: x.ndim(),
        });
    }
    let d_total: usize = params.widths().iter().sum();
    if x.shape()[3] != d_total {
        return Err(CrossError::Shape {
            axis: "input feature width Σd_i",
            expected: d_total,
            got: x.shape()[3],
        });
    }
    Ok(())
}

/// Per-modality projections of `x`, rotary-encoded queries and keys.
fn project(
    x: &ArrayD<f64>,
    params: &CrossRetentionParams,
    positions: &[usize],
) -> (Vec<ArrayD<f64>>, Vec<ArrayD<f64>>, Vec<ArrayD<f64>>) {
    let rot = RotaryEncoding::new(params.key_width()).expect("key width must be even");
    let widths = params.widths();
    let mut offset = 0;
    let (mut qs, mut ks, mut vs) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..params.modality_count() {
        let slab = x
            .slice_axis(Axis(3), Slice::from(offset..offset + widths[i]))
            .to_owned();
        offset += widths[i];
        qs.push(rot.apply(&func::matmul(&slab, &params.w_q[i].clone().into_dyn()), positions, false));
        ks.push(rot.apply(&func::matmul(&slab, &params.w_k[i].clone().into_dyn()), positions, false));
        vs.push(func::matmul(&slab, &params.w_v[i].clone().into_dyn()));
    }
    (qs, ks, vs)
}

/// Sum of foreign keys `Σ_{j≠i} K^j`, ascending j.
fn foreign_key_sum(ks: &[ArrayD<f64>], i: usize) -> ArrayD<f64> {
    let mut sum: Option<ArrayD<f64>> = None;
    for (j, k) in ks.iter().enumerate() {
        if j == i {
            continue;
        }
        sum = Some(match sum {
            None => k.clone(),
            Some(s) => s + k,
        });
    }
    sum.expect("at least two modalities")
}

/// Parallel CR, loop form: `O^i = (Q^i (Σ_{j≠i} K^j)^T ⊙ D) V^i`, modality
/// outputs concatenated then group-normalized per modality.
///
/// `x` is `(B, N, W, Σd_i)`; output is `(B, N, W, M·d_v)`.
pub fn cr_parallel(x: &ArrayD<f64>, params: &CrossRetentionParams) -> Result<ArrayD<f64>, CrossError> {
    let m = params.modality_count();
    if m < 2 {
        return Err(CrossError::TooFewModalities(m));
    }
    validate_input(x, params)?;
    let w = x.shape()[2];
    let positions: Vec<usize> = (0..w).collect();
    let (qs, ks, vs) = project(x, params, &positions);
    let mask = build_decay_mask(w, params.gamma);
    let mut outs = Vec::with_capacity(m);
    for i in 0..m {
        let k_cross = foreign_key_sum(&ks, i);
        let scores = func::matmul(&qs[i], &func::transpose_last2(&k_cross));
        let masked = &scores * &mask.d.clone().into_dyn().broadcast(scores.raw_dim()).unwrap();
        outs.push(func::matmul(&masked, &vs[i]));
    }
    let views: Vec<_> = outs.iter().map(|o| o.view()).collect();
    let cat = ndarray::concatenate(Axis(3), &views).unwrap();
    Ok(func::group_norm(&cat.into_dyn(), m, GN_EPS))
}

/// Reshape `(B, N, W, M·d_i)` into the modality-batched layout
/// `(B, N, M, W, d_i)` used by [`cr_parallel_batched`].
pub fn to_modality_axis(x: &ArrayD<f64>, m: usize) -> Result<ArrayD<f64>, CrossError> {
    if x.ndim() != 4 {
        return Err(CrossError::Shape {
            axis: "input rank (want B×N×W×M·d_i)",
            expected: 4,
            got: x.ndim(),
        });
    }
    let d_total = x.shape()[3];
    if d_total % m != 0 {
        return Err(CrossError::Shape {
            axis: "feature width divisible by M",
            expected: m * (d_total / m.max(1)).max(1),
            got: d_total,
        });
    }
    let di = d_total / m;
    let slabs: Vec<ArrayD<f64>> = (0..m)
        .map(|i| {
            x.slice_axis(Axis(3), Slice::from(i * di..(i + 1) * di))
                .insert_axis(Axis(2))
                .to_owned()
        })
        .collect();
    let views: Vec<_> = slabs.iter().map(|s| s.view()).collect();
    Ok(ndarray::concatenate(Axis(2), &views).unwrap())
}

/// Parallel CR, batched form (equal slab widths): foreign keys are built in
/// one array operation as `K_cross = sum_over_modalities(K) − K`, then the
/// masked products run with the modality axis batched.
///
/// `x` is `(B, N, M, W, d_i)`; output is `(B, N, W, M·d_v)` and agrees with
/// [`cr_parallel`] within 1e-10.
pub fn cr_parallel_batched(
    x: &ArrayD<f64>,
    params: &CrossRetentionParams,
) -> Result<ArrayD<f64>, CrossError> {
    let m = params.modality_count();
    if m < 2 {
        return Err(CrossError::TooFewModalities(m));
    }
    let widths = params.widths();
    if widths.iter().any(|&w| w != widths[0]) {
        return Err(CrossError::UnequalWidths(widths));
    }
    if x.ndim() != 5 {
        return Err(CrossError::Shape {
            axis: "input rank (want B×N×M×W×d_i)",
            expected: 5,
            got: x.ndim(),
        });
    }
    if x.shape()[2] != m {
        return Err(CrossError::Shape {
            axis: "modality axis",
            expected: m,
            got: x.shape()[2],
        });
    }
    if x.shape()[4] != widths[0] {
        return Err(CrossError::Shape {
            axis: "slab width d_i",
            expected: widths[0],
            got: x.shape()[4],
        });
    }
    let (b, n, w) = (x.shape()[0], x.shape()[1], x.shape()[3]);
    let positions: Vec<usize> = (0..w).collect();
    let rot = RotaryEncoding::new(params.key_width()).expect("key width must be even");

    // Stack per-modality projections along axis 2.
    let project_stack = |ws: &[Array2<f64>], encode: bool| -> ArrayD<f64> {
        let slabs: Vec<ArrayD<f64>> = (0..m)
            .map(|i| {
                let xi = x.index_axis(Axis(2), i).to_owned();
                let proj = func::matmul(&xi, &ws[i].clone().into_dyn());
                let proj = if encode { rot.apply(&proj, &positions, false) } else { proj };
                proj.insert_axis(Axis(2))
            })
            .collect();
        let views: Vec<_> = slabs.iter().map(|s| s.view()).collect();
        ndarray::concatenate(Axis(2), &views).unwrap()
    };
    let q5 = project_stack(&params.w_q, true);
    let k5 = project_stack(&params.w_k, true);
    let v5 = project_stack(&params.w_v, false);

    // K_cross = sum over the modality axis minus self.
    let ksum = k5.sum_axis(Axis(2)).insert_axis(Axis(2));
    let k_cross = &ksum.broadcast(k5.raw_dim()).unwrap().to_owned() - &k5;

    let scores = func::matmul(&q5, &func::transpose_last2(&k_cross));
    let mask = build_decay_mask(w, params.gamma);
    let masked = &scores * &mask.d.into_dyn().broadcast(scores.raw_dim()).unwrap();
    let o5 = func::matmul(&masked, &v5); // (B, N, M, W, d_v)

    // (B, N, M, W, d_v) -> (B, N, W, M·d_v), modality-major like the loop form.
    let o = o5
        .permuted_axes(&[0, 1, 3, 2, 4][..])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(&[b, n, w, m * params.value_width()]))
        .unwrap();
    Ok(func::group_norm(&o, m, GN_EPS))
}

/// One recurrent CR step: per modality,
/// `S_t^i = γ S_{t−1}^i + (Σ_{j≠i} K_t^j)^T V_t^i`, `O_t^i = Q_t^i S_t^i`,
/// outputs concatenated and group-normalized like the parallel forms.
pub fn cr_recurrent_step(
    x_t: &ArrayD<f64>,
    state: &mut CrossState,
    params: &CrossRetentionParams,
) -> Result<ArrayD<f64>, CrossError> {
    let m = params.modality_count();
    if m < 2 {
        return Err(CrossError::TooFewModalities(m));
    }
    validate_input(x_t, params)?;
    if x_t.shape()[2] != 1 {
        return Err(CrossError::Shape {
            axis: "time (recurrent step takes exactly one)",
            expected: 1,
            got: x_t.shape()[2],
        });
    }
    if state.s.len() != m {
        return Err(CrossError::State(format!(
            "{} state slabs for {} modalities",
            state.s.len(),
            m
        )));
    }
    let (b, n) = (x_t.shape()[0], x_t.shape()[1]);
    let (d, d_v) = (params.key_width(), params.value_width());
    for (i, s) in state.s.iter().enumerate() {
        if s.shape() != [b, n, d, d_v] {
            return Err(CrossError::State(format!(
                "modality {i} state shape {:?}, want {:?}",
                s.shape(),
                [b, n, d, d_v]
            )));
        }
    }
    let positions = [state.step];
    let (qs, ks, vs) = project(x_t, params, &positions);
    let mut outs = Vec::with_capacity(m);
    for i in 0..m {
        let k_cross = foreign_key_sum(&ks, i);
        let kt_v = func::matmul(&func::transpose_last2(&k_cross), &vs[i]);
        state.s[i].mapv_inplace(|s| params.gamma * s);
        state.s[i] += &kt_v;
        outs.push(func::matmul(&qs[i], &state.s[i]));
    }
    state.step += 1;
    let views: Vec<_> = outs.iter().map(|o| o.view()).collect();
    let cat = ndarray::concatenate(Axis(3), &views).unwrap();
    Ok(func::group_norm(&cat.into_dyn(), m, GN_EPS))
}

// ---- taped (training) form -----------------------------------------------------

/// Cross-retention parameters bound onto a tape, loop form.
pub struct TapedCross {
    pub w_q: Vec<Var>,
    pub w_k: Vec<Var>,
    pub w_v: Vec<Var>,
    pub gamma: f64,
}

/// Differentiable parallel CR (loop form); semantics match [`cr_parallel`].
pub fn cr_parallel_taped(tape: &mut Tape, x: Var, params: &TapedCross) -> Var {
    let m = params.w_q.len();
    assert!(m >= 2, "cross-retention needs at least two modalities");
    let shape = tape.value(x).shape().to_vec();
    assert_eq!(shape.len(), 4, "cr input must be (B, N, W, Σd_i)");
    let w = shape[2];
    let positions: Vec<f64> = (0..w).map(|t| t as f64).collect();
    let widths: Vec<usize> = params.w_q.iter().map(|v| tape.value(*v).shape()[0]).collect();
    assert_eq!(widths.iter().sum::<usize>(), shape[3], "slab widths must cover the input");

    let mut offset = 0;
    let (mut qs, mut ks, mut vs) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..m {
        let slab = tape.slice_last(x, offset, widths[i]);
        offset += widths[i];
        let q = tape.matmul(slab, params.w_q[i]);
        qs.push(tape.rotary(q, &positions, ROTARY_BASE, false));
        let k = tape.matmul(slab, params.w_k[i]);
        ks.push(tape.rotary(k, &positions, ROTARY_BASE, false));
        vs.push(tape.matmul(slab, params.w_v[i]));
    }
    let mask = build_decay_mask(w, params.gamma);
    let mut outs = Vec::with_capacity(m);
    for i in 0..m {
        let mut k_cross: Option<Var> = None;
        for (j, k) in ks.iter().enumerate() {
            if j == i {
                continue;
            }
            k_cross = Some(match k_cross {
                None => *k,
                Some(acc) => tape.add(acc, *k),
            });
        }
        let kt = tape.transpose_last2(k_cross.unwrap());
        let scores = tape.matmul(qs[i], kt);
        let masked = tape.mul_const(scores, mask.d.clone().into_dyn());
        outs.push(tape.matmul(masked, vs[i]));
    }
    let cat = tape.concat_last(&outs);
    tape.group_norm(cat, m, GN_EPS)
}
