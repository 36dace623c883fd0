//! Plain `ndarray` forward kernels.
//!
//! Every numeric semantic lives here exactly once: the autodiff tape calls
//! these for its forward pass, and the streaming (recurrent) inference path
//! calls them directly without recording anything. All arrays are `f64` and
//! results are always standard (row-major) layout.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};

/// Matrix product over the last two axes.
///
/// `a` has shape `(..., m, k)`. `b` is either 2-D `(k, n)` — applied to every
/// leading position of `a` — or has the same leading dimensions as `a` with
/// shape `(..., k, n)` for a batched product.
pub fn matmul(a: &ArrayD<f64>, b: &ArrayD<f64>) -> ArrayD<f64> {
    let ash = a.shape();
    let bsh = b.shape();
    assert!(ash.len() >= 2, "matmul lhs must be at least 2-D, got {ash:?}");
    assert!(bsh.len() >= 2, "matmul rhs must be at least 2-D, got {bsh:?}");
    let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
    let (kb, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
    assert_eq!(k, kb, "matmul inner dimensions differ: lhs {ash:?}, rhs {bsh:?}");

    let a_std = a.as_standard_layout();
    let b_std = b.as_standard_layout();
    if bsh.len() == 2 {
        // Collapse all leading axes of `a` into rows and do one GEMM.
        let rows: usize = ash[..ash.len() - 1].iter().product();
        let a2 = a_std
            .view()
            .into_shape_with_order((rows, k))
            .expect("matmul lhs reshape");
        let b2 = b_std
            .view()
            .into_shape_with_order((k, n))
            .expect("matmul rhs reshape");
        let mut c = Array2::<f64>::zeros((rows, n));
        general_mat_mul(1.0, &a2, &b2, 0.0, &mut c);
        let mut out_shape: Vec<usize> = ash[..ash.len() - 1].to_vec();
        out_shape.push(n);
        c.into_shape_with_order(IxDyn(&out_shape))
            .expect("matmul out reshape")
    } else {
        assert_eq!(
            &ash[..ash.len() - 2],
            &bsh[..bsh.len() - 2],
            "matmul batch dimensions differ: lhs {ash:?}, rhs {bsh:?}"
        );
        let batch: usize = ash[..ash.len() - 2].iter().product();
        let a3 = a_std
            .view()
            .into_shape_with_order((batch, m, k))
            .expect("matmul lhs reshape");
        let b3 = b_std
            .view()
            .into_shape_with_order((batch, k, n))
            .expect("matmul rhs reshape");
        let mut c = Array3::<f64>::zeros((batch, m, n));
        for i in 0..batch {
            let (ai, bi) = (a3.index_axis(Axis(0), i), b3.index_axis(Axis(0), i));
            let mut ci = c.index_axis_mut(Axis(0), i);
            general_mat_mul(1.0, &ai, &bi, 0.0, &mut ci);
        }
        let mut out_shape: Vec<usize> = ash[..ash.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        c.into_shape_with_order(IxDyn(&out_shape))
            .expect("matmul out reshape")
    }
}

/// Swap the last two axes, materialized in standard layout.
pub fn transpose_last2(x: &ArrayD<f64>) -> ArrayD<f64> {
    let nd = x.ndim();
    assert!(nd >= 2, "transpose_last2 needs at least 2 axes");
    let mut order: Vec<usize> = (0..nd).collect();
    order.swap(nd - 2, nd - 1);
    x.view().permuted_axes(&order[..]).as_standard_layout().into_owned()
}

/// View helper: reshape to `(positions, width)` where `width` is the last axis.
fn rows_of(x: &ArrayD<f64>) -> (usize, usize) {
    let d = *x.shape().last().expect("rows_of on 0-d array");
    (x.len() / d, d)
}

/// Row-wise softmax over the last axis, with max subtraction.
pub fn softmax_last(x: &ArrayD<f64>) -> ArrayD<f64> {
    let (p, d) = rows_of(x);
    let xs = x.as_standard_layout();
    let x2 = xs.view().into_shape_with_order((p, d)).unwrap();
    let mut out = Array2::<f64>::zeros((p, d));
    for (row, mut orow) in x2.outer_iter().zip(out.outer_iter_mut()) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - m).exp();
            orow[j] = e;
            z += e;
        }
        orow.mapv_inplace(|e| e / z);
    }
    out.into_shape_with_order(x.raw_dim()).unwrap()
}

/// Row-wise log-softmax over the last axis.
pub fn log_softmax_last(x: &ArrayD<f64>) -> ArrayD<f64> {
    let (p, d) = rows_of(x);
    let xs = x.as_standard_layout();
    let x2 = xs.view().into_shape_with_order((p, d)).unwrap();
    let mut out = Array2::<f64>::zeros((p, d));
    for (row, mut orow) in x2.outer_iter().zip(out.outer_iter_mut()) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        let lse = m + z.ln();
        for (j, &v) in row.iter().enumerate() {
            orow[j] = v - lse;
        }
    }
    out.into_shape_with_order(x.raw_dim()).unwrap()
}

/// Row-wise log-sum-exp over the last axis; the last axis is dropped.
pub fn logsumexp_last(x: &ArrayD<f64>) -> ArrayD<f64> {
    let (p, d) = rows_of(x);
    let xs = x.as_standard_layout();
    let x2 = xs.view().into_shape_with_order((p, d)).unwrap();
    let mut out = Vec::with_capacity(p);
    for row in x2.outer_iter() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        out.push(m + z.ln());
    }
    let shape: Vec<usize> = x.shape()[..x.ndim() - 1].to_vec();
    ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap()
}

/// Group normalization over the last axis: the feature axis is split into
/// `groups` equal slabs and each slab is standardized per position with
/// population variance and no affine term.
pub fn group_norm(x: &ArrayD<f64>, groups: usize, eps: f64) -> ArrayD<f64> {
    let (p, d) = rows_of(x);
    assert!(groups >= 1 && d % groups == 0, "group count {groups} must divide width {d}");
    let gw = d / groups;
    let xs = x.as_standard_layout();
    let x3 = xs.view().into_shape_with_order((p, groups, gw)).unwrap();
    let mut out = Array3::<f64>::zeros((p, groups, gw));
    for i in 0..p {
        for g in 0..groups {
            let slab = x3.index_axis(Axis(0), i);
            let slab = slab.index_axis(Axis(0), g);
            let mean = slab.sum() / gw as f64;
            let var = slab.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / gw as f64;
            let inv = 1.0 / (var + eps).sqrt();
            let mut orow = out.index_axis_mut(Axis(0), i);
            let mut orow = orow.index_axis_mut(Axis(0), g);
            for (o, &v) in orow.iter_mut().zip(slab.iter()) {
                *o = (v - mean) * inv;
            }
        }
    }
    out.into_shape_with_order(x.raw_dim()).unwrap()
}

/// Rotation angles for one position: `angle[m] = p * base^(-2m/d)`.
fn rotary_angles(d: usize, base: f64) -> Vec<f64> {
    (0..d / 2)
        .map(|m| base.powf(-2.0 * m as f64 / d as f64))
        .collect()
}

/// Rotary position encoding on shape `(..., T, d)` with even `d`.
///
/// Feature pairs `(2m, 2m+1)` are rotated by `positions[t] * base^(-2m/d)`;
/// the conjugate form negates every angle. Per-pair norms are preserved.
pub fn rotary(x: &ArrayD<f64>, positions: &[f64], base: f64, conjugate: bool) -> ArrayD<f64> {
    let sh = x.shape();
    assert!(sh.len() >= 2, "rotary needs at least (time, feature) axes");
    let d = sh[sh.len() - 1];
    let t = sh[sh.len() - 2];
    assert!(d % 2 == 0, "rotary feature width must be even, got {d}");
    assert_eq!(positions.len(), t, "rotary positions ({}) must match time axis ({t})", positions.len());
    let half = d / 2;
    let thetas = rotary_angles(d, base);
    let sign = if conjugate { -1.0 } else { 1.0 };
    // Precompute per (t, m) sin/cos.
    let mut cos_t = vec![0.0; t * half];
    let mut sin_t = vec![0.0; t * half];
    for (ti, &p) in positions.iter().enumerate() {
        for m in 0..half {
            let ang = sign * p * thetas[m];
            cos_t[ti * half + m] = ang.cos();
            sin_t[ti * half + m] = ang.sin();
        }
    }
    let lead: usize = sh[..sh.len() - 2].iter().product();
    let xs = x.as_standard_layout();
    let x3 = xs.view().into_shape_with_order((lead, t, d)).unwrap();
    let mut out = Array3::<f64>::zeros((lead, t, d));
    for b in 0..lead {
        for ti in 0..t {
            let row = x3.index_axis(Axis(0), b);
            let row = row.index_axis(Axis(0), ti);
            let mut orow = out.index_axis_mut(Axis(0), b);
            let mut orow = orow.index_axis_mut(Axis(0), ti);
            for m in 0..half {
                let (c, s) = (cos_t[ti * half + m], sin_t[ti * half + m]);
                let (x0, x1) = (row[2 * m], row[2 * m + 1]);
                orow[2 * m] = x0 * c - x1 * s;
                orow[2 * m + 1] = x0 * s + x1 * c;
            }
        }
    }
    out.into_shape_with_order(x.raw_dim()).unwrap()
}

// ---- element-wise activations -------------------------------------------------

pub fn relu(x: &ArrayD<f64>) -> ArrayD<f64> {
    // `v > 0.0` is false for NaN, which would silently launder a poisoned
    // activation into 0; divergence detection needs NaN to stay NaN.
    x.mapv(|v| if v > 0.0 || v.is_nan() { v } else { 0.0 })
}

pub fn leaky_relu(x: &ArrayD<f64>, slope: f64) -> ArrayD<f64> {
    x.mapv(|v| if v > 0.0 { v } else { slope * v })
}

pub fn elu(x: &ArrayD<f64>, alpha: f64) -> ArrayD<f64> {
    x.mapv(|v| if v > 0.0 { v } else { alpha * (v.exp() - 1.0) })
}

pub fn sigmoid(x: &ArrayD<f64>) -> ArrayD<f64> {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Reduce `g` (gradient of a broadcast result) back to `target` shape by
/// summing over prepended axes and any axis that was expanded from size 1.
pub fn reduce_to(g: &ArrayD<f64>, target: &[usize]) -> ArrayD<f64> {
    let mut out = g.clone();
    while out.ndim() > target.len() {
        out = out.sum_axis(Axis(0));
    }
    for ax in 0..target.len() {
        if target[ax] == 1 && out.shape()[ax] != 1 {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    assert_eq!(out.shape(), target, "reduce_to produced wrong shape");
    out
}
