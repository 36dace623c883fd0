//! Finite-difference checks for every differentiable tape op.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{central_grad, max_rel_err, FD_FLOOR, FD_RTOL, FD_STEP};
use super::tape::{Tape, Var};

#[derive(Clone, Copy)]
enum Kind {
    /// U(-1.1, -0.1) or U(0.1, 1.1): bounded away from activation kinks.
    Signed,
    /// U(0.5, 1.5): safe for ln/sqrt.
    Positive,
}

fn sample(shape: &[usize], seed: u64, kind: Kind) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| match kind {
            Kind::Signed => {
                let mag = rng.gen_range(0.1..1.1);
                if rng.gen_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            }
            Kind::Positive => rng.gen_range(0.5..1.5),
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Checks d(sum(build(x) * probe))/dx against central differences.
fn check<F>(shape: &[usize], seed: u64, kind: Kind, build: F)
where
    F: Fn(&mut Tape, Var) -> Var,
{
    let x0 = sample(shape, seed, kind);

    let mut t = Tape::new();
    let x = t.leaf(x0.clone(), true);
    let out = build(&mut t, x);
    let probe = sample(t.value(out).shape(), seed ^ 0x9e3779b9, Kind::Signed);
    let probe_var = t.constant(probe.clone());
    let prod = t.mul(out, probe_var);
    let loss = t.sum_all(prod);
    let grads = t.backward(loss);
    let g_ad = grads.wrt(x).expect("input should receive a gradient").clone();

    let mut eval = |xv: &ArrayD<f64>| -> f64 {
        let mut t = Tape::new();
        let x = t.leaf(xv.clone(), false);
        let out = build(&mut t, x);
        (t.value(out) * &probe).sum()
    };
    let g_fd = central_grad(&mut eval, &x0, FD_STEP);

    let err = max_rel_err(&g_ad, &g_fd, FD_FLOOR);
    assert!(err <= FD_RTOL, "gradient mismatch: max rel err {err:.3e}");
}

fn aux(shape: &[usize], seed: u64) -> ArrayD<f64> {
    sample(shape, seed, Kind::Signed)
}

#[test]
fn grad_add() {
    check(&[2, 3], 1, Kind::Signed, |t, x| {
        let c = t.constant(aux(&[2, 3], 100));
        t.add(x, c)
    });
}

#[test]
fn grad_sub_both_sides() {
    check(&[2, 3], 2, Kind::Signed, |t, x| {
        let c = t.constant(aux(&[2, 3], 101));
        t.sub(x, c)
    });
    check(&[2, 3], 3, Kind::Signed, |t, x| {
        let c = t.constant(aux(&[2, 3], 102));
        t.sub(c, x)
    });
}

#[test]
fn grad_mul() {
    check(&[3, 4], 4, Kind::Signed, |t, x| {
        let c = t.constant(aux(&[3, 4], 103));
        t.mul(x, c)
    });
}

#[test]
fn grad_mul_self() {
    // Both factors are the same node: d(x*x)/dx = 2x must accumulate.
    check(&[5], 5, Kind::Signed, |t, x| t.mul(x, x));
}

#[test]
fn grad_neg_scale() {
    check(&[4], 6, Kind::Signed, |t, x| {
        let n = t.neg(x);
        t.scale(n, 2.5)
    });
}

#[test]
fn grad_add_mul_const_broadcast() {
    check(&[2, 3, 4], 7, Kind::Signed, |t, x| {
        let c = aux(&[3, 4], 104);
        let y = t.add_const(x, c);
        let m = aux(&[4], 105);
        t.mul_const(y, m)
    });
}

#[test]
fn grad_add_bias_both_sides() {
    check(&[3, 4], 8, Kind::Signed, |t, x| {
        let b = t.constant(aux(&[4], 106));
        t.add_bias(x, b)
    });
    check(&[4], 9, Kind::Signed, |t, x| {
        let a = t.constant(aux(&[3, 4], 107));
        t.add_bias(a, x)
    });
}

#[test]
fn grad_matmul_2d_rhs() {
    check(&[2, 3, 4], 10, Kind::Signed, |t, x| {
        let w = t.constant(aux(&[4, 2], 108));
        t.matmul(x, w)
    });
    check(&[4, 2], 11, Kind::Signed, |t, x| {
        let a = t.constant(aux(&[2, 3, 4], 109));
        t.matmul(a, x)
    });
}

#[test]
fn grad_matmul_batched() {
    check(&[2, 3, 4], 12, Kind::Signed, |t, x| {
        let b = t.constant(aux(&[2, 4, 2], 110));
        t.matmul(x, b)
    });
    check(&[2, 4, 2], 13, Kind::Signed, |t, x| {
        let a = t.constant(aux(&[2, 3, 4], 111));
        t.matmul(a, x)
    });
}

#[test]
fn grad_transpose_reshape_broadcast() {
    check(&[2, 3], 14, Kind::Signed, |t, x| t.transpose_last2(x));
    check(&[2, 6], 15, Kind::Signed, |t, x| t.reshape(x, &[3, 4]));
    check(&[3, 1], 16, Kind::Signed, |t, x| t.broadcast_to(x, &[2, 3, 5]));
}

#[test]
fn grad_concat_slice() {
    check(&[2, 3], 17, Kind::Signed, |t, x| {
        let a = t.constant(aux(&[2, 2], 112));
        let b = t.constant(aux(&[2, 1], 113));
        t.concat_last(&[a, x, b])
    });
    check(&[2, 6], 18, Kind::Signed, |t, x| t.slice_last(x, 1, 3));
}

#[test]
fn grad_gather_repeated_rows() {
    check(&[4, 3], 19, Kind::Signed, |t, x| t.gather0(x, &[2, 0, 2, 3]));
}

#[test]
fn grad_stack_scalars() {
    check(&[3, 2], 20, Kind::Signed, |t, x| {
        let s1 = t.sum_all(x);
        let sq = t.square(x);
        let s2 = t.sum_all(sq);
        t.stack_scalars(&[s1, s2, s1])
    });
}

#[test]
fn grad_reductions() {
    check(&[2, 3, 2], 21, Kind::Signed, |t, x| t.sum_axis(x, 1));
    check(&[2, 3, 2], 22, Kind::Signed, |t, x| t.mean_axis(x, 2));
    check(&[3, 3], 23, Kind::Signed, |t, x| t.sum_all(x));
    check(&[3, 3], 24, Kind::Signed, |t, x| t.mean_all(x));
}

#[test]
fn grad_activations() {
    check(&[3, 4], 25, Kind::Signed, |t, x| t.relu(x));
    check(&[3, 4], 26, Kind::Signed, |t, x| t.leaky_relu(x, 0.2));
    check(&[3, 4], 27, Kind::Signed, |t, x| t.elu(x, 1.0));
    check(&[3, 4], 28, Kind::Signed, |t, x| t.sigmoid(x));
    check(&[3, 4], 29, Kind::Signed, |t, x| t.exp(x));
    check(&[3, 4], 30, Kind::Positive, |t, x| t.ln(x));
    check(&[3, 4], 31, Kind::Positive, |t, x| t.sqrt(x));
    check(&[3, 4], 32, Kind::Signed, |t, x| t.square(x));
}

#[test]
fn grad_softmax_family() {
    check(&[3, 5], 33, Kind::Signed, |t, x| t.softmax_last(x));
    check(&[3, 5], 34, Kind::Signed, |t, x| t.log_softmax_last(x));
    check(&[3, 5], 35, Kind::Signed, |t, x| t.logsumexp_last(x));
}

#[test]
fn grad_group_norm() {
    check(&[2, 6], 36, Kind::Signed, |t, x| t.group_norm(x, 1, 1e-6));
    check(&[2, 6], 37, Kind::Signed, |t, x| t.group_norm(x, 2, 1e-6));
    check(&[2, 2, 8], 38, Kind::Signed, |t, x| t.group_norm(x, 4, 1e-6));
}

#[test]
fn grad_rotary() {
    let pos = [0.0, 3.0, 7.0];
    check(&[2, 3, 4], 39, Kind::Signed, move |t, x| t.rotary(x, &pos, 10000.0, false));
    check(&[2, 3, 4], 40, Kind::Signed, move |t, x| t.rotary(x, &pos, 10000.0, true));
}

#[test]
fn grad_composite_chain() {
    // Exercises a realistic mix: projection, rotary, norm, activation, softmax.
    let pos = [1.0, 2.0, 5.0];
    check(&[2, 3, 4], 41, Kind::Signed, move |t, x| {
        let w = t.constant(aux(&[4, 6], 114));
        let h = t.matmul(x, w);
        let h = t.rotary(h, &pos, 10000.0, false);
        let h = t.group_norm(h, 3, 1e-6);
        let h = t.elu(h, 1.0);
        let w2 = t.constant(aux(&[6, 3], 115));
        let h = t.matmul(h, w2);
        t.softmax_last(h)
    });
}

#[test]
fn scalar_and_stack_values() {
    let mut t = Tape::new();
    let x = t.constant(ArrayD::from_shape_vec(IxDyn(&[2]), vec![3.0, 4.0]).unwrap());
    let s = t.sum_all(x);
    assert_eq!(t.scalar(s), 7.0);
    let sq = t.square(x);
    let s2 = t.sum_all(sq);
    let v = t.stack_scalars(&[s, s2]);
    assert_eq!(t.value(v).as_slice().unwrap(), &[7.0, 25.0]);
}
