//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records each operation eagerly (forward value plus parent
//! indices) and [`Tape::backward`] walks the record once in reverse,
//! accumulating adjoints. One tape lives for one forward/backward pass; the
//! streaming inference path never builds a tape at all and goes straight to
//! [`super::func`].
//!
//! Only the ops this crate's models need are implemented. All values are
//! `f64` in standard layout, which keeps reshapes free and GEMMs fast.

use ndarray::{ArrayD, Axis, IxDyn};

use super::func;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    /// Add an untracked constant (broadcast over leading axes).
    AddConst(usize),
    /// Multiply by an untracked constant (broadcast over leading axes).
    MulConst(usize, ArrayD<f64>),
    /// `a + b` where `b` is a 1-D bias over the last axis.
    AddBias(usize, usize),
    MatMul(usize, usize),
    Transpose2(usize),
    Reshape(usize),
    BroadcastTo(usize),
    ConcatLast(Vec<usize>),
    SliceLast(usize, usize, usize),
    /// Select rows along axis 0 (indices may repeat).
    Gather0(usize, Vec<usize>),
    StackScalars(Vec<usize>),
    SumAll(usize),
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Elu(usize, f64),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Square(usize),
    SoftmaxLast(usize),
    LogSoftmaxLast(usize),
    LogSumExpLast(usize),
    GroupNorm(usize, usize, f64),
    Rotary {
        a: usize,
        positions: Vec<f64>,
        base: f64,
        conjugate: bool,
    },
}

struct Node {
    value: ArrayD<f64>,
    needs: bool,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    inner: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    /// Gradient of the loss with respect to `v`, if `v` required one.
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.inner.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Operation record for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Forward value of a node that must be scalar.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "expected scalar node, got shape {:?}", val.shape());
        *val.iter().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<f64>, needs: bool, op: Op) -> Var {
        self.nodes.push(Node { value, needs, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs
    }

    /// New input node. `trainable` marks it as a gradient target.
    pub fn leaf(&mut self, value: ArrayD<f64>, trainable: bool) -> Var {
        let value = value.as_standard_layout().into_owned();
        self.push(value, trainable, Op::Leaf)
    }

    /// New untracked constant node.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.leaf(value, false)
    }

    // ---- arithmetic ----------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let out = va + vb;
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(out, needs, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let out = va - vb;
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(out, needs, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let out = va * vb;
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(out, needs, Op::Mul(a.0, b.0))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.mapv(|v| -v);
        let needs = self.needs(a.0);
        self.push(out, needs, Op::Neg(a.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.nodes[a.0].value.mapv(|v| c * v);
        let needs = self.needs(a.0);
        self.push(out, needs, Op::Scale(a.0, c))
    }

    /// Add an untracked constant, broadcast to `a`'s shape.
    pub fn add_const(&mut self, a: Var, c: ArrayD<f64>) -> Var {
        let va = &self.nodes[a.0].value;
        let cb = c
            .broadcast(va.raw_dim())
            .unwrap_or_else(|| panic!("add_const: {:?} does not broadcast to {:?}", c.shape(), va.shape()))
            .to_owned();
        let out = va + &cb;
        let needs = self.needs(a.0);
        self.push(out, needs, Op::AddConst(a.0))
    }

    /// Multiply by an untracked constant, broadcast to `a`'s shape.
    pub fn mul_const(&mut self, a: Var, c: ArrayD<f64>) -> Var {
        let va = &self.nodes[a.0].value;
        let cb = c
            .broadcast(va.raw_dim())
            .unwrap_or_else(|| panic!("mul_const: {:?} does not broadcast to {:?}", c.shape(), va.shape()))
            .to_owned();
        let out = va * &cb;
        let needs = self.needs(a.0);
        self.push(out, needs, Op::MulConst(a.0, c))
    }

    /// `a + bias` where `bias` is 1-D over the last axis of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        assert_eq!(vb.ndim(), 1, "bias must be 1-D");
        assert_eq!(
            va.shape().last(),
            vb.shape().first(),
            "bias length must match last axis"
        );
        let out = va + &vb.view();
        let needs = self.needs(a.0) || self.needs(bias.0);
        self.push(out, needs, Op::AddBias(a.0, bias.0))
    }

    // ---- shape ---------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = func::matmul(&self.nodes[a.0].value, &self.nodes[b.0].value);
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(out, needs, Op::MatMul(a.0, b.0))
    }

    pub fn transpose_last2(&mut self, a: Var) -> Var {
        let out = func::transpose_last2(&self.nodes[a.0].value);
        let needs = self.needs(a.0);
        self.push(out, needs, Op::Transpose2(a.0))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let va = &self.nodes[a.0].value;
        assert_eq!(
            va.len(),
            shape.iter().product::<usize>(),
            "reshape must preserve element count: {:?} -> {:?}",
            va.shape(),
            shape
        );
        let out = va
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap();
        let needs = self.needs(a.0);
        self.push(out, needs, Op::Reshape(a.0))
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Var {
        let va = &self.nodes[a.0].value;
        let out = va
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("broadcast_to: {:?} does not broadcast to {:?}", va.shape(), shape))
            .to_owned();
        let needs = self.needs(a.0);
        self.push(out, needs, Op::BroadcastTo(a.0))
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_last needs at least one part");
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let last = views[0].ndim() - 1;
        let out = ndarray::concatenate(Axis(last), &views).expect("concat_last shape mismatch");
        let needs = parts.iter().any(|p| self.needs(p.0));
        self.push(out, needs, Op::ConcatLast(parts.iter().map(|p| p.0).collect()))
    }

    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = &self.nodes[a.0].value;
        let last = va.ndim() - 1;
        let d = va.shape()[last];
        assert!(start + len <= d, "slice_last {start}+{len} out of range for width {d}");
        let out = va
            .slice_axis(Axis(last), ndarray::Slice::from(start..start + len))
            .as_standard_layout()
            .into_owned();
        let needs = self.needs(a.0);
        self.push(out, needs, Op::SliceLast(a.0, start, len))
    }

    pub fn gather0(&mut self, a: Var, indices: &[usize]) -> Var {
        let va = &self.nodes[a.0].value;
        let rows = va.shape()[0];
        for &i in indices {
            assert!(i < rows, "gather0 index {i} out of range for {rows} rows");
        }
        let out = va.select(Axis(0), indices);
        let needs = self.needs(a.0);
        self.push(out, needs, Op::Gather0(a.0, indices.to_vec()))
    }

    /// Pack scalar nodes into one 1-D vector.
    pub fn stack_scalars(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "stack_scalars needs at least one part");
        let vals: Vec<f64> = parts.iter().map(|p| self.scalar(*p)).collect();
        let out = ArrayD::from_shape_vec(IxDyn(&[vals.len()]), vals).unwrap();
        let needs = parts.iter().any(|p| self.needs(p.0));
        self.push(out, needs, Op::StackScalars(parts.iter().map(|p| p.0).collect()))
    }

    // ---- reductions ----------------------------------------------------------

    /// Sum of all elements, as a 0-d array.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        let out = ArrayD::from_elem(IxDyn(&[]), s);
        let needs = self.needs(a.0);
        self.push(out, needs, Op::SumAll(a.0))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let out = self.nodes[a.0].value.sum_axis(Axis(axis));
        let needs = self.needs(a.0);
        self.push(out, needs, Op::SumAxis(a.0, axis))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let va = &self.nodes[a.0].value;
        let n = va.shape()[axis] as f64;
        let out = va.sum_axis(Axis(axis)).mapv(|v| v / n);
        let needs = self.needs(a.0);
        self.push(out, needs, Op::MeanAxis(a.0, axis))
    }

    /// Mean of all elements, as a 0-d array.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Scalar dot product of two equally-shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let m = self.mul(a, b);
        self.sum_all(m)
    }

    // ---- nonlinearities ------------------------------------------------------

    pub fn relu(&mut self, a: Var) -> Var {
        let out = func::relu(&self.nodes[a.0].value);
        let needs = self.needs(a.0);
        self.push(out, needs, Op::Relu(a.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = func::leaky_relu(&self.nodes[a.0].value, slope);
        let needs = self.needs(a.0);
        self.push(out, needs, Op::LeakyRelu(a.0, slope))
    }

    pub fn elu(&mut self, a: Var, alpha: f64) -> Var {
        let out = func::elu(&self.nodes[a.0].value, alpha);
        let needs = self.needs(a.0);
        self.push(out, needs, Op::Elu(a.0, alpha))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = func::sigmoid(&self.nodes[a.0].value);
        let needs = self.needs(a.0);
        self.push(out, needs, Op::Sigmoid(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.mapv(f64::exp);
        let needs = self.needs(a.0);
        self.push(out, needs, Op::Exp(a.0))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.mapv(f64::ln);
        let needs = self.needs(a.0);
        self.push(out, needs, Op::Ln(a.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.mapv(f64::sqrt);
        let needs = self.needs(a.0);
        self.push(out, needs, Op::Sqrt(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.mapv(|v| v * v);
        let needs = self.needs(a.0);
        self.push(out, needs, Op::Square(a.0))
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let out = func::softmax_last(&self.nodes[a.0].value);
        let needs = self.needs(a.0);
        self.push(out, needs, Op::SoftmaxLast(a.0))
    }

    pub fn log_softmax_last(&mut self, a: Var) -> Var {
        let out = func::log_softmax_last(&self.nodes[a.0].value);
        let needs = self.needs(a.0);
        self.push(out, needs, Op::LogSoftmaxLast(a.0))
    }

    pub fn logsumexp_last(&mut self, a: Var) -> Var {
        let out = func::logsumexp_last(&self.nodes[a.0].value);
        let needs = self.needs(a.0);
        self.push(out, needs, Op::LogSumExpLast(a.0))
    }

    pub fn group_norm(&mut self, a: Var, groups: usize, eps: f64) -> Var {
        let out = func::group_norm(&self.nodes[a.0].value, groups, eps);
        let needs = self.needs(a.0);
        self.push(out, needs, Op::GroupNorm(a.0, groups, eps))
    }

    /// Per-position standardization over the whole feature axis (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        self.group_norm(a, 1, eps)
    }

    pub fn rotary(&mut self, a: Var, positions: &[f64], base: f64, conjugate: bool) -> Var {
        let out = func::rotary(&self.nodes[a.0].value, positions, base, conjugate);
        let needs = self.needs(a.0);
        self.push(
            out,
            needs,
            Op::Rotary {
                a: a.0,
                positions: positions.to_vec(),
                base,
                conjugate,
            },
        )
    }

    // ---- backward ------------------------------------------------------------

    /// Reverse pass from a scalar `root`. Returns adjoints for every node that
    /// transitively feeds a trainable leaf.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be scalar, got shape {:?}",
            self.nodes[root.0].value.shape()
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_elem(self.nodes[root.0].value.raw_dim(), 1.0));

        for i in (0..=root.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs {
                continue;
            }
            let dy = grads[i].take().unwrap();
            self.push_adjoints(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Grads { inner: grads }
    }

    fn acc(&self, grads: &mut [Option<ArrayD<f64>>], idx: usize, delta: ArrayD<f64>) {
        if !self.nodes[idx].needs {
            return;
        }
        match &mut grads[idx] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn push_adjoints(&self, i: usize, dy: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, dy.clone());
                self.acc(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, dy.clone());
                self.acc(grads, *b, dy.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                self.acc(grads, *a, dy * &self.nodes[*b].value);
                self.acc(grads, *b, dy * &self.nodes[*a].value);
            }
            Op::Neg(a) => self.acc(grads, *a, dy.mapv(|v| -v)),
            Op::Scale(a, c) => self.acc(grads, *a, dy.mapv(|v| c * v)),
            Op::AddConst(a) => self.acc(grads, *a, dy.clone()),
            Op::MulConst(a, c) => {
                let cb = c.broadcast(dy.raw_dim()).unwrap().to_owned();
                self.acc(grads, *a, dy * &cb);
            }
            Op::AddBias(a, b) => {
                self.acc(grads, *a, dy.clone());
                if self.nodes[*b].needs {
                    let n = self.nodes[*b].value.len();
                    let flat = dy
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order((dy.len() / n, n))
                        .unwrap();
                    self.acc(grads, *b, flat.sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.nodes[*a].needs {
                    let bt = func::transpose_last2(vb);
                    self.acc(grads, *a, func::matmul(dy, &bt));
                }
                if self.nodes[*b].needs {
                    let at = func::transpose_last2(va);
                    let db_full = func::matmul(&at, dy);
                    // With a 2-D rhs broadcast over leading axes, fold the
                    // batch contributions back down.
                    let db = func::reduce_to(&db_full, vb.shape());
                    self.acc(grads, *b, db);
                }
            }
            Op::Transpose2(a) => self.acc(grads, *a, func::transpose_last2(dy)),
            Op::Reshape(a) => {
                let target = self.nodes[*a].value.raw_dim();
                self.acc(
                    grads,
                    *a,
                    dy.as_standard_layout().into_owned().into_shape_with_order(target).unwrap(),
                );
            }
            Op::BroadcastTo(a) => {
                self.acc(grads, *a, func::reduce_to(dy, self.nodes[*a].value.shape()));
            }
            Op::ConcatLast(parts) => {
                let last = dy.ndim() - 1;
                let mut start = 0;
                for p in parts {
                    let w = *self.nodes[*p].value.shape().last().unwrap();
                    let piece = dy
                        .slice_axis(Axis(last), ndarray::Slice::from(start..start + w))
                        .as_standard_layout()
                        .into_owned();
                    self.acc(grads, *p, piece);
                    start += w;
                }
            }
            Op::SliceLast(a, start, len) => {
                if self.nodes[*a].needs {
                    let mut da = ArrayD::zeros(self.nodes[*a].value.raw_dim());
                    let last = da.ndim() - 1;
                    da.slice_axis_mut(Axis(last), ndarray::Slice::from(*start..start + len))
                        .assign(dy);
                    self.acc(grads, *a, da);
                }
            }
            Op::Gather0(a, indices) => {
                if self.nodes[*a].needs {
                    let mut da = ArrayD::zeros(self.nodes[*a].value.raw_dim());
                    for (k, &idx) in indices.iter().enumerate() {
                        let mut row = da.index_axis_mut(Axis(0), idx);
                        row += &dy.index_axis(Axis(0), k);
                    }
                    self.acc(grads, *a, da);
                }
            }
            Op::StackScalars(parts) => {
                for (k, p) in parts.iter().enumerate() {
                    let g = ArrayD::from_elem(self.nodes[*p].value.raw_dim(), dy[[k]]);
                    self.acc(grads, *p, g);
                }
            }
            Op::SumAll(a) => {
                let seed = *dy.iter().next().unwrap();
                self.acc(grads, *a, ArrayD::from_elem(self.nodes[*a].value.raw_dim(), seed));
            }
            Op::SumAxis(a, axis) => {
                let expanded = dy.clone().insert_axis(Axis(*axis));
                let da = expanded.broadcast(self.nodes[*a].value.raw_dim()).unwrap().to_owned();
                self.acc(grads, *a, da);
            }
            Op::MeanAxis(a, axis) => {
                let n = self.nodes[*a].value.shape()[*axis] as f64;
                let expanded = dy.mapv(|v| v / n).insert_axis(Axis(*axis));
                let da = expanded.broadcast(self.nodes[*a].value.raw_dim()).unwrap().to_owned();
                self.acc(grads, *a, da);
            }
            Op::Relu(a) => {
                let mask = self.nodes[*a].value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                self.acc(grads, *a, dy * &mask);
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                let mask = self.nodes[*a].value.mapv(|v| if v > 0.0 { 1.0 } else { slope });
                self.acc(grads, *a, dy * &mask);
            }
            Op::Elu(a, alpha) => {
                // y = x for x > 0, alpha*(e^x - 1) otherwise; dy/dx = 1 or y + alpha.
                let alpha = *alpha;
                let y = &self.nodes[i].value;
                let x = &self.nodes[*a].value;
                let mut da = dy.clone();
                ndarray::Zip::from(&mut da).and(x).and(y).for_each(|d, &xv, &yv| {
                    if xv <= 0.0 {
                        *d *= yv + alpha;
                    }
                });
                self.acc(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                self.acc(grads, *a, dy * &(y * &y.mapv(|v| 1.0 - v)));
            }
            Op::Exp(a) => self.acc(grads, *a, dy * &self.nodes[i].value),
            Op::Ln(a) => self.acc(grads, *a, dy / &self.nodes[*a].value),
            Op::Sqrt(a) => {
                let y = &self.nodes[i].value;
                self.acc(grads, *a, dy / &y.mapv(|v| 2.0 * v));
            }
            Op::Square(a) => {
                self.acc(grads, *a, dy * &self.nodes[*a].value.mapv(|v| 2.0 * v));
            }
            Op::SoftmaxLast(a) => {
                // dx = y * (dy - sum_last(dy * y))
                let y = &self.nodes[i].value;
                let prod = dy * y;
                let last = y.ndim() - 1;
                let row_sum = prod.sum_axis(Axis(last)).insert_axis(Axis(last));
                let da = y * &(dy - &row_sum.broadcast(y.raw_dim()).unwrap());
                self.acc(grads, *a, da);
            }
            Op::LogSoftmaxLast(a) => {
                // dx = dy - softmax(x) * sum_last(dy); softmax(x) = exp(y).
                let sm = self.nodes[i].value.mapv(f64::exp);
                let last = sm.ndim() - 1;
                let row_sum = dy.sum_axis(Axis(last)).insert_axis(Axis(last));
                let da = dy - &(&sm * &row_sum.broadcast(sm.raw_dim()).unwrap());
                self.acc(grads, *a, da);
            }
            Op::LogSumExpLast(a) => {
                let sm = func::softmax_last(&self.nodes[*a].value);
                let last = sm.ndim() - 1;
                let dy_up = dy.clone().insert_axis(Axis(last));
                let da = &sm * &dy_up.broadcast(sm.raw_dim()).unwrap();
                self.acc(grads, *a, da);
            }
            Op::GroupNorm(a, groups, eps) => {
                self.acc(grads, *a, group_norm_backward(&self.nodes[*a].value, &self.nodes[i].value, dy, *groups, *eps));
            }
            Op::Rotary {
                a,
                positions,
                base,
                conjugate,
            } => {
                // The rotation is orthogonal, so the adjoint is the inverse
                // rotation: same positions, opposite sign.
                self.acc(grads, *a, func::rotary(dy, positions, *base, !conjugate));
            }
        }
    }
}

/// dx for y = (x - mean) / sqrt(var + eps) per group:
/// dx = (dy - mean_g(dy) - y * mean_g(dy * y)) / sqrt(var + eps).
fn group_norm_backward(
    x: &ArrayD<f64>,
    y: &ArrayD<f64>,
    dy: &ArrayD<f64>,
    groups: usize,
    eps: f64,
) -> ArrayD<f64> {
    let d = *x.shape().last().unwrap();
    let gw = d / groups;
    let p = x.len() / d;
    let xs = x.as_standard_layout();
    let x3 = xs.view().into_shape_with_order((p, groups, gw)).unwrap();
    let ys = y.as_standard_layout();
    let y3 = ys.view().into_shape_with_order((p, groups, gw)).unwrap();
    let ds = dy.as_standard_layout();
    let dy3 = ds.view().into_shape_with_order((p, groups, gw)).unwrap();
    let mut out = ndarray::Array3::<f64>::zeros((p, groups, gw));
    for i in 0..p {
        for g in 0..groups {
            let xv = x3.index_axis(Axis(0), i);
            let xv = xv.index_axis(Axis(0), g);
            let yv = y3.index_axis(Axis(0), i);
            let yv = yv.index_axis(Axis(0), g);
            let dv = dy3.index_axis(Axis(0), i);
            let dv = dv.index_axis(Axis(0), g);
            let mean = xv.sum() / gw as f64;
            let var = xv.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / gw as f64;
            let inv = 1.0 / (var + eps).sqrt();
            let dmean = dv.sum() / gw as f64;
            let dymean = dv.iter().zip(yv.iter()).map(|(&a, &b)| a * b).sum::<f64>() / gw as f64;
            let mut orow = out.index_axis_mut(Axis(0), i);
            let mut orow = orow.index_axis_mut(Axis(0), g);
            for k in 0..gw {
                orow[k] = (dv[k] - dmean - yv[k] * dymean) * inv;
            }
        }
    }
    out.into_shape_with_order(x.raw_dim()).unwrap()
}
