//! Parameter storage, initialization, optimizer, and small layer helpers.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use sha2::{Digest, Sha256};

use super::tape::{Grads, Tape, Var};

/// Named model parameters in insertion order. Iteration order is the
/// insertion order, so a model initialized the same way always walks its
/// parameters identically — no hash-map nondeterminism anywhere near the
/// numerics.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a new parameter. Duplicate names are an initialization bug.
    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) -> usize {
        assert!(
            !self.index.contains_key(name),
            "parameter {name:?} registered twice"
        );
        let idx = self.values.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), idx);
        idx
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn value_at(&self, idx: usize) -> &ArrayD<f64> {
        &self.values[idx]
    }

    pub fn value_at_mut(&mut self, idx: usize) -> &mut ArrayD<f64> {
        &mut self.values[idx]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// SHA-256 over names, shapes, and little-endian element bytes, in
    /// insertion order. Two stores hash equal iff they hold bit-identical
    /// parameters — used to prove a frozen stage really froze.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, value) in self.iter() {
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
}

pub fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Binds [`ParamStore`] entries onto a [`Tape`] for one forward/backward pass
/// and remembers which leaf belongs to which parameter.
pub struct Session {
    pub tape: Tape,
    /// When false, parameters bind as untracked constants (frozen stage).
    pub trainable: bool,
    bound: BTreeMap<usize, Var>,
}

impl Session {
    pub fn new() -> Self {
        Self {
            tape: Tape::new(),
            trainable: true,
            bound: BTreeMap::new(),
        }
    }

    /// Session whose parameters bind as constants: forward-only evaluation
    /// (streaming inference, frozen-backbone stages).
    pub fn frozen() -> Self {
        Self {
            tape: Tape::new(),
            trainable: false,
            bound: BTreeMap::new(),
        }
    }

    /// Leaf for a named parameter. A parameter used twice in one pass binds
    /// once, so its gradient accumulates across uses.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        let idx = store
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}; model not initialized"));
        if let Some(v) = self.bound.get(&idx) {
            return *v;
        }
        let v = self.tape.leaf(store.value_at(idx).clone(), self.trainable);
        self.bound.insert(idx, v);
        v
    }

    /// `(store index, gradient)` pairs for every bound parameter that
    /// received a gradient, in ascending store order.
    pub fn collect_grads(&self, grads: &Grads) -> Vec<(usize, ArrayD<f64>)> {
        self.bound
            .iter()
            .filter_map(|(&idx, &var)| grads.wrt(var).map(|g| (idx, g.clone())))
            .collect()
    }
}

impl Default for Session {
    fn default() -> Self {
        Self::new()
    }
}

/// Adam with bias correction. Parameters absent from a step keep their
/// moment state untouched.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<usize, ArrayD<f64>>,
    v: BTreeMap<usize, ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(usize, ArrayD<f64>)]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, g) in grads {
            let m = self
                .m
                .entry(*idx)
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(*idx)
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            });
            let p = store.value_at_mut(*idx);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            });
        }
    }
}

// ---- initialization -----------------------------------------------------------

/// Xavier/Glorot uniform: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, shape: &[usize]) -> ArrayD<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-a..a)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

/// Register `{prefix}.w` (Xavier) and optionally `{prefix}.b` (zeros).
pub fn init_linear<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    bias: bool,
) {
    store.insert(&format!("{prefix}.w"), xavier_uniform(rng, d_in, d_out, &[d_in, d_out]));
    if bias {
        store.insert(&format!("{prefix}.b"), zeros(&[d_out]));
    }
}

/// `x @ w (+ b)` using parameters registered by [`init_linear`].
pub fn linear(sess: &mut Session, store: &ParamStore, prefix: &str, x: Var) -> Var {
    let w = sess.param(store, &format!("{prefix}.w"));
    let y = sess.tape.matmul(x, w);
    match store.index_of(&format!("{prefix}.b")) {
        Some(_) => {
            let b = sess.param(store, &format!("{prefix}.b"));
            sess.tape.add_bias(y, b)
        }
        None => y,
    }
}

/// Output squashing for the two-layer MLP helper.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MlpHead {
    Identity,
    Sigmoid,
}

/// Register a two-layer MLP `{prefix}.l1` / `{prefix}.l2` with hidden width
/// `2 * d_in` and ELU in between.
pub fn init_mlp2<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, d_in: usize, d_out: usize) {
    let hidden = 2 * d_in;
    init_linear(store, rng, &format!("{prefix}.l1"), d_in, hidden, true);
    init_linear(store, rng, &format!("{prefix}.l2"), hidden, d_out, true);
}

/// Forward pass of [`init_mlp2`] parameters: linear, ELU, linear, head.
pub fn mlp2(sess: &mut Session, store: &ParamStore, prefix: &str, x: Var, head: MlpHead) -> Var {
    let h = linear(sess, store, &format!("{prefix}.l1"), x);
    let h = sess.tape.elu(h, 1.0);
    let out = linear(sess, store, &format!("{prefix}.l2"), h);
    match head {
        MlpHead::Identity => out,
        MlpHead::Sigmoid => sess.tape.sigmoid(out),
    }
}
