//! Analytic forward-pass cost model.
//!
//! Costs are counted from the configuration alone — nothing is executed.
//! Conventions, applied uniformly:
//!
//! * matrix product `m×k @ k×n` = `2mkn` (multiply-add pairs count 2);
//! * bias add, residual add, elementwise activation = 1 per element;
//! * rotary position mixing = 6 per element (two products and a
//!   combination per paired coordinate);
//! * standardizing normalizations = 8 per element (mean, variance,
//!   shift, scale);
//! * softmax = 5 per element.
//!
//! Two modes mirror the two equivalent forward forms: a full window in one
//! parallel pass (quadratic in `W` through the decay-masked attention), or
//! one streaming step of the recurrent form, whose cost contains no `W` and
//! therefore cannot depend on stream position.

use std::collections::BTreeMap;

use crate::backbone::BackboneConfig;
use crate::discriminator::DiscriminatorConfig;

pub const NORM_COST: u64 = 8;
pub const SOFTMAX_COST: u64 = 5;
pub const ROTARY_COST: u64 = 6;

/// `2mkn` for an `m×k` by `k×n` product.
pub fn matmul_flops(m: usize, k: usize, n: usize) -> u64 {
    2 * (m as u64) * (k as u64) * (n as u64)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEntry {
    pub module: String,
    pub op: String,
    pub flops: u64,
}

/// Itemized cost listing; the total is the sum of its lines by definition,
/// and tests hold the two together.
#[derive(Debug, Clone, Default)]
pub struct FlopsLedger {
    pub entries: Vec<LedgerEntry>,
}

impl FlopsLedger {
    fn add(&mut self, module: &str, op: &str, flops: u64) {
        self.entries.push(LedgerEntry {
            module: module.to_string(),
            op: op.to_string(),
            flops,
        });
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.flops).sum()
    }

    pub fn mflops(&self) -> f64 {
        self.total() as f64 / 1e6
    }

    pub fn by_module(&self) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.module.clone()).or_insert(0) += e.flops;
        }
        out
    }

    pub fn entry(&self, module: &str, op: &str) -> Option<u64> {
        self.entries
            .iter()
            .find(|e| e.module == module && e.op == op)
            .map(|e| e.flops)
    }
}

/// Which forward form to cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostMode {
    /// One whole window through the parallel form, including fusion and
    /// graph attention.
    ParallelWindow,
    /// One step of the streaming recurrence (state updates only; the
    /// fusion/attention readout is a separate per-window cost).
    RecurrentStep,
}

/// Cost one forward pass of the encoder at batch size 1.
pub fn count_flops(cfg: &BackboneConfig, mode: CostMode) -> FlopsLedger {
    let n = cfg.nodes;
    let w = cfg.window;
    let m = cfg.modalities;
    let d = cfg.d_model;
    let h = cfg.heads;
    let dh = d / h;
    let dm = d / m;
    let dv = cfg.cr_value_width;
    let g = cfg.gat_out;
    let l = cfg.layers;
    let mut ledger = FlopsLedger::default();

    match mode {
        CostMode::ParallelWindow => {
            let pos = n * w; // positions per tensor

            // Per-modality scalar-to-slab embedding with bias.
            ledger.add("embed", "project", m as u64 * (matmul_flops(pos, 1, dm) + (pos * dm) as u64));

            for layer in 0..l {
                let tag = format!("layer{layer}");
                // Pre-norm before each sub-block.
                ledger.add(&tag, "msr.norm_in", NORM_COST * (pos * d) as u64);
                // Per-head projections: Q and K at full width, V at d/h.
                let proj = h as u64
                    * (matmul_flops(pos, d, d) * 2 + matmul_flops(pos, d, dh));
                ledger.add(&tag, "msr.proj", proj);
                ledger.add(&tag, "msr.rotary", ROTARY_COST * 2 * h as u64 * (pos * d) as u64);
                // Decay-masked attention: QKᵀ, the mask product, and the
                // value mix — the quadratic-in-W heart of the parallel form.
                let attn = h as u64
                    * (matmul_flops(n * w, d, w) + (n * w * w) as u64 + matmul_flops(n * w, w, dh));
                ledger.add(&tag, "msr.attention", attn);
                ledger.add(&tag, "msr.norm_heads", NORM_COST * (pos * d) as u64);
                ledger.add(&tag, "msr.residual", (pos * d) as u64);

                ledger.add(&tag, "cr.norm_in", NORM_COST * (pos * d) as u64);
                let cr_proj = m as u64
                    * (matmul_flops(pos, dm, d) * 2 + matmul_flops(pos, dm, dv));
                ledger.add(&tag, "cr.proj", cr_proj);
                // Complementary key pooling: sum over modalities plus the
                // self-subtraction.
                ledger.add(&tag, "cr.key_pool", ((m + 1) * pos * d) as u64);
                let cr_attn = m as u64
                    * (matmul_flops(n * w, d, w) + (n * w * w) as u64 + matmul_flops(n * w, w, dv));
                ledger.add(&tag, "cr.attention", cr_attn);
                ledger.add(&tag, "cr.norm_out", NORM_COST * (pos * m * dv) as u64);
                ledger.add(&tag, "cr.residual", (pos * d) as u64);
            }

            // Multi-depth fusion: concat is free, then two biased linears
            // around a mean over the window.
            let fuse = matmul_flops(pos, l * d, d) + (pos * d) as u64 + (pos * d) as u64;
            let pool = (pos * d) as u64;
            let out = matmul_flops(n, d, d) + (n * d) as u64 + (n * d) as u64;
            ledger.add("fpn", "fuse", fuse + pool + out);

            // Graph attention over the node axis.
            let gat = matmul_flops(n, d, g)
                + 2 * matmul_flops(n, g, 1)
                + (3 * n * n) as u64            // pair add, slope, mask
                + SOFTMAX_COST * (n * n) as u64
                + matmul_flops(n, n, g)
                + (n * g) as u64; // ELU
            ledger.add("gat", "attend", gat);
        }
        CostMode::RecurrentStep => {
            ledger.add("embed", "project", m as u64 * (matmul_flops(n, 1, dm) + (n * dm) as u64));
            for layer in 0..l {
                let tag = format!("layer{layer}");
                ledger.add(&tag, "msr.norm_in", NORM_COST * (n * d) as u64);
                let proj = h as u64
                    * (matmul_flops(n, d, d) * 2 + matmul_flops(n, d, dh));
                ledger.add(&tag, "msr.proj", proj);
                ledger.add(&tag, "msr.rotary", ROTARY_COST * 2 * h as u64 * (n * d) as u64);
                // State decay, rank-1 write, and the state read-out; the
                // window length never appears.
                let state = h as u64
                    * ((n * d * dh) as u64          // γ·S
                        + matmul_flops(n * d, 1, dh) // KᵀV outer product
                        + (n * d * dh) as u64        // accumulate
                        + matmul_flops(n, d, dh)); // Q·S
                ledger.add(&tag, "msr.state", state);
                ledger.add(&tag, "msr.norm_heads", NORM_COST * (n * d) as u64);
                ledger.add(&tag, "msr.residual", (n * d) as u64);

                ledger.add(&tag, "cr.norm_in", NORM_COST * (n * d) as u64);
                let cr_proj = m as u64
                    * (matmul_flops(n, dm, d) * 2 + matmul_flops(n, dm, dv));
                ledger.add(&tag, "cr.proj", cr_proj);
                ledger.add(&tag, "cr.key_pool", ((m + 1) * n * d) as u64);
                let cr_state = m as u64
                    * ((n * d * dv) as u64
                        + matmul_flops(n * d, 1, dv)
                        + (n * d * dv) as u64
                        + matmul_flops(n, d, dv));
                ledger.add(&tag, "cr.state", cr_state);
                ledger.add(&tag, "cr.norm_out", NORM_COST * (n * m * dv) as u64);
                ledger.add(&tag, "cr.residual", (n * d) as u64);
            }
        }
    }
    ledger
}

/// Cost one discriminator episode forward over `members` graph nodes.
pub fn discriminator_episode_flops(cfg: &DiscriminatorConfig, members: usize) -> FlopsLedger {
    let n = members;
    let wi = cfg.ins_width();
    let wd = cfg.dis_width();
    let mut ledger = FlopsLedger::default();
    // Two-layer MLP with hidden 2×input applied over `rows` rows.
    let mlp = |rows: usize, d_in: usize, d_out: usize| -> u64 {
        matmul_flops(rows, d_in, 2 * d_in)
            + (rows * 2 * d_in) as u64 * 2 // bias + activation
            + matmul_flops(rows, 2 * d_in, d_out)
            + (rows * d_out) as u64
    };
    let pair = n * n;
    ledger.add("init", "ins_edges", (pair * wi) as u64 * 2 + mlp(pair, wi, 1));
    ledger.add("init", "dis_edges", (pair * wd) as u64 * 2 + mlp(pair, wd, 1));
    for l in 1..=cfg.layers {
        let tag = format!("round{l}");
        ledger.add(&tag, "ins_edges", (pair * wi) as u64 * 2 + mlp(pair, wi, 1) + pair as u64);
        ledger.add(&tag, "dis_nodes", mlp(n, 2 * wd, wd));
        ledger.add(&tag, "dis_edges", (pair * wd) as u64 * 2 + mlp(pair, wd, 1) + pair as u64);
        ledger.add(
            &tag,
            "ins_nodes",
            matmul_flops(n, n, wi) + mlp(n, 2 * wi, wi),
        );
    }
    let s = 2 * cfg.k;
    ledger.add(
        "readout",
        "predict",
        2 * (matmul_flops(n, s, 2) + matmul_flops(n, wi, 2) + (SOFTMAX_COST * 2 * n as u64)),
    );
    ledger
}
