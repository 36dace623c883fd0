//! Controlled anomaly injection with sparse, ratio-constrained supervision
//! labels.
//!
//! Injection operates on normalized windows so magnitudes are in σ units
//! exactly. A *slot* is one `(window, node)` pair; `injection_rate` of all
//! slots receive one anomaly each, with the kind drawn from `type_mix`:
//!
//! * `point`      — single-index spike of `magnitude·σ`
//! * `collective` — level shift of `magnitude/2·σ` over 10–25% of the window
//! * `contextual` — a segment sign-flipped in place: amplitudes stay globally
//!   plausible, local continuity breaks
//! * `intra_corr` — one modality's segment negated, flipping its correlation
//!   with the paired modality on that segment
//! * `inter_corr` — one modality rotated half a window, decoupling the node
//!   from the shared trend of its neighbors
//!
//! Ground truth goes to every sample; supervision labels cover
//! `labeled_fraction` of slots at a fixed 2:1 normal:anomalous ratio. All
//! randomness is keyed per slot via [`derive_seed`], so the log and labels
//! are a pure function of `(dataset, spec)`.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatasetSplit;
use crate::pipeline::SIGMA_FLOOR;
use crate::seeds::derive_seed;

/// Labeled-normal to labeled-anomalous supervision ratio.
pub const LABEL_RATIO_NORMAL: usize = 2;
pub const LABEL_RATIO_ANOMALOUS: usize = 1;

#[derive(Debug, Error)]
pub enum InjectError {
    #[error("invalid anomaly spec: {0}")]
    Config(String),
    #[error(
        "label budget wants {labeled_anomalous} labeled anomalies but only {injected} slots \
         were injected; raise injection_rate or lower labeled_fraction"
    )]
    Budget {
        labeled_anomalous: usize,
        injected: usize,
    },
    #[error("injection log I/O failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("injection log is not valid JSON lines: {0}")]
    Json(#[from] serde_json::Error),
}

/// The five injectable anomaly shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    Point,
    Collective,
    Contextual,
    IntraCorr,
    InterCorr,
}

pub const ALL_KINDS: [AnomalyKind; 5] = [
    AnomalyKind::Point,
    AnomalyKind::Collective,
    AnomalyKind::Contextual,
    AnomalyKind::IntraCorr,
    AnomalyKind::InterCorr,
];

/// What to inject and how much of it to label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalySpec {
    /// Fraction of `(window, node)` slots receiving an anomaly.
    pub injection_rate: f64,
    /// Fraction of slots carrying a supervision label.
    pub labeled_fraction: f64,
    /// Mixture weights over [`ALL_KINDS`], nonnegative, summing to 1.
    pub type_mix: [f64; 5],
    /// Point-spike size in window-σ units; collective shifts use half of it.
    pub magnitude: f64,
    pub rng_seed: u64,
}

impl Default for AnomalySpec {
    fn default() -> Self {
        Self {
            injection_rate: 0.02,
            labeled_fraction: 0.03,
            type_mix: [0.2; 5],
            magnitude: 4.0,
            rng_seed: 0,
        }
    }
}

impl AnomalySpec {
    pub fn validate(&self) -> Result<(), InjectError> {
        let fail = |m: String| Err(InjectError::Config(m));
        for (name, v) in [
            ("injection_rate", self.injection_rate),
            ("labeled_fraction", self.labeled_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return fail(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.type_mix.iter().any(|&w| !(w >= 0.0)) {
            return fail(format!("type_mix weights must be nonnegative, got {:?}", self.type_mix));
        }
        let sum: f64 = self.type_mix.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return fail(format!("type_mix must sum to 1, got {:?} (sum {sum})", self.type_mix));
        }
        if !(self.magnitude > 0.0) || !self.magnitude.is_finite() {
            return fail(format!("magnitude must be positive, got {}", self.magnitude));
        }
        Ok(())
    }
}

/// One line of the injection log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionRecord {
    /// Global window index in storage order (train, validation, test).
    pub window_index: usize,
    pub node: usize,
    #[serde(rename = "type")]
    pub kind: AnomalyKind,
    /// First altered step.
    pub start: usize,
    /// Altered step count.
    pub length: usize,
    /// Applied amplitude in σ units, signed; 0 for pure rearrangements.
    pub magnitude: f64,
    /// Per-slot derived seed that drew this record's parameters.
    pub seed: u64,
}

fn draw_kind(rng: &mut ChaCha8Rng, mix: &[f64; 5]) -> AnomalyKind {
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, &w) in mix.iter().enumerate() {
        acc += w;
        if u < acc {
            return ALL_KINDS[i];
        }
    }
    *ALL_KINDS.last().unwrap()
}

/// Population σ of one `(node, modality)` series in the window.
fn series_sigma(x: &ndarray::Array3<f64>, n: usize, m: usize) -> f64 {
    let w = x.shape()[2];
    let mean: f64 = (0..w).map(|t| x[[n, m, t]]).sum::<f64>() / w as f64;
    let var: f64 = (0..w).map(|t| (x[[n, m, t]] - mean).powi(2)).sum::<f64>() / w as f64;
    var.sqrt().max(SIGMA_FLOOR)
}

/// Segment length drawn uniformly from `[lo_frac·W, hi_frac·W]`, floored at
/// `min_len`, capped at `W`.
fn segment_len(rng: &mut ChaCha8Rng, w: usize, lo_frac: f64, hi_frac: f64, min_len: usize) -> usize {
    let lo = ((w as f64 * lo_frac).ceil() as usize).max(min_len).min(w);
    let hi = ((w as f64 * hi_frac).floor() as usize).clamp(lo, w);
    rng.gen_range(lo..=hi)
}

/// Inject anomalies and assign supervision labels across the whole split.
/// Returns the log, ordered by `(window_index, node)`.
pub fn inject_anomalies(
    split: &mut DatasetSplit,
    spec: &AnomalySpec,
) -> Result<Vec<InjectionRecord>, InjectError> {
    spec.validate()?;
    let windows = split.total();
    if windows == 0 {
        return Err(InjectError::Config("dataset holds no windows".into()));
    }
    let samples: Vec<&mut crate::dataset::GraphSample> = split.all_mut().collect();
    let n = samples[0].nodes();
    let m = samples[0].modalities();
    let w = samples[0].window();
    if w < 2 {
        return Err(InjectError::Config(format!("windows must have at least 2 steps, got {w}")));
    }
    if m < 2 && spec.type_mix[3] > 0.0 {
        return Err(InjectError::Config(
            "intra-modal correlation injection needs at least 2 modalities".into(),
        ));
    }
    let slots = windows * n;
    let n_inject = (spec.injection_rate * slots as f64).round() as usize;
    let n_labeled = (spec.labeled_fraction * slots as f64).round() as usize;
    let n_label_anom = ((n_labeled as f64) * LABEL_RATIO_ANOMALOUS as f64
        / (LABEL_RATIO_NORMAL + LABEL_RATIO_ANOMALOUS) as f64)
        .round() as usize;
    let n_label_norm = n_labeled - n_label_anom;
    if n_label_anom > n_inject {
        return Err(InjectError::Budget {
            labeled_anomalous: n_label_anom,
            injected: n_inject,
        });
    }

    // Slot selection uses the master stream; per-slot parameters use derived
    // seeds so the records do not depend on processing order.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut slot_ids: Vec<usize> = (0..slots).collect();
    slot_ids.shuffle(&mut rng);
    let mut injected: Vec<usize> = slot_ids[..n_inject].to_vec();
    injected.sort_unstable();

    let mut samples = samples;
    let mut log = Vec::with_capacity(n_inject);
    for &slot in &injected {
        let (wi, node) = (slot / n, slot % n);
        let seed = derive_seed(spec.rng_seed, slot as u64);
        let mut srng = ChaCha8Rng::seed_from_u64(seed);
        let kind = draw_kind(&mut srng, &spec.type_mix);
        let x = &mut samples[wi].x;
        let record = match kind {
            AnomalyKind::Point => {
                let t = srng.gen_range(0..w);
                let mj = srng.gen_range(0..m);
                let sign = if srng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let sigma = series_sigma(x, node, mj);
                x[[node, mj, t]] += sign * spec.magnitude * sigma;
                InjectionRecord {
                    window_index: wi,
                    node,
                    kind,
                    start: t,
                    length: 1,
                    magnitude: sign * spec.magnitude,
                    seed,
                }
            }
            AnomalyKind::Collective => {
                let len = segment_len(&mut srng, w, 0.10, 0.25, 1);
                let start = srng.gen_range(0..=w - len);
                let mj = srng.gen_range(0..m);
                let sign = if srng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let sigma = series_sigma(x, node, mj);
                let shift = sign * 0.5 * spec.magnitude * sigma;
                for t in start..start + len {
                    x[[node, mj, t]] += shift;
                }
                InjectionRecord {
                    window_index: wi,
                    node,
                    kind,
                    start,
                    length: len,
                    magnitude: sign * 0.5 * spec.magnitude,
                    seed,
                }
            }
            AnomalyKind::Contextual => {
                let len = segment_len(&mut srng, w, 0.25, 0.50, 2);
                let start = srng.gen_range(0..=w - len);
                let mj = srng.gen_range(0..m);
                for t in start..start + len {
                    x[[node, mj, t]] = -x[[node, mj, t]];
                }
                InjectionRecord {
                    window_index: wi,
                    node,
                    kind,
                    start,
                    length: len,
                    magnitude: 0.0,
                    seed,
                }
            }
            AnomalyKind::IntraCorr => {
                let len = segment_len(&mut srng, w, 0.40, 0.60, 2);
                let start = srng.gen_range(0..=w - len);
                let mj = srng.gen_range(0..m);
                for t in start..start + len {
                    x[[node, mj, t]] = -x[[node, mj, t]];
                }
                InjectionRecord {
                    window_index: wi,
                    node,
                    kind,
                    start,
                    length: len,
                    magnitude: 0.0,
                    seed,
                }
            }
            AnomalyKind::InterCorr => {
                let mj = srng.gen_range(0..m);
                let rot = (w / 2).max(1);
                let old: Vec<f64> = (0..w).map(|t| x[[node, mj, t]]).collect();
                for t in 0..w {
                    x[[node, mj, t]] = old[(t + rot) % w];
                }
                InjectionRecord {
                    window_index: wi,
                    node,
                    kind,
                    start: 0,
                    length: w,
                    magnitude: 0.0,
                    seed,
                }
            }
        };
        log.push(record);
    }

    // Ground truth everywhere; injected slots are anomalous.
    for s in samples.iter_mut() {
        s.truth = Some(vec![0; n]);
        s.labels = Some(vec![None; n]);
    }
    for &slot in &injected {
        samples[slot / n].truth.as_mut().unwrap()[slot % n] = 1;
    }

    // Supervision: anomalous labels from injected slots, normal labels from
    // clean slots, both without replacement.
    let mut anom_pool = injected.clone();
    anom_pool.shuffle(&mut rng);
    let injected_set: std::collections::BTreeSet<usize> = injected.iter().copied().collect();
    let mut clean_pool: Vec<usize> = (0..slots).filter(|s| !injected_set.contains(s)).collect();
    clean_pool.shuffle(&mut rng);
    if n_label_norm > clean_pool.len() {
        return Err(InjectError::Config(format!(
            "label budget wants {n_label_norm} labeled normals but only {} clean slots exist",
            clean_pool.len()
        )));
    }
    for &slot in anom_pool.iter().take(n_label_anom) {
        samples[slot / n].labels.as_mut().unwrap()[slot % n] = Some(1);
    }
    for &slot in clean_pool.iter().take(n_label_norm) {
        samples[slot / n].labels.as_mut().unwrap()[slot % n] = Some(0);
    }
    Ok(log)
}

/// Write one JSON object per line.
pub fn write_injection_log(path: &Path, log: &[InjectionRecord]) -> Result<(), InjectError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in log {
        serde_json::to_writer(&mut f, rec)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_injection_log(path: &Path) -> Result<Vec<InjectionRecord>, InjectError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
