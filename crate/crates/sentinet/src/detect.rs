//! Detection over trained models, always through the streaming recurrence.
//!
//! Two entry points: [`detect_windows`] scores an already-windowed dataset
//! window by window, and [`detect_stream`] walks one continuous series with
//! a sliding window, emitting scores as the recurrent state advances —
//! no window is ever recomputed from scratch. Both classify against a
//! labeled support set drawn from a training dataset and write the
//! detection-record form the evaluation tooling consumes.

use ndarray::{Array2, Array3, Axis, IxDyn, Slice};

use crate::backbone::{forward_streamed, stream_embed, stream_step, BackboneConfig, BackboneError, StreamState};
use crate::dataset::GraphSample;
use crate::discriminator::{classify_nodes, DetectionRecord, DiscriminatorConfig, EpisodeBatch};
use crate::seeds::derive_seed;
use crate::tensor::nn::ParamStore;
use crate::trainer::{choose_support_slots, embed_support, SupportSet, TrainError, SALT_SUPPORT};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectOptions {
    /// Score at or above which a node is flagged anomalous.
    pub threshold: f64,
    /// Query slots per classification episode.
    pub chunk: usize,
    /// Seed for the support draw.
    pub seed: u64,
}

impl Default for DetectOptions {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            chunk: 64,
            seed: 0,
        }
    }
}

fn validate_options(opts: &DetectOptions) -> Result<(), TrainError> {
    if !opts.threshold.is_finite() {
        return Err(TrainError::Config(format!(
            "threshold must be finite, got {}",
            opts.threshold
        )));
    }
    if opts.chunk == 0 {
        return Err(TrainError::Config("chunk must be positive".into()));
    }
    Ok(())
}

/// Classify `queries` (flat id, embedding) against the support set and
/// append one record per query.
fn classify_against_support(
    store: &ParamStore,
    disc_cfg: &DiscriminatorConfig,
    support: &SupportSet,
    queries: &[(usize, ndarray::Array1<f64>)],
    opts: &DetectOptions,
    nodes: usize,
    out: &mut Vec<DetectionRecord>,
) -> Result<(), TrainError> {
    for chunk in queries.chunks(opts.chunk) {
        let episode = EpisodeBatch {
            support_normal: support.normal.clone(),
            support_anomalous: support
                .anomalous
                .iter()
                .map(|(id, x)| (Some(*id), x.clone()))
                .collect(),
            query_labeled: Vec::new(),
            query_unlabeled: chunk.to_vec(),
        };
        let (x, meta) = episode.assemble(None)?;
        let mut decisions = classify_nodes(store, disc_cfg, &x, &meta)?;
        decisions.sort_by_key(|d| d.id);
        for d in decisions {
            let slot = d.id.expect("queries carry slot ids");
            out.push(DetectionRecord {
                sample_id: slot / nodes,
                node_id: slot % nodes,
                score: d.score,
                label: u8::from(d.score >= opts.threshold),
                threshold: opts.threshold,
            });
        }
    }
    Ok(())
}

/// Score every node of every window through the recurrent forward.
///
/// `support_source` provides the labeled nodes the discriminator compares
/// against — normally the training split the model saw. Returns records in
/// `(sample, node)` order; an empty input yields an empty vector.
pub fn detect_windows(
    store: &ParamStore,
    bb_cfg: &BackboneConfig,
    disc_cfg: &DiscriminatorConfig,
    samples: &[GraphSample],
    support_source: &[GraphSample],
    opts: &DetectOptions,
) -> Result<Vec<DetectionRecord>, TrainError> {
    validate_options(opts)?;
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let slots = choose_support_slots(support_source, disc_cfg.k, derive_seed(opts.seed, SALT_SUPPORT))?;
    let support = embed_support(store, bb_cfg, support_source, &slots)?;
    let n = bb_cfg.nodes;
    let mut queries = Vec::with_capacity(samples.len() * n);
    for (si, sample) in samples.iter().enumerate() {
        let x = sample
            .x
            .clone()
            .into_shape_with_order(IxDyn(&[1, n, bb_cfg.modalities, bb_cfg.window]))
            .map_err(|_| {
                TrainError::Backbone(BackboneError::Shape {
                    axis: "sample vs model shape",
                    expected: n * bb_cfg.modalities * bb_cfg.window,
                    got: sample.x.len(),
                })
            })?;
        let emb = forward_streamed(store, bb_cfg, &x, std::slice::from_ref(&sample.adjacency))?;
        let flat: Array2<f64> = emb
            .into_shape_with_order((n, bb_cfg.gat_out))
            .expect("embedding is (1, N, d)");
        for node in 0..n {
            queries.push((si * n + node, flat.index_axis(Axis(0), node).to_owned()));
        }
    }
    let mut out = Vec::with_capacity(queries.len());
    classify_against_support(store, disc_cfg, &support, &queries, opts, n, &mut out)?;
    Ok(out)
}

/// One continuous `N×M×T` series walked by the recurrence; an embedding is
/// emitted every `stride` steps once the first `window` steps have filled
/// the ring, so consecutive sliding windows share all their state.
///
/// `sample_id` in the output is the emission index; emission `i` covers the
/// window ending at step `window − 1 + i·stride`. The recurrent state is
/// never reset between emissions, so windows after the first carry
/// exponentially decayed context from before their own span — unlike
/// re-embedding each window from scratch, and at a fraction of the cost.
pub fn detect_stream(
    store: &ParamStore,
    bb_cfg: &BackboneConfig,
    disc_cfg: &DiscriminatorConfig,
    series: &Array3<f64>,
    adjacency: &Array2<f64>,
    support_source: &[GraphSample],
    stride: usize,
    opts: &DetectOptions,
) -> Result<Vec<DetectionRecord>, TrainError> {
    validate_options(opts)?;
    if stride == 0 {
        return Err(TrainError::Config("stride must be positive".into()));
    }
    let (n, m, t) = (series.shape()[0], series.shape()[1], series.shape()[2]);
    if n != bb_cfg.nodes || m != bb_cfg.modalities {
        return Err(TrainError::Backbone(BackboneError::Shape {
            axis: "stream series (N, M, T) vs model",
            expected: bb_cfg.nodes * bb_cfg.modalities,
            got: n * m,
        }));
    }
    if t < bb_cfg.window {
        return Ok(Vec::new());
    }
    let slots = choose_support_slots(support_source, disc_cfg.k, derive_seed(opts.seed, SALT_SUPPORT))?;
    let support = embed_support(store, bb_cfg, support_source, &slots)?;

    let mut state = StreamState::new(bb_cfg, 1);
    let adjs = std::slice::from_ref(adjacency);
    let mut queries = Vec::new();
    let mut emission = 0usize;
    for step in 0..t {
        let x_t = series
            .slice_axis(Axis(2), Slice::from(step..step + 1))
            .to_owned()
            .into_shape_with_order(IxDyn(&[1, n, m]))
            .expect("one step is (N, M)");
        stream_step(store, bb_cfg, &mut state, &x_t)?;
        let warm = step + 1 >= bb_cfg.window;
        if warm && (step + 1 - bb_cfg.window) % stride == 0 {
            let emb = stream_embed(store, bb_cfg, &state, adjs)?;
            let flat: Array2<f64> = emb
                .into_shape_with_order((n, bb_cfg.gat_out))
                .expect("embedding is (1, N, d)");
            for node in 0..n {
                queries.push((emission * n + node, flat.index_axis(Axis(0), node).to_owned()));
            }
            emission += 1;
        }
    }
    let mut out = Vec::with_capacity(queries.len());
    classify_against_support(store, disc_cfg, &support, &queries, opts, n, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::init_backbone;
    use crate::discriminator::init_discriminator;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ring(n: usize) -> Array2<f64> {
        let mut a = Array2::eye(n);
        for i in 0..n {
            a[[i, (i + 1) % n]] = 1.0;
            a[[(i + 1) % n, i]] = 1.0;
        }
        a
    }

    fn labeled_sample(n: usize, m: usize, w: usize, seed: u64) -> GraphSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array3::from_shape_fn((n, m, w), |_| rng.gen_range(-1.0..1.0));
        GraphSample {
            adjacency: ring(n),
            x,
            truth: Some((0..n).map(|i| u8::from(i == 0)).collect()),
            labels: Some((0..n).map(|i| Some(u8::from(i == 0))).collect()),
            origin_time: 0.0,
            phase: 0,
        }
    }

    fn setup(n: usize, m: usize, w: usize) -> (ParamStore, BackboneConfig, DiscriminatorConfig) {
        let mut bb = BackboneConfig::with_shape(n, m, w, 8);
        bb.layers = 1;
        bb.heads = 2;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_backbone(&mut store, &mut rng, &bb);
        let mut disc = DiscriminatorConfig::with_dim(bb.gat_out);
        disc.k = 2;
        disc.layers = 2;
        init_discriminator(&mut store, &mut rng, &disc);
        (store, bb, disc)
    }

    #[test]
    fn window_mode_scores_every_slot_deterministically() {
        let (store, bb, disc) = setup(6, 2, 8);
        let support: Vec<GraphSample> = (0..4).map(|i| labeled_sample(6, 2, 8, i)).collect();
        let input: Vec<GraphSample> = (10..13).map(|i| labeled_sample(6, 2, 8, i)).collect();
        let opts = DetectOptions::default();
        let a = detect_windows(&store, &bb, &disc, &input, &support, &opts).unwrap();
        let b = detect_windows(&store, &bb, &disc, &input, &support, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3 * 6);
        for (i, r) in a.iter().enumerate() {
            assert_eq!(r.sample_id, i / 6);
            assert_eq!(r.node_id, i % 6);
            assert_eq!(r.threshold, 0.5);
            assert!((0.0..=1.0).contains(&r.score));
            assert_eq!(r.label, u8::from(r.score >= 0.5));
        }
    }

    #[test]
    fn threshold_moves_the_decision_boundary() {
        let (store, bb, disc) = setup(6, 2, 8);
        let support: Vec<GraphSample> = (0..4).map(|i| labeled_sample(6, 2, 8, i)).collect();
        let input = vec![labeled_sample(6, 2, 8, 42)];
        let low = DetectOptions { threshold: -1.0, ..Default::default() };
        let high = DetectOptions { threshold: 2.0, ..Default::default() };
        let all_on = detect_windows(&store, &bb, &disc, &input, &support, &low).unwrap();
        let all_off = detect_windows(&store, &bb, &disc, &input, &support, &high).unwrap();
        assert!(all_on.iter().all(|r| r.label == 1 && r.threshold == -1.0));
        assert!(all_off.iter().all(|r| r.label == 0));
        // Scores are threshold-independent.
        for (a, b) in all_on.iter().zip(&all_off) {
            assert_eq!(a.score, b.score);
        }
    }

    #[test]
    fn empty_input_yields_zero_records() {
        let (store, bb, disc) = setup(6, 2, 8);
        let support: Vec<GraphSample> = (0..4).map(|i| labeled_sample(6, 2, 8, i)).collect();
        let out = detect_windows(&store, &bb, &disc, &[], &support, &DetectOptions::default()).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn unlabeled_support_is_refused() {
        let (store, bb, disc) = setup(6, 2, 8);
        let mut support = vec![labeled_sample(6, 2, 8, 0)];
        support[0].labels = None;
        let input = vec![labeled_sample(6, 2, 8, 1)];
        match detect_windows(&store, &bb, &disc, &input, &support, &DetectOptions::default()) {
            Err(TrainError::Config(msg)) => assert!(msg.contains("labeled"), "{msg}"),
            other => panic!("expected a support error, got {other:?}"),
        }
    }

    #[test]
    fn stream_mode_emits_on_the_stride_grid() {
        let (store, bb, disc) = setup(6, 2, 8);
        let support: Vec<GraphSample> = (0..4).map(|i| labeled_sample(6, 2, 8, i)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let series = Array3::from_shape_fn((6, 2, 40), |_| rng.gen_range(-1.0..1.0));
        let out = detect_stream(
            &store,
            &bb,
            &disc,
            &series,
            &ring(6),
            &support,
            4,
            &DetectOptions::default(),
        )
        .unwrap();
        // Emissions at window ends 8, 12, …, 40 → 1 + (40 − 8)/4 = 9.
        assert_eq!(out.len(), 9 * 6);
        assert_eq!(out.last().unwrap().sample_id, 8);

        // A series shorter than one window emits nothing.
        let short = Array3::from_shape_fn((6, 2, 5), |_| 0.0);
        let none = detect_stream(
            &store, &bb, &disc, &short, &ring(6), &support, 1, &DetectOptions::default(),
        )
        .unwrap();
        assert!(none.is_empty());
    }

    /// The first emission has no pre-window history, so it must score
    /// exactly like embedding that window in isolation. (Later emissions
    /// deliberately differ: the shared state carries decayed context from
    /// before their span.)
    #[test]
    fn first_emission_matches_window_mode() {
        let (store, bb, disc) = setup(6, 2, 8);
        let support: Vec<GraphSample> = (0..4).map(|i| labeled_sample(6, 2, 8, i)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let series = Array3::from_shape_fn((6, 2, 8), |_| rng.gen_range(-1.0..1.0));
        let opts = DetectOptions::default();
        let streamed =
            detect_stream(&store, &bb, &disc, &series, &ring(6), &support, 1, &opts).unwrap();

        let window = GraphSample {
            adjacency: ring(6),
            x: series.clone(),
            truth: Some(vec![0; 6]),
            labels: None,
            origin_time: 0.0,
            phase: 0,
        };
        let direct = detect_windows(&store, &bb, &disc, &[window], &support, &opts).unwrap();
        assert_eq!(streamed.len(), direct.len());
        for (s, d) in streamed.iter().zip(&direct) {
            assert_eq!((s.sample_id, s.node_id), (d.sample_id, d.node_id));
            assert!(
                (s.score - d.score).abs() < 1e-9,
                "node {}: {} vs {}",
                s.node_id,
                s.score,
                d.score
            );
        }
    }
}
