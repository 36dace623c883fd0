//! The full encoder run two ways over the same window: once in parallel
//! (as during training) and once as a stream that consumes one observation
//! per step (as during deployment). The example also shows the stream's
//! warmup contract — asking for an embedding before a full window has
//! arrived is an error that says how many steps are missing.
//!
//! ```text
//! cargo run --example streaming_backbone
//! ```

use ndarray::{Array2, ArrayD, Axis, IxDyn, Slice};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sentinet::backbone::{
    forward_parallel, init_backbone, stream_embed, stream_step, BackboneConfig, BackboneError,
    StreamState,
};
use sentinet::tensor::nn::ParamStore;

fn main() -> anyhow::Result<()> {
    let mut cfg = BackboneConfig::with_shape(5, 3, 24, 12);
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.gat_out = 8;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    init_backbone(&mut store, &mut rng, &cfg);
    println!(
        "encoder: {} layers, {} heads, width {}, window {}, {} parameters",
        cfg.layers,
        cfg.heads,
        cfg.d_model,
        cfg.window,
        store.num_scalars()
    );

    // A ring of 5 sensors.
    let mut adjacency = Array2::eye(cfg.nodes);
    for i in 0..cfg.nodes {
        adjacency[[i, (i + 1) % cfg.nodes]] = 1.0;
        adjacency[[(i + 1) % cfg.nodes, i]] = 1.0;
    }
    let x = ArrayD::from_shape_fn(
        IxDyn(&[1, cfg.nodes, cfg.modalities, cfg.window]),
        |_| rng.gen_range(-1.0..1.0),
    );

    // Whole window at once.
    let parallel = forward_parallel(&store, &cfg, &x, std::slice::from_ref(&adjacency))?;

    // One observation at a time.
    let mut state = StreamState::new(&cfg, 1);
    for t in 0..cfg.window {
        let x_t = x
            .slice_axis(Axis(3), Slice::from(t..t + 1))
            .to_owned()
            .into_shape_with_order(IxDyn(&[1, cfg.nodes, cfg.modalities]))?;
        stream_step(&store, &cfg, &mut state, &x_t)?;

        if t == cfg.window / 2 {
            match stream_embed(&store, &cfg, &state, std::slice::from_ref(&adjacency)) {
                Err(BackboneError::Warmup { remaining }) => {
                    println!("at step {}: not warm yet, {remaining} steps to go", t + 1)
                }
                other => anyhow::bail!("expected a warmup refusal, got {other:?}"),
            }
        }
    }
    let streamed = stream_embed(&store, &cfg, &state, std::slice::from_ref(&adjacency))?;

    let max_diff = parallel
        .iter()
        .zip(streamed.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!(
        "parallel vs streamed embedding ({} nodes × {} features): max |Δ| = {:.3e}",
        cfg.nodes, cfg.gat_out, max_diff
    );

    // Keep streaming: each extra step slides the window by one, no recompute.
    for t in cfg.window..cfg.window + 3 {
        let x_t = ArrayD::from_shape_fn(IxDyn(&[1, cfg.nodes, cfg.modalities]), |_| {
            rng.gen_range(-1.0..1.0)
        });
        stream_step(&store, &cfg, &mut state, &x_t)?;
        let e = stream_embed(&store, &cfg, &state, std::slice::from_ref(&adjacency))?;
        println!(
            "step {:>2}: window slid forward, node-0 embedding starts [{:+.4}, {:+.4}, …]",
            t + 1,
            e[[0, 0, 0]],
            e[[0, 0, 1]]
        );
    }
    Ok(())
}
