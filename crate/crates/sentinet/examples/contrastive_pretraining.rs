//! Stage 1 in isolation: pretrain the encoder without any anomaly labels by
//! contrasting each node against subgraphs around it — the subgraph pooled
//! around a node's own neighborhood is the positive, pools around the
//! least-similar other nodes are the negatives. Validation loss picks the
//! checkpoint that later stages build on.
//!
//! ```text
//! cargo run --example contrastive_pretraining
//! ```

use sentinet::config::BackboneKnobs;
use sentinet::dataset::GraphSample;
use sentinet::pipeline::{
    align_timestamps, build_adjacency, enumerate_windows, split_dataset, zscore_normalize,
    AdjacencyRule,
};
use sentinet::pretrain::PretrainConfig;
use sentinet::synth::{generate, SynthSpec};
use sentinet::trainer::{run_stage1, TrainConfig};

fn main() -> anyhow::Result<()> {
    let spec = SynthSpec {
        steps: 640,
        seed: 11,
        ..Default::default()
    };
    let data = generate(&spec);
    let span = (0.0, (spec.steps - 1) as f64);
    let series = align_timestamps(&data.records, spec.interval, span, spec.nodes, spec.modalities)?;
    let (adjacency, _) = build_adjacency(&data.positions, AdjacencyRule::Knn(2))?;
    let samples: Vec<GraphSample> = enumerate_windows(&series, 1, 16)?
        .iter()
        .map(|w| {
            zscore_normalize(w).map(|nw| GraphSample {
                adjacency: adjacency.clone(),
                x: nw.x,
                truth: None,
                labels: None,
                origin_time: nw.origin_time,
                phase: nw.phase,
            })
        })
        .collect::<Result<_, _>>()?;
    let split = split_dataset(samples, (0.7, 0.2, 0.1))?;

    let train_cfg = TrainConfig {
        stage1_epochs: 6,
        batch_size: 8,
        learning_rate: 3e-3,
        seed: 11,
        ..Default::default()
    };
    let bb_cfg = BackboneKnobs {
        layers: 1,
        heads: 2,
        d_model: 12,
        gat_out: Some(8),
    }
    .build(spec.nodes, spec.modalities, 16);
    let pre_cfg = PretrainConfig {
        walk_len: 2,
        k_neg: 3,
        ..Default::default()
    };

    let out = tempfile::tempdir()?;
    let outcome = run_stage1(&train_cfg, &bb_cfg, &pre_cfg, &split, out.path())?;

    println!("epoch   mean train loss");
    for m in &outcome.history {
        println!("{:>5}   {:>15.6}", m.epoch, m.mean_loss);
    }
    println!(
        "\nbest epoch {} at validation loss {:.6}, last validation loss {:.6}",
        outcome.best_epoch, outcome.best_val_loss, outcome.last_val_loss
    );
    println!("artifacts: stage1_best.json, stage1_last.json, stage1_metrics.jsonl");
    let first = outcome.history.first().map(|m| m.mean_loss).unwrap_or(f64::NAN);
    let last = outcome.history.last().map(|m| m.mean_loss).unwrap_or(f64::NAN);
    println!("train loss moved {first:.4} → {last:.4} over {} epochs", outcome.history.len());
    Ok(())
}
