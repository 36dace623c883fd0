//! How much the stage-2 contrast term matters: train the discriminator at
//! several contrast weights ω from the same pretrained encoder and compare
//! test F1. Cells of the (ω, seed) grid run concurrently; each writes its
//! own metrics directory.
//!
//! ```text
//! cargo run --release --example contrast_weight_sweep
//! ```

use sentinet::config::{BackboneKnobs, DiscKnobs};
use sentinet::dataset::GraphSample;
use sentinet::inject::{inject_anomalies, AnomalySpec};
use sentinet::pipeline::{
    align_timestamps, build_adjacency, enumerate_windows, split_dataset, zscore_normalize,
    AdjacencyRule,
};
use sentinet::pretrain::PretrainConfig;
use sentinet::synth::{generate, SynthSpec};
use sentinet::trainer::{omega_sweep, run_stage1, TrainConfig};

fn main() -> anyhow::Result<()> {
    let spec = SynthSpec {
        steps: 1280,
        seed: 4,
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
    let mut split = split_dataset(samples, (0.7, 0.2, 0.1))?;
    inject_anomalies(
        &mut split,
        &AnomalySpec {
            injection_rate: 0.10,
            labeled_fraction: 0.12,
            rng_seed: 4,
            ..Default::default()
        },
    )?;

    let cfg = TrainConfig {
        stage1_epochs: 3,
        stage2_epochs: 4,
        freeze_backbone_after: 2,
        batch_size: 8,
        learning_rate: 3e-3,
        seed: 4,
        ..Default::default()
    };
    let bb_cfg = BackboneKnobs {
        layers: 1,
        heads: 2,
        d_model: 12,
        gat_out: Some(8),
    }
    .build(spec.nodes, spec.modalities, 16);
    let disc_cfg = DiscKnobs { k: 4, layers: 2, ..Default::default() }.build(bb_cfg.gat_out, cfg.omega);
    let pre_cfg = PretrainConfig { walk_len: 2, k_neg: 3, ..Default::default() };

    let dir = tempfile::tempdir()?;
    let s1 = run_stage1(&cfg, &bb_cfg, &pre_cfg, &split, dir.path())?;
    println!("shared stage-1 checkpoint: validation loss {:.4}\n", s1.best_val_loss);

    let omegas = [0.0, 0.4, 0.8];
    let seeds = [4, 5];
    let rows = omega_sweep(
        &cfg, &bb_cfg, &disc_cfg, &split, &s1.best_path, &omegas, &seeds, dir.path(),
    )?;

    println!("{:>6}  {:>8}  {:>8}  per-seed", "omega", "mean F1", "spread");
    for row in &rows {
        let per_seed: Vec<String> =
            row.per_seed.iter().map(|(s, f)| format!("s{s}={f:.3}")).collect();
        println!(
            "{:>6.2}  {:>8.4}  {:>8.4}  {}",
            row.omega,
            row.mean_f1,
            row.spread,
            per_seed.join("  ")
        );
    }
    println!("\n(each cell runs stage 2 from the same checkpoint; a serious comparison");
    println!(" wants more epochs and seeds — see the acceptance benchmark for one)");
    Ok(())
}
