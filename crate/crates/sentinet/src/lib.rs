//! Spatiotemporal anomaly detection for multi-node, multi-modal sensor
//! streams.
//!
//! The pipeline: per-node multi-scale retention encodes each modality over
//! time, cross-modal retention mixes modalities, graph attention fuses
//! neighboring nodes, a contrastive stage pretrains the encoder without
//! labels, and a few-shot dual-graph discriminator classifies windows with
//! only a handful of labeled examples.
//!
//! Start with the runnable examples (`cargo run --release --example <name>`);
//! each one demonstrates a single capability end to end.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod cross;
pub mod dataset;
pub mod detect;
pub mod discriminator;
pub mod flops;
pub mod inject;
pub mod pipeline;
pub mod pretrain;
pub mod retention;
pub mod seeds;
pub mod synth;
pub mod tensor;
pub mod trainer;
