//! Flat `key = value` run configuration.
//!
//! One file drives every stage; keys are grouped by a dotted prefix and the
//! full key list is fixed — an unknown or duplicated key is an error with
//! its line number, never a silent ignore. `#` starts a comment, blank
//! lines are fine, and [`render_config`] writes the canonical form (every
//! key, current values) so `parse_config(render_config(c)) == c` exactly.
//!
//! | prefix      | keys                                                                  |
//! |-------------|-----------------------------------------------------------------------|
//! | `train.`    | `stage1_epochs stage2_epochs freeze_backbone_after batch_size`        |
//! |             | `learning_rate omega seed max_batches_per_epoch eval_chunk patience`  |
//! | `pretrain.` | `walk_len k_neg tau cosine`                                           |
//! | `backbone.` | `layers heads d_model gat_out`                                        |
//! | `disc.`     | `k layers lambda1 lambda2 tau buffer_capacity`                        |
//! | `inject.`   | `rate labeled_fraction magnitude seed type_mix`                       |
//!
//! `train.max_batches_per_epoch` and `train.patience` accept `none`;
//! `backbone.gat_out` accepts `auto` (match `d_model`); `inject.type_mix`
//! is five comma-separated weights.

use std::path::Path;

use thiserror::Error;

use crate::backbone::BackboneConfig;
use crate::discriminator::DiscriminatorConfig;
use crate::inject::AnomalySpec;
use crate::pretrain::PretrainConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown configuration key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key {key:?} appears twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: bad value for {key:?}: {message}")]
    Value {
        line: usize,
        key: String,
        message: String,
    },
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Encoder knobs that are independent of the dataset shape; `nodes`,
/// `modalities` and `window` come from the data at run time.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneKnobs {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    /// `None` means "match `d_model`".
    pub gat_out: Option<usize>,
}

impl Default for BackboneKnobs {
    fn default() -> Self {
        Self {
            layers: 3,
            heads: 2,
            d_model: 64,
            gat_out: None,
        }
    }
}

impl BackboneKnobs {
    /// Complete the shape against a concrete dataset.
    pub fn build(&self, nodes: usize, modalities: usize, window: usize) -> BackboneConfig {
        BackboneConfig {
            layers: self.layers,
            heads: self.heads,
            d_model: self.d_model,
            cr_value_width: self.d_model / modalities.max(1),
            modalities,
            nodes,
            window,
            gat_out: self.gat_out.unwrap_or(self.d_model),
        }
    }
}

/// Discriminator knobs minus the feature width, which the encoder decides.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscKnobs {
    pub k: usize,
    pub layers: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub buffer_capacity: usize,
}

impl Default for DiscKnobs {
    fn default() -> Self {
        let d = DiscriminatorConfig::with_dim(1);
        Self {
            k: d.k,
            layers: d.layers,
            lambda1: d.lambda1,
            lambda2: d.lambda2,
            tau: d.tau,
            buffer_capacity: d.buffer_capacity,
        }
    }
}

impl DiscKnobs {
    /// Complete against the encoder output width; `omega` rides in from the
    /// training config when stage 2 starts.
    pub fn build(&self, feature_dim: usize, omega: f64) -> DiscriminatorConfig {
        let mut cfg = DiscriminatorConfig::with_dim(feature_dim);
        cfg.k = self.k;
        cfg.layers = self.layers;
        cfg.lambda1 = self.lambda1;
        cfg.lambda2 = self.lambda2;
        cfg.tau = self.tau;
        cfg.buffer_capacity = self.buffer_capacity;
        cfg.omega = omega;
        cfg
    }
}

/// Everything a run needs, straight from one flat file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub backbone: BackboneKnobs,
    pub disc: DiscKnobs,
    pub inject: AnomalySpec,
}

fn parse_as<T: std::str::FromStr>(line: usize, key: &str, raw: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    raw.parse().map_err(|e: T::Err| ConfigError::Value {
        line,
        key: key.to_string(),
        message: e.to_string(),
    })
}

fn parse_opt(line: usize, key: &str, raw: &str) -> Result<Option<usize>, ConfigError> {
    if raw.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        parse_as(line, key, raw).map(Some)
    }
}

/// Parse the flat format. Later lines never override earlier ones —
/// duplicates are refused instead.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    let mut seen = std::collections::BTreeSet::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw_line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((key, value)) = body.split_once('=') else {
            return Err(ConfigError::Syntax {
                line,
                text: raw_line.trim().to_string(),
            });
        };
        let key = key.trim();
        let value = value.trim();
        if !seen.insert(key.to_string()) {
            return Err(ConfigError::Duplicate {
                line,
                key: key.to_string(),
            });
        }
        match key {
            "train.stage1_epochs" => cfg.train.stage1_epochs = parse_as(line, key, value)?,
            "train.stage2_epochs" => cfg.train.stage2_epochs = parse_as(line, key, value)?,
            "train.freeze_backbone_after" => {
                cfg.train.freeze_backbone_after = parse_as(line, key, value)?
            }
            "train.batch_size" => cfg.train.batch_size = parse_as(line, key, value)?,
            "train.learning_rate" => cfg.train.learning_rate = parse_as(line, key, value)?,
            "train.omega" => cfg.train.omega = parse_as(line, key, value)?,
            "train.seed" => cfg.train.seed = parse_as(line, key, value)?,
            "train.max_batches_per_epoch" => {
                cfg.train.max_batches_per_epoch = parse_opt(line, key, value)?
            }
            "train.eval_chunk" => cfg.train.eval_chunk = parse_as(line, key, value)?,
            "train.patience" => cfg.train.patience = parse_opt(line, key, value)?,
            "pretrain.walk_len" => cfg.pretrain.walk_len = parse_as(line, key, value)?,
            "pretrain.k_neg" => cfg.pretrain.k_neg = parse_as(line, key, value)?,
            "pretrain.tau" => cfg.pretrain.tau = parse_as(line, key, value)?,
            "pretrain.cosine" => cfg.pretrain.cosine = parse_as(line, key, value)?,
            "backbone.layers" => cfg.backbone.layers = parse_as(line, key, value)?,
            "backbone.heads" => cfg.backbone.heads = parse_as(line, key, value)?,
            "backbone.d_model" => cfg.backbone.d_model = parse_as(line, key, value)?,
            "backbone.gat_out" => {
                cfg.backbone.gat_out = if value.eq_ignore_ascii_case("auto") {
                    None
                } else {
                    Some(parse_as(line, key, value)?)
                }
            }
            "disc.k" => cfg.disc.k = parse_as(line, key, value)?,
            "disc.layers" => cfg.disc.layers = parse_as(line, key, value)?,
            "disc.lambda1" => cfg.disc.lambda1 = parse_as(line, key, value)?,
            "disc.lambda2" => cfg.disc.lambda2 = parse_as(line, key, value)?,
            "disc.tau" => cfg.disc.tau = parse_as(line, key, value)?,
            "disc.buffer_capacity" => cfg.disc.buffer_capacity = parse_as(line, key, value)?,
            "inject.rate" => cfg.inject.injection_rate = parse_as(line, key, value)?,
            "inject.labeled_fraction" => {
                cfg.inject.labeled_fraction = parse_as(line, key, value)?
            }
            "inject.magnitude" => cfg.inject.magnitude = parse_as(line, key, value)?,
            "inject.seed" => cfg.inject.rng_seed = parse_as(line, key, value)?,
            "inject.type_mix" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != cfg.inject.type_mix.len() {
                    return Err(ConfigError::Value {
                        line,
                        key: key.to_string(),
                        message: format!(
                            "expected {} comma-separated weights, got {}",
                            cfg.inject.type_mix.len(),
                            parts.len()
                        ),
                    });
                }
                for (slot, part) in cfg.inject.type_mix.iter_mut().zip(parts) {
                    *slot = parse_as(line, key, part)?;
                }
            }
            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
        }
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    parse_config(&std::fs::read_to_string(path)?)
}

fn opt_str(v: Option<usize>, none_word: &str) -> String {
    v.map_or_else(|| none_word.to_string(), |x| x.to_string())
}

/// Canonical listing: every key once, grouped, with the given values.
pub fn render_config(cfg: &RunConfig) -> String {
    let mix = cfg
        .inject
        .type_mix
        .iter()
        .map(|w| w.to_string())
        .collect::<Vec<_>>()
        .join(",");
    format!(
        "# training schedule\n\
         train.stage1_epochs = {}\n\
         train.stage2_epochs = {}\n\
         train.freeze_backbone_after = {}\n\
         train.batch_size = {}\n\
         train.learning_rate = {}\n\
         train.omega = {}\n\
         train.seed = {}\n\
         train.max_batches_per_epoch = {}\n\
         train.eval_chunk = {}\n\
         train.patience = {}\n\
         \n\
         # contrastive pretraining\n\
         pretrain.walk_len = {}\n\
         pretrain.k_neg = {}\n\
         pretrain.tau = {}\n\
         pretrain.cosine = {}\n\
         \n\
         # encoder\n\
         backbone.layers = {}\n\
         backbone.heads = {}\n\
         backbone.d_model = {}\n\
         backbone.gat_out = {}\n\
         \n\
         # few-shot discriminator\n\
         disc.k = {}\n\
         disc.layers = {}\n\
         disc.lambda1 = {}\n\
         disc.lambda2 = {}\n\
         disc.tau = {}\n\
         disc.buffer_capacity = {}\n\
         \n\
         # anomaly injection\n\
         inject.rate = {}\n\
         inject.labeled_fraction = {}\n\
         inject.magnitude = {}\n\
         inject.seed = {}\n\
         inject.type_mix = {}\n",
        cfg.train.stage1_epochs,
        cfg.train.stage2_epochs,
        cfg.train.freeze_backbone_after,
        cfg.train.batch_size,
        cfg.train.learning_rate,
        cfg.train.omega,
        cfg.train.seed,
        opt_str(cfg.train.max_batches_per_epoch, "none"),
        cfg.train.eval_chunk,
        opt_str(cfg.train.patience, "none"),
        cfg.pretrain.walk_len,
        cfg.pretrain.k_neg,
        cfg.pretrain.tau,
        cfg.pretrain.cosine,
        cfg.backbone.layers,
        cfg.backbone.heads,
        cfg.backbone.d_model,
        cfg.backbone.gat_out.map_or_else(|| "auto".to_string(), |x| x.to_string()),
        cfg.disc.k,
        cfg.disc.layers,
        cfg.disc.lambda1,
        cfg.disc.lambda2,
        cfg.disc.tau,
        cfg.disc.buffer_capacity,
        cfg.inject.injection_rate,
        cfg.inject.labeled_fraction,
        cfg.inject.magnitude,
        cfg.inject.rng_seed,
        mix,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_form_round_trips_exactly() {
        let cfg = RunConfig::default();
        let text = render_config(&cfg);
        assert_eq!(parse_config(&text).unwrap(), cfg);

        // A non-default config round-trips too.
        let mut cfg = RunConfig::default();
        cfg.train.omega = 0.6;
        cfg.train.patience = Some(7);
        cfg.backbone.gat_out = Some(32);
        cfg.inject.type_mix = [0.5, 0.5, 0.0, 0.0, 0.0];
        assert_eq!(parse_config(&render_config(&cfg)).unwrap(), cfg);
    }

    #[test]
    fn overrides_comments_and_whitespace() {
        let text = "\n\
            # schedule\n\
            train.stage1_epochs = 30   # short run\n\
            \n\
            backbone.d_model=16\n\
            train.patience = NONE\n\
            inject.type_mix = 1, 0, 0, 0 ,0\n";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.train.stage1_epochs, 30);
        assert_eq!(cfg.backbone.d_model, 16);
        assert_eq!(cfg.train.patience, None);
        assert_eq!(cfg.inject.type_mix, [1.0, 0.0, 0.0, 0.0, 0.0]);
        // Untouched keys keep their defaults.
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn bad_input_is_named_with_line_numbers() {
        match parse_config("train.stage1_epochs = 5\nnot a line\n") {
            Err(ConfigError::Syntax { line: 2, text }) => assert_eq!(text, "not a line"),
            other => panic!("expected syntax error, got {other:?}"),
        }
        match parse_config("train.typo = 1\n") {
            Err(ConfigError::UnknownKey { line: 1, key }) => assert_eq!(key, "train.typo"),
            other => panic!("expected unknown key, got {other:?}"),
        }
        match parse_config("disc.k = 2\ndisc.k = 3\n") {
            Err(ConfigError::Duplicate { line: 2, key }) => assert_eq!(key, "disc.k"),
            other => panic!("expected duplicate error, got {other:?}"),
        }
        match parse_config("train.batch_size = sixteen\n") {
            Err(ConfigError::Value { line: 1, key, .. }) => assert_eq!(key, "train.batch_size"),
            other => panic!("expected value error, got {other:?}"),
        }
        match parse_config("inject.type_mix = 1,0\n") {
            Err(ConfigError::Value { key, message, .. }) => {
                assert_eq!(key, "inject.type_mix");
                assert!(message.contains("5"), "{message}");
            }
            other => panic!("expected mix arity error, got {other:?}"),
        }
    }

    #[test]
    fn knobs_complete_against_dataset_shape() {
        let mut knobs = BackboneKnobs::default();
        knobs.d_model = 12;
        knobs.layers = 2;
        let bb = knobs.build(8, 3, 32);
        assert_eq!((bb.nodes, bb.modalities, bb.window), (8, 3, 32));
        assert_eq!(bb.cr_value_width * bb.modalities, bb.d_model);
        assert_eq!(bb.gat_out, 12);
        bb.validate().unwrap();

        let disc = DiscKnobs::default().build(12, 0.55);
        assert_eq!(disc.feature_dim, 12);
        assert_eq!(disc.omega, 0.55);
        assert_eq!(disc.k, 5);
    }
}
