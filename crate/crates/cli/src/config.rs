//! Flat `section.key = value` configuration files.
//!
//! A config file is plain text: one assignment per line, `#` starts a
//! comment line, blank lines are ignored. Every key is optional — an empty
//! file yields the full default configuration. Sections are spelled as key
//! prefixes:
//!
//! * `model.*` — architecture hyperparameters (`feature_dim`, `graph_len`,
//!   `gru_hidden_per_dir`, `gin_hidden`, `num_gin_layers`, `fa_layer_index`,
//!   `num_classes`, `aggregator_weights`, `attention_stage_source`);
//! * `train.*` — optimizer and loop settings (`learning_rate`,
//!   `weight_decay`, `batch_size`, `max_epochs`, `early_stop_patience`,
//!   `num_stages`, `seed`, `folds`, `split_ratio`);
//! * `synth.*` — synthetic dataset parameters (`num_classes`,
//!   `utterances_per_class`, `frames_min`, `frames_max`, `feature_dim`,
//!   `base_freq`, `freq_step`, `amplitude`, `noise_level`, `num_groups`,
//!   `seed`).
//!
//! `model.aggregator_weights` takes three comma-separated values in the
//! order softmax, sum, mean; each value may be a decimal or a fraction like
//! `1/3`. `train.split_ratio` takes `train:valid:test` integers, e.g.
//! `8:1:1`. `train.num_stages` defaults to `model.num_gin_layers + 1`
//! (one loss per intermediate graph layer, plus attention, plus the sum)
//! when not set explicitly. The `synth` section is only materialized when
//! at least one `synth.*` key appears.

use std::path::Path;

use thiserror::Error;
use wmagin_core::model::{AttentionStageSource, ModelConfig};
use wmagin_core::synth::SynthSpec;
use wmagin_core::trainer::TrainConfig;
use wmagin_core::wma::AggregatorWeights;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("config: {0}")]
    Invalid(String),
    #[error("cannot read config `{path}`: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Everything a run needs: the architecture, the training loop, and an
/// optional synthetic-data recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct AppConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Present when any `synth.*` key appears in the file.
    pub synth: Option<SynthSpec>,
}

impl Default for AppConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let mut train = TrainConfig::default();
        train.num_stages = model.num_loss_stages();
        Self {
            model,
            train,
            synth: None,
        }
    }
}

/// Reads and parses a config file.
pub fn load_config(path: &Path) -> Result<AppConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config_str(&text)
}

/// Parses config text. Unknown keys and malformed values are reported with
/// the key name and the 1-based line number.
pub fn parse_config_str(text: &str) -> Result<AppConfig, ConfigError> {
    let mut model = ModelConfig::default();
    let mut train = TrainConfig::default();
    let mut synth = SynthSpec::default();
    let mut saw_synth = false;
    let mut explicit_stages: Option<usize> = None;

    for (index, raw) in text.lines().enumerate() {
        let line = index + 1;
        let stripped = raw.trim();
        if stripped.is_empty() || stripped.starts_with('#') {
            continue;
        }
        let Some((key, value)) = stripped.split_once('=') else {
            return Err(ConfigError::Line {
                line,
                message: "expected `key = value`".into(),
            });
        };
        let key = key.trim();
        let value = value.trim();
        if key.starts_with("synth.") {
            saw_synth = true;
        }
        match key {
            "model.feature_dim" => model.feature_dim = parse_scalar(key, value, line)?,
            "model.graph_len" => model.graph_len = parse_scalar(key, value, line)?,
            "model.gru_hidden_per_dir" => {
                model.gru_hidden_per_dir = parse_scalar(key, value, line)?;
            }
            "model.gin_hidden" => model.gin_hidden = parse_scalar(key, value, line)?,
            "model.num_gin_layers" => model.num_gin_layers = parse_scalar(key, value, line)?,
            "model.fa_layer_index" => model.fa_layer_index = parse_scalar(key, value, line)?,
            "model.num_classes" => model.num_classes = parse_scalar(key, value, line)?,
            "model.aggregator_weights" => {
                model.aggregator_weights = parse_weights(key, value, line)?;
            }
            "model.attention_stage_source" => {
                model.attention_stage_source = parse_stage_source(key, value, line)?;
            }
            "train.learning_rate" => train.learning_rate = parse_scalar(key, value, line)?,
            "train.weight_decay" => train.weight_decay = parse_scalar(key, value, line)?,
            "train.batch_size" => train.batch_size = parse_scalar(key, value, line)?,
            "train.max_epochs" => train.max_epochs = parse_scalar(key, value, line)?,
            "train.early_stop_patience" => {
                train.early_stop_patience = parse_scalar(key, value, line)?;
            }
            "train.num_stages" => explicit_stages = Some(parse_scalar(key, value, line)?),
            "train.seed" => train.seed = parse_scalar(key, value, line)?,
            "train.folds" => train.folds = parse_scalar(key, value, line)?,
            "train.split_ratio" => train.split_ratio = parse_ratio(key, value, line)?,
            "synth.num_classes" => synth.num_classes = parse_scalar(key, value, line)?,
            "synth.utterances_per_class" => {
                synth.utterances_per_class = parse_scalar(key, value, line)?;
            }
            "synth.frames_min" => synth.frames_range.0 = parse_scalar(key, value, line)?,
            "synth.frames_max" => synth.frames_range.1 = parse_scalar(key, value, line)?,
            "synth.feature_dim" => synth.feature_dim = parse_scalar(key, value, line)?,
            "synth.base_freq" => synth.base_freq = parse_scalar(key, value, line)?,
            "synth.freq_step" => synth.freq_step = parse_scalar(key, value, line)?,
            "synth.amplitude" => synth.amplitude = parse_scalar(key, value, line)?,
            "synth.noise_level" => synth.noise_level = parse_scalar(key, value, line)?,
            "synth.num_groups" => synth.num_groups = parse_scalar(key, value, line)?,
            "synth.seed" => synth.seed = parse_scalar(key, value, line)?,
            _ => {
                return Err(ConfigError::Line {
                    line,
                    message: format!("unknown key `{key}`"),
                });
            }
        }
    }

    train.num_stages = explicit_stages.unwrap_or_else(|| model.num_loss_stages());
    model
        .validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    train
        .validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let synth = if saw_synth {
        synth
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Some(synth)
    } else {
        None
    };
    Ok(AppConfig {
        model,
        train,
        synth,
    })
}

fn parse_scalar<T: std::str::FromStr>(
    key: &str,
    value: &str,
    line: usize,
) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Line {
        line,
        message: format!(
            "key `{key}`: cannot parse `{value}` as {}",
            std::any::type_name::<T>()
        ),
    })
}

/// A single weight: a decimal like `0.25` or a fraction like `1/4`.
fn parse_fraction(key: &str, value: &str, line: usize) -> Result<f64, ConfigError> {
    let parsed = if let Some((num, den)) = value.split_once('/') {
        let num: Result<f64, _> = num.trim().parse();
        let den: Result<f64, _> = den.trim().parse();
        match (num, den) {
            (Ok(n), Ok(d)) if d != 0.0 => Some(n / d),
            _ => None,
        }
    } else {
        value.parse().ok()
    };
    parsed.ok_or_else(|| ConfigError::Line {
        line,
        message: format!("key `{key}`: cannot parse `{value}` as a number or fraction"),
    })
}

/// Comma-separated triple in the order softmax, sum, mean.
fn parse_weights(key: &str, value: &str, line: usize) -> Result<AggregatorWeights, ConfigError> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(ConfigError::Line {
            line,
            message: format!(
                "key `{key}`: expected three comma-separated weights (softmax,sum,mean)"
            ),
        });
    }
    let softmax = parse_fraction(key, parts[0], line)?;
    let sum = parse_fraction(key, parts[1], line)?;
    let mean = parse_fraction(key, parts[2], line)?;
    Ok(AggregatorWeights::new(sum, mean, softmax))
}

/// Colon-separated `train:valid:test` integer ratio, e.g. `8:1:1`.
fn parse_ratio(key: &str, value: &str, line: usize) -> Result<(u32, u32, u32), ConfigError> {
    let parts: Vec<&str> = value.split(':').map(str::trim).collect();
    let parsed: Option<Vec<u32>> = parts.iter().map(|p| p.parse().ok()).collect();
    match parsed {
        Some(p) if p.len() == 3 => Ok((p[0], p[1], p[2])),
        _ => Err(ConfigError::Line {
            line,
            message: format!("key `{key}`: expected `train:valid:test` integers, e.g. `8:1:1`"),
        }),
    }
}

fn parse_stage_source(
    key: &str,
    value: &str,
    line: usize,
) -> Result<AttentionStageSource, ConfigError> {
    stage_source_from_name(value).ok_or_else(|| ConfigError::Line {
        line,
        message: format!("key `{key}`: expected `attention` or `last_gin_layer`"),
    })
}

/// Stable string form of the attention-source switch, shared by config
/// files and checkpoints.
pub fn stage_source_name(source: AttentionStageSource) -> &'static str {
    match source {
        AttentionStageSource::Attention => "attention",
        AttentionStageSource::LastGinLayer => "last_gin_layer",
    }
}

pub fn stage_source_from_name(value: &str) -> Option<AttentionStageSource> {
    match value {
        "attention" => Some(AttentionStageSource::Attention),
        "last_gin_layer" => Some(AttentionStageSource::LastGinLayer),
        _ => None,
    }
}
