//! Model checkpoints as JSON.
//!
//! A checkpoint is a single JSON document holding a format version, the
//! full architecture description, and every parameter tensor by name. The
//! architecture section makes a checkpoint self-contained: `eval` needs no
//! config file. Floats are serialized with shortest round-trip precision,
//! so saving the same parameters twice produces byte-identical files and a
//! load restores values bit-for-bit.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use wmagin_core::model::{ModelConfig, ModelParams};
use wmagin_core::wma::AggregatorWeights;

use crate::atomic::write_atomic;
use crate::config::{stage_source_from_name, stage_source_name};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("unsupported checkpoint format version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint: unknown attention_stage_source `{value}`")]
    BadStageSource { value: String },
    #[error("checkpoint: {0}")]
    Invalid(String),
    #[error("checkpoint is missing tensor `{name}`")]
    MissingTensor { name: String },
    #[error("checkpoint has no tensor named `{name}` in this architecture")]
    UnknownTensor { name: String },
    #[error("checkpoint tensor `{name}` repeats")]
    DuplicateTensor { name: String },
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor `{name}` carries {found} values, expected {expected}")]
    DataLength {
        name: String,
        expected: usize,
        found: usize,
    },
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    model: ModelSection,
    params: Vec<TensorRecord>,
}

#[derive(Serialize, Deserialize)]
struct ModelSection {
    feature_dim: usize,
    graph_len: usize,
    gru_hidden_per_dir: usize,
    gin_hidden: usize,
    num_gin_layers: usize,
    fa_layer_index: usize,
    num_classes: usize,
    /// In config order: softmax, sum, mean.
    aggregator_weights: [f64; 3],
    attention_stage_source: String,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Writes `params` and the architecture that shapes them. Atomic.
pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<(), CheckpointError> {
    let display = path.display().to_string();
    let w = &config.aggregator_weights;
    let file = CheckpointFile {
        format_version: FORMAT_VERSION,
        model: ModelSection {
            feature_dim: config.feature_dim,
            graph_len: config.graph_len,
            gru_hidden_per_dir: config.gru_hidden_per_dir,
            gin_hidden: config.gin_hidden,
            num_gin_layers: config.num_gin_layers,
            fa_layer_index: config.fa_layer_index,
            num_classes: config.num_classes,
            aggregator_weights: [w.gamma, w.alpha, w.beta],
            attention_stage_source: stage_source_name(config.attention_stage_source).to_string(),
        },
        params: params
            .named_tensors()
            .into_iter()
            .map(|(name, tensor)| TensorRecord {
                name,
                shape: tensor.shape().to_vec(),
                data: tensor.data().to_vec(),
            })
            .collect(),
    };
    let mut text = serde_json::to_string(&file).map_err(|source| CheckpointError::Json {
        path: display.clone(),
        source,
    })?;
    text.push('\n');
    write_atomic(path, text.as_bytes()).map_err(|source| CheckpointError::Io {
        path: display,
        source,
    })
}

/// Reads a checkpoint back. Every tensor of the described architecture must
/// be present exactly once with its exact shape; extras, repeats, and
/// omissions are errors rather than silent drift.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, ModelConfig), CheckpointError> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
        path: display.clone(),
        source,
    })?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|source| CheckpointError::Json {
            path: display,
            source,
        })?;
    if file.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: file.format_version,
        });
    }

    let m = &file.model;
    let [softmax, sum, mean] = m.aggregator_weights;
    let config = ModelConfig {
        feature_dim: m.feature_dim,
        graph_len: m.graph_len,
        gru_hidden_per_dir: m.gru_hidden_per_dir,
        gin_hidden: m.gin_hidden,
        num_gin_layers: m.num_gin_layers,
        fa_layer_index: m.fa_layer_index,
        num_classes: m.num_classes,
        aggregator_weights: AggregatorWeights::new(sum, mean, softmax),
        attention_stage_source: stage_source_from_name(&m.attention_stage_source).ok_or_else(
            || CheckpointError::BadStageSource {
                value: m.attention_stage_source.clone(),
            },
        )?,
    };
    config
        .validate()
        .map_err(|e| CheckpointError::Invalid(e.to_string()))?;

    let mut records: HashMap<String, TensorRecord> = HashMap::with_capacity(file.params.len());
    for record in file.params {
        let name = record.name.clone();
        if records.insert(name.clone(), record).is_some() {
            return Err(CheckpointError::DuplicateTensor { name });
        }
    }

    // Build a skeleton with the right tensor set, then overwrite every
    // element; the throwaway seed never survives into the result.
    let mut params = ModelParams::init(&config, &mut ChaCha12Rng::seed_from_u64(0))
        .map_err(|e| CheckpointError::Invalid(e.to_string()))?;
    for (name, tensor) in params.named_tensors_mut() {
        let record = records
            .remove(&name)
            .ok_or_else(|| CheckpointError::MissingTensor { name: name.clone() })?;
        if record.shape != tensor.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: tensor.shape().to_vec(),
                found: record.shape,
            });
        }
        if record.data.len() != tensor.numel() {
            return Err(CheckpointError::DataLength {
                name,
                expected: tensor.numel(),
                found: record.data.len(),
            });
        }
        tensor.data_mut().copy_from_slice(&record.data);
    }
    if let Some(name) = records.into_keys().next() {
        return Err(CheckpointError::UnknownTensor { name });
    }
    Ok((params, config))
}
