//! Central-difference verification of the reverse-mode gradients through
//! the entire model: every parameter element is perturbed both ways and the
//! numerical slope compared against the recorded gradient.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::graph::{segment_utterance, FrameGraph, UtteranceFeatures};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;
use crate::trainer::{batch_backward, batch_loss, TrainError};

/// Outcome of a full-model gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(1, |numeric|)` seen.
    pub max_rel_err: f64,
    /// Parameter element with the largest error, e.g. `gin.0.mlp_weight[12]`.
    pub worst_param: String,
    pub params_checked: usize,
    pub elements_checked: usize,
}

/// A deliberately small configuration plus a two-graph batch (one full
/// window, one zero-padded window) that exercises the GRU, both adjacency
/// kinds, attention masking, and every head — small enough to difference
/// every parameter in seconds.
pub fn tiny_check_setup(seed: u64) -> (ModelConfig, Vec<FrameGraph>) {
    let config = ModelConfig {
        feature_dim: 3,
        graph_len: 6,
        gru_hidden_per_dir: 4,
        gin_hidden: 8,
        num_gin_layers: 2,
        fa_layer_index: 2,
        num_classes: 4,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut graphs = Vec::new();
    for (frames, label) in [(6usize, 1usize), (4, 3)] {
        let data: Vec<f64> = (0..frames * config.feature_dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let utterance = UtteranceFeatures::new(
            format!("check-{frames}"),
            String::from("check"),
            label,
            Tensor::from_vec(vec![frames, config.feature_dim], data).expect("frame matrix"),
        )
        .expect("non-empty check utterance");
        graphs.extend(segment_utterance(&utterance, config.graph_len).expect("segmentation"));
    }
    (config, graphs)
}

fn write_element(params: &mut ModelParams, slot: usize, index: usize, value: f64) {
    params.named_tensors_mut()[slot].1.data_mut()[index] = value;
}

/// Initializes a model from `seed`, records analytic gradients of the
/// multi-stage loss over `graphs`, then central-differences every parameter
/// element with the given `step` and reports the worst relative deviation.
pub fn check_model_gradients(
    config: &ModelConfig,
    graphs: &[FrameGraph],
    step: f64,
    seed: u64,
) -> Result<GradCheckReport, TrainError> {
    if graphs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(TrainError::Config("difference step must be positive"));
    }
    let refs: Vec<&FrameGraph> = graphs.iter().collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut params = ModelParams::init(config, &mut rng)?;
    batch_backward(&refs, &mut params, config)?;
    let analytic: Vec<(String, Vec<f64>)> = params
        .named_tensors()
        .iter()
        .map(|(name, t)| {
            let grad = t
                .grad()
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            (name.clone(), grad)
        })
        .collect();

    let mut max_rel_err = 0.0;
    let mut worst_param = String::new();
    let mut elements_checked = 0;
    for (slot, (name, grads)) in analytic.iter().enumerate() {
        for index in 0..grads.len() {
            let original = params.named_tensors()[slot].1.data()[index];
            write_element(&mut params, slot, index, original + step);
            let plus = batch_loss(&refs, &params, config)?;
            write_element(&mut params, slot, index, original - step);
            let minus = batch_loss(&refs, &params, config)?;
            write_element(&mut params, slot, index, original);
            let numeric = (plus - minus) / (2.0 * step);
            let rel = (grads[index] - numeric).abs() / numeric.abs().max(1.0);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst_param = format!("{name}[{index}]");
            }
            elements_checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst_param,
        params_checked: analytic.len(),
        elements_checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let (config, graphs) = tiny_check_setup(0);
        assert_eq!(graphs.len(), 2);
        assert!(graphs[0].mask.iter().all(|&m| m));
        assert!(graphs[1].mask.iter().any(|&m| !m), "second graph is padded");
        let report = check_model_gradients(&config, &graphs, 1e-5, 0).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let params = ModelParams::init(&config, &mut rng).unwrap();
        assert_eq!(report.elements_checked, params.num_params());
        assert!(
            report.max_rel_err < 1e-4,
            "max relative error {} at {}",
            report.max_rel_err,
            report.worst_param
        );
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let (config, graphs) = tiny_check_setup(1);
        assert!(check_model_gradients(&config, &[], 1e-5, 1).is_err());
        assert!(check_model_gradients(&config, &graphs, 0.0, 1).is_err());
        assert!(check_model_gradients(&config, &graphs, f64::INFINITY, 1).is_err());
    }
}
