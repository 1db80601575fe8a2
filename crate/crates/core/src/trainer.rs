//! Training and evaluation: the depth-weighted multi-stage loss, Adam,
//! mini-batch iteration with early stopping, accuracy metrics, and the
//! utterance-level data splits (single 8:1:1 split and group-exclusive
//! k-fold cross-validation).

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::fmath;
use crate::graph::{segment_utterance, FrameGraph, GraphError, UtteranceFeatures};
use crate::model::{
    model_forward, model_forward_traced, ModelBindings, ModelConfig, ModelError, ModelParams,
};
use crate::tensor::{Tape, TensorError, ValueId};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid training configuration: {0}")]
    Config(&'static str),
    #[error("model produces {model} stage losses but the trainer is configured for {expected}")]
    StageCount { model: usize, expected: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("split leaves the {which} set empty")]
    EmptySplit { which: &'static str },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{groups} group(s) cannot fill {folds} folds")]
    TooFewGroups { groups: usize, folds: usize },
    #[error("optimizer state does not match the model parameters")]
    OptimizerState,
    #[error("split index {index} out of range for {len} utterances")]
    SplitIndex { index: usize, len: usize },
}

/// Optimization and evaluation hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// L2 coefficient added to the raw gradient before the Adam moments
    /// (classic coupled weight decay).
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Consecutive epochs without a validation-WA improvement before
    /// training stops. Zero stops after the first epoch.
    pub early_stop_patience: usize,
    /// Expected number of stage losses; must match what the model emits
    /// (one per intermediate graph layer, plus attention, plus the sum).
    pub num_stages: usize,
    pub seed: u64,
    pub folds: usize,
    pub split_ratio: (u32, u32, u32),
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-8,
            batch_size: 128,
            max_epochs: 200,
            early_stop_patience: 20,
            num_stages: 5,
            seed: 0,
            folds: 5,
            split_ratio: (8, 1, 1),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning_rate must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::Config("weight_decay must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(TrainError::Config("max_epochs must be positive"));
        }
        if self.num_stages == 0 {
            return Err(TrainError::Config("num_stages must be positive"));
        }
        if self.folds == 0 {
            return Err(TrainError::Config("folds must be positive"));
        }
        let (a, b, c) = self.split_ratio;
        if a == 0 || b == 0 || c == 0 {
            return Err(TrainError::Config("split ratio parts must be positive"));
        }
        Ok(())
    }
}

// ── Multi-stage loss ────────────────────────────────────────────────────────

/// Depth-proportional stage weights `i / Σ i`, summing to one.
pub fn stage_weights(count: usize) -> Vec<f64> {
    let denom = (count * (count + 1) / 2) as f64;
    (1..=count).map(|i| i as f64 / denom).collect()
}

/// Folds per-stage cross-entropy values into `Σ i·CE_i / Σ i`, weighting
/// deeper stages more. A single final division keeps the arithmetic exact
/// in the obvious cases.
pub fn combine_stage_losses(tape: &mut Tape, ces: &[ValueId]) -> Result<ValueId, TrainError> {
    if ces.is_empty() {
        return Err(TrainError::Config("need at least one stage loss"));
    }
    let mut acc = ces[0];
    for (i, &ce) in ces.iter().enumerate().skip(1) {
        let weighted = tape.scale(ce, (i + 1) as f64)?;
        acc = tape.add(acc, weighted)?;
    }
    let denom = (ces.len() * (ces.len() + 1) / 2) as f64;
    Ok(tape.div_scalar(acc, denom)?)
}

/// Builds every stage's cross-entropy for a batch of traced forwards and
/// combines them. Returns the per-stage CE handles and the total.
fn batch_stage_losses(
    tape: &mut Tape,
    graphs: &[&FrameGraph],
    bindings: &ModelBindings,
    model_config: &ModelConfig,
) -> Result<(Vec<ValueId>, ValueId), TrainError> {
    let stages = model_config.num_loss_stages();
    let mut stage_rows: Vec<Vec<ValueId>> = vec![Vec::with_capacity(graphs.len()); stages];
    let mut labels = Vec::with_capacity(graphs.len());
    for graph in graphs {
        let traced = model_forward_traced(tape, graph, bindings, model_config)?;
        let mut slot = 0;
        for &gin in &traced.gin {
            stage_rows[slot].push(gin);
            slot += 1;
        }
        stage_rows[slot].push(traced.attention);
        stage_rows[slot + 1].push(traced.summed);
        labels.push(graph.label);
    }
    let mut ces = Vec::with_capacity(stages);
    for rows in &stage_rows {
        let stacked = tape.stack_rows(rows)?;
        ces.push(tape.cross_entropy_logits(stacked, &labels)?);
    }
    let total = combine_stage_losses(tape, &ces)?;
    Ok((ces, total))
}

/// Multi-stage loss of one batch under the given parameters, leaving
/// gradients and optimizer state untouched.
pub fn batch_loss(
    graphs: &[&FrameGraph],
    params: &ModelParams,
    model_config: &ModelConfig,
) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let bindings = ModelBindings::bind(&mut tape, params);
    let (_, total) = batch_stage_losses(&mut tape, graphs, &bindings, model_config)?;
    Ok(tape.data(total)[0])
}

/// Forward and backward over one batch: accumulates fresh gradients into
/// `params` (after zeroing) and returns the per-stage and total loss values.
pub fn batch_backward(
    graphs: &[&FrameGraph],
    params: &mut ModelParams,
    model_config: &ModelConfig,
) -> Result<(Vec<f64>, f64), TrainError> {
    params.zero_grad();
    let mut tape = Tape::new();
    let bindings = ModelBindings::bind(&mut tape, params);
    let (ces, total) = batch_stage_losses(&mut tape, graphs, &bindings, model_config)?;
    tape.backward(total)?;
    let stage_values: Vec<f64> = ces.iter().map(|&id| tape.data(id)[0]).collect();
    let total_value = tape.data(total)[0];
    for ((_, tensor), &id) in params.named_tensors_mut().into_iter().zip(&bindings.flat) {
        if let Some(grad) = tape.grad(id) {
            tensor.accumulate_grad(grad);
        }
    }
    Ok((stage_values, total_value))
}

// ── Adam ────────────────────────────────────────────────────────────────────

/// First/second moment buffers, one pair per parameter tensor in
/// [`ModelParams::named_tensors`] order.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let sizes: Vec<usize> = params.named_tensors().iter().map(|(_, t)| t.numel()).collect();
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update (β1 0.9, β2 0.999, ε 1e-8, bias-corrected) from the
/// gradients currently stored on `params`. Weight decay enters the gradient
/// (`g + wd·θ`) before the moment updates; a tensor with no gradient buffer
/// is treated as having zero gradient, so only decay moves it.
pub fn adam_step(
    params: &mut ModelParams,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    let mut named = params.named_tensors_mut();
    if named.len() != state.m.len() {
        return Err(TrainError::OptimizerState);
    }
    state.t += 1;
    let bc1 = 1.0 - fmath::pow(BETA1, state.t as f64);
    let bc2 = 1.0 - fmath::pow(BETA2, state.t as f64);
    for (slot, (_, tensor)) in named.iter_mut().enumerate() {
        let (data, grad) = tensor.data_and_grad_mut();
        let m = &mut state.m[slot];
        let v = &mut state.v[slot];
        if m.len() != data.len() {
            return Err(TrainError::OptimizerState);
        }
        for j in 0..data.len() {
            let g = grad.map_or(0.0, |g| g[j]) + config.weight_decay * data[j];
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * g;
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] -= config.learning_rate * m_hat / (fmath::sqrt(v_hat) + ADAM_EPS);
        }
    }
    Ok(())
}

// ── Metrics ─────────────────────────────────────────────────────────────────

/// Confusion-matrix summary. `wa` is the overall fraction correct; `ua`
/// averages per-class recalls with equal class weight.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// `confusion[true_label][predicted]` counts.
    pub confusion: Vec<Vec<u64>>,
    pub wa: f64,
    pub ua: f64,
    pub per_class_recall: Vec<f64>,
}

impl EvalReport {
    /// Derives the metrics from a square count matrix. A class with no
    /// observations contributes a recall of zero to the macro average.
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self, TrainError> {
        let classes = confusion.len();
        if classes == 0 {
            return Err(TrainError::EmptyDataset);
        }
        if confusion.iter().any(|row| row.len() != classes) {
            return Err(TrainError::Config("confusion matrix must be square"));
        }
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(TrainError::EmptyDataset);
        }
        let correct: u64 = (0..classes).map(|i| confusion[i][i]).sum();
        let wa = correct as f64 / total as f64;
        let per_class_recall: Vec<f64> = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let support: u64 = row.iter().sum();
                if support == 0 {
                    0.0
                } else {
                    row[i] as f64 / support as f64
                }
            })
            .collect();
        let ua = per_class_recall.iter().sum::<f64>() / classes as f64;
        Ok(Self {
            confusion,
            wa,
            ua,
            per_class_recall,
        })
    }
}

/// Index of the largest logit, first on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Runs the model over every graph and scores the summed-logit argmax
/// against the labels.
pub fn evaluate(
    graphs: &[FrameGraph],
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<EvalReport, TrainError> {
    if graphs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let classes = config.num_classes;
    let mut confusion = vec![vec![0u64; classes]; classes];
    for graph in graphs {
        if graph.label >= classes {
            return Err(TrainError::LabelOutOfRange {
                label: graph.label,
                classes,
            });
        }
        let logits = model_forward(graph, params, config)?;
        confusion[graph.label][argmax(&logits.summed)] += 1;
    }
    EvalReport::from_confusion(confusion)
}

// ── Splits ──────────────────────────────────────────────────────────────────

/// Index lists over a dataset of utterances. Splitting at the utterance
/// level keeps all segments of one utterance on the same side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Segments the selected utterances into frame graphs, in index order.
pub fn segment_split(
    dataset: &[UtteranceFeatures],
    indices: &[usize],
    graph_len: usize,
) -> Result<Vec<FrameGraph>, TrainError> {
    let mut graphs = Vec::new();
    for &index in indices {
        let utterance = dataset.get(index).ok_or(TrainError::SplitIndex {
            index,
            len: dataset.len(),
        })?;
        graphs.extend(segment_utterance(utterance, graph_len)?);
    }
    Ok(graphs)
}

/// Shuffles the utterances once and cuts train/valid/test by the ratio
/// (floor for train and valid, remainder to test).
pub fn single_split(
    dataset: &[UtteranceFeatures],
    ratio: (u32, u32, u32),
    seed: u64,
) -> Result<FoldSplit, TrainError> {
    let n = dataset.len();
    if n == 0 {
        return Err(TrainError::EmptyDataset);
    }
    let (a, b, c) = ratio;
    if a == 0 || b == 0 || c == 0 {
        return Err(TrainError::Config("split ratio parts must be positive"));
    }
    let total = (a + b + c) as usize;
    let n_train = n * a as usize / total;
    let n_valid = n * b as usize / total;
    let n_test = n - n_train - n_valid;
    if n_train == 0 {
        return Err(TrainError::EmptySplit { which: "train" });
    }
    if n_valid == 0 {
        return Err(TrainError::EmptySplit { which: "valid" });
    }
    if n_test == 0 {
        return Err(TrainError::EmptySplit { which: "test" });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    Ok(FoldSplit {
        train: order[..n_train].to_vec(),
        valid: order[n_train..n_train + n_valid].to_vec(),
        test: order[n_train + n_valid..].to_vec(),
    })
}

/// Group-exclusive folds: distinct group ids are sorted, cut into `folds`
/// contiguous chunks, and fold `f` tests on chunk `f`, validates on chunk
/// `f+1` (cyclically), and trains on the rest. No group ever appears on
/// two sides of the same fold.
pub fn group_folds(
    dataset: &[UtteranceFeatures],
    folds: usize,
) -> Result<Vec<FoldSplit>, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if folds < 3 {
        return Err(TrainError::Config(
            "group folds need at least 3 folds so every fold keeps train, valid and test groups",
        ));
    }
    let groups: Vec<String> = dataset
        .iter()
        .map(|u| u.group_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if groups.len() < folds {
        return Err(TrainError::TooFewGroups {
            groups: groups.len(),
            folds,
        });
    }
    let chunk_of = |group: &str| -> usize {
        let rank = groups.binary_search_by(|g| g.as_str().cmp(group)).unwrap();
        // Contiguous balanced chunks: chunk f covers ranks
        // [f·G/folds, (f+1)·G/folds).
        (0..folds)
            .position(|f| rank < (f + 1) * groups.len() / folds)
            .unwrap()
    };
    let mut splits = Vec::with_capacity(folds);
    for fold in 0..folds {
        let valid_chunk = (fold + 1) % folds;
        let mut split = FoldSplit {
            train: Vec::new(),
            valid: Vec::new(),
            test: Vec::new(),
        };
        for (index, utterance) in dataset.iter().enumerate() {
            let chunk = chunk_of(&utterance.group_id);
            if chunk == fold {
                split.test.push(index);
            } else if chunk == valid_chunk {
                split.valid.push(index);
            } else {
                split.train.push(index);
            }
        }
        splits.push(split);
    }
    Ok(splits)
}

// ── Training loop ───────────────────────────────────────────────────────────

/// One epoch's worth of telemetry.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-stage cross-entropy over the epoch's batches.
    pub stage_losses: Vec<f64>,
    pub total_loss: f64,
    pub valid_wa: f64,
    pub valid_ua: f64,
}

/// Result of a training run: the best-validation parameters and the full
/// epoch log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub best_epoch: usize,
    pub best_valid_wa: f64,
    pub log: Vec<EpochRecord>,
}

pub fn train(
    dataset: &[UtteranceFeatures],
    split: &FoldSplit,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_with_observer(dataset, split, model_config, train_config, |_| {})
}

/// Full training loop. All randomness (parameter init, epoch shuffles)
/// flows from one generator seeded with `train_config.seed`, so equal
/// inputs give bit-identical outcomes. The observer sees each epoch record
/// as it is produced.
pub fn train_with_observer<F: FnMut(&EpochRecord)>(
    dataset: &[UtteranceFeatures],
    split: &FoldSplit,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    mut observer: F,
) -> Result<TrainOutcome, TrainError> {
    model_config.validate()?;
    train_config.validate()?;
    if model_config.num_loss_stages() != train_config.num_stages {
        return Err(TrainError::StageCount {
            model: model_config.num_loss_stages(),
            expected: train_config.num_stages,
        });
    }
    let train_graphs = segment_split(dataset, &split.train, model_config.graph_len)?;
    if train_graphs.is_empty() {
        return Err(TrainError::EmptySplit { which: "train" });
    }
    let valid_graphs = segment_split(dataset, &split.valid, model_config.graph_len)?;
    if valid_graphs.is_empty() {
        return Err(TrainError::EmptySplit { which: "valid" });
    }

    let mut rng = ChaCha12Rng::seed_from_u64(train_config.seed);
    let mut params = ModelParams::init(model_config, &mut rng)?;
    let mut adam = AdamState::new(&params);
    let stages = train_config.num_stages;

    let mut best_params = params.clone();
    let mut best_epoch = 0;
    let mut best_wa = f64::NEG_INFINITY;
    let mut stall = 0;
    let mut log = Vec::new();

    let mut order: Vec<usize> = (0..train_graphs.len()).collect();
    for epoch in 1..=train_config.max_epochs {
        order.shuffle(&mut rng);
        let mut stage_sums = vec![0.0; stages];
        let mut total_sum = 0.0;
        let mut batches = 0usize;
        for start in (0..order.len()).step_by(train_config.batch_size) {
            let end = (start + train_config.batch_size).min(order.len());
            let mut indices: Vec<usize> = order[start..end].to_vec();
            // A short final batch wraps around to the epoch's head instead
            // of being dropped.
            let mut filler = order.iter().cycle();
            while indices.len() < train_config.batch_size {
                indices.push(*filler.next().expect("order is non-empty"));
            }
            let batch: Vec<&FrameGraph> = indices.iter().map(|&i| &train_graphs[i]).collect();
            let (stage_values, total) = batch_backward(&batch, &mut params, model_config)?;
            adam_step(&mut params, &mut adam, train_config)?;
            for (sum, value) in stage_sums.iter_mut().zip(&stage_values) {
                *sum += value;
            }
            total_sum += total;
            batches += 1;
        }
        let report = evaluate(&valid_graphs, &params, model_config)?;
        let record = EpochRecord {
            epoch,
            stage_losses: stage_sums.iter().map(|s| s / batches as f64).collect(),
            total_loss: total_sum / batches as f64,
            valid_wa: report.wa,
            valid_ua: report.ua,
        };
        observer(&record);
        log.push(record);

        if report.wa > best_wa {
            best_wa = report.wa;
            best_epoch = epoch;
            best_params = params.clone();
            stall = 0;
        } else {
            stall += 1;
        }
        if stall >= train_config.early_stop_patience {
            break;
        }
    }
    Ok(TrainOutcome {
        params: best_params,
        best_epoch,
        best_valid_wa: best_wa,
        log,
    })
}

// ── Cross-validation ────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct CrossValidationOutcome {
    pub fold_reports: Vec<EvalReport>,
    pub mean_wa: f64,
    pub mean_ua: f64,
}

/// Trains one model per group-exclusive fold (all folds share the
/// configured seed) and scores each on its held-out test groups.
pub fn cross_validate(
    dataset: &[UtteranceFeatures],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<CrossValidationOutcome, TrainError> {
    let splits = group_folds(dataset, train_config.folds)?;
    let mut fold_reports = Vec::with_capacity(splits.len());
    for split in &splits {
        let outcome = train(dataset, split, model_config, train_config)?;
        let test_graphs = segment_split(dataset, &split.test, model_config.graph_len)?;
        fold_reports.push(evaluate(&test_graphs, &outcome.params, model_config)?);
    }
    let count = fold_reports.len() as f64;
    let mean_wa = fold_reports.iter().map(|r| r.wa).sum::<f64>() / count;
    let mean_ua = fold_reports.iter().map(|r| r.ua).sum::<f64>() / count;
    Ok(CrossValidationOutcome {
        fold_reports,
        mean_wa,
        mean_ua,
    })
}
