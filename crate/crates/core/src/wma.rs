//! Weighted multi-aggregator graph isomorphism layers.
//!
//! A plain GIN layer updates node `i` as `MLP((1+ε)·x_i + Σ_{j∈N(i)} x_j)`.
//! The layers here blend three neighborhood aggregators instead of one:
//!
//! ```text
//! x_i ← MLP((1+ε)·x_i + α·sum_i + β·mean_i + γ·softmax_i)
//! ```
//!
//! where `sum`/`mean` are the usual neighborhood reductions and `softmax`
//! weighs each neighbor's feature by its softmax share across the
//! neighborhood, feature dimension by feature dimension. The sum aggregator
//! is injective on multisets but unbounded, the mean is bounded but blind to
//! multiplicity, and the softmax sits in between: it reacts to the value
//! distribution (e.g. it tells `{0.2, 0.2}` apart from `{0.0, 0.4}`) while
//! staying inside the neighborhood's value range. `α`, `β`, `γ` are fixed
//! hyperparameters; `ε` is a learnable scalar per layer. The MLP is a single
//! linear map. A term whose weight is exactly zero is skipped entirely, so
//! zeroing a weight is bit-identical to a build without that aggregator.

use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::tensor::{AggregatorKind, Tape, Tensor, TensorResult, ValueId};

/// Fixed blend weights for the sum, mean, and softmax aggregators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregatorWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for AggregatorWeights {
    /// Equal thirds — the all-round default.
    fn default() -> Self {
        Self {
            alpha: 1.0 / 3.0,
            beta: 1.0 / 3.0,
            gamma: 1.0 / 3.0,
        }
    }
}

impl AggregatorWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self { alpha, beta, gamma }
    }

    /// All three weights finite and non-negative.
    pub fn is_valid(&self) -> bool {
        [self.alpha, self.beta, self.gamma]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0)
    }
}

/// Trainable state of one layer: the scalar self-loop gain `ε` (stored as a
/// one-element tensor, initialized to zero) and the linear MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct WmaGinLayerParams {
    pub epsilon: Tensor,
    /// `[in_dim, out_dim]`.
    pub mlp_weight: Tensor,
    /// `[out_dim]`.
    pub mlp_bias: Tensor,
}

impl WmaGinLayerParams {
    pub fn in_dim(&self) -> usize {
        self.mlp_weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.mlp_weight.shape()[1]
    }
}

/// Tape handles for one layer's parameters within a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct WmaGinLayerBinding {
    pub epsilon: ValueId,
    pub mlp_weight: ValueId,
    pub mlp_bias: ValueId,
}

impl WmaGinLayerBinding {
    pub fn bind(tape: &mut Tape, params: &WmaGinLayerParams) -> Self {
        Self {
            epsilon: tape.param(&params.epsilon),
            mlp_weight: tape.param(&params.mlp_weight),
            mlp_bias: tape.param(&params.mlp_bias),
        }
    }
}

/// Neighborhood sum: `out_i = Σ_{j∈N(i)} x_j`.
pub fn aggregate_sum(
    tape: &mut Tape,
    x: ValueId,
    neighbors: &Arc<Vec<Vec<usize>>>,
) -> TensorResult<ValueId> {
    tape.neighbor_agg(x, neighbors, AggregatorKind::Sum)
}

/// Neighborhood mean: `out_i = (1/|N(i)|) Σ_{j∈N(i)} x_j`.
pub fn aggregate_mean(
    tape: &mut Tape,
    x: ValueId,
    neighbors: &Arc<Vec<Vec<usize>>>,
) -> TensorResult<ValueId> {
    tape.neighbor_agg(x, neighbors, AggregatorKind::Mean)
}

/// Softmax-weighted neighborhood sum, per feature dimension:
/// `out_i[c] = Σ_{j∈N(i)} x_j[c]·exp(x_j[c]) / Σ_{k∈N(i)} exp(x_k[c])`.
pub fn aggregate_softmax(
    tape: &mut Tape,
    x: ValueId,
    neighbors: &Arc<Vec<Vec<usize>>>,
) -> TensorResult<ValueId> {
    tape.neighbor_agg(x, neighbors, AggregatorKind::Softmax)
}

/// One weighted multi-aggregator layer: blends the self term with the three
/// aggregators and applies the linear MLP. Aggregators with a zero weight
/// are never computed.
pub fn wma_gin_forward(
    tape: &mut Tape,
    x: ValueId,
    neighbors: &Arc<Vec<Vec<usize>>>,
    layer: &WmaGinLayerBinding,
    weights: &AggregatorWeights,
) -> TensorResult<ValueId> {
    let one = tape.constant(&[1], alloc::vec![1.0])?;
    let self_gain = tape.add(one, layer.epsilon)?;
    let mut acc = tape.mul(x, self_gain)?;
    if weights.alpha != 0.0 {
        let sum = aggregate_sum(tape, x, neighbors)?;
        let term = tape.scale(sum, weights.alpha)?;
        acc = tape.add(acc, term)?;
    }
    if weights.beta != 0.0 {
        let mean = aggregate_mean(tape, x, neighbors)?;
        let term = tape.scale(mean, weights.beta)?;
        acc = tape.add(acc, term)?;
    }
    if weights.gamma != 0.0 {
        let softmax = aggregate_softmax(tape, x, neighbors)?;
        let term = tape.scale(softmax, weights.gamma)?;
        acc = tape.add(acc, term)?;
    }
    let projected = tape.matmul(acc, layer.mlp_weight)?;
    tape.add(projected, layer.mlp_bias)
}
