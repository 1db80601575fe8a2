//! The full classifier: Bi-GRU front-end, a stack of weighted
//! multi-aggregator GIN layers with one fully-adjacent layer, a
//! query/key/value attention block, and per-stage linear read-out heads
//! whose logits are summed for the final prediction.
//!
//! Data flow for one frame graph `S` (`[n, feature_dim]`):
//!
//! ```text
//! g      = BiGRU(S)                      [n, 2·gru_hidden_per_dir]
//! x_l    = WMA-GIN_l(x_{l-1}) (+ x_{l-1} for l ≥ 2),  x_0 = g
//! attn   = softmax(Q·Kᵀ/√d)·V   with Q from S, K from g, V from x_L
//! stage logits:
//!   gru       = head(mean of g over real nodes)
//!   gin[i]    = head(mean of x_i),  i = 1..L−1
//!   attention = head(mean of attn)  (or of x_L, see [`AttentionStageSource`])
//!   summed    = gru + Σ gin[i] + attention
//! ```
//!
//! Layer `fa_layer_index` of the stack swaps the cycle adjacency for a
//! complete graph so every node can exchange information in one hop.
//! Padded nodes flow through the GRU and the graph layers like real ones,
//! but they are excluded from attention keys and from every read-out mean.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use thiserror::Error;

use crate::fmath;
use crate::graph::{build_adjacency, AdjacencyKind, FrameGraph};
use crate::tensor::{Tape, Tensor, TensorResult, ValueId};
use crate::wma::{wma_gin_forward, AggregatorWeights, WmaGinLayerBinding, WmaGinLayerParams};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(&'static str),
}

/// What the final stage head reads: the attention output (default) or the
/// last graph layer directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionStageSource {
    #[default]
    Attention,
    LastGinLayer,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Acoustic features per frame.
    pub feature_dim: usize,
    /// Nodes per frame graph (segmentation window).
    pub graph_len: usize,
    /// GRU hidden size per direction; the Bi-GRU emits twice this.
    pub gru_hidden_per_dir: usize,
    /// Width of every graph layer.
    pub gin_hidden: usize,
    /// Number of stacked graph layers.
    pub num_gin_layers: usize,
    /// 1-based position of the fully-adjacent layer in the stack.
    pub fa_layer_index: usize,
    pub num_classes: usize,
    pub aggregator_weights: AggregatorWeights,
    pub attention_stage_source: AttentionStageSource,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 78,
            graph_len: 120,
            gru_hidden_per_dir: 128,
            gin_hidden: 256,
            num_gin_layers: 4,
            fa_layer_index: 2,
            num_classes: 4,
            aggregator_weights: AggregatorWeights::default(),
            attention_stage_source: AttentionStageSource::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.feature_dim == 0 {
            return Err(ModelError::Config("feature_dim must be positive"));
        }
        if self.graph_len < 3 {
            return Err(ModelError::Config("graph_len must be at least 3"));
        }
        if self.gru_hidden_per_dir == 0 || self.gin_hidden == 0 {
            return Err(ModelError::Config("hidden sizes must be positive"));
        }
        if self.num_gin_layers == 0 {
            return Err(ModelError::Config("need at least one graph layer"));
        }
        if self.fa_layer_index == 0 || self.fa_layer_index > self.num_gin_layers {
            return Err(ModelError::Config(
                "fa_layer_index must lie between 1 and num_gin_layers",
            ));
        }
        if self.num_classes < 2 {
            return Err(ModelError::Config("need at least two classes"));
        }
        if !self.aggregator_weights.is_valid() {
            return Err(ModelError::Config(
                "aggregator weights must be finite and non-negative",
            ));
        }
        Ok(())
    }

    /// Output width of the Bi-GRU (both directions concatenated).
    pub fn gru_out_dim(&self) -> usize {
        2 * self.gru_hidden_per_dir
    }

    /// Number of per-stage losses: one per intermediate graph layer, the
    /// attention stage, and the summed logits.
    pub fn num_loss_stages(&self) -> usize {
        self.num_gin_layers + 1
    }
}

// ── Parameter containers ────────────────────────────────────────────────────

/// A linear map `x·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    /// `[in_dim, out_dim]`.
    pub weight: Tensor,
    /// `[out_dim]`.
    pub bias: Tensor,
}

/// One GRU direction. Gates read the concatenation `[x, h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruCellParams {
    pub w_update: Tensor,
    pub b_update: Tensor,
    pub w_reset: Tensor,
    pub b_reset: Tensor,
    pub w_cand: Tensor,
    pub b_cand: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiGruParams {
    pub fwd: GruCellParams,
    pub bwd: GruCellParams,
}

/// Attention projections: queries from the raw features, keys from the GRU
/// output, values from the last graph layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MpaParams {
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
}

/// Every trainable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub bigru: BiGruParams,
    pub gin: Vec<WmaGinLayerParams>,
    pub mpa: MpaParams,
    pub head_gru: LinearParams,
    pub head_gin: Vec<LinearParams>,
    pub head_attention: LinearParams,
}

fn uniform_tensor<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / fmath::sqrt(fan_in as f64);
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_vec(shape.to_vec(), data)
        .expect("consistent init shape")
        .with_grad()
}

fn init_linear<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> LinearParams {
    LinearParams {
        weight: uniform_tensor(&[in_dim, out_dim], in_dim, rng),
        bias: Tensor::zeros(&[out_dim]).with_grad(),
    }
}

fn init_gru_cell<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> GruCellParams {
    let gate_in = input + hidden;
    GruCellParams {
        w_update: uniform_tensor(&[gate_in, hidden], gate_in, rng),
        b_update: Tensor::zeros(&[hidden]).with_grad(),
        w_reset: uniform_tensor(&[gate_in, hidden], gate_in, rng),
        b_reset: Tensor::zeros(&[hidden]).with_grad(),
        w_cand: uniform_tensor(&[gate_in, hidden], gate_in, rng),
        b_cand: Tensor::zeros(&[hidden]).with_grad(),
    }
}

impl ModelParams {
    /// Fresh parameters: weights uniform in ±1/√fan_in, biases and every
    /// layer's ε at zero. Consumes the RNG in a fixed order, so equal seeds
    /// give bit-identical models.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let h = config.feature_dim;
        let hid = config.gru_hidden_per_dir;
        let d = config.gin_hidden;
        let c = config.num_classes;
        let gru_out = config.gru_out_dim();

        let bigru = BiGruParams {
            fwd: init_gru_cell(h, hid, rng),
            bwd: init_gru_cell(h, hid, rng),
        };
        let gin = (0..config.num_gin_layers)
            .map(|l| {
                let in_dim = if l == 0 { gru_out } else { d };
                WmaGinLayerParams {
                    epsilon: Tensor::zeros(&[1]).with_grad(),
                    mlp_weight: uniform_tensor(&[in_dim, d], in_dim, rng),
                    mlp_bias: Tensor::zeros(&[d]).with_grad(),
                }
            })
            .collect();
        let mpa = MpaParams {
            query: init_linear(h, d, rng),
            key: init_linear(gru_out, d, rng),
            value: init_linear(d, d, rng),
        };
        let head_gru = init_linear(gru_out, c, rng);
        let head_gin = (0..config.num_gin_layers.saturating_sub(1))
            .map(|_| init_linear(d, c, rng))
            .collect();
        let head_attention = init_linear(d, c, rng);
        Ok(Self {
            bigru,
            gin,
            mpa,
            head_gru,
            head_gin,
            head_attention,
        })
    }

    /// All tensors with stable dotted names, in a fixed order shared with
    /// [`ModelParams::named_tensors_mut`] and [`ModelBindings::bind`].
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        macro_rules! cell {
            ($prefix:expr, $c:expr) => {{
                out.push((alloc::format!("{}.w_update", $prefix), &$c.w_update));
                out.push((alloc::format!("{}.b_update", $prefix), &$c.b_update));
                out.push((alloc::format!("{}.w_reset", $prefix), &$c.w_reset));
                out.push((alloc::format!("{}.b_reset", $prefix), &$c.b_reset));
                out.push((alloc::format!("{}.w_cand", $prefix), &$c.w_cand));
                out.push((alloc::format!("{}.b_cand", $prefix), &$c.b_cand));
            }};
        }
        macro_rules! lin {
            ($prefix:expr, $p:expr) => {{
                out.push((alloc::format!("{}.weight", $prefix), &$p.weight));
                out.push((alloc::format!("{}.bias", $prefix), &$p.bias));
            }};
        }
        cell!("bigru.fwd", self.bigru.fwd);
        cell!("bigru.bwd", self.bigru.bwd);
        for (l, layer) in self.gin.iter().enumerate() {
            out.push((alloc::format!("gin.{l}.epsilon"), &layer.epsilon));
            out.push((alloc::format!("gin.{l}.mlp_weight"), &layer.mlp_weight));
            out.push((alloc::format!("gin.{l}.mlp_bias"), &layer.mlp_bias));
        }
        lin!("mpa.query", self.mpa.query);
        lin!("mpa.key", self.mpa.key);
        lin!("mpa.value", self.mpa.value);
        lin!("head_gru", self.head_gru);
        for (i, head) in self.head_gin.iter().enumerate() {
            lin!(alloc::format!("head_gin.{i}"), head);
        }
        lin!("head_attention", self.head_attention);
        out
    }

    /// Mutable variant of [`ModelParams::named_tensors`], same order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        macro_rules! cell {
            ($prefix:expr, $c:expr) => {{
                out.push((alloc::format!("{}.w_update", $prefix), &mut $c.w_update));
                out.push((alloc::format!("{}.b_update", $prefix), &mut $c.b_update));
                out.push((alloc::format!("{}.w_reset", $prefix), &mut $c.w_reset));
                out.push((alloc::format!("{}.b_reset", $prefix), &mut $c.b_reset));
                out.push((alloc::format!("{}.w_cand", $prefix), &mut $c.w_cand));
                out.push((alloc::format!("{}.b_cand", $prefix), &mut $c.b_cand));
            }};
        }
        macro_rules! lin {
            ($prefix:expr, $p:expr) => {{
                out.push((alloc::format!("{}.weight", $prefix), &mut $p.weight));
                out.push((alloc::format!("{}.bias", $prefix), &mut $p.bias));
            }};
        }
        cell!("bigru.fwd", self.bigru.fwd);
        cell!("bigru.bwd", self.bigru.bwd);
        for (l, layer) in self.gin.iter_mut().enumerate() {
            out.push((alloc::format!("gin.{l}.epsilon"), &mut layer.epsilon));
            out.push((alloc::format!("gin.{l}.mlp_weight"), &mut layer.mlp_weight));
            out.push((alloc::format!("gin.{l}.mlp_bias"), &mut layer.mlp_bias));
        }
        lin!("mpa.query", self.mpa.query);
        lin!("mpa.key", self.mpa.key);
        lin!("mpa.value", self.mpa.value);
        lin!("head_gru", self.head_gru);
        for (i, head) in self.head_gin.iter_mut().enumerate() {
            lin!(alloc::format!("head_gin.{i}"), head);
        }
        lin!("head_attention", self.head_attention);
        out
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in self.named_tensors_mut() {
            t.zero_grad();
        }
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }
}

// ── Tape bindings ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct LinearBinding {
    pub weight: ValueId,
    pub bias: ValueId,
}

#[derive(Debug, Clone, Copy)]
pub struct GruCellBinding {
    pub w_update: ValueId,
    pub b_update: ValueId,
    pub w_reset: ValueId,
    pub b_reset: ValueId,
    pub w_cand: ValueId,
    pub b_cand: ValueId,
}

#[derive(Debug, Clone, Copy)]
pub struct BiGruBinding {
    pub fwd: GruCellBinding,
    pub bwd: GruCellBinding,
}

#[derive(Debug, Clone, Copy)]
pub struct MpaBinding {
    pub query: LinearBinding,
    pub key: LinearBinding,
    pub value: LinearBinding,
}

/// Handles for every parameter of one forward pass. `flat` lists the same
/// handles in [`ModelParams::named_tensors`] order for gradient harvesting.
#[derive(Debug, Clone)]
pub struct ModelBindings {
    pub bigru: BiGruBinding,
    pub gin: Vec<WmaGinLayerBinding>,
    pub mpa: MpaBinding,
    pub head_gru: LinearBinding,
    pub head_gin: Vec<LinearBinding>,
    pub head_attention: LinearBinding,
    pub flat: Vec<ValueId>,
}

impl ModelBindings {
    /// Leases every parameter onto the tape.
    pub fn bind(tape: &mut Tape, params: &ModelParams) -> Self {
        let mut flat = Vec::new();
        let push = |tape: &mut Tape, flat: &mut Vec<ValueId>, t: &Tensor| -> ValueId {
            let id = tape.param(t);
            flat.push(id);
            id
        };
        let cell = |tape: &mut Tape, flat: &mut Vec<ValueId>, c: &GruCellParams| GruCellBinding {
            w_update: push(tape, flat, &c.w_update),
            b_update: push(tape, flat, &c.b_update),
            w_reset: push(tape, flat, &c.w_reset),
            b_reset: push(tape, flat, &c.b_reset),
            w_cand: push(tape, flat, &c.w_cand),
            b_cand: push(tape, flat, &c.b_cand),
        };
        let bigru = BiGruBinding {
            fwd: cell(tape, &mut flat, &params.bigru.fwd),
            bwd: cell(tape, &mut flat, &params.bigru.bwd),
        };
        let gin = params
            .gin
            .iter()
            .map(|layer| WmaGinLayerBinding {
                epsilon: push(tape, &mut flat, &layer.epsilon),
                mlp_weight: push(tape, &mut flat, &layer.mlp_weight),
                mlp_bias: push(tape, &mut flat, &layer.mlp_bias),
            })
            .collect();
        let lin = |tape: &mut Tape, flat: &mut Vec<ValueId>, p: &LinearParams| LinearBinding {
            weight: push(tape, flat, &p.weight),
            bias: push(tape, flat, &p.bias),
        };
        let mpa = MpaBinding {
            query: lin(tape, &mut flat, &params.mpa.query),
            key: lin(tape, &mut flat, &params.mpa.key),
            value: lin(tape, &mut flat, &params.mpa.value),
        };
        let head_gru = lin(tape, &mut flat, &params.head_gru);
        let head_gin = params
            .head_gin
            .iter()
            .map(|h| lin(tape, &mut flat, h))
            .collect();
        let head_attention = lin(tape, &mut flat, &params.head_attention);
        Self {
            bigru,
            gin,
            mpa,
            head_gru,
            head_gin,
            head_attention,
            flat,
        }
    }
}

// ── Forward passes ──────────────────────────────────────────────────────────

pub fn linear_forward(tape: &mut Tape, x: ValueId, lin: &LinearBinding) -> TensorResult<ValueId> {
    let projected = tape.matmul(x, lin.weight)?;
    tape.add(projected, lin.bias)
}

/// One GRU step. `x` is `[1, input]`, `h_prev` is `[1, hidden]`.
fn gru_cell_forward(
    tape: &mut Tape,
    x: ValueId,
    h_prev: ValueId,
    ones: ValueId,
    cell: &GruCellBinding,
) -> TensorResult<ValueId> {
    let xin = tape.concat(x, h_prev, 1)?;
    let z_pre = tape.matmul(xin, cell.w_update)?;
    let z_pre = tape.add(z_pre, cell.b_update)?;
    let z = tape.sigmoid(z_pre)?;
    let r_pre = tape.matmul(xin, cell.w_reset)?;
    let r_pre = tape.add(r_pre, cell.b_reset)?;
    let r = tape.sigmoid(r_pre)?;
    let gated = tape.mul(r, h_prev)?;
    let cin = tape.concat(x, gated, 1)?;
    let c_pre = tape.matmul(cin, cell.w_cand)?;
    let c_pre = tape.add(c_pre, cell.b_cand)?;
    let cand = tape.tanh(c_pre)?;
    // h = (1 − z) ∘ h_prev + z ∘ cand
    let keep = tape.sub(ones, z)?;
    let carried = tape.mul(keep, h_prev)?;
    let fresh = tape.mul(z, cand)?;
    tape.add(carried, fresh)
}

/// Runs both GRU directions over all `n` rows of `s` (padding included; the
/// mask only documents which rows are real) and concatenates the per-frame
/// states into `[n, 2·hidden]`.
pub fn bigru_forward(
    tape: &mut Tape,
    s: ValueId,
    bind: &BiGruBinding,
    mask: &[bool],
) -> TensorResult<ValueId> {
    let n = tape.shape(s)[0];
    debug_assert_eq!(mask.len(), n);
    let hidden = tape.shape(bind.fwd.b_update)[0];
    let h0 = tape.constant(&[1, hidden], vec![0.0; hidden])?;
    let ones = tape.constant(&[1, hidden], vec![1.0; hidden])?;

    let mut fwd_states = Vec::with_capacity(n);
    let mut h = h0;
    for t in 0..n {
        let x = tape.slice_rows(s, t, 1)?;
        h = gru_cell_forward(tape, x, h, ones, &bind.fwd)?;
        fwd_states.push(h);
    }

    let mut bwd_states = vec![h0; n];
    let mut h = h0;
    for t in (0..n).rev() {
        let x = tape.slice_rows(s, t, 1)?;
        h = gru_cell_forward(tape, x, h, ones, &bind.bwd)?;
        bwd_states[t] = h;
    }

    let fwd = tape.stack_rows(&fwd_states)?;
    let bwd = tape.stack_rows(&bwd_states)?;
    tape.concat(fwd, bwd, 1)
}

/// Runs the graph-layer stack on `g`, returning every layer's output.
/// Layers after the first add a residual connection to their input. Layer
/// `config.fa_layer_index` (1-based) uses complete adjacency instead of the
/// graph's own edges.
pub fn gin_stack_forward(
    tape: &mut Tape,
    g: ValueId,
    graph: &FrameGraph,
    layers: &[WmaGinLayerBinding],
    config: &ModelConfig,
) -> TensorResult<Vec<ValueId>> {
    let n = graph.num_nodes();
    let needs_full = (1..=layers.len()).contains(&config.fa_layer_index);
    let full_lists = if needs_full {
        Some(Arc::new(
            build_adjacency(n, AdjacencyKind::Full).expect("graphs have at least 3 nodes"),
        ))
    } else {
        None
    };
    let mut outputs = Vec::with_capacity(layers.len());
    let mut x = g;
    for (l, layer) in layers.iter().enumerate() {
        let lists = if l + 1 == config.fa_layer_index {
            full_lists.as_ref().expect("fa lists built")
        } else {
            &graph.neighbors
        };
        let update = wma_gin_forward(tape, x, lists, layer, &config.aggregator_weights)?;
        x = if l == 0 { update } else { tape.add(update, x)? };
        outputs.push(x);
    }
    Ok(outputs)
}

/// Scaled dot-product attention: queries from the raw features `s`, keys
/// from the GRU output `g`, values from the last graph layer `x_last`.
/// Padded positions are struck from the key competition by a large negative
/// score bias.
pub fn mpa_forward(
    tape: &mut Tape,
    s: ValueId,
    g: ValueId,
    x_last: ValueId,
    bind: &MpaBinding,
    mask: &[bool],
) -> TensorResult<ValueId> {
    let q = linear_forward(tape, s, &bind.query)?;
    let k = linear_forward(tape, g, &bind.key)?;
    let v = linear_forward(tape, x_last, &bind.value)?;
    let d = tape.shape(q)[1];
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.div_scalar(scores, fmath::sqrt(d as f64))?;
    let n = mask.len();
    let mut bias = vec![0.0; n * n];
    for (c, &real) in mask.iter().enumerate() {
        if !real {
            for r in 0..n {
                bias[r * n + c] = -1e30;
            }
        }
    }
    let bias = tape.constant(&[n, n], bias)?;
    let masked = tape.add(scaled, bias)?;
    let attn = tape.softmax_rows(masked)?;
    tape.matmul(attn, v)
}

/// Mean of the real (unmasked) rows of `x`, as a `[1, cols]` row.
pub fn masked_mean_readout(tape: &mut Tape, x: ValueId, mask: &[bool]) -> TensorResult<ValueId> {
    let real = mask.iter().filter(|&&m| m).count().max(1) as f64;
    let row: Vec<f64> = mask
        .iter()
        .map(|&m| if m { 1.0 / real } else { 0.0 })
        .collect();
    let weights = tape.constant(&[1, mask.len()], row)?;
    tape.matmul(weights, x)
}

/// Tape handles for every stage's logits.
#[derive(Debug, Clone)]
pub struct TracedStages {
    /// Head on the Bi-GRU read-out.
    pub gru: ValueId,
    /// Heads on the intermediate graph layers (all but the last).
    pub gin: Vec<ValueId>,
    /// Head on the attention output (or the last graph layer).
    pub attention: ValueId,
    /// Elementwise sum of all stage logits; the prediction argmaxes this.
    pub summed: ValueId,
}

/// Builds the whole forward graph for one frame graph on an existing tape.
pub fn model_forward_traced(
    tape: &mut Tape,
    graph: &FrameGraph,
    bindings: &ModelBindings,
    config: &ModelConfig,
) -> TensorResult<TracedStages> {
    let s = tape.param(&graph.node_features);
    let g = bigru_forward(tape, s, &bindings.bigru, &graph.mask)?;
    let gins = gin_stack_forward(tape, g, graph, &bindings.gin, config)?;
    let last_gin = *gins.last().expect("at least one graph layer");
    let mpa = mpa_forward(tape, s, g, last_gin, &bindings.mpa, &graph.mask)?;

    let r = masked_mean_readout(tape, g, &graph.mask)?;
    let gru_logits = linear_forward(tape, r, &bindings.head_gru)?;
    let mut gin_logits = Vec::with_capacity(bindings.head_gin.len());
    for (i, head) in bindings.head_gin.iter().enumerate() {
        let r = masked_mean_readout(tape, gins[i], &graph.mask)?;
        gin_logits.push(linear_forward(tape, r, head)?);
    }
    let e_input = match config.attention_stage_source {
        AttentionStageSource::Attention => mpa,
        AttentionStageSource::LastGinLayer => last_gin,
    };
    let r = masked_mean_readout(tape, e_input, &graph.mask)?;
    let attention_logits = linear_forward(tape, r, &bindings.head_attention)?;

    let mut summed = gru_logits;
    for &stage in &gin_logits {
        summed = tape.add(summed, stage)?;
    }
    summed = tape.add(summed, attention_logits)?;
    Ok(TracedStages {
        gru: gru_logits,
        gin: gin_logits,
        attention: attention_logits,
        summed,
    })
}

/// Logit rows produced by one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StageLogits {
    pub gru: Vec<f64>,
    pub gin: Vec<Vec<f64>>,
    pub attention: Vec<f64>,
    pub summed: Vec<f64>,
}

/// Convenience single-graph forward on a private tape.
pub fn model_forward(
    graph: &FrameGraph,
    params: &ModelParams,
    config: &ModelConfig,
) -> TensorResult<StageLogits> {
    let mut tape = Tape::new();
    let bindings = ModelBindings::bind(&mut tape, params);
    let traced = model_forward_traced(&mut tape, graph, &bindings, config)?;
    Ok(StageLogits {
        gru: tape.data(traced.gru).to_vec(),
        gin: traced.gin.iter().map(|&id| tape.data(id).to_vec()).collect(),
        attention: tape.data(traced.attention).to_vec(),
        summed: tape.data(traced.summed).to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{segment_utterance, UtteranceFeatures};
    use alloc::string::ToString;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            feature_dim: 3,
            graph_len: 6,
            gru_hidden_per_dir: 4,
            gin_hidden: 8,
            num_gin_layers: 2,
            fa_layer_index: 1,
            num_classes: 4,
            ..ModelConfig::default()
        }
    }

    fn random_graph(config: &ModelConfig, seed: u64, frames: usize) -> FrameGraph {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..frames * config.feature_dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let u = UtteranceFeatures::new(
            "u".to_string(),
            "g".to_string(),
            1,
            Tensor::from_vec(vec![frames, config.feature_dim], data).unwrap(),
        )
        .unwrap();
        segment_utterance(&u, config.graph_len).unwrap().remove(0)
    }

    #[test]
    fn config_validation_catches_bad_values() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut bad = ModelConfig::default();
        bad.fa_layer_index = 5;
        assert!(bad.validate().is_err());
        let mut bad = ModelConfig::default();
        bad.num_classes = 1;
        assert!(bad.validate().is_err());
        let mut bad = ModelConfig::default();
        bad.aggregator_weights = AggregatorWeights::new(-0.1, 0.5, 0.5);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_parameters_give_zero_gru_states() {
        let config = tiny_config();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut params = ModelParams::init(&config, &mut rng).unwrap();
        for (_, t) in params.named_tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let graph = random_graph(&config, 2, 6);
        let mut tape = Tape::new();
        let bindings = ModelBindings::bind(&mut tape, &params);
        let s = tape.param(&graph.node_features);
        let g = bigru_forward(&mut tape, s, &bindings.bigru, &graph.mask).unwrap();
        assert_eq!(tape.shape(g), &[6, 8]);
        assert!(tape.data(g).iter().all(|&v| v == 0.0));
    }

    /// With identical cells in both directions, running the reversed input
    /// swaps the roles of the two state tracks exactly.
    #[test]
    fn bigru_direction_symmetry() {
        let config = tiny_config();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut params = ModelParams::init(&config, &mut rng).unwrap();
        params.bigru.bwd = params.bigru.fwd.clone();
        let n = 6;
        let graph = random_graph(&config, 4, n);
        let hid = config.gru_hidden_per_dir;

        let run = |features: &Tensor| {
            let mut tape = Tape::new();
            let bindings = ModelBindings::bind(&mut tape, &params);
            let s = tape.param(features);
            let g = bigru_forward(&mut tape, s, &bindings.bigru, &vec![true; n]).unwrap();
            tape.data(g).to_vec()
        };
        let fwd_out = run(&graph.node_features);

        let dim = config.feature_dim;
        let src = graph.node_features.data();
        let mut reversed = vec![0.0; src.len()];
        for t in 0..n {
            reversed[t * dim..(t + 1) * dim]
                .copy_from_slice(&src[(n - 1 - t) * dim..(n - t) * dim]);
        }
        let rev_out = run(&Tensor::from_vec(vec![n, dim], reversed).unwrap());

        let row_width = 2 * hid;
        for t in 0..n {
            let fwd_half = &fwd_out[t * row_width..t * row_width + hid];
            let mirrored = &rev_out[(n - 1 - t) * row_width + hid..(n - t) * row_width];
            assert_eq!(fwd_half, mirrored, "row {t}");
        }
    }

    /// Identity MLPs, ε = 0 and zero aggregator weights collapse each layer
    /// to a pass-through, so the residual chain doubles the input per layer:
    /// g, 2g, 4g, 8g.
    #[test]
    fn degenerate_stack_doubles_through_residuals() {
        let n = 5;
        let dim = 3;
        let mut eye = vec![0.0; dim * dim];
        for i in 0..dim {
            eye[i * dim + i] = 1.0;
        }
        let layer = || WmaGinLayerParams {
            epsilon: Tensor::zeros(&[1]).with_grad(),
            mlp_weight: Tensor::from_vec(vec![dim, dim], eye.clone()).unwrap().with_grad(),
            mlp_bias: Tensor::zeros(&[dim]).with_grad(),
        };
        let layers = vec![layer(), layer(), layer(), layer()];
        let config = ModelConfig {
            feature_dim: dim,
            graph_len: n,
            gin_hidden: dim,
            num_gin_layers: 4,
            fa_layer_index: 2,
            aggregator_weights: AggregatorWeights::new(0.0, 0.0, 0.0),
            ..ModelConfig::default()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let g_data: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let graph = FrameGraph {
            node_features: Tensor::from_vec(vec![n, dim], g_data.clone()).unwrap(),
            kind: AdjacencyKind::Cycle,
            neighbors: Arc::new(build_adjacency(n, AdjacencyKind::Cycle).unwrap()),
            mask: vec![true; n],
            label: 0,
        };
        let mut tape = Tape::new();
        let bindings: Vec<WmaGinLayerBinding> = layers
            .iter()
            .map(|l| WmaGinLayerBinding::bind(&mut tape, l))
            .collect();
        let g = tape.leaf(&[n, dim], g_data.clone(), false).unwrap();
        let outs = gin_stack_forward(&mut tape, g, &graph, &bindings, &config).unwrap();
        for (l, factor) in [1.0, 2.0, 4.0, 8.0].iter().enumerate() {
            let expected: Vec<f64> = g_data.iter().map(|v| v * factor).collect();
            assert_eq!(tape.data(outs[l]), expected.as_slice(), "layer {l}");
        }
    }

    /// Rotating a fully-real cycle graph rotates node embeddings but leaves
    /// every layer's mean read-out (numerically) unchanged.
    #[test]
    fn rotation_leaves_stack_readouts_invariant() {
        let n = 7;
        let dim = 4;
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let layers: Vec<WmaGinLayerParams> = (0..3)
            .map(|_| {
                let w: Vec<f64> = (0..dim * dim).map(|_| rng.random_range(-0.5..0.5)).collect();
                let b: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect();
                WmaGinLayerParams {
                    epsilon: Tensor::from_vec(vec![1], vec![0.1]).unwrap().with_grad(),
                    mlp_weight: Tensor::from_vec(vec![dim, dim], w).unwrap().with_grad(),
                    mlp_bias: Tensor::from_vec(vec![dim], b).unwrap().with_grad(),
                }
            })
            .collect();
        let config = ModelConfig {
            feature_dim: dim,
            graph_len: n,
            gin_hidden: dim,
            num_gin_layers: 3,
            fa_layer_index: 2,
            ..ModelConfig::default()
        };
        let base: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();

        let readouts = |features: Vec<f64>| -> Vec<Vec<f64>> {
            let graph = FrameGraph {
                node_features: Tensor::from_vec(vec![n, dim], features).unwrap(),
                kind: AdjacencyKind::Cycle,
                neighbors: Arc::new(build_adjacency(n, AdjacencyKind::Cycle).unwrap()),
                mask: vec![true; n],
                label: 0,
            };
            let mut tape = Tape::new();
            let bindings: Vec<WmaGinLayerBinding> = layers
                .iter()
                .map(|l| WmaGinLayerBinding::bind(&mut tape, l))
                .collect();
            let g = tape.param(&graph.node_features);
            let outs = gin_stack_forward(&mut tape, g, &graph, &bindings, &config).unwrap();
            outs.iter()
                .map(|&id| {
                    let r = masked_mean_readout(&mut tape, id, &graph.mask).unwrap();
                    tape.data(r).to_vec()
                })
                .collect()
        };

        let plain = readouts(base.clone());
        let shift = 3;
        let mut rotated = vec![0.0; base.len()];
        for t in 0..n {
            rotated[((t + shift) % n) * dim..((t + shift) % n + 1) * dim]
                .copy_from_slice(&base[t * dim..(t + 1) * dim]);
        }
        let turned = readouts(rotated);
        for (l, (a, b)) in plain.iter().zip(&turned).enumerate() {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-9, "layer {l}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn attention_with_uniform_queries_is_masked_mean_of_values() {
        let config = tiny_config();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut params = ModelParams::init(&config, &mut rng).unwrap();
        // Constant queries: every row attends identically.
        params.mpa.query.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        params.mpa.query.bias.data_mut().iter_mut().for_each(|v| *v = 0.0);
        // Constant keys too, so scores are flat across unmasked columns.
        params.mpa.key.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);

        let graph = random_graph(&config, 10, 4); // 4 real frames, 2 padded
        let mut tape = Tape::new();
        let bindings = ModelBindings::bind(&mut tape, &params);
        let s = tape.param(&graph.node_features);
        let g = bigru_forward(&mut tape, s, &bindings.bigru, &graph.mask).unwrap();
        let gins = gin_stack_forward(&mut tape, g, &graph, &bindings.gin, &config).unwrap();
        let last = *gins.last().unwrap();
        let out = mpa_forward(&mut tape, s, g, last, &bindings.mpa, &graph.mask).unwrap();

        let v = linear_forward(&mut tape, last, &bindings.mpa.value).unwrap();
        let v_mean = masked_mean_readout(&mut tape, v, &graph.mask).unwrap();
        let expected = tape.data(v_mean).to_vec();
        let d = config.gin_hidden;
        for row in 0..graph.num_nodes() {
            for c in 0..d {
                let got = tape.data(out)[row * d + c];
                assert!(
                    (got - expected[c]).abs() < 1e-12,
                    "row {row} col {c}: {got} vs {}",
                    expected[c]
                );
            }
        }
    }

    #[test]
    fn readout_examples() {
        let mut tape = Tape::new();
        let x = tape
            .constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0])
            .unwrap();
        let full = masked_mean_readout(&mut tape, x, &[true, true]).unwrap();
        assert_eq!(tape.data(full), &[2.0, 3.0]);
        let only_first = masked_mean_readout(&mut tape, x, &[true, false]).unwrap();
        assert_eq!(tape.data(only_first), &[1.0, 2.0]);
    }

    #[test]
    fn summed_logits_equal_stagewise_sum() {
        let config = tiny_config();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let params = ModelParams::init(&config, &mut rng).unwrap();
        let graph = random_graph(&config, 12, 6);
        let logits = model_forward(&graph, &params, &config).unwrap();
        assert_eq!(logits.summed.len(), config.num_classes);
        assert_eq!(logits.gin.len(), config.num_gin_layers - 1);
        for c in 0..config.num_classes {
            // Same fold order as the traced forward: gru, gin stages, attention.
            let mut acc = logits.gru[c];
            for stage in &logits.gin {
                acc += stage[c];
            }
            acc += logits.attention[c];
            assert_eq!(acc.to_bits(), logits.summed[c].to_bits(), "class {c}");
        }
    }

    #[test]
    fn zeroed_model_yields_zero_logits() {
        let config = tiny_config();
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let mut params = ModelParams::init(&config, &mut rng).unwrap();
        for (_, t) in params.named_tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let graph = random_graph(&config, 14, 6);
        let logits = model_forward(&graph, &params, &config).unwrap();
        assert!(logits.summed.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn named_tensor_orders_agree_and_init_is_deterministic() {
        let config = tiny_config();
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let mut params = ModelParams::init(&config, &mut rng).unwrap();
        let names: Vec<String> = params.named_tensors().iter().map(|(n, _)| n.clone()).collect();
        let names_mut: Vec<String> = params
            .named_tensors_mut()
            .iter()
            .map(|(n, _)| n.clone())
            .collect();
        assert_eq!(names, names_mut);
        assert!(names.contains(&"gin.0.epsilon".to_string()));
        assert!(names.contains(&"head_attention.weight".to_string()));

        let mut rng_a = ChaCha12Rng::seed_from_u64(99);
        let mut rng_b = ChaCha12Rng::seed_from_u64(99);
        let a = ModelParams::init(&config, &mut rng_a).unwrap();
        let b = ModelParams::init(&config, &mut rng_b).unwrap();
        for ((_, ta), (_, tb)) in a.named_tensors().iter().zip(b.named_tensors().iter()) {
            let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn default_size_forward_has_expected_shapes() {
        let config = ModelConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let params = ModelParams::init(&config, &mut rng).unwrap();
        let graph = random_graph(&config, 18, 90); // padded to 120
        let mut tape = Tape::new();
        let bindings = ModelBindings::bind(&mut tape, &params);
        let s = tape.param(&graph.node_features);
        let g = bigru_forward(&mut tape, s, &bindings.bigru, &graph.mask).unwrap();
        assert_eq!(tape.shape(g), &[120, 256]);
        let traced = model_forward_traced(&mut tape, &graph, &bindings, &config).unwrap();
        assert_eq!(tape.shape(traced.summed), &[1, 4]);
        assert!(tape.data(traced.summed).iter().all(|v| v.is_finite()));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        /// Any small graph with a full mask yields finite logits.
        #[test]
        fn forward_is_finite_on_small_graphs(
            n in 3usize..9,
            dim in 1usize..4,
            seed in 0u64..1000,
        ) {
            let config = ModelConfig {
                feature_dim: dim,
                graph_len: n,
                gru_hidden_per_dir: 3,
                gin_hidden: 5,
                num_gin_layers: 2,
                fa_layer_index: 2,
                num_classes: 3,
                ..ModelConfig::default()
            };
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let params = ModelParams::init(&config, &mut rng).unwrap();
            let data: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-3.0..3.0)).collect();
            let graph = FrameGraph {
                node_features: Tensor::from_vec(vec![n, dim], data).unwrap(),
                kind: AdjacencyKind::Cycle,
                neighbors: Arc::new(build_adjacency(n, AdjacencyKind::Cycle).unwrap()),
                mask: vec![true; n],
                label: 0,
            };
            let logits = model_forward(&graph, &params, &config).unwrap();
            prop_assert!(logits.summed.iter().all(|v| v.is_finite()));
            prop_assert_eq!(logits.summed.len(), 3);
        }
    }
}
