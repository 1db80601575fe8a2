//! Frame graphs: utterances segmented into fixed-length windows whose frames
//! become nodes on a cycle.
//!
//! Every frame of a window is one node; node `i` is connected to `i-1` and
//! `i+1` modulo the window length, so the first and last node close the
//! cycle. Windows shorter than the target length are zero-padded and carry a
//! validity mask. A fully-adjacent variant connects every pair of distinct
//! nodes and is used by one layer of the model stack.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("utterance {id:?} has no frames")]
    EmptyUtterance { id: String },
    #[error("frame matrix of {id:?} must be rank 2, got shape {shape:?}")]
    BadFrameShape { id: String, shape: Vec<usize> },
    #[error("a graph needs at least 3 nodes, got {nodes}")]
    TooFewNodes { nodes: usize },
}

/// One utterance: a `[frames, feature_dim]` matrix of acoustic features plus
/// its emotion label and the speaker group used for split bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceFeatures {
    pub utterance_id: String,
    pub group_id: String,
    pub label: usize,
    pub frames: Tensor,
}

impl UtteranceFeatures {
    pub fn new(
        utterance_id: String,
        group_id: String,
        label: usize,
        frames: Tensor,
    ) -> Result<Self, GraphError> {
        if frames.shape().len() != 2 {
            return Err(GraphError::BadFrameShape {
                id: utterance_id,
                shape: frames.shape().to_vec(),
            });
        }
        if frames.shape()[0] == 0 || frames.shape()[1] == 0 {
            return Err(GraphError::EmptyUtterance { id: utterance_id });
        }
        Ok(Self {
            utterance_id,
            group_id,
            label,
            frames,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.frames.shape()[1]
    }
}

/// Which edges a graph carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjacencyKind {
    /// Ring: node `i` ↔ `i±1 mod n`.
    Cycle,
    /// Every pair of distinct nodes connected (no self-loops).
    Full,
}

/// A fixed-length window of an utterance, ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameGraph {
    /// `[graph_len, feature_dim]`, zero rows past the real frames.
    pub node_features: Tensor,
    pub kind: AdjacencyKind,
    /// Per-node neighbor lists, ascending, shared across windows.
    pub neighbors: Arc<Vec<Vec<usize>>>,
    /// `mask[i]` is true for real frames, false for padding.
    pub mask: Vec<bool>,
    /// Label inherited from the source utterance.
    pub label: usize,
}

impl FrameGraph {
    pub fn num_nodes(&self) -> usize {
        self.node_features.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.shape()[1]
    }

    /// Number of real (unpadded) frames.
    pub fn real_node_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Dense `[n, n]` 0/1 adjacency matrix equivalent to the neighbor lists.
    pub fn neighbor_matrix(&self) -> Tensor {
        let n = self.num_nodes();
        let mut data = vec![0.0; n * n];
        for (i, list) in self.neighbors.iter().enumerate() {
            for &j in list {
                data[i * n + j] = 1.0;
            }
        }
        Tensor::from_vec(vec![n, n], data).expect("square matrix")
    }
}

/// Builds per-node neighbor lists for `n` nodes. Lists are ascending and
/// never contain the node itself. Fails for `n < 3`, where cycle and full
/// adjacency would coincide or degenerate.
pub fn build_adjacency(n: usize, kind: AdjacencyKind) -> Result<Vec<Vec<usize>>, GraphError> {
    if n < 3 {
        return Err(GraphError::TooFewNodes { nodes: n });
    }
    let lists = match kind {
        AdjacencyKind::Cycle => (0..n)
            .map(|i| {
                let mut pair = [ (i + n - 1) % n, (i + 1) % n ];
                pair.sort_unstable();
                pair.to_vec()
            })
            .collect(),
        AdjacencyKind::Full => (0..n)
            .map(|i| (0..n).filter(|&j| j != i).collect())
            .collect(),
    };
    Ok(lists)
}

/// Splits an utterance into `ceil(frames / graph_len)` cycle graphs of
/// exactly `graph_len` nodes. The final window is zero-padded and masked;
/// every window inherits the utterance label.
pub fn segment_utterance(
    utterance: &UtteranceFeatures,
    graph_len: usize,
) -> Result<Vec<FrameGraph>, GraphError> {
    let frames = utterance.num_frames();
    let dim = utterance.feature_dim();
    if frames == 0 {
        return Err(GraphError::EmptyUtterance {
            id: utterance.utterance_id.clone(),
        });
    }
    let neighbors = Arc::new(build_adjacency(graph_len, AdjacencyKind::Cycle)?);
    let data = utterance.frames.data();
    let segments = frames.div_ceil(graph_len);
    let mut graphs = Vec::with_capacity(segments);
    for s in 0..segments {
        let start = s * graph_len;
        let real = graph_len.min(frames - start);
        let mut features = vec![0.0; graph_len * dim];
        features[..real * dim].copy_from_slice(&data[start * dim..(start + real) * dim]);
        let mut mask = vec![false; graph_len];
        mask[..real].iter_mut().for_each(|m| *m = true);
        graphs.push(FrameGraph {
            node_features: Tensor::from_vec(vec![graph_len, dim], features).expect("window shape"),
            kind: AdjacencyKind::Cycle,
            neighbors: Arc::clone(&neighbors),
            mask,
            label: utterance.label,
        });
    }
    Ok(graphs)
}
