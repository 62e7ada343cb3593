//! Masked self-attention over the sentence structure graph.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Key/query/value projections for one layer. The first layer maps the tag
/// embedding width onto the node-state width; later layers are square.
#[derive(Debug, Clone)]
pub struct AttnLayer {
    pub w_k: Tensor,
    pub w_q: Tensor,
    pub w_v: Tensor,
}

/// One attention layer restricted to graph neighbors:
/// `a_ij = softmax_j in N(i) (q_i . k_j)`, `v'_i = sum_j a_ij val_j`.
/// Logits are unscaled; max subtraction inside the masked softmax keeps the
/// exponentials stable.
pub fn graph_attention_layer(
    tape: &Tape,
    v: &Tensor,
    neighbors: &[Vec<usize>],
    layer: &AttnLayer,
) -> Result<Tensor> {
    let n = v.shape()[0];
    if neighbors.len() != n {
        return Err(Error::contract(format!(
            "{n} nodes but {} neighbor sets",
            neighbors.len()
        )));
    }
    if let Some(i) = neighbors.iter().position(|s| s.is_empty()) {
        return Err(Error::contract(format!(
            "node {i} has no neighbors (missing self-loop)"
        )));
    }
    let keys = tape.matmul(v, &layer.w_k)?;
    let queries = tape.matmul(v, &layer.w_q)?;
    let values = tape.matmul(v, &layer.w_v)?;
    let logits = tape.matmul(&queries, &tape.transpose(&keys)?)?;
    let weights = tape.masked_softmax_rows(&logits, neighbors)?;
    tape.matmul(&weights, &values)
}
