//! Gated-residual graph convolution over the word-similarity graph.

use crate::error::Result;
use crate::tensor::{Tape, Tensor};

/// Per-layer transform and gate weights, both `d x d`.
#[derive(Debug, Clone)]
pub struct GcnLayer {
    pub w_l: Tensor,
    pub w_g: Tensor,
}

/// One gated-residual layer:
/// `M = H W_l`, `C = s(H W_g)`, `H' = leaky_relu(M + (A_hat M) * C)`.
///
/// The residual path keeps each node's own transform; the gate scales what the
/// complete graph pours in from neighbors.
pub fn gcn_gated_layer(
    tape: &Tape,
    h: &Tensor,
    a_hat: &Tensor,
    layer: &GcnLayer,
    slope: f64,
) -> Result<Tensor> {
    let gate = tape.sigmoid(&tape.matmul(h, &layer.w_g)?)?;
    gcn_apply(tape, h, a_hat, &layer.w_l, &gate, slope)
}

/// The layer body with the gate supplied explicitly (tests drive limiting
/// cases through this entry point).
pub fn gcn_apply(
    tape: &Tape,
    h: &Tensor,
    a_hat: &Tensor,
    w_l: &Tensor,
    gate: &Tensor,
    slope: f64,
) -> Result<Tensor> {
    let m = tape.matmul(h, w_l)?;
    let aggregated = tape.matmul(a_hat, &m)?;
    let gated = tape.mul(&aggregated, gate)?;
    tape.leaky_relu(&tape.add(&m, &gated)?, slope)
}
