//! Gated recurrent unit cells and per-direction sequence runs.

use rand_chacha::ChaCha8Rng;

use super::Mode;
use crate::error::Result;
use crate::tensor::{Tape, Tensor};

/// One direction's worth of GRU parameters.
#[derive(Debug, Clone)]
pub struct GruDirection {
    pub w_z: Tensor,
    pub u_z: Tensor,
    pub b_z: Tensor,
    pub w_r: Tensor,
    pub u_r: Tensor,
    pub b_r: Tensor,
    pub w_h: Tensor,
    pub u_h: Tensor,
    pub b_h: Tensor,
}

/// A bidirectional layer.
#[derive(Debug, Clone)]
pub struct GruLayer {
    pub fwd: GruDirection,
    pub bwd: GruDirection,
}

/// One GRU step:
/// `z = s(Wz x + Uz h + bz)`, `r = s(Wr x + Ur h + br)`,
/// `c = tanh(Wh x + Uh (r*h) + bh)`, `h' = (1-z)*h + z*c`.
pub fn gru_cell(tape: &Tape, x: &Tensor, h_prev: &Tensor, p: &GruDirection) -> Result<Tensor> {
    let z = {
        let s = tape.add(&tape.matmul(x, &p.w_z)?, &tape.matmul(h_prev, &p.u_z)?)?;
        tape.sigmoid(&tape.add_row_bias(&s, &p.b_z)?)?
    };
    let r = {
        let s = tape.add(&tape.matmul(x, &p.w_r)?, &tape.matmul(h_prev, &p.u_r)?)?;
        tape.sigmoid(&tape.add_row_bias(&s, &p.b_r)?)?
    };
    let c = {
        let gated = tape.mul(&r, h_prev)?;
        let s = tape.add(&tape.matmul(x, &p.w_h)?, &tape.matmul(&gated, &p.u_h)?)?;
        tape.tanh(&tape.add_row_bias(&s, &p.b_h)?)?
    };
    let ones = Tensor::ones(h_prev.shape())?;
    let keep = tape.mul(&tape.sub(&ones, &z)?, h_prev)?;
    let update = tape.mul(&z, &c)?;
    tape.add(&keep, &update)
}

/// Run one direction over an `n x d_in` sequence; the three input projections
/// are batched into single matmuls, the recurrence stays step-by-step.
/// Returns per-position `1 x h` states in sequence order.
pub(crate) fn run_direction(
    tape: &Tape,
    x: &Tensor,
    p: &GruDirection,
    reverse: bool,
) -> Result<Vec<Tensor>> {
    let n = x.shape()[0];
    let hidden = p.u_z.shape()[0];
    let xz = tape.add_row_bias(&tape.matmul(x, &p.w_z)?, &p.b_z)?;
    let xr = tape.add_row_bias(&tape.matmul(x, &p.w_r)?, &p.b_r)?;
    let xh = tape.add_row_bias(&tape.matmul(x, &p.w_h)?, &p.b_h)?;

    let ones = Tensor::ones(&[1, hidden])?;
    let mut h = Tensor::zeros(&[1, hidden])?;
    let mut states = Vec::with_capacity(n);
    let order: Vec<usize> = if reverse {
        (0..n).rev().collect()
    } else {
        (0..n).collect()
    };
    for &t in &order {
        let z = tape.sigmoid(&tape.add(
            &tape.gather_rows(&xz, &[t])?,
            &tape.matmul(&h, &p.u_z)?,
        )?)?;
        let r = tape.sigmoid(&tape.add(
            &tape.gather_rows(&xr, &[t])?,
            &tape.matmul(&h, &p.u_r)?,
        )?)?;
        let c = tape.tanh(&tape.add(
            &tape.gather_rows(&xh, &[t])?,
            &tape.matmul(&tape.mul(&r, &h)?, &p.u_h)?,
        )?)?;
        let keep = tape.mul(&tape.sub(&ones, &z)?, &h)?;
        h = tape.add(&keep, &tape.mul(&z, &c)?)?;
        states.push(h.clone());
    }
    if reverse {
        states.reverse();
    }
    Ok(states)
}

/// Two stacked bidirectional layers over per-position `[word, tag]`
/// concatenations; inter-layer dropout applies in training mode only.
pub fn encode_sequence(
    tape: &Tape,
    words: &Tensor,
    tags: &Tensor,
    layers: &[GruLayer],
    mode: &mut Mode<'_>,
) -> Result<Tensor> {
    let mut input = tape.concat_cols(&[words, tags])?;
    for (i, layer) in layers.iter().enumerate() {
        if i > 0 {
            input = mode.apply_dropout(tape, &input)?;
        }
        let f = run_direction(tape, &input, &layer.fwd, false)?;
        let b = run_direction(tape, &input, &layer.bwd, true)?;
        let f_mat = tape.stack_rows(&f)?;
        let b_mat = tape.stack_rows(&b)?;
        input = tape.concat_cols(&[&f_mat, &b_mat])?;
    }
    Ok(input)
}

/// Dropout mask support threaded through forward passes.
pub(crate) fn make_mask(
    tape: &Tape,
    shape: &[usize],
    rate: f64,
    rng: &mut ChaCha8Rng,
    x: &Tensor,
) -> Result<Tensor> {
    let mask = crate::train::dropout_mask(shape, rate, rng, true)?;
    tape.mul(x, &mask)
}
