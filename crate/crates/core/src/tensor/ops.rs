//! Forward and backward rules for every tape-recorded operation.

use super::{Activation, Tape, Tensor};
use crate::error::{Error, Result};

/// `c += alpha * a(n x k) . b(k x m)`, with optional transposes expressed
/// through strides. Row-major throughout.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    n: usize,
    k: usize,
    m: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    if n == 1 && a_strides == (k as isize, 1) && b_strides == (m as isize, 1) && beta == 1.0 {
        // Row-vector times matrix: an axpy sweep beats gemm packing here.
        for (ak, brow) in a.iter().zip(b.chunks_exact(m)) {
            if *ak == 0.0 {
                continue;
            }
            for (cj, bj) in c.iter_mut().zip(brow) {
                *cj += ak * bj;
            }
        }
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

fn require_rank2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::ShapeMismatch {
            op,
            lhs: other.to_vec(),
            rhs: vec![],
        }),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

#[cfg(debug_assertions)]
fn debug_check_finite(data: &[f64], op: &str) {
    debug_assert!(
        data.iter().all(|v| v.is_finite()),
        "non-finite output in {op}"
    );
}

#[cfg(not(debug_assertions))]
fn debug_check_finite(_data: &[f64], _op: &str) {}

impl Tape {
    /// Standard matrix product `a(n x k) . b(k x m)`.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (n, k) = require_rank2(a, "matmul")?;
        let (k2, m) = require_rank2(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; n * m];
        gemm_acc(
            n,
            k,
            m,
            &a.data(),
            (k as isize, 1),
            &b.data(),
            (m as isize, 1),
            &mut out,
            0.0,
        );
        debug_check_finite(&out, "matmul");
        let rg = self.wants_grad(&[a, b]);
        let output = Tensor::from_op(vec![n, m], out, rg);
        if rg {
            let a = a.clone();
            let b = b.clone();
            self.record(
                &output,
                Box::new(move |dc, store| {
                    // dA += dC . B^T
                    if a.requires_grad() {
                        store.with_entry(&a, |da| {
                            gemm_acc(n, m, k, dc, (m as isize, 1), &b.data(), (1, m as isize), da, 1.0);
                        });
                    }
                    // dB += A^T . dC
                    if b.requires_grad() {
                        store.with_entry(&b, |db| {
                            gemm_acc(k, n, m, &a.data(), (1, k as isize), dc, (m as isize, 1), db, 1.0);
                        });
                    }
                }),
            );
        }
        Ok(output)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self, a: &Tensor) -> Result<Tensor> {
        let (n, m) = require_rank2(a, "transpose")?;
        let src = a.data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = src[i * m + j];
            }
        }
        drop(src);
        let rg = self.wants_grad(&[a]);
        let output = Tensor::from_op(vec![m, n], out, rg);
        if rg {
            let a = a.clone();
            self.record(
                &output,
                Box::new(move |dc, store| {
                    store.with_entry(&a, |da| {
                        for i in 0..n {
                            for j in 0..m {
                                da[i * m + j] += dc[j * n + i];
                            }
                        }
                    });
                }),
            );
        }
        Ok(output)
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape(a, b, "add")?;
        let out: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
        debug_check_finite(&out, "add");
        let rg = self.wants_grad(&[a, b]);
        let output = Tensor::from_op(a.shape().to_vec(), out, rg);
        if rg {
            let a = a.clone();
            let b = b.clone();
            self.record(
                &output,
                Box::new(move |dc, store| {
                    if a.requires_grad() {
                        store.with_entry(&a, |da| {
                            for (d, g) in da.iter_mut().zip(dc) {
                                *d += g;
                            }
                        });
                    }
                    if b.requires_grad() {
                        store.with_entry(&b, |db| {
                            for (d, g) in db.iter_mut().zip(dc) {
                                *d += g;
                            }
                        });
                    }
                }),
            );
        }
        Ok(output)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape(a, b, "sub")?;
        let out: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x - y).collect();
        debug_check_finite(&out, "sub");
        let rg = self.wants_grad(&[a, b]);
        let output = Tensor::from_op(a.shape().to_vec(), out, rg);
        if rg {
            let a = a.clone();
            let b = b.clone();
            self.record(
                &output,
                Box::new(move |dc, store| {
                    if a.requires_grad() {
                        store.with_entry(&a, |da| {
                            for (d, g) in da.iter_mut().zip(dc) {
                                *d += g;
                            }
                        });
                    }
                    if b.requires_grad() {
                        store.with_entry(&b, |db| {
                            for (d, g) in db.iter_mut().zip(dc) {
                                *d -= g;
                            }
                        });
                    }
                }),
            );
        }
        Ok(output)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape(a, b, "mul")?;
        let out: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
        debug_check_finite(&out, "mul");
        let rg = self.wants_grad(&[a, b]);
        let output = Tensor::from_op(a.shape().to_vec(), out, rg);
        if rg {
            let a = a.clone();
            let b = b.clone();
            self.record(
                &output,
                Box::new(move |dc, store| {
                    if a.requires_grad() {
                        let bd = b.data();
                        store.with_entry(&a, |da| {
                            for i in 0..dc.len() {
                                da[i] += dc[i] * bd[i];
                            }
                        });
                    }
                    if b.requires_grad() {
                        let ad = a.data();
                        store.with_entry(&b, |db| {
                            for i in 0..dc.len() {
                                db[i] += dc[i] * ad[i];
                            }
                        });
                    }
                }),
            );
        }
        Ok(output)
    }

    /// Add a length-d row vector to every row of an n x d matrix. The only
    /// broadcast this engine supports.
    pub fn add_row_bias(&self, m: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (rows, cols) = require_rank2(m, "add_row_bias")?;
        let blen = bias.numel();
        let bias_ok = matches!(bias.shape(), [d] if *d == cols)
            || matches!(bias.shape(), [1, d] if *d == cols);
        if !bias_ok {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                lhs: m.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        debug_assert_eq!(blen, cols);
        let bd = bias.data();
        let out: Vec<f64> = m
            .data()
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(bd.iter()).map(|(x, b)| x + b).collect::<Vec<_>>())
            .collect();
        drop(bd);
        debug_check_finite(&out, "add_row_bias");
        let rg = self.wants_grad(&[m, bias]);
        let output = Tensor::from_op(vec![rows, cols], out, rg);
        if rg {
            let m = m.clone();
            let bias = bias.clone();
            self.record(
                &output,
                Box::new(move |dc, store| {
                    if m.requires_grad() {
                        store.with_entry(&m, |dm| {
                            for (d, g) in dm.iter_mut().zip(dc) {
                                *d += g;
                            }
                        });
                    }
                    if bias.requires_grad() {
                        store.with_entry(&bias, |db| {
                            for row in dc.chunks_exact(cols) {
                                for (d, g) in db.iter_mut().zip(row) {
                                    *d += g;
                                }
                            }
                        });
                    }
                }),
            );
        }
        Ok(output)
    }

    /// Elementwise activation.
    pub fn activate(&self, x: &Tensor, kind: Activation) -> Result<Tensor> {
        if let Activation::LeakyRelu(slope) = kind {
            if !(0.0..1.0).contains(&slope) {
                return Err(Error::contract(format!(
                    "leaky_relu slope must be in [0, 1), got {slope}"
                )));
            }
        }
        let out: Vec<f64> = x
            .data()
            .iter()
            .map(|&v| match kind {
                Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
                Activation::Tanh => v.tanh(),
                Activation::LeakyRelu(s) => {
                    if v >= 0.0 {
                        v
                    } else {
                        s * v
                    }
                }
            })
            .collect();
        debug_check_finite(&out, "activate");
        let rg = self.wants_grad(&[x]);
        let output = Tensor::from_op(x.shape().to_vec(), out, rg);
        if rg {
            let x = x.clone();
            let y = output.clone();
            self.record(
                &output,
                Box::new(move |dc, store| {
                    let xd = x.data();
                    let yd = y.data();
                    store.with_entry(&x, |dx| {
                        for i in 0..dc.len() {
                            let local = match kind {
                                Activation::Sigmoid => yd[i] * (1.0 - yd[i]),
                                Activation::Tanh => 1.0 - yd[i] * yd[i],
                                Activation::LeakyRelu(s) => {
                                    // Derivative at exactly 0 is the slope.
                                    if xd[i] > 0.0 {
                                        1.0
                                    } else {
                                        s
                                    }
                                }
                            };
                            dx[i] += dc[i] * local;
                        }
                    });
                }),
            );
        }
        Ok(output)
    }

    pub fn sigmoid(&self, x: &Tensor) -> Result<Tensor> {
        self.activate(x, Activation::Sigmoid)
    }

    pub fn tanh(&self, x: &Tensor) -> Result<Tensor> {
        self.activate(x, Activation::Tanh)
    }

    pub fn leaky_relu(&self, x: &Tensor, slope: f64) -> Result<Tensor> {
        self.activate(x, Activation::LeakyRelu(slope))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self, x: &Tensor) -> Result<Tensor> {
        let (rows, cols) = x.dims2();
        let mut out = vec![0.0; rows * cols];
        {
            let xd = x.data();
            for r in 0..rows {
                let row = &xd[r * cols..(r + 1) * cols];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let dst = &mut out[r * cols..(r + 1) * cols];
                let mut sum = 0.0;
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d = (v - max).exp();
                    sum += *d;
                }
                for d in dst.iter_mut() {
                    *d /= sum;
                }
            }
        }
        debug_check_finite(&out, "softmax_rows");
        let rg = self.wants_grad(&[x]);
        let output = Tensor::from_op(x.shape().to_vec(), out, rg);
        if rg {
            let x = x.clone();
            let y = output.clone();
            self.record(
                &output,
                Box::new(move |dc, store| {
                    let yd = y.data();
                    store.with_entry(&x, |dx| {
                        for r in 0..rows {
                            let base = r * cols;
                            let yrow = &yd[base..base + cols];
                            let grow = &dc[base..base + cols];
                            let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                            for j in 0..cols {
                                dx[base + j] += yrow[j] * (grow[j] - dot);
                            }
                        }
                    });
                }),
            );
        }
        Ok(output)
    }

    /// Softmax over a per-row index set; entries outside the set are exactly 0.
    pub fn masked_softmax_rows(&self, x: &Tensor, mask: &[Vec<usize>]) -> Result<Tensor> {
        let (rows, cols) = require_rank2(x, "masked_softmax_rows")?;
        if mask.len() != rows {
            return Err(Error::contract(format!(
                "mask has {} rows, input has {rows}",
                mask.len()
            )));
        }
        for (r, set) in mask.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::contract(format!(
                    "masked softmax row {r} has an empty index set"
                )));
            }
            if let Some(&bad) = set.iter().find(|&&j| j >= cols) {
                return Err(Error::contract(format!(
                    "masked softmax row {r} references column {bad}, width is {cols}"
                )));
            }
        }
        let mut out = vec![0.0; rows * cols];
        {
            let xd = x.data();
            for (r, set) in mask.iter().enumerate() {
                let base = r * cols;
                let max = set
                    .iter()
                    .map(|&j| xd[base + j])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for &j in set {
                    let e = (xd[base + j] - max).exp();
                    out[base + j] = e;
                    sum += e;
                }
                for &j in set {
                    out[base + j] /= sum;
                }
            }
        }
        debug_check_finite(&out, "masked_softmax_rows");
        let rg = self.wants_grad(&[x]);
        let output = Tensor::from_op(vec![rows, cols], out, rg);
        if rg {
            let x = x.clone();
            let y = output.clone();
            let mask = mask.to_vec();
            self.record(
                &output,
                Box::new(move |dc, store| {
                    let yd = y.data();
                    store.with_entry(&x, |dx| {
                        for (r, set) in mask.iter().enumerate() {
                            let base = r * cols;
                            let dot: f64 =
                                set.iter().map(|&j| yd[base + j] * dc[base + j]).sum();
                            for &j in set {
                                dx[base + j] += yd[base + j] * (dc[base + j] - dot);
                            }
                        }
                    });
                }),
            );
        }
        Ok(output)
    }

    /// Concatenate rank-2 tensors with equal row counts along the last axis.
    pub fn concat_cols(&self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols of zero tensors"));
        }
        let (rows, _) = require_rank2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = require_rank2(p, "concat_cols")?;
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let pd = p.data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&pd[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let rg = self.wants_grad(parts);
        let output = Tensor::from_op(vec![rows, total], out, rg);
        if rg {
            let parts: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
            self.record(
                &output,
                Box::new(move |dc, store| {
                    let mut offset = 0;
                    for (p, &w) in parts.iter().zip(&widths) {
                        if p.requires_grad() {
                            store.with_entry(p, |dp| {
                                for r in 0..rows {
                                    for j in 0..w {
                                        dp[r * w + j] += dc[r * total + offset + j];
                                    }
                                }
                            });
                        }
                        offset += w;
                    }
                }),
            );
        }
        Ok(output)
    }

    /// Stack equal-width rows (rank-1 `[d]` or rank-2 `1 x d`) into an `n x d`
    /// matrix.
    pub fn stack_rows(&self, rows: &[Tensor]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::contract("stack_rows of zero tensors"));
        }
        let width = rows[0].numel();
        for t in rows {
            let ok = matches!(t.shape(), [d] if *d == width)
                || matches!(t.shape(), [1, d] if *d == width);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "stack_rows",
                    lhs: rows[0].shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let n = rows.len();
        let mut out = Vec::with_capacity(n * width);
        for t in rows {
            out.extend_from_slice(&t.data());
        }
        let inputs: Vec<&Tensor> = rows.iter().collect();
        let rg = self.wants_grad(&inputs);
        let output = Tensor::from_op(vec![n, width], out, rg);
        if rg {
            let rows: Vec<Tensor> = rows.to_vec();
            self.record(
                &output,
                Box::new(move |dc, store| {
                    for (i, t) in rows.iter().enumerate() {
                        if t.requires_grad() {
                            store.with_entry(t, |dt| {
                                for (d, g) in dt.iter_mut().zip(&dc[i * width..(i + 1) * width]) {
                                    *d += g;
                                }
                            });
                        }
                    }
                }),
            );
        }
        Ok(output)
    }

    /// Embedding lookup: select rows of `table` by index. Duplicate indices
    /// accumulate their gradients into the same row.
    pub fn gather_rows(&self, table: &Tensor, indices: &[usize]) -> Result<Tensor> {
        let (rows, cols) = require_rank2(table, "gather_rows")?;
        if indices.is_empty() {
            return Err(Error::contract("gather_rows with no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!(
                "gather_rows index {bad} out of range for {rows} rows"
            )));
        }
        let td = table.data();
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(&td[i * cols..(i + 1) * cols]);
        }
        drop(td);
        let rg = self.wants_grad(&[table]);
        let output = Tensor::from_op(vec![indices.len(), cols], out, rg);
        if rg {
            let table = table.clone();
            let indices = indices.to_vec();
            self.record(
                &output,
                Box::new(move |dc, store| {
                    store.with_entry(&table, |dt| {
                        for (k, &i) in indices.iter().enumerate() {
                            for j in 0..cols {
                                dt[i * cols + j] += dc[k * cols + j];
                            }
                        }
                    });
                }),
            );
        }
        Ok(output)
    }

    /// Per-row column selection: `out[i] = m[i, cols[i]]`.
    pub fn pick(&self, m: &Tensor, cols: &[usize]) -> Result<Tensor> {
        let (rows, width) = require_rank2(m, "pick")?;
        if cols.len() != rows {
            return Err(Error::contract(format!(
                "pick needs one column per row: {} rows, {} indices",
                rows,
                cols.len()
            )));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= width) {
            return Err(Error::contract(format!(
                "pick column {bad} out of range for width {width}"
            )));
        }
        let md = m.data();
        let out: Vec<f64> = cols.iter().enumerate().map(|(i, &c)| md[i * width + c]).collect();
        drop(md);
        let rg = self.wants_grad(&[m]);
        let output = Tensor::from_op(vec![rows], out, rg);
        if rg {
            let m = m.clone();
            let cols = cols.to_vec();
            self.record(
                &output,
                Box::new(move |dc, store| {
                    store.with_entry(&m, |dm| {
                        for (i, &c) in cols.iter().enumerate() {
                            dm[i * width + c] += dc[i];
                        }
                    });
                }),
            );
        }
        Ok(output)
    }

    /// `max(x, floor)` elementwise; the derivative is 1 wherever `x >= floor`.
    pub fn clamp_min(&self, x: &Tensor, floor: f64) -> Result<Tensor> {
        let out: Vec<f64> = x.data().iter().map(|&v| v.max(floor)).collect();
        let rg = self.wants_grad(&[x]);
        let output = Tensor::from_op(x.shape().to_vec(), out, rg);
        if rg {
            let x = x.clone();
            self.record(
                &output,
                Box::new(move |dc, store| {
                    let xd = x.data();
                    store.with_entry(&x, |dx| {
                        for i in 0..dc.len() {
                            if xd[i] >= floor {
                                dx[i] += dc[i];
                            }
                        }
                    });
                }),
            );
        }
        Ok(output)
    }

    /// Natural log, elementwise. Requires strictly positive input.
    pub fn log(&self, x: &Tensor) -> Result<Tensor> {
        if x.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::NonFinite("log of a non-positive value".into()));
        }
        let out: Vec<f64> = x.data().iter().map(|&v| v.ln()).collect();
        let rg = self.wants_grad(&[x]);
        let output = Tensor::from_op(x.shape().to_vec(), out, rg);
        if rg {
            let x = x.clone();
            self.record(
                &output,
                Box::new(move |dc, store| {
                    let xd = x.data();
                    store.with_entry(&x, |dx| {
                        for i in 0..dc.len() {
                            dx[i] += dc[i] / xd[i];
                        }
                    });
                }),
            );
        }
        Ok(output)
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&self, x: &Tensor) -> Result<Tensor> {
        let total: f64 = x.data().iter().sum();
        let rg = self.wants_grad(&[x]);
        let output = Tensor::from_op(vec![1], vec![total], rg);
        if rg {
            let x = x.clone();
            self.record(
                &output,
                Box::new(move |dc, store| {
                    store.with_entry(&x, |dx| {
                        for d in dx.iter_mut() {
                            *d += dc[0];
                        }
                    });
                }),
            );
        }
        Ok(output)
    }

    /// Mean of all entries, as a `[1]` tensor.
    pub fn mean(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.numel() as f64;
        let total: f64 = x.data().iter().sum();
        let rg = self.wants_grad(&[x]);
        let output = Tensor::from_op(vec![1], vec![total / n], rg);
        if rg {
            let x = x.clone();
            self.record(
                &output,
                Box::new(move |dc, store| {
                    store.with_entry(&x, |dx| {
                        let g = dc[0] / n;
                        for d in dx.iter_mut() {
                            *d += g;
                        }
                    });
                }),
            );
        }
        Ok(output)
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&self, x: &Tensor, factor: f64) -> Result<Tensor> {
        if !factor.is_finite() {
            return Err(Error::NonFinite("scale factor".into()));
        }
        let out: Vec<f64> = x.data().iter().map(|&v| v * factor).collect();
        let rg = self.wants_grad(&[x]);
        let output = Tensor::from_op(x.shape().to_vec(), out, rg);
        if rg {
            let x = x.clone();
            self.record(
                &output,
                Box::new(move |dc, store| {
                    store.with_entry(&x, |dx| {
                        for i in 0..dc.len() {
                            dx[i] += dc[i] * factor;
                        }
                    });
                }),
            );
        }
        Ok(output)
    }
}
