//! The complete word-similarity graph over a sentence and its symmetric
//! normalized adjacency.
//!
//! Edge weights are cosine similarities of the static word vectors, clamped at
//! zero so the degree normalization stays real; the diagonal is pinned to 1 so
//! every degree is positive even for a one-word sentence.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-sentence similarity graph: raw weights `A`, degrees `D`, and the
/// normalized adjacency `A_hat = D^{-1/2} A D^{-1/2}`, all row-major n x n.
#[derive(Debug, Clone)]
pub struct SimilarityGraph {
    pub n: usize,
    pub a: Vec<f64>,
    pub degree: Vec<f64>,
    /// Shared so forward passes can wrap it without copying.
    pub a_hat: Arc<Vec<f64>>,
}

/// `A_hat[i][j] = A[i][j] / sqrt(D_i * D_j)` for a symmetric nonnegative
/// matrix with positive row sums.
pub fn normalize_adjacency(a: &[f64], n: usize) -> Result<Vec<f64>> {
    if a.len() != n * n {
        return Err(Error::contract(format!(
            "adjacency of {} entries is not {n}x{n}",
            a.len()
        )));
    }
    let mut degree = vec![0.0; n];
    for (i, row) in a.chunks_exact(n).enumerate() {
        degree[i] = row.iter().sum();
        if degree[i] <= 0.0 {
            return Err(Error::contract(format!("row {i} has non-positive sum")));
        }
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut a_hat = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a_hat[i * n + j] = a[i * n + j] * inv_sqrt[i] * inv_sqrt[j];
        }
    }
    Ok(a_hat)
}

/// Build the similarity graph from one sentence's `n x d` word vectors.
pub fn build_wsg(word_vectors: &Tensor) -> Result<SimilarityGraph> {
    let shape = word_vectors.shape().to_vec();
    let (n, d) = match shape.as_slice() {
        [n, d] => (*n, *d),
        other => {
            return Err(Error::contract(format!(
                "build_wsg expects an n x d matrix, got {other:?}"
            )))
        }
    };
    let data = word_vectors.data();
    let mut norms = vec![0.0; n];
    for i in 0..n {
        let row = &data[i * d..(i + 1) * d];
        norms[i] = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norms[i] == 0.0 {
            return Err(Error::contract(format!(
                "word vector row {i} has zero norm"
            )));
        }
    }
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        a[i * n + i] = 1.0;
        for j in (i + 1)..n {
            let ri = &data[i * d..(i + 1) * d];
            let rj = &data[j * d..(j + 1) * d];
            let dot: f64 = ri.iter().zip(rj).map(|(x, y)| x * y).sum();
            let cos = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            let w = cos.max(0.0);
            a[i * n + j] = w;
            a[j * n + i] = w;
        }
    }
    let degree: Vec<f64> = a.chunks_exact(n).map(|row| row.iter().sum()).collect();
    let a_hat = normalize_adjacency(&a, n)?;
    Ok(SimilarityGraph {
        n,
        a,
        degree,
        a_hat: Arc::new(a_hat),
    })
}
