use crate::error::{Error, Result};
use crate::numerics::{Matrix, Scalar};

use super::RouterParams;

/// Router decision for a batch of tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingOutput<T> {
    /// `tokens × N`
    pub logits: Matrix<T>,
    /// Full softmax over experts, `tokens × N`.
    pub dense_gates: Matrix<T>,
    /// Per token, the `top_k` experts in descending gate order.
    pub active_indices: Vec<Vec<usize>>,
    /// Per token, the selected gates renormalized to sum to one.
    pub active_gates: Vec<Vec<T>>,
}

impl<T: Scalar> GatingOutput<T> {
    pub(crate) fn from_parts(logits: Matrix<T>, dense_gates: Matrix<T>, top_k: usize) -> Self {
        let mut active_indices = Vec::with_capacity(dense_gates.rows());
        let mut active_gates = Vec::with_capacity(dense_gates.rows());
        for r in 0..dense_gates.rows() {
            let row = dense_gates.row(r);
            let idx = top_k_indices(row, top_k);
            let total = idx.iter().fold(T::zero(), |acc, &i| acc + row[i]);
            active_gates.push(idx.iter().map(|&i| row[i] / total).collect());
            active_indices.push(idx);
        }
        Self {
            logits,
            dense_gates,
            active_indices,
            active_gates,
        }
    }

    pub fn tokens(&self) -> usize {
        self.dense_gates.rows()
    }

    /// Tokens × N matrix holding the renormalized gate of each active expert
    /// and zero elsewhere.
    pub fn sparse_gates(&self) -> Matrix<T> {
        let mut m = Matrix::zeros(self.dense_gates.rows(), self.dense_gates.cols());
        for (t, (idx, gates)) in self.active_indices.iter().zip(&self.active_gates).enumerate() {
            for (&i, &g) in idx.iter().zip(gates) {
                m.set(t, i, g);
            }
        }
        m
    }
}

/// Indices of the `k` largest entries, largest first; equal values keep
/// the lower index first.
pub fn top_k_indices<T: Scalar>(row: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).expect("finite gates").then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Softmax-then-top-k routing of `x` (`tokens × d_model`).
pub fn route<T: Scalar>(router: &RouterParams<T>, x: &Matrix<T>, top_k: usize) -> Result<GatingOutput<T>> {
    let n = router.w_router.cols();
    if top_k == 0 || top_k > n {
        return Err(Error::Config(format!("top_k={top_k} must lie in 1..={n}")));
    }
    let logits = x.matmul(&router.w_router)?;
    let dense = logits.softmax_rows()?;
    Ok(GatingOutput::from_parts(logits, dense, top_k))
}
