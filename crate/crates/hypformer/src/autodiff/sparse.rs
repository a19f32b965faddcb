//! Constant sparse matrices (CSR) for graph aggregation.
//!
//! Adjacency weights are fixed per dataset, so the matrix itself never
//! receives gradients; `spmm` propagates to the dense operand only.

use ndarray::Array2;
use std::sync::Arc;

use super::{finish_op, Tensor};

#[derive(Debug)]
struct Csr {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<f64>,
}

impl Csr {
    fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Csr {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        // merge duplicates
        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(triplets.len());
        for (r, c, v) in triplets {
            assert!(r < rows && c < cols, "triplet ({r},{c}) out of bounds");
            match merged.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => merged.push((r, c, v)),
            }
        }
        let mut indptr = vec![0usize; rows + 1];
        for &(r, _, _) in &merged {
            indptr[r + 1] += 1;
        }
        for i in 0..rows {
            indptr[i + 1] += indptr[i];
        }
        let indices = merged.iter().map(|&(_, c, _)| c).collect();
        let data = merged.iter().map(|&(_, _, v)| v).collect();
        Csr {
            rows,
            cols,
            indptr,
            indices,
            data,
        }
    }

    fn dot_dense(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(self.cols, x.nrows(), "spmm inner dimension mismatch");
        let mut out = Array2::zeros((self.rows, x.ncols()));
        for r in 0..self.rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                let c = self.indices[k];
                let w = self.data[k];
                let mut orow = out.row_mut(r);
                orow.scaled_add(w, &x.row(c));
            }
        }
        out
    }
}

/// Immutable sparse matrix with its transpose precomputed for backward.
#[derive(Clone, Debug)]
pub struct SparseMatrix {
    fwd: Arc<Csr>,
    bwd: Arc<Csr>,
}

impl SparseMatrix {
    /// Build from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        triplets: Vec<(usize, usize, f64)>,
    ) -> SparseMatrix {
        let transposed = triplets.iter().map(|&(r, c, v)| (c, r, v)).collect();
        SparseMatrix {
            fwd: Arc::new(Csr::from_triplets(rows, cols, triplets)),
            bwd: Arc::new(Csr::from_triplets(cols, rows, transposed)),
        }
    }

    pub fn rows(&self) -> usize {
        self.fwd.rows
    }

    pub fn cols(&self) -> usize {
        self.fwd.cols
    }

    pub fn nnz(&self) -> usize {
        self.fwd.data.len()
    }

    /// Sparse-dense product A @ x with gradient flowing to `x`.
    pub fn spmm(&self, x: &Tensor) -> Tensor {
        let values = x.with_values(|v| self.fwd.dot_dense(v));
        let xc = x.clone();
        let back = Arc::clone(&self.bwd);
        finish_op("spmm", values, x.requires_grad(), move |out| {
            Box::new(move || {
                let Some(g) = out.take_grad() else { return };
                xc.accumulate_grad(back.dot_dense(&g));
            })
        })
    }
}
