//! Compressed sparse row matrices.
//!
//! Every product in this module accumulates in ascending column (inner)
//! index order, so results are bit-reproducible and agree exactly with a
//! dense triple loop that sums over the inner index in the same order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCsr")]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Deserialize)]
struct RawCsr {
    n_rows: usize,
    n_cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl TryFrom<RawCsr> for SparseMatrix {
    type Error = Error;

    fn try_from(raw: RawCsr) -> Result<Self> {
        SparseMatrix::new(
            raw.n_rows,
            raw.n_cols,
            raw.row_offsets,
            raw.col_indices,
            raw.values,
        )
    }
}

impl SparseMatrix {
    /// Validates and assembles raw CSR arrays.
    pub fn new(
        n_rows: usize,
        n_cols: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if row_offsets.len() != n_rows + 1 {
            return Err(Error::Structure(format!(
                "row_offsets has length {}, expected {}",
                row_offsets.len(),
                n_rows + 1
            )));
        }
        if col_indices.len() != values.len() {
            return Err(Error::Structure(format!(
                "{} column indices but {} values",
                col_indices.len(),
                values.len()
            )));
        }
        if row_offsets[0] != 0 || row_offsets[n_rows] != values.len() {
            return Err(Error::Structure(
                "row_offsets must start at 0 and end at nnz".into(),
            ));
        }
        for r in 0..n_rows {
            let (lo, hi) = (row_offsets[r], row_offsets[r + 1]);
            if lo > hi {
                return Err(Error::Structure(format!("row_offsets decrease at row {r}")));
            }
            let cols = &col_indices[lo..hi];
            for (i, &c) in cols.iter().enumerate() {
                if c >= n_cols {
                    return Err(Error::Structure(format!(
                        "column {c} out of range in row {r} ({n_cols} columns)"
                    )));
                }
                if i > 0 && cols[i - 1] >= c {
                    return Err(Error::Structure(format!(
                        "columns in row {r} not strictly increasing"
                    )));
                }
            }
        }
        Ok(Self {
            n_rows,
            n_cols,
            row_offsets,
            col_indices,
            values,
        })
    }

    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self {
            n_rows,
            n_cols,
            row_offsets: vec![0; n_rows + 1],
            col_indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![1.0; n])
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        Self {
            n_rows: n,
            n_cols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: diag.to_vec(),
        }
    }

    /// Builds from `(row, col, value)` triplets in any order. Duplicate
    /// coordinates are rejected.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self> {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        sorted.sort_by_key(|t| (t.0, t.1));
        let mut row_offsets = vec![0usize; n_rows + 1];
        let mut col_indices = Vec::with_capacity(sorted.len());
        let mut values = Vec::with_capacity(sorted.len());
        for (idx, &(r, c, v)) in sorted.iter().enumerate() {
            if r >= n_rows {
                return Err(Error::Structure(format!(
                    "row {r} out of range ({n_rows} rows)"
                )));
            }
            if idx > 0 && sorted[idx - 1].0 == r && sorted[idx - 1].1 == c {
                return Err(Error::Structure(format!("duplicate entry ({r}, {c})")));
            }
            row_offsets[r + 1] += 1;
            col_indices.push(c);
            values.push(v);
        }
        for r in 0..n_rows {
            row_offsets[r + 1] += row_offsets[r];
        }
        Self::new(n_rows, n_cols, row_offsets, col_indices, values)
    }

    /// Stores every non-zero entry of a dense rank-2 tensor.
    pub fn from_dense(dense: &Tensor) -> Result<Self> {
        if dense.shape().len() != 2 {
            return Err(Error::Dimension("from_dense expects a matrix".into()));
        }
        let (r, c) = (dense.shape()[0], dense.shape()[1]);
        let mut row_offsets = Vec::with_capacity(r + 1);
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        row_offsets.push(0);
        for i in 0..r {
            for (j, &v) in dense.row(i).iter().enumerate() {
                if v != 0.0 {
                    col_indices.push(j);
                    values.push(v);
                }
            }
            row_offsets.push(values.len());
        }
        Ok(Self {
            n_rows: r,
            n_cols: c,
            row_offsets,
            col_indices,
            values,
        })
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.n_rows, self.n_cols]);
        for r in 0..self.n_rows {
            for (c, v) in self.row(r) {
                t.set2(r, c, v);
            }
        }
        t
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row_nnz(&self, r: usize) -> usize {
        self.row_offsets[r + 1] - self.row_offsets[r]
    }

    /// Stored `(col, value)` pairs of row `r`, ascending by column.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (lo, hi) = (self.row_offsets[r], self.row_offsets[r + 1]);
        self.col_indices[lo..hi]
            .iter()
            .copied()
            .zip(self.values[lo..hi].iter().copied())
    }

    /// Stored value at `(r, c)`, or `None` when the entry is structurally absent.
    pub fn get(&self, r: usize, c: usize) -> Option<f64> {
        let (lo, hi) = (self.row_offsets[r], self.row_offsets[r + 1]);
        self.col_indices[lo..hi]
            .binary_search(&c)
            .ok()
            .map(|p| self.values[lo + p])
    }

    /// Same sparsity pattern with replaced values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.nnz() {
            return Err(Error::Dimension(format!(
                "pattern has {} entries, got {} values",
                self.nnz(),
                values.len()
            )));
        }
        Ok(Self {
            values,
            ..self.clone()
        })
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            values: self.values.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn is_square(&self) -> bool {
        self.n_rows == self.n_cols
    }

    /// Exact structural and value symmetry.
    pub fn is_symmetric(&self) -> bool {
        if !self.is_square() {
            return false;
        }
        (0..self.n_rows).all(|r| self.row(r).all(|(c, v)| self.get(c, r) == Some(v)))
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.n_cols + 1];
        for &c in &self.col_indices {
            counts[c + 1] += 1;
        }
        for c in 0..self.n_cols {
            counts[c + 1] += counts[c];
        }
        let mut next = counts.clone();
        let mut col_indices = vec![0; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for r in 0..self.n_rows {
            for (c, v) in self.row(r) {
                let dst = next[c];
                col_indices[dst] = r;
                values[dst] = v;
                next[c] += 1;
            }
        }
        Self {
            n_rows: self.n_cols,
            n_cols: self.n_rows,
            row_offsets: counts,
            col_indices,
            values,
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n_rows)
            .map(|r| self.row(r).map(|(_, v)| v).sum())
            .collect()
    }

    pub fn diagonal_values(&self) -> Vec<f64> {
        (0..self.n_rows.min(self.n_cols))
            .map(|i| self.get(i, i).unwrap_or(0.0))
            .collect()
    }

    /// `self + other` over the union of both patterns.
    pub fn add(&self, other: &SparseMatrix) -> Result<SparseMatrix> {
        self.linear_combination(1.0, other, 1.0)
    }

    /// `a·self + b·other` over the union pattern.
    pub fn linear_combination(&self, a: f64, other: &SparseMatrix, b: f64) -> Result<Self> {
        if self.n_rows != other.n_rows || self.n_cols != other.n_cols {
            return Err(Error::Dimension(format!(
                "{}x{} + {}x{}",
                self.n_rows, self.n_cols, other.n_rows, other.n_cols
            )));
        }
        let mut row_offsets = Vec::with_capacity(self.n_rows + 1);
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        row_offsets.push(0);
        for r in 0..self.n_rows {
            let mut left = self.row(r).peekable();
            let mut right = other.row(r).peekable();
            loop {
                match (left.peek().copied(), right.peek().copied()) {
                    (Some((ca, va)), Some((cb, vb))) => {
                        if ca == cb {
                            col_indices.push(ca);
                            values.push(a * va + b * vb);
                            left.next();
                            right.next();
                        } else if ca < cb {
                            col_indices.push(ca);
                            values.push(a * va);
                            left.next();
                        } else {
                            col_indices.push(cb);
                            values.push(b * vb);
                            right.next();
                        }
                    }
                    (Some((ca, va)), None) => {
                        col_indices.push(ca);
                        values.push(a * va);
                        left.next();
                    }
                    (None, Some((cb, vb))) => {
                        col_indices.push(cb);
                        values.push(b * vb);
                        right.next();
                    }
                    (None, None) => break,
                }
            }
            row_offsets.push(values.len());
        }
        Ok(Self {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            row_offsets,
            col_indices,
            values,
        })
    }

    /// Sparse-sparse product `self · other` (row-wise Gustavson).
    pub fn matmul(&self, other: &SparseMatrix) -> Result<SparseMatrix> {
        if self.n_cols != other.n_rows {
            return Err(Error::Dimension(format!(
                "{}x{} · {}x{}",
                self.n_rows, self.n_cols, other.n_rows, other.n_cols
            )));
        }
        let m = other.n_cols;
        let mut acc = vec![0.0f64; m];
        let mut touched = vec![false; m];
        let mut cols: Vec<usize> = Vec::new();
        let mut row_offsets = Vec::with_capacity(self.n_rows + 1);
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        row_offsets.push(0);
        for r in 0..self.n_rows {
            for (k, a) in self.row(r) {
                for (c, b) in other.row(k) {
                    if !touched[c] {
                        touched[c] = true;
                        cols.push(c);
                    }
                    acc[c] += a * b;
                }
            }
            cols.sort_unstable();
            for &c in &cols {
                col_indices.push(c);
                values.push(acc[c]);
                acc[c] = 0.0;
                touched[c] = false;
            }
            cols.clear();
            row_offsets.push(values.len());
        }
        Ok(Self {
            n_rows: self.n_rows,
            n_cols: m,
            row_offsets,
            col_indices,
            values,
        })
    }

    /// Keeps the entries for which `keep(row, col, value)` holds.
    pub fn filter(&self, mut keep: impl FnMut(usize, usize, f64) -> bool) -> Self {
        let mut row_offsets = Vec::with_capacity(self.n_rows + 1);
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        row_offsets.push(0);
        for r in 0..self.n_rows {
            for (c, v) in self.row(r) {
                if keep(r, c, v) {
                    col_indices.push(c);
                    values.push(v);
                }
            }
            row_offsets.push(values.len());
        }
        Self {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            row_offsets,
            col_indices,
            values,
        }
    }

    /// Position of `(r, c)` in the values array.
    pub fn position(&self, r: usize, c: usize) -> Option<usize> {
        let (lo, hi) = (self.row_offsets[r], self.row_offsets[r + 1]);
        self.col_indices[lo..hi]
            .binary_search(&c)
            .ok()
            .map(|p| lo + p)
    }
}

/// Sparse-dense product with ascending-column accumulation per row.
pub fn spmm(m: &SparseMatrix, dense: &Tensor) -> Result<Tensor> {
    spmm_values(m, m.values(), dense)
}

/// [`spmm`] with the pattern of `m` and externally supplied values.
pub fn spmm_values(m: &SparseMatrix, values: &[f64], dense: &Tensor) -> Result<Tensor> {
    if dense.shape().is_empty() || dense.rows() != m.n_cols() || values.len() != m.nnz() {
        return Err(Error::Dimension(format!(
            "spmm {}x{} (nnz {}) · {:?}",
            m.n_rows(),
            m.n_cols(),
            values.len(),
            dense.shape()
        )));
    }
    let w = dense.row_len();
    let mut shape = dense.shape().to_vec();
    shape[0] = m.n_rows();
    let mut out = vec![0.0; m.n_rows() * w];
    let offsets = m.row_offsets();
    let cols = m.col_indices();
    for r in 0..m.n_rows() {
        let orow = &mut out[r * w..(r + 1) * w];
        for e in offsets[r]..offsets[r + 1] {
            let a = values[e];
            let drow = dense.row(cols[e]);
            for (o, d) in orow.iter_mut().zip(drow) {
                *o += a * d;
            }
        }
    }
    Tensor::new(shape, out)
}
