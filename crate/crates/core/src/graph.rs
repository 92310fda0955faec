//! Graph datasets and the degree-normalized operators built on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;
use crate::tensor::Tensor;

/// Disjoint train/validation/test node masks.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

impl Splits {
    pub fn empty(n: usize) -> Self {
        Self {
            train: vec![false; n],
            val: vec![false; n],
            test: vec![false; n],
        }
    }

    pub fn is_empty(&self) -> bool {
        !self.train.iter().chain(&self.val).chain(&self.test).any(|&b| b)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.train.len() != n || self.val.len() != n || self.test.len() != n {
            return Err(Error::Dimension(format!(
                "split masks must have length {n}"
            )));
        }
        for i in 0..n {
            let count = [self.train[i], self.val[i], self.test[i]]
                .iter()
                .filter(|&&b| b)
                .count();
            if count > 1 {
                return Err(Error::Validation(format!(
                    "node {i} appears in more than one split"
                )));
            }
        }
        Ok(())
    }
}

/// Indices where a mask is set.
pub fn mask_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &b)| b.then_some(i))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphDataset {
    pub name: String,
    pub n_nodes: usize,
    /// Binary, symmetric, zero diagonal.
    pub adjacency: SparseMatrix,
    /// `n_nodes × n_features`, row-major.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub splits: Splits,
}

impl GraphDataset {
    pub fn new(
        name: impl Into<String>,
        adjacency: SparseMatrix,
        features: Tensor,
        labels: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self> {
        let n = adjacency.n_rows();
        let ds = Self {
            name: name.into(),
            n_nodes: n,
            adjacency,
            features,
            labels,
            n_classes,
            splits: Splits::empty(n),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n_features(&self) -> usize {
        self.features.row_len()
    }

    pub fn n_edges(&self) -> usize {
        self.adjacency.nnz() / 2
    }

    pub fn with_splits(mut self, splits: Splits) -> Result<Self> {
        splits.validate(self.n_nodes)?;
        self.splits = splits;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_nodes;
        if !self.adjacency.is_square() || self.adjacency.n_rows() != n {
            return Err(Error::Dimension(format!(
                "adjacency is {}x{}, expected {n}x{n}",
                self.adjacency.n_rows(),
                self.adjacency.n_cols()
            )));
        }
        if !self.adjacency.is_symmetric() {
            return Err(Error::Structure("adjacency is not symmetric".into()));
        }
        if self.features.shape().len() != 2 || self.features.rows() != n {
            return Err(Error::Dimension(format!(
                "features have shape {:?}, expected {n} rows",
                self.features.shape()
            )));
        }
        if self.labels.len() != n {
            return Err(Error::Dimension(format!(
                "{} labels for {n} nodes",
                self.labels.len()
            )));
        }
        for (node, &label) in self.labels.iter().enumerate() {
            if label >= self.n_classes {
                return Err(Error::LabelOutOfRange {
                    node,
                    label,
                    n_classes: self.n_classes,
                });
            }
        }
        self.splits.validate(n)
    }
}

fn check_adjacency(adjacency: &SparseMatrix) -> Result<()> {
    if !adjacency.is_square() {
        return Err(Error::Structure(format!(
            "adjacency must be square, got {}x{}",
            adjacency.n_rows(),
            adjacency.n_cols()
        )));
    }
    if let Some(&v) = adjacency.values().iter().find(|&&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Validation(format!(
            "adjacency entries must be finite and non-negative, found {v}"
        )));
    }
    if !adjacency.is_symmetric() {
        return Err(Error::Structure("adjacency is not symmetric".into()));
    }
    if let Some(i) = (0..adjacency.n_rows()).find(|&i| adjacency.get(i, i).is_some()) {
        return Err(Error::Structure(format!(
            "adjacency already has a diagonal entry at node {i}; self-loops are added exactly once"
        )));
    }
    Ok(())
}

/// `Ã = (D+I)^{-1/2} (A+I) (D+I)^{-1/2}`.
pub fn normalize_adjacency(adjacency: &SparseMatrix) -> Result<SparseMatrix> {
    check_adjacency(adjacency)?;
    let n = adjacency.n_rows();
    let with_loops = adjacency.add(&SparseMatrix::identity(n))?;
    crate::filter::symmetric_renormalize(&with_loops)
}

/// `L = I − Ã`, the Laplacian of the self-loop-augmented graph.
pub fn normalized_laplacian(adjacency: &SparseMatrix) -> Result<SparseMatrix> {
    let a_tilde = normalize_adjacency(adjacency)?;
    SparseMatrix::identity(a_tilde.n_rows()).linear_combination(1.0, &a_tilde, -1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_graph(n: usize, p: f64, seed: u64) -> SparseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trip = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random::<f64>() < p {
                    trip.push((i, j, 1.0));
                    trip.push((j, i, 1.0));
                }
            }
        }
        SparseMatrix::from_triplets(n, n, &trip).unwrap()
    }

    fn dense_oracle(a: &SparseMatrix) -> Tensor {
        let n = a.n_rows();
        let mut hat = a.to_dense();
        for i in 0..n {
            hat.set2(i, i, hat.get2(i, i) + 1.0);
        }
        let deg: Vec<f64> = (0..n).map(|i| hat.row(i).iter().sum()).collect();
        let mut out = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                out.set2(i, j, hat.get2(i, j) / (deg[i] * deg[j]).sqrt());
            }
        }
        out
    }

    #[test]
    fn isolated_node() {
        let a = SparseMatrix::zeros(1, 1);
        assert_eq!(normalize_adjacency(&a).unwrap().to_dense().data(), &[1.0]);
        assert_eq!(normalized_laplacian(&a).unwrap().to_dense().data(), &[0.0]);
    }

    #[test]
    fn two_nodes() {
        let a = SparseMatrix::from_triplets(2, 2, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let t = normalize_adjacency(&a).unwrap();
        assert_eq!(t.to_dense().data(), &[0.5, 0.5, 0.5, 0.5]);
        let l = normalized_laplacian(&a).unwrap();
        assert_eq!(l.to_dense().data(), &[0.5, -0.5, -0.5, 0.5]);
    }

    #[test]
    fn matches_dense_oracle() {
        for seed in 0..5 {
            let a = random_graph(8, 0.4, seed);
            let got = normalize_adjacency(&a).unwrap();
            assert!(got.is_symmetric());
            assert!(got.values().iter().all(|&v| v > 0.0 && v <= 1.0));
            assert!(got.diagonal_values().iter().all(|&v| v > 0.0));
            assert!(got.to_dense().max_abs_diff(&dense_oracle(&a)) < 1e-12);
        }
    }

    #[test]
    fn laplacian_plus_filter_is_identity() {
        let a = random_graph(16, 0.3, 9);
        let mut sum = normalized_laplacian(&a).unwrap().to_dense();
        sum.add_assign(&normalize_adjacency(&a).unwrap().to_dense());
        assert!(sum.max_abs_diff(&Tensor::identity(16)) < 1e-15);
    }

    #[test]
    fn rejects_invalid_adjacency() {
        let asym = SparseMatrix::from_triplets(2, 2, &[(0, 1, 1.0)]).unwrap();
        assert!(matches!(normalize_adjacency(&asym), Err(Error::Structure(_))));
        let neg = SparseMatrix::from_triplets(2, 2, &[(0, 1, -1.0), (1, 0, -1.0)]).unwrap();
        assert!(matches!(normalize_adjacency(&neg), Err(Error::Validation(_))));
        let looped = SparseMatrix::identity(2);
        assert!(matches!(normalize_adjacency(&looped), Err(Error::Structure(_))));
    }

    #[test]
    fn dataset_validation() {
        let a = SparseMatrix::from_triplets(2, 2, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let x = Tensor::zeros(&[2, 3]);
        assert!(GraphDataset::new("t", a.clone(), x.clone(), vec![0, 2], 2).is_err());
        let ds = GraphDataset::new("t", a, x, vec![0, 1], 2).unwrap();
        assert_eq!(ds.n_edges(), 1);
        let bad = Splits {
            train: vec![true, false],
            val: vec![true, false],
            test: vec![false, false],
        };
        assert!(ds.with_splits(bad).is_err());
    }
}
