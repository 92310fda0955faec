//! Stochastic block model graphs with Gaussian class-mean features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphDataset;
use crate::sparse::SparseMatrix;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbmSpec {
    pub n_per_class: usize,
    pub n_classes: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    /// Euclidean distance between any two class means.
    pub signal: f64,
    pub seed: u64,
}

impl Default for SbmSpec {
    fn default() -> Self {
        Self {
            n_per_class: 100,
            n_classes: 2,
            p_in: 0.05,
            p_out: 0.005,
            feature_dim: 16,
            signal: 1.0,
            seed: 0,
        }
    }
}

/// Node `i` belongs to class `i / n_per_class`. Class `c` has mean
/// `signal/√2 · e_c`, so means are pairwise `signal` apart; features add
/// unit-variance Gaussian noise.
pub fn make_sbm(spec: &SbmSpec) -> Result<GraphDataset> {
    if spec.n_per_class == 0 || spec.n_classes < 1 {
        return Err(Error::Validation("SBM needs at least one node and one class".into()));
    }
    if spec.feature_dim < spec.n_classes {
        return Err(Error::Validation(format!(
            "feature_dim {} cannot hold {} orthogonal class means",
            spec.feature_dim, spec.n_classes
        )));
    }
    if !(0.0 <= spec.p_out && spec.p_out <= spec.p_in && spec.p_in <= 1.0) {
        return Err(Error::Validation(format!(
            "need 0 <= p_out <= p_in <= 1, got p_in={} p_out={}",
            spec.p_in, spec.p_out
        )));
    }
    if !(spec.signal >= 0.0 && spec.signal.is_finite()) {
        return Err(Error::Validation(format!("signal must be >= 0, got {}", spec.signal)));
    }
    let n = spec.n_per_class * spec.n_classes;
    let labels: Vec<usize> = (0..n).map(|i| i / spec.n_per_class).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut trip = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if labels[i] == labels[j] { spec.p_in } else { spec.p_out };
            if rng.random::<f64>() < p {
                trip.push((i, j, 1.0));
                trip.push((j, i, 1.0));
            }
        }
    }
    let adjacency = SparseMatrix::from_triplets(n, n, &trip)?;
    let shift = spec.signal / std::f64::consts::SQRT_2;
    let mut features = Tensor::zeros(&[n, spec.feature_dim]);
    for i in 0..n {
        let row = features.row_mut(i);
        for v in row.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        row[labels[i]] += shift;
    }
    let name = format!("sbm-{}x{}-s{}", spec.n_classes, spec.n_per_class, spec.seed);
    GraphDataset::new(name, adjacency, features, labels, spec.n_classes)
}
