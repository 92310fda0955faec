//! Accuracy, run reports, receptive-field sweeps, the class-mixing
//! diagnostic and interpretability exports.

use std::time::Instant;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::capsule::{CapsuleTensor, ParamKind, RoutingState};
use crate::data::{generate_split, SplitSpec};
use crate::error::{Error, Result};
use crate::filter::{softmax, FilterMode, FilterStats, GraphFilter};
use crate::graph::{mask_indices, normalize_adjacency, GraphDataset};
use crate::sparse::SparseMatrix;
use crate::tensor::Tensor;
use crate::train::{train_model, EpochRecord, Model, TrainConfig};

/// Fraction of masked nodes whose prediction equals the label.
pub fn accuracy(pred: &[usize], labels: &[usize], mask: &[bool]) -> Result<f64> {
    let idx = mask_indices(mask);
    if idx.is_empty() {
        return Err(Error::Validation("accuracy over an empty mask".into()));
    }
    let hits = idx.iter().filter(|&&i| pred[i] == labels[i]).count();
    Ok(hits as f64 / idx.len() as f64)
}

pub fn evaluate(model: &Model, dataset: &GraphDataset, mask: &[bool]) -> Result<f64> {
    let inf = model.infer(&dataset.features)?;
    accuracy(&inf.predictions(), &dataset.labels, mask)
}

/// Value returned by [`mixing_metric`] when classes are perfectly tight but
/// apart.
pub const MIXING_CAP: f64 = f64::MAX;

/// Mean inter-class over mean intra-class pairwise Euclidean distance.
/// Classes with a single node contribute no intra-class pairs.
pub fn mixing_metric(embeddings: &Tensor, labels: &[usize]) -> Result<f64> {
    let n = embeddings.rows();
    if labels.len() != n {
        return Err(Error::Dimension(format!("{} labels for {n} embeddings", labels.len())));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Validation("mixing metric needs at least two classes".into()));
    }
    for &c in &classes {
        if labels.iter().filter(|&&l| l == c).count() == 1 {
            warn!("class {c} has a single node; it contributes no intra-class pairs");
        }
    }
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        let a = embeddings.row(i);
        for j in (i + 1)..n {
            let d = a
                .iter()
                .zip(embeddings.row(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            if labels[i] == labels[j] {
                intra += d;
                n_intra += 1;
            } else {
                inter += d;
                n_inter += 1;
            }
        }
    }
    let intra = if n_intra > 0 { intra / n_intra as f64 } else { 0.0 };
    let inter = inter / n_inter as f64;
    Ok(match (intra == 0.0, inter == 0.0) {
        (true, true) => 1.0,
        (true, false) => MIXING_CAP,
        _ => inter / intra,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingKind {
    /// The longest class capsule's vector (`f_c` values).
    #[default]
    MaxCapsule,
    /// All class-capsule lengths (`C` values).
    Lengths,
    /// Every class capsule concatenated (`C·f_c` values).
    Concat,
}

pub fn capsule_embeddings(caps: &CapsuleTensor, kind: EmbeddingKind) -> Tensor {
    let n = caps.n_nodes();
    match kind {
        EmbeddingKind::Lengths => caps.lengths(),
        EmbeddingKind::Concat => caps
            .tensor()
            .clone()
            .reshape(vec![n, caps.n_caps() * caps.dim()])
            .expect("same size"),
        EmbeddingKind::MaxCapsule => {
            let pred = crate::capsule::predict(caps);
            let mut data = Vec::with_capacity(n * caps.dim());
            for (i, &l) in pred.iter().enumerate() {
                data.extend_from_slice(caps.vector(i, l));
            }
            Tensor::matrix(n, caps.dim(), data).expect("shape matches")
        }
    }
}

/// `node_id<TAB>label<TAB>v1<TAB>v2...` per line.
pub fn embeddings_tsv(embeddings: &Tensor, labels: &[usize]) -> String {
    let mut out = String::new();
    for (i, label) in labels.iter().enumerate() {
        out.push_str(&format!("{i}\t{label}"));
        for v in embeddings.row(i) {
            out.push_str(&format!("\t{v:?}"));
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeNeighborhood {
    pub node: usize,
    /// `(neighbor, ā_ij)`, heaviest first.
    pub neighbors: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationBundle {
    /// `(hop, ξ_hop)`; for diffusion filters the fixed series weights.
    pub hop_attention: Vec<(usize, f64)>,
    /// `C × K`, mean of `c_jkl` over (target, neighbor) pairs weighted by `ā_ij`.
    pub coupling_summary: Vec<Vec<f64>>,
    /// `C × K`, plain mean over the same pairs.
    pub coupling_summary_unweighted: Vec<Vec<f64>>,
    pub neighborhoods: Vec<NodeNeighborhood>,
}

/// Hop weights reported for diffusion filters without a truncation.
pub const EXACT_DIFFUSION_REPORT_TERMS: usize = 10;

/// Hop attentions, coupling summaries and each node's `top` heaviest
/// neighbors under `filter` (the materialized `Ā`).
pub fn export_explanations(
    model: &Model,
    state: &RoutingState,
    filter: &SparseMatrix,
    top: usize,
) -> Result<ExplanationBundle> {
    let hop_attention = match model.filter() {
        GraphFilter::Attention { powers, .. } => {
            let zeta = model
                .params
                .get(ParamKind::Zeta)
                .ok_or_else(|| Error::Validation("attention model without hop logits".into()))?;
            powers.hops().iter().copied().zip(softmax(zeta.data())).collect()
        }
        GraphFilter::Diffusion { params, .. } => {
            params.series_weights(params.truncation.unwrap_or(EXACT_DIFFUSION_REPORT_TERMS))
        }
    };
    let (k, c) = (model.params.dims().n_primary, model.params.dims().n_classes);
    let n = filter.n_rows();
    if state.couplings.len() != n * k * c {
        return Err(Error::Dimension(format!(
            "couplings {:?} for {n} nodes, K={k}, C={c}",
            state.couplings.shape()
        )));
    }
    let mut weighted = vec![vec![0.0; k]; c];
    let mut plain = vec![vec![0.0; k]; c];
    let (mut total_w, mut total_n) = (0.0, 0usize);
    for i in 0..n {
        for (j, a) in filter.row(i) {
            if a == 0.0 {
                continue;
            }
            total_w += a;
            total_n += 1;
            for l in 0..c {
                for kk in 0..k {
                    let cjkl = state.couplings.data()[(j * k + kk) * c + l];
                    weighted[l][kk] += a * cjkl;
                    plain[l][kk] += cjkl;
                }
            }
        }
    }
    for l in 0..c {
        for kk in 0..k {
            weighted[l][kk] /= total_w;
            plain[l][kk] /= total_n as f64;
        }
    }
    let neighborhoods = (0..n)
        .map(|i| {
            let mut nb: Vec<(usize, f64)> = filter.row(i).filter(|&(_, v)| v != 0.0).collect();
            nb.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            nb.truncate(top);
            NodeNeighborhood { node: i, neighbors: nb }
        })
        .collect();
    Ok(ExplanationBundle {
        hop_attention,
        coupling_summary: weighted,
        coupling_summary_unweighted: plain,
        neighborhoods,
    })
}

/// `class,k0,k1,...` header then one row per class.
pub fn coupling_csv(summary: &[Vec<f64>]) -> String {
    let k = summary.first().map_or(0, Vec::len);
    let mut out = String::from("class");
    for kk in 0..k {
        out.push_str(&format!(",k{kk}"));
    }
    out.push('\n');
    for (l, row) in summary.iter().enumerate() {
        out.push_str(&l.to_string());
        for v in row {
            out.push_str(&format!(",{v:?}"));
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub split_seed: u64,
    pub weight_seed: u64,
    pub test_accuracy: f64,
    pub best_val_accuracy: Option<f64>,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
    /// Where the history was written, if it was.
    pub history_ref: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub dataset: String,
    pub config: TrainConfig,
    pub split: SplitSpec,
    pub runs: Vec<RunRecord>,
    pub mean_test_accuracy: f64,
    /// Sample standard deviation (zero for a single run).
    pub std_test_accuracy: f64,
    /// Measured duration; callers that need byte-stable files clear it.
    pub wall_clock_seconds: Option<f64>,
    pub filter_stats: FilterStats,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl RunReport {
    pub fn accuracies(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.test_accuracy).collect()
    }
}

/// Trains one model per `(split seed, weight seed)` pair, in parallel.
/// The filter is built once and shared by every run.
pub fn run_protocol(
    dataset: &GraphDataset,
    cfg: &TrainConfig,
    split: &SplitSpec,
    split_seeds: &[u64],
    weight_seeds: &[u64],
) -> Result<RunReport> {
    if split_seeds.is_empty() || weight_seeds.is_empty() {
        return Err(Error::Validation("protocol needs at least one split and one seed".into()));
    }
    cfg.validate()?;
    let start = Instant::now();
    let filter = GraphFilter::build(&normalize_adjacency(&dataset.adjacency)?, &cfg.filter)?;
    let filter_stats = filter.stats();
    let jobs: Vec<(u64, u64)> = split_seeds
        .iter()
        .flat_map(|&s| weight_seeds.iter().map(move |&w| (s, w)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(split_seed, weight_seed)| {
            let splits = generate_split(dataset, &SplitSpec { split_seed, ..*split })?;
            let ds = dataset.clone().with_splits(splits)?;
            let run_cfg = TrainConfig {
                seed: weight_seed,
                ..cfg.clone()
            };
            let model = Model::with_filter(run_cfg, filter.clone(), ds.n_features(), ds.n_classes)?;
            let out = train_model(model, &ds, None)?;
            let test_accuracy = evaluate(&out.model, &ds, &ds.splits.test)?;
            let best_val_accuracy = out
                .best_epoch
                .and_then(|e| out.history.get(e - 1))
                .and_then(|r| r.val_acc);
            Ok(RunRecord {
                split_seed,
                weight_seed,
                test_accuracy,
                best_val_accuracy,
                best_epoch: out.best_epoch,
                history: out.history,
                history_ref: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (mean, std) = mean_std(&runs.iter().map(|r| r.test_accuracy).collect::<Vec<_>>());
    Ok(RunReport {
        dataset: dataset.name.clone(),
        config: cfg.clone(),
        split: *split,
        runs,
        mean_test_accuracy: mean,
        std_test_accuracy: std,
        wall_clock_seconds: Some(start.elapsed().as_secs_f64()),
        filter_stats,
    })
}

/// One [`run_protocol`] per receptive field `M = {1..hop}` with an
/// attention filter (other filter settings come from `base`).
pub fn receptive_field_sweep(
    dataset: &GraphDataset,
    base: &TrainConfig,
    hops: &[usize],
    split: &SplitSpec,
    split_seeds: &[u64],
    weight_seeds: &[u64],
) -> Result<Vec<RunReport>> {
    if hops.is_empty() {
        return Err(Error::Validation("sweep needs at least one hop value".into()));
    }
    hops.iter()
        .map(|&max_hop| {
            let mut cfg = base.clone();
            cfg.filter.mode = FilterMode::Attention { max_hop };
            run_protocol(dataset, &cfg, split, split_seeds, weight_seeds)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        let labels = [0, 1, 0, 1];
        assert_eq!(accuracy(&labels, &labels, &[true; 4]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0; 4], &labels, &[true; 4]).unwrap(), 0.5);
        assert!(accuracy(&[0; 4], &labels, &[false; 4]).is_err());
    }

    #[test]
    fn mixing_metric_guards() {
        let pts = Tensor::matrix(4, 1, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(mixing_metric(&pts, &[0, 0, 1, 1]).unwrap(), MIXING_CAP);
        let same = Tensor::full(&[4, 2], 0.3);
        assert_eq!(mixing_metric(&same, &[0, 0, 1, 1]).unwrap(), 1.0);
        assert!(mixing_metric(&same, &[0, 0, 0, 0]).is_err());
    }

    #[test]
    fn mixing_metric_matches_hand_count() {
        // Intra pairs: |0−1| = 1, |4−6| = 2; inter pairs: 4,6,3,5 → mean 4.5.
        let pts = Tensor::matrix(4, 1, vec![0.0, 1.0, 4.0, 6.0]).unwrap();
        let m = mixing_metric(&pts, &[0, 0, 1, 1]).unwrap();
        assert!((m - 4.5 / 1.5).abs() < 1e-15);
    }

    #[test]
    fn coupling_csv_layout() {
        let csv = coupling_csv(&[vec![0.25, 0.75], vec![0.5, 0.5]]);
        assert_eq!(csv, "class,k0,k1\n0,0.25,0.75\n1,0.5,0.5\n");
    }

    #[test]
    fn mean_std_values() {
        let (m, s) = mean_std(&[0.8, 0.9, 1.0]);
        assert!((m - 0.9).abs() < 1e-15);
        assert!((s - 0.1).abs() < 1e-12);
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
    }
}
