//! Multi-hop graph filters `Ā = Σ ξ_i Ã^i`.
//!
//! Two families are provided:
//!
//! - attention filters, where `ξ = softmax(ζ)` over a hop set `M` and `ζ`
//!   is learned; the per-hop matrices are fixed and `Ā` is a linear
//!   function of `ξ`, exposed through [`AttentionBasis`] for the tape;
//! - personalized PageRank diffusion `α(I − (1−α)Ã)^{-1}`, either exact
//!   (dense Cholesky) or truncated to `P` terms, used as a constant.
//!
//! Every hop matrix (and the PPR matrix) is sparsified per row, made
//! symmetric by keeping only mutually-selected entries, and then
//! symmetric-normalized again with row-sum degrees. Diagonal entries are
//! never pruned.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;
use crate::tensor::Tensor;

/// Largest graph for which the exact PPR inverse is computed densely.
pub const EXACT_PPR_MAX_NODES: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SparsifyRule {
    Epsilon { epsilon: f64 },
    TopK { k: usize },
}

impl SparsifyRule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SparsifyRule::Epsilon { epsilon } if !(epsilon >= 0.0 && epsilon.is_finite()) => Err(
                Error::Validation(format!("epsilon must be finite and >= 0, got {epsilon}")),
            ),
            SparsifyRule::TopK { k: 0 } => {
                Err(Error::Validation("top-k sparsification needs k >= 1".into()))
            }
            _ => Ok(()),
        }
    }
}

impl Default for SparsifyRule {
    fn default() -> Self {
        SparsifyRule::TopK { k: 128 }
    }
}

impl fmt::Display for SparsifyRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SparsifyRule::Epsilon { epsilon } => write!(f, "eps:{epsilon}"),
            SparsifyRule::TopK { k } => write!(f, "topk:{k}"),
        }
    }
}

impl FromStr for SparsifyRule {
    type Err = Error;

    /// Parses `topk:K` or `eps:E`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = s
            .split_once(':')
            .ok_or_else(|| Error::Validation(format!("sparsify rule `{s}`: expected topk:K or eps:E")))?;
        let rule = match kind {
            "topk" => SparsifyRule::TopK {
                k: arg
                    .parse()
                    .map_err(|_| Error::Validation(format!("bad top-k count `{arg}`")))?,
            },
            "eps" | "epsilon" => SparsifyRule::Epsilon {
                epsilon: arg
                    .parse()
                    .map_err(|_| Error::Validation(format!("bad epsilon `{arg}`")))?,
            },
            _ => {
                return Err(Error::Validation(format!(
                    "unknown sparsify kind `{kind}` (expected topk or eps)"
                )))
            }
        };
        rule.validate()?;
        Ok(rule)
    }
}

/// Where sparsification happens for attention filters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsifyStage {
    /// Each `Ã^i` is pruned and renormalized independently.
    #[default]
    PerHop,
    /// The pattern is chosen by pruning the uniform-weight combination
    /// `Σ Ã^i / |M|`; every hop is then restricted to that shared pattern
    /// and renormalized, which keeps `Ā` linear in `ξ`.
    Final,
}

/// `D^{-1/2} M D^{-1/2}` with `D` the row sums of `m`.
pub fn symmetric_renormalize(m: &SparseMatrix) -> Result<SparseMatrix> {
    let deg = m.row_sums();
    if let Some(r) = deg.iter().position(|&d| d <= 0.0 || d.is_nan()) {
        return Err(Error::Validation(format!(
            "row {r} has non-positive degree {}",
            deg[r]
        )));
    }
    let mut values = Vec::with_capacity(m.nnz());
    for r in 0..m.n_rows() {
        for (c, v) in m.row(r) {
            values.push(v / (deg[r] * deg[c]).sqrt());
        }
    }
    m.with_values(values)
}

/// Row-wise selection by `rule`, mutual symmetrization, renormalization.
pub fn sparsify(m: &SparseMatrix, rule: &SparsifyRule) -> Result<SparseMatrix> {
    rule.validate()?;
    if !m.is_square() {
        return Err(Error::Structure("sparsify expects a square matrix".into()));
    }
    let n = m.n_rows();
    let mut selected = vec![false; m.nnz()];
    let offsets = m.row_offsets();
    for r in 0..n {
        let (lo, hi) = (offsets[r], offsets[r + 1]);
        let diag = m.position(r, r).ok_or_else(|| {
            Error::Structure(format!("row {r} has no diagonal entry to retain"))
        })?;
        selected[diag] = true;
        match *rule {
            SparsifyRule::Epsilon { epsilon } => {
                for (sel, &v) in selected[lo..hi].iter_mut().zip(&m.values()[lo..hi]) {
                    if v > 0.0 && v >= epsilon {
                        *sel = true;
                    }
                }
            }
            SparsifyRule::TopK { k } => {
                let mut off: Vec<usize> = (lo..hi)
                    .filter(|&e| e != diag && m.values()[e] > 0.0)
                    .collect();
                off.sort_by(|&a, &b| {
                    m.values()[b]
                        .total_cmp(&m.values()[a])
                        .then(m.col_indices()[a].cmp(&m.col_indices()[b]))
                });
                for &e in off.iter().take(k - 1) {
                    selected[e] = true;
                }
            }
        }
    }
    let cols = m.col_indices();
    let mut triplets = Vec::new();
    for r in 0..n {
        for e in offsets[r]..offsets[r + 1] {
            if !selected[e] {
                continue;
            }
            let c = cols[e];
            if let Some(t) = m.position(c, r) {
                if selected[t] {
                    triplets.push((r, c, (m.values()[e] + m.values()[t]) / 2.0));
                }
            }
        }
    }
    let pruned = SparseMatrix::from_triplets(n, n, &triplets)?;
    symmetric_renormalize(&pruned)
}

/// `Ã^hop`, sparsified by `rule` and renormalized.
pub fn matrix_power_sparsified(
    a_tilde: &SparseMatrix,
    hop: usize,
    rule: &SparsifyRule,
) -> Result<SparseMatrix> {
    if hop == 0 {
        return Err(Error::Validation(
            "hop 0 is the identity and is not a filter power".into(),
        ));
    }
    let mut power = a_tilde.clone();
    for _ in 1..hop {
        power = a_tilde.matmul(&power)?;
    }
    sparsify(&power, rule)
}

/// Sparsified, renormalized `Ã^i` for each hop in `M`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HopPowerSet {
    hops: Vec<usize>,
    matrices: Vec<SparseMatrix>,
}

impl HopPowerSet {
    pub fn new(hops: Vec<usize>, matrices: Vec<SparseMatrix>) -> Result<Self> {
        if hops.is_empty() {
            return Err(Error::Validation("hop set must be non-empty".into()));
        }
        if hops.len() != matrices.len() {
            return Err(Error::Dimension(format!(
                "{} hops but {} matrices",
                hops.len(),
                matrices.len()
            )));
        }
        if hops.windows(2).any(|w| w[0] >= w[1]) || hops[0] == 0 {
            return Err(Error::Validation(
                "hops must be strictly increasing positive integers".into(),
            ));
        }
        let n = matrices[0].n_rows();
        if matrices.iter().any(|m| !m.is_square() || m.n_rows() != n) {
            return Err(Error::Dimension("hop matrices must all be n x n".into()));
        }
        Ok(Self { hops, matrices })
    }

    /// Builds every hop in `hops` from one chain of sparse products.
    pub fn build(
        a_tilde: &SparseMatrix,
        hops: &[usize],
        rule: &SparsifyRule,
        stage: SparsifyStage,
    ) -> Result<Self> {
        rule.validate()?;
        let mut sorted = hops.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.is_empty() || sorted[0] == 0 {
            return Err(Error::Validation(
                "hop set must be non-empty and contain only positive hops".into(),
            ));
        }
        let max = *sorted.last().unwrap();
        let mut raw = Vec::with_capacity(sorted.len());
        let mut power = a_tilde.clone();
        for i in 1..=max {
            if i > 1 {
                power = a_tilde.matmul(&power)?;
            }
            if sorted.contains(&i) {
                raw.push(power.clone());
            }
        }
        let matrices = match stage {
            SparsifyStage::PerHop => raw
                .iter()
                .map(|p| sparsify(p, rule))
                .collect::<Result<Vec<_>>>()?,
            SparsifyStage::Final => {
                let w = 1.0 / raw.len() as f64;
                let mut combined = SparseMatrix::zeros(a_tilde.n_rows(), a_tilde.n_cols());
                for p in &raw {
                    combined = combined.linear_combination(1.0, p, w)?;
                }
                let mask = sparsify(&combined, rule)?;
                raw.iter()
                    .map(|p| {
                        let restricted = p.filter(|r, c, _| mask.get(r, c).is_some());
                        let values = (0..restricted.n_rows())
                            .flat_map(|r| restricted.row(r).map(move |(c, v)| (r, c, v)))
                            .map(|(r, c, v)| (v + restricted.get(c, r).unwrap_or(v)) / 2.0)
                            .collect();
                        symmetric_renormalize(&restricted.with_values(values)?)
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        Self::new(sorted, matrices)
    }

    pub fn hops(&self) -> &[usize] {
        &self.hops
    }

    pub fn matrices(&self) -> &[SparseMatrix] {
        &self.matrices
    }

    pub fn len(&self) -> usize {
        self.hops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hops.is_empty()
    }

    pub fn n_nodes(&self) -> usize {
        self.matrices[0].n_rows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionFilterParams {
    pub zeta: Vec<f64>,
}

impl AttentionFilterParams {
    pub fn zeros(n_hops: usize) -> Self {
        Self {
            zeta: vec![0.0; n_hops],
        }
    }

    pub fn coefficients(&self) -> Vec<f64> {
        softmax(&self.zeta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionFilterParams {
    pub alpha: f64,
    /// Number of series terms `P`; `None` requests the exact inverse.
    pub truncation: Option<usize>,
}

impl DiffusionFilterParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Validation(format!(
                "teleport probability must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Series weights `α(1−α)^i` for `i = 0..=terms`.
    pub fn series_weights(&self, terms: usize) -> Vec<(usize, f64)> {
        (0..=terms)
            .map(|i| (i, self.alpha * (1.0 - self.alpha).powi(i as i32)))
            .collect()
    }
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Union sparsity pattern of a [`HopPowerSet`] plus a `|M| × nnz` basis,
/// so that the filter values are `ξᵀ · basis`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBasis {
    pattern: Arc<SparseMatrix>,
    basis: Arc<Tensor>,
}

impl AttentionBasis {
    pub fn new(powers: &HopPowerSet) -> Result<Self> {
        let n = powers.n_nodes();
        let mut pattern = SparseMatrix::zeros(n, n);
        for m in powers.matrices() {
            pattern = pattern.add(&m.map_values(|_| 0.0))?;
        }
        let nnz = pattern.nnz();
        let mut basis = Tensor::zeros(&[powers.len(), nnz]);
        for (h, m) in powers.matrices().iter().enumerate() {
            let row = basis.row_mut(h);
            for r in 0..n {
                for (c, v) in m.row(r) {
                    let pos = pattern.position(r, c).expect("union contains every hop entry");
                    row[pos] = v;
                }
            }
        }
        Ok(Self {
            pattern: Arc::new(pattern),
            basis: Arc::new(basis),
        })
    }

    /// Structure of `Ā`; stored values are zero.
    pub fn pattern(&self) -> &SparseMatrix {
        &self.pattern
    }

    pub fn basis(&self) -> &Tensor {
        &self.basis
    }

    pub fn shared_pattern(&self) -> Arc<SparseMatrix> {
        Arc::clone(&self.pattern)
    }

    pub fn shared_basis(&self) -> Arc<Tensor> {
        Arc::clone(&self.basis)
    }

    pub fn n_hops(&self) -> usize {
        self.basis.rows()
    }

    pub fn values(&self, xi: &[f64]) -> Vec<f64> {
        let nnz = self.pattern.nnz();
        let mut out = vec![0.0; nnz];
        for (h, &w) in xi.iter().enumerate() {
            for (o, b) in out.iter_mut().zip(self.basis.row(h)) {
                *o += w * b;
            }
        }
        out
    }

    pub fn combine(&self, xi: &[f64]) -> Result<SparseMatrix> {
        if xi.len() != self.n_hops() {
            return Err(Error::Dimension(format!(
                "{} coefficients for {} hops",
                xi.len(),
                self.n_hops()
            )));
        }
        self.pattern.with_values(self.values(xi))
    }
}

/// `Ā = Σ_{i∈M} softmax(ζ)_i · Ã^i` over the union pattern.
pub fn build_attention_filter(
    powers: &HopPowerSet,
    params: &AttentionFilterParams,
) -> Result<SparseMatrix> {
    if powers.len() != params.zeta.len() {
        return Err(Error::Dimension(format!(
            "{} hops but {} attention logits",
            powers.len(),
            params.zeta.len()
        )));
    }
    if params.zeta.iter().any(|z| !z.is_finite()) {
        return Err(Error::Validation("attention logits must be finite".into()));
    }
    AttentionBasis::new(powers)?.combine(&params.coefficients())
}

/// Exact `α(I − (1−α)Ã)^{-1}` as a dense matrix.
pub fn ppr_exact_dense(a_tilde: &SparseMatrix, alpha: f64) -> Result<Tensor> {
    DiffusionFilterParams {
        alpha,
        truncation: None,
    }
    .validate()?;
    let n = a_tilde.n_rows();
    if n > EXACT_PPR_MAX_NODES {
        return Err(Error::Validation(format!(
            "exact PPR limited to {EXACT_PPR_MAX_NODES} nodes (graph has {n}); pass a truncation"
        )));
    }
    let mut system = DMatrix::<f64>::identity(n, n);
    for r in 0..n {
        for (c, v) in a_tilde.row(r) {
            system[(r, c)] -= (1.0 - alpha) * v;
        }
    }
    let chol = system
        .cholesky()
        .ok_or_else(|| Error::Validation("PPR system is not positive definite".into()))?;
    let inv = chol.inverse();
    let mut data = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            data.push(alpha * inv[(r, c)]);
        }
    }
    Tensor::matrix(n, n, data)
}

/// `Σ_{i=0}^{P} α(1−α)^i Ã^i` by repeated sparse products.
pub fn ppr_truncated(a_tilde: &SparseMatrix, alpha: f64, terms: usize) -> Result<SparseMatrix> {
    DiffusionFilterParams {
        alpha,
        truncation: Some(terms),
    }
    .validate()?;
    let n = a_tilde.n_rows();
    let mut acc = SparseMatrix::identity(n).map_values(|v| v * alpha);
    let mut power = SparseMatrix::identity(n);
    for i in 1..=terms {
        power = a_tilde.matmul(&power)?;
        let w = alpha * (1.0 - alpha).powi(i as i32);
        acc = acc.linear_combination(1.0, &power, w)?;
    }
    Ok(acc)
}

/// Diffusion filter, sparsified by `rule` and renormalized. Constant with
/// respect to every model parameter.
pub fn build_ppr_filter(
    a_tilde: &SparseMatrix,
    params: &DiffusionFilterParams,
    rule: &SparsifyRule,
) -> Result<SparseMatrix> {
    params.validate()?;
    let raw = match params.truncation {
        None => SparseMatrix::from_dense(&ppr_exact_dense(a_tilde, params.alpha)?)?,
        Some(0) => {
            log::warn!("PPR truncation P=0 reduces the filter to α·I");
            ppr_truncated(a_tilde, params.alpha, 0)?
        }
        Some(p) => ppr_truncated(a_tilde, params.alpha, p)?,
    };
    sparsify(&raw, rule)
}

/// Converts coefficients of `Σ ξ_i Ã^i` into those of `Σ θ_j L^j` with
/// `L = I − Ã`: `θ_j = (−1)^j Σ_{i≥j} C(i, j) ξ_i`.
pub fn adjacency_poly_to_laplacian_poly(xi: &[f64]) -> Result<Vec<f64>> {
    if xi.iter().any(|x| !x.is_finite()) {
        return Err(Error::Validation("polynomial coefficients must be finite".into()));
    }
    let degree = xi.len();
    // Pascal's triangle, row i holds C(i, 0..=i).
    let mut binom = vec![vec![1.0f64]; degree];
    for i in 1..degree {
        let prev = &binom[i - 1];
        let mut row = vec![1.0; i + 1];
        for j in 1..i {
            row[j] = prev[j - 1] + prev[j];
        }
        binom[i] = row;
    }
    Ok((0..degree)
        .map(|j| {
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            sign * (j..degree).map(|i| binom[i][j] * xi[i]).sum::<f64>()
        })
        .collect())
}

/// Stored `(j, ā_ij)` pairs of row `node`: the subgraph node `node` aggregates from.
pub fn neighborhood_of(filter: &SparseMatrix, node: usize) -> Result<Vec<(usize, f64)>> {
    if node >= filter.n_rows() {
        return Err(Error::OutOfRange {
            index: node,
            len: filter.n_rows(),
        });
    }
    Ok(filter.row(node).filter(|&(_, v)| v != 0.0).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum FilterMode {
    /// Learned hop attention over `M = {1, …, max_hop}`.
    Attention { max_hop: usize },
    /// Personalized PageRank with teleport probability `alpha`.
    Ppr {
        alpha: f64,
        #[serde(default)]
        truncation: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    #[serde(flatten)]
    pub mode: FilterMode,
    #[serde(default)]
    pub sparsify: SparsifyRule,
    #[serde(default)]
    pub stage: SparsifyStage,
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self {
            mode: FilterMode::Attention { max_hop: 2 },
            sparsify: SparsifyRule::default(),
            stage: SparsifyStage::PerHop,
        }
    }
}

impl FilterSpec {
    pub fn validate(&self) -> Result<()> {
        self.sparsify.validate()?;
        match self.mode {
            FilterMode::Attention { max_hop: 0 } => {
                Err(Error::Validation("max_hop must be >= 1".into()))
            }
            FilterMode::Attention { .. } => Ok(()),
            FilterMode::Ppr { alpha, truncation } => {
                DiffusionFilterParams { alpha, truncation }.validate()
            }
        }
    }

    pub fn hops(&self) -> Option<Vec<usize>> {
        match self.mode {
            FilterMode::Attention { max_hop } => Some((1..=max_hop).collect()),
            FilterMode::Ppr { .. } => None,
        }
    }

    /// Content hash of the adjacency and every setting that shapes the filter.
    pub fn cache_key(&self, adjacency: &SparseMatrix) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(adjacency).expect("sparse matrices serialize"));
        hasher.update(serde_json::to_vec(self).expect("filter specs serialize"));
        hex::encode(&hasher.finalize()[..12])
    }
}

/// A filter ready for the capsule layer.
#[derive(Clone, Debug)]
pub enum GraphFilter {
    Attention {
        powers: HopPowerSet,
        basis: AttentionBasis,
    },
    Diffusion {
        matrix: Arc<SparseMatrix>,
        params: DiffusionFilterParams,
    },
}

impl GraphFilter {
    pub fn build(a_tilde: &SparseMatrix, spec: &FilterSpec) -> Result<Self> {
        spec.validate()?;
        match spec.mode {
            FilterMode::Attention { max_hop } => {
                let hops: Vec<usize> = (1..=max_hop).collect();
                let powers = HopPowerSet::build(a_tilde, &hops, &spec.sparsify, spec.stage)?;
                Self::from_powers(powers)
            }
            FilterMode::Ppr { alpha, truncation } => {
                let params = DiffusionFilterParams { alpha, truncation };
                let matrix = build_ppr_filter(a_tilde, &params, &spec.sparsify)?;
                Ok(GraphFilter::Diffusion {
                    matrix: Arc::new(matrix),
                    params,
                })
            }
        }
    }

    pub fn from_powers(powers: HopPowerSet) -> Result<Self> {
        let basis = AttentionBasis::new(&powers)?;
        Ok(GraphFilter::Attention { powers, basis })
    }

    pub fn n_nodes(&self) -> usize {
        match self {
            GraphFilter::Attention { powers, .. } => powers.n_nodes(),
            GraphFilter::Diffusion { matrix, .. } => matrix.n_rows(),
        }
    }

    /// Number of learnable hop logits (zero for diffusion filters).
    pub fn n_hops(&self) -> usize {
        match self {
            GraphFilter::Attention { powers, .. } => powers.len(),
            GraphFilter::Diffusion { .. } => 0,
        }
    }

    /// Concrete `Ā` for the given logits (ignored by diffusion filters).
    pub fn materialize(&self, zeta: Option<&[f64]>) -> Result<SparseMatrix> {
        match self {
            GraphFilter::Attention { basis, powers } => {
                let zeta = zeta.ok_or_else(|| {
                    Error::Validation("attention filter requires hop logits".into())
                })?;
                if zeta.len() != powers.len() {
                    return Err(Error::Dimension(format!(
                        "{} logits for {} hops",
                        zeta.len(),
                        powers.len()
                    )));
                }
                basis.combine(&softmax(zeta))
            }
            GraphFilter::Diffusion { matrix, .. } => Ok((**matrix).clone()),
        }
    }

    pub fn stats(&self) -> FilterStats {
        match self {
            GraphFilter::Attention { basis, .. } => FilterStats::of(basis.pattern()),
            GraphFilter::Diffusion { matrix, .. } => FilterStats::of(matrix),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub nnz: usize,
    pub min_row_nnz: usize,
    pub max_row_nnz: usize,
    pub mean_row_nnz: f64,
}

impl FilterStats {
    pub fn of(m: &SparseMatrix) -> Self {
        let rows: Vec<usize> = (0..m.n_rows()).map(|r| m.row_nnz(r)).collect();
        Self {
            nnz: m.nnz(),
            min_row_nnz: rows.iter().copied().min().unwrap_or(0),
            max_row_nnz: rows.iter().copied().max().unwrap_or(0),
            mean_row_nnz: if rows.is_empty() {
                0.0
            } else {
                m.nnz() as f64 / rows.len() as f64
            },
        }
    }
}
