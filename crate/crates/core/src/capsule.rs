//! Primary node capsules and the capsule graph layer with
//! neighborhood routing by agreement.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::filter::GraphFilter;
use crate::sparse::{spmm, SparseMatrix};
use crate::tensor::Tensor;

/// Floor applied to every vector norm used as a divisor.
pub const NORM_EPS: f64 = 1e-12;

/// `v = ‖u‖²/(1+‖u‖²) · u/max(‖u‖, ε)`, in place.
pub fn squash_in_place(u: &mut [f64]) {
    let n2: f64 = u.iter().map(|x| x * x).sum();
    let n = n2.sqrt();
    let factor = n2 / (1.0 + n2) / n.max(NORM_EPS);
    u.iter_mut().for_each(|x| *x *= factor);
}

pub fn squash(u: &[f64]) -> Vec<f64> {
    let mut v = u.to_vec();
    squash_in_place(&mut v);
    v
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    PrimaryWeights,
    PrimaryBias,
    RoutingWeights,
    ClassBias,
    Zeta,
}

impl ParamKind {
    pub const ALL: [ParamKind; 5] = [
        ParamKind::PrimaryWeights,
        ParamKind::PrimaryBias,
        ParamKind::RoutingWeights,
        ParamKind::ClassBias,
        ParamKind::Zeta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamKind::PrimaryWeights => "primary_weights",
            ParamKind::PrimaryBias => "primary_bias",
            ParamKind::RoutingWeights => "routing_weights",
            ParamKind::ClassBias => "class_bias",
            ParamKind::Zeta => "zeta",
        }
    }

    /// Weight matrices, as opposed to biases and hop logits.
    pub fn is_weight(self) -> bool {
        matches!(self, ParamKind::PrimaryWeights | ParamKind::RoutingWeights)
    }
}

/// Named tensors keyed by [`ParamKind`], in a fixed order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<(ParamKind, Tensor)>,
}

/// Per-parameter gradients share the parameter layout.
pub type Gradients = ParamSet;

impl ParamSet {
    pub fn new(mut entries: Vec<(ParamKind, Tensor)>) -> Result<Self> {
        entries.sort_by_key(|(k, _)| *k);
        if entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Validation("duplicate parameter tensor".into()));
        }
        Ok(Self { entries })
    }

    pub fn get(&self, kind: ParamKind) -> Option<&Tensor> {
        self.entries.iter().find(|(k, _)| *k == kind).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, kind: ParamKind) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(k, _)| *k == kind).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamKind, &Tensor)> {
        self.entries.iter().map(|(k, t)| (*k, t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamKind, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, t)| (*k, t))
    }

    pub fn kinds(&self) -> Vec<ParamKind> {
        self.entries.iter().map(|(k, _)| *k).collect()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, t)| (*k, Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    /// First non-finite value, as `(kind, flat index, value)`.
    pub fn first_non_finite(&self) -> Option<(ParamKind, usize, f64)> {
        self.iter().find_map(|(k, t)| {
            t.data()
                .iter()
                .position(|v| !v.is_finite())
                .map(|i| (k, i, t.data()[i]))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_features: usize,
    /// `K`, the number of primary capsules per node.
    pub n_primary: usize,
    /// `f_p`.
    pub primary_dim: usize,
    /// `C`.
    pub n_classes: usize,
    /// `f_c`.
    pub class_dim: usize,
    /// Hop logits; zero for diffusion filters.
    pub n_hops: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_features", self.n_features),
            ("n_primary", self.n_primary),
            ("primary_dim", self.primary_dim),
            ("n_classes", self.n_classes),
            ("class_dim", self.class_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Validation(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn shape_of(&self, kind: ParamKind) -> Vec<usize> {
        let (f, k, fp, c, fc) = (
            self.n_features,
            self.n_primary,
            self.primary_dim,
            self.n_classes,
            self.class_dim,
        );
        match kind {
            ParamKind::PrimaryWeights => vec![k * fp, f],
            ParamKind::PrimaryBias => vec![k * fp],
            ParamKind::RoutingWeights => vec![k, c, fc, fp],
            ParamKind::ClassBias => vec![c, fc],
            ParamKind::Zeta => vec![self.n_hops],
        }
    }

    pub fn kinds(&self) -> Vec<ParamKind> {
        ParamKind::ALL
            .into_iter()
            .filter(|&k| k != ParamKind::Zeta || self.n_hops > 0)
            .collect()
    }
}

/// Learnable state of one model. Every mutable access bumps a version
/// counter so that tapes recorded before the change can be detected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    dims: ModelDims,
    tensors: ParamSet,
    #[serde(skip)]
    version: u64,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let entries = dims
            .kinds()
            .into_iter()
            .map(|k| (k, Tensor::zeros(&dims.shape_of(k))))
            .collect();
        Ok(Self {
            dims,
            tensors: ParamSet::new(entries)?,
            version: 0,
        })
    }

    /// Glorot-uniform weights, zero biases and hop logits.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let glorot = |t: &mut Tensor, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-a..a));
        };
        let pw = params.tensors.get_mut(ParamKind::PrimaryWeights).expect("present");
        glorot(pw, dims.n_features, dims.primary_dim, &mut rng);
        let rw = params.tensors.get_mut(ParamKind::RoutingWeights).expect("present");
        glorot(rw, dims.primary_dim, dims.class_dim, &mut rng);
        Ok(params)
    }

    pub fn from_tensors(dims: ModelDims, tensors: ParamSet) -> Result<Self> {
        dims.validate()?;
        let want = dims.kinds();
        if tensors.kinds() != want {
            return Err(Error::Validation(format!(
                "expected parameter tensors {:?}, got {:?}",
                want,
                tensors.kinds()
            )));
        }
        for (k, t) in tensors.iter() {
            if t.shape() != dims.shape_of(k).as_slice() {
                return Err(Error::Dimension(format!(
                    "{} has shape {:?}, expected {:?}",
                    k.name(),
                    t.shape(),
                    dims.shape_of(k)
                )));
            }
        }
        Ok(Self {
            dims,
            tensors,
            version: 0,
        })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn tensors(&self) -> &ParamSet {
        &self.tensors
    }

    pub fn get(&self, kind: ParamKind) -> Option<&Tensor> {
        self.tensors.get(kind)
    }

    pub fn get_mut(&mut self, kind: ParamKind) -> Option<&mut Tensor> {
        self.version += 1;
        self.tensors.get_mut(kind)
    }

    pub fn tensors_mut(&mut self) -> &mut ParamSet {
        self.version += 1;
        &mut self.tensors
    }

    pub fn kinds(&self) -> Vec<ParamKind> {
        self.tensors.kinds()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|(_, t)| t.is_finite())
    }
}

/// `n_nodes × n_caps × dim` capsule activations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapsuleTensor {
    data: Tensor,
}

impl CapsuleTensor {
    pub fn from_tensor(data: Tensor) -> Result<Self> {
        if data.shape().len() != 3 {
            return Err(Error::Dimension(format!(
                "capsule tensors are rank 3, got shape {:?}",
                data.shape()
            )));
        }
        Ok(Self { data })
    }

    /// Reinterprets `n × (caps·dim)` rows as capsules of `dim` values.
    pub fn from_rows(rows: Tensor, dim: usize) -> Result<Self> {
        let n = rows.rows();
        let w = rows.row_len();
        if dim == 0 || !w.is_multiple_of(dim) {
            return Err(Error::Dimension(format!("capsule dim {dim} does not divide {w}")));
        }
        Self::from_tensor(rows.reshape(vec![n, w / dim, dim])?)
    }

    pub fn n_nodes(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn n_caps(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn vector(&self, node: usize, cap: usize) -> &[f64] {
        let d = self.dim();
        &self.data.data()[(node * self.n_caps() + cap) * d..][..d]
    }

    /// Euclidean lengths, `n_nodes × n_caps`.
    pub fn lengths(&self) -> Tensor {
        let out = self
            .data
            .data()
            .chunks(self.dim())
            .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        Tensor::new(vec![self.n_nodes(), self.n_caps()], out).expect("shape matches")
    }
}

/// Routing logits `b_jkl` and couplings `c_jkl = softmax_k(b_jkl)`,
/// both `n_nodes × K × C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingState {
    pub logits: Tensor,
    pub couplings: Tensor,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    pub primaries: NodeId,
    pub class_caps: NodeId,
    /// Logits used for the final pass.
    pub logits: NodeId,
    /// Coupling coefficients of every routing pass, in order.
    pub couplings: Vec<NodeId>,
    /// Squashed class capsules of every routing pass, in order.
    pub passes: Vec<NodeId>,
}

/// Inverted-dropout mask: each entry is `0` with probability `p`,
/// `1/(1−p)` otherwise.
pub fn dropout_mask(shape: &[usize], p: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Validation(format!("dropout probability {p} not in [0, 1)")));
    }
    let keep = 1.0 / (1.0 - p);
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| {
        *v = if rng.random::<f64>() < p { 0.0 } else { keep };
    });
    Ok(t)
}

fn check_features(features: &Tensor, dims: &ModelDims) -> Result<()> {
    if features.shape().len() != 2 || features.row_len() != dims.n_features {
        return Err(Error::Dimension(format!(
            "features have shape {:?}, model expects {} columns",
            features.shape(),
            dims.n_features
        )));
    }
    if !features.is_finite() {
        return Err(Error::Validation("features contain non-finite values".into()));
    }
    Ok(())
}

/// Records the primary capsule projection, `n × (K·f_p)`.
pub fn primary_on_tape(
    tape: &mut Tape,
    params: &ModelParams,
    features: &Tensor,
    dropout: Option<Tensor>,
) -> Result<NodeId> {
    let dims = *params.dims();
    check_features(features, &dims)?;
    let x = tape.constant(features.clone());
    let w = tape.param(params, ParamKind::PrimaryWeights)?;
    let b = tape.param(params, ParamKind::PrimaryBias)?;
    let z = tape.matmul_t(x, w)?;
    let z = tape.add_bias(z, b)?;
    let mut z = tape.relu(z);
    if let Some(mask) = dropout {
        z = tape.mul_const(z, mask)?;
    }
    tape.group_normalize(z, dims.primary_dim)
}

/// How the capsule layer aggregates over neighborhoods.
#[derive(Clone, Debug)]
pub enum Aggregator {
    /// Fixed `Ā`.
    Fixed(Arc<SparseMatrix>),
    /// `Ā` from hop logits held in the model's `zeta` tensor.
    Attention {
        pattern: Arc<SparseMatrix>,
        basis: Arc<Tensor>,
    },
}

impl Aggregator {
    pub fn from_filter(filter: &GraphFilter) -> Self {
        match filter {
            GraphFilter::Attention { basis, .. } => Aggregator::Attention {
                pattern: basis.shared_pattern(),
                basis: basis.shared_basis(),
            },
            GraphFilter::Diffusion { matrix, .. } => Aggregator::Fixed(Arc::clone(matrix)),
        }
    }

    fn n_nodes(&self) -> usize {
        match self {
            Aggregator::Fixed(m) => m.n_rows(),
            Aggregator::Attention { pattern, .. } => pattern.n_rows(),
        }
    }
}

/// Records the capsule graph layer on top of primaries `h: n × (K·f_p)`
/// for `iterations + 1` routing passes.
pub fn routing_on_tape(
    tape: &mut Tape,
    params: &ModelParams,
    h: NodeId,
    aggregator: &Aggregator,
    iterations: usize,
) -> Result<ForwardNodes> {
    let d = *params.dims();
    let n = tape.value(h).rows();
    if aggregator.n_nodes() != n {
        return Err(Error::Dimension(format!(
            "filter covers {} nodes, primaries {n}",
            aggregator.n_nodes()
        )));
    }
    let (k, c, fc, fp) = (d.n_primary, d.n_classes, d.class_dim, d.primary_dim);
    let w = tape.param(params, ParamKind::RoutingWeights)?;
    let bias = tape.param(params, ParamKind::ClassBias)?;
    let uhat = tape.capsule_transform(h, w, k, c, fc, fp)?;
    let filter_values = match aggregator {
        Aggregator::Fixed(_) => None,
        Aggregator::Attention { basis, .. } => {
            if d.n_hops != basis.rows() {
                return Err(Error::Dimension(format!(
                    "model has {} hop logits, filter {} hops",
                    d.n_hops,
                    basis.rows()
                )));
            }
            let zeta = tape.param(params, ParamKind::Zeta)?;
            let xi = tape.softmax(zeta, 1, d.n_hops, 1)?;
            Some(tape.lin_comb(xi, Arc::clone(basis))?)
        }
    };
    let mut logits = tape.constant(Tensor::zeros(&[n, k, c]));
    let mut couplings = Vec::with_capacity(iterations + 1);
    let mut passes = Vec::with_capacity(iterations + 1);
    for t in 0..=iterations {
        let cpl = tape.softmax(logits, n, k, c)?;
        let pred = tape.coupling_sum(cpl, uhat)?;
        let agg = match (aggregator, filter_values) {
            (Aggregator::Fixed(m), _) => tape.spmm_const(Arc::clone(m), pred)?,
            (Aggregator::Attention { pattern, .. }, Some(vals)) => {
                tape.spmm(Arc::clone(pattern), vals, pred)?
            }
            (Aggregator::Attention { .. }, None) => unreachable!("values recorded above"),
        };
        let u = tape.add_bias(agg, bias)?;
        let v = tape.squash(u, fc)?;
        couplings.push(cpl);
        passes.push(v);
        if t < iterations {
            let a = tape.agreement(v, uhat)?;
            logits = tape.add(logits, a)?;
        }
    }
    Ok(ForwardNodes {
        primaries: h,
        class_caps: *passes.last().expect("at least one pass"),
        logits,
        couplings,
        passes,
    })
}

/// Full forward pass (primaries, then the capsule graph layer).
pub fn forward_on_tape(
    tape: &mut Tape,
    params: &ModelParams,
    features: &Tensor,
    aggregator: &Aggregator,
    iterations: usize,
    dropout: Option<Tensor>,
) -> Result<ForwardNodes> {
    if iterations < 1 {
        return Err(Error::Validation("routing needs at least one iteration".into()));
    }
    let h = primary_on_tape(tape, params, features, dropout)?;
    routing_on_tape(tape, params, h, aggregator, iterations)
}

pub fn primary_capsules(
    features: &Tensor,
    params: &ModelParams,
    dropout_mask: Option<&Tensor>,
) -> Result<CapsuleTensor> {
    let mut tape = Tape::new();
    let h = primary_on_tape(&mut tape, params, features, dropout_mask.cloned())?;
    CapsuleTensor::from_rows(tape.value(h).clone(), params.dims().primary_dim)
}

/// Per-pass class capsules and routing states, including pass 0.
#[derive(Clone, Debug)]
pub struct RoutingTrace {
    pub class_caps: Vec<CapsuleTensor>,
    pub states: Vec<RoutingState>,
}

/// Routing with `iterations` (possibly zero) refinements after the
/// uniform-coupling pass, keeping every intermediate result.
pub fn routing_trace(
    primaries: &CapsuleTensor,
    filter: &SparseMatrix,
    params: &ModelParams,
    iterations: usize,
) -> Result<RoutingTrace> {
    let d = params.dims();
    if primaries.n_caps() != d.n_primary || primaries.dim() != d.primary_dim {
        return Err(Error::Dimension(format!(
            "primaries are {}x{}, model expects {}x{}",
            primaries.n_caps(),
            primaries.dim(),
            d.n_primary,
            d.primary_dim
        )));
    }
    let mut tape = Tape::new();
    let n = primaries.n_nodes();
    let rows = primaries.tensor().clone().reshape(vec![n, d.n_primary * d.primary_dim])?;
    let h = tape.constant(rows);
    let agg = Aggregator::Fixed(Arc::new(filter.clone()));
    let nodes = routing_on_tape(&mut tape, params, h, &agg, iterations)?;
    let mut logits = Tensor::zeros(&[n, d.n_primary, d.n_classes]);
    let mut trace = RoutingTrace {
        class_caps: Vec::new(),
        states: Vec::new(),
    };
    for (t, (&cpl, &v)) in nodes.couplings.iter().zip(&nodes.passes).enumerate() {
        let caps = CapsuleTensor::from_tensor(tape.value(v).clone())?;
        trace.states.push(RoutingState {
            logits: logits.clone(),
            couplings: tape.value(cpl).clone(),
        });
        if t < iterations {
            // Mirror the recorded logit update for the reported state.
            for j in 0..n {
                for k in 0..d.n_primary {
                    for l in 0..d.n_classes {
                        let idx = (j * d.n_primary + k) * d.n_classes + l;
                        logits.data_mut()[idx] += dot(caps.vector(j, l), uhat_vec(params, primaries, j, k, l).as_slice());
                    }
                }
            }
        }
        trace.class_caps.push(caps);
    }
    debug_assert_eq!(tape.value(nodes.logits).data(), logits.data());
    Ok(trace)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn uhat_vec(params: &ModelParams, primaries: &CapsuleTensor, j: usize, k: usize, l: usize) -> Vec<f64> {
    let d = params.dims();
    let (c, fc, fp) = (d.n_classes, d.class_dim, d.primary_dim);
    let w = params.get(ParamKind::RoutingWeights).expect("present").data();
    let h = primaries.vector(j, k);
    (0..fc)
        .map(|o| dot(&w[((k * c + l) * fc + o) * fp..][..fp], h))
        .collect()
}

/// Class capsules from the final routing pass and the matching state.
pub fn routing_forward(
    primaries: &CapsuleTensor,
    filter: &SparseMatrix,
    params: &ModelParams,
    iterations: usize,
) -> Result<(CapsuleTensor, RoutingState)> {
    if iterations < 1 {
        return Err(Error::Validation("routing needs at least one iteration".into()));
    }
    let mut trace = routing_trace(primaries, filter, params, iterations)?;
    let caps = trace.class_caps.pop().expect("at least one pass");
    let state = trace.states.pop().expect("at least one pass");
    Ok((caps, state))
}

/// Longest class capsule per node; ties go to the lowest class index.
pub fn predict(class_caps: &CapsuleTensor) -> Vec<usize> {
    let lengths = class_caps.lengths();
    (0..class_caps.n_nodes())
        .map(|i| {
            let row = lengths.row(i);
            let mut best = 0;
            for (l, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = l;
                }
            }
            best
        })
        .collect()
}

/// `h ← ReLU(Ā · h · W)` for each weight matrix in turn (`W: in × out`).
pub fn baseline_mean_aggregate(
    features: &Tensor,
    filter: &SparseMatrix,
    weights: &[Tensor],
) -> Result<Tensor> {
    if weights.is_empty() {
        return Err(Error::Validation("baseline needs at least one layer".into()));
    }
    let mut h = features.clone();
    for w in weights {
        h = spmm(filter, &h.matmul(w)?)?.map(|v| v.max(0.0));
    }
    Ok(h)
}

/// Glorot-uniform `in × out` layer weights for [`baseline_mean_aggregate`].
pub fn baseline_weights(n_features: usize, width: usize, layers: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..layers)
        .map(|i| {
            let fan_in = if i == 0 { n_features } else { width };
            let a = (6.0 / (fan_in + width) as f64).sqrt();
            let data = (0..fan_in * width).map(|_| rng.random_range(-a..a)).collect();
            Tensor::matrix(fan_in, width, data).expect("shape matches")
        })
        .collect()
}
