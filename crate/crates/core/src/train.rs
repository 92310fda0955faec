//! Training configuration, margin loss, the full-batch training loop and
//! checkpoints.

use std::fs;
use std::path::Path;

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{margin_term, MarginTargets, Tape};
use crate::capsule::{
    dropout_mask, forward_on_tape, predict, Aggregator, CapsuleTensor, ModelDims, ModelParams,
    ParamSet, RoutingState,
};
use crate::error::{Error, Result};
use crate::filter::{FilterSpec, GraphFilter};
use crate::graph::{mask_indices, normalize_adjacency, GraphDataset};
use crate::optim::{Adam, AdamConfig};
use crate::sparse::SparseMatrix;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// `K`.
    pub n_primary: usize,
    /// `f_p`.
    pub primary_dim: usize,
    /// `f_c`.
    pub class_dim: usize,
    /// Routing iterations `T`; the layer runs `T + 1` passes.
    pub iterations: usize,
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Apply weight decay to biases and hop logits as well.
    pub decay_all_params: bool,
    pub dropout_p: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Scale each feature row to unit L1 norm before training.
    pub row_normalize_features: bool,
    pub filter: FilterSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_primary: 8,
            primary_dim: 64,
            class_dim: 16,
            iterations: 3,
            m_plus: 0.8,
            m_minus: 0.2,
            lambda: 0.5,
            learning_rate: 1e-3,
            weight_decay: 5e-3,
            decay_all_params: false,
            dropout_p: 0.9,
            epochs: 200,
            seed: 0,
            row_normalize_features: false,
            filter: FilterSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let v = |msg: String| Err(Error::Validation(msg));
        if !(0.0 < self.m_minus && self.m_minus < self.m_plus && self.m_plus < 1.0) {
            return v(format!(
                "margins must satisfy 0 < m_minus < m_plus < 1, got m_minus={} m_plus={}",
                self.m_minus, self.m_plus
            ));
        }
        if !(self.dropout_p > 0.0 && self.dropout_p < 1.0) {
            return v(format!("dropout_p must lie in (0, 1), got {}", self.dropout_p));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return v(format!("lambda must be positive, got {}", self.lambda));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return v(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return v(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.iterations < 1 {
            return v("iterations must be at least 1".into());
        }
        for (name, n) in [
            ("n_primary", self.n_primary),
            ("primary_dim", self.primary_dim),
            ("class_dim", self.class_dim),
        ] {
            if n == 0 {
                return v(format!("{name} must be positive"));
            }
        }
        self.filter.validate()
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            decay_all: self.decay_all_params,
            ..AdamConfig::default()
        }
    }

    fn targets(&self, labels: &[usize], mask: &[bool]) -> Result<MarginTargets> {
        if labels.len() != mask.len() {
            return Err(Error::Dimension(format!(
                "{} labels, mask of {}",
                labels.len(),
                mask.len()
            )));
        }
        let targets: Vec<(usize, usize)> = mask_indices(mask).into_iter().map(|i| (i, labels[i])).collect();
        if targets.is_empty() {
            return Err(Error::Validation("loss mask selects no nodes".into()));
        }
        Ok(MarginTargets {
            targets,
            m_plus: self.m_plus,
            m_minus: self.m_minus,
            lambda: self.lambda,
        })
    }
}

/// Mean over masked nodes of the summed per-class margin terms.
pub fn margin_loss(
    class_caps: &CapsuleTensor,
    labels: &[usize],
    mask: &[bool],
    cfg: &TrainConfig,
) -> Result<f64> {
    let spec = cfg.targets(labels, mask)?;
    let lengths = class_caps.lengths();
    let mut total = 0.0;
    for &(node, label) in &spec.targets {
        if label >= class_caps.n_caps() {
            return Err(Error::LabelOutOfRange {
                node,
                label,
                n_classes: class_caps.n_caps(),
            });
        }
        for (l, &len) in lengths.row(node).iter().enumerate() {
            total += margin_term(len, l == label, &spec);
        }
    }
    Ok(total / spec.targets.len() as f64)
}

/// Rescales each row to unit L1 norm; all-zero rows stay zero.
pub fn row_normalize(features: &Tensor) -> Tensor {
    let mut out = features.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let s: f64 = row.iter().map(|v| v.abs()).sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    out
}

/// Class capsules plus the routing state of one inference pass.
#[derive(Clone, Debug)]
pub struct Inference {
    pub class_caps: CapsuleTensor,
    pub state: RoutingState,
}

impl Inference {
    pub fn predictions(&self) -> Vec<usize> {
        predict(&self.class_caps)
    }
}

/// Parameters together with the graph filter they were trained on.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub params: ModelParams,
    filter: GraphFilter,
    aggregator: Aggregator,
}

impl Model {
    /// Builds the configured filter for `dataset` and initializes parameters.
    pub fn new(config: TrainConfig, dataset: &GraphDataset) -> Result<Self> {
        config.validate()?;
        let a_tilde = normalize_adjacency(&dataset.adjacency)?;
        let filter = GraphFilter::build(&a_tilde, &config.filter)?;
        Self::with_filter(config, filter, dataset.n_features(), dataset.n_classes)
    }

    pub fn with_filter(
        config: TrainConfig,
        filter: GraphFilter,
        n_features: usize,
        n_classes: usize,
    ) -> Result<Self> {
        config.validate()?;
        let dims = config_dims(&config, &filter, n_features, n_classes);
        let params = ModelParams::init(dims, config.seed)?;
        Ok(Self::from_parts(config, filter, params))
    }

    fn from_parts(config: TrainConfig, filter: GraphFilter, params: ModelParams) -> Self {
        let aggregator = Aggregator::from_filter(&filter);
        Self {
            config,
            params,
            filter,
            aggregator,
        }
    }

    pub fn filter(&self) -> &GraphFilter {
        &self.filter
    }

    pub fn aggregator(&self) -> &Aggregator {
        &self.aggregator
    }

    /// `Ā` at the current hop logits.
    pub fn materialized_filter(&self) -> Result<SparseMatrix> {
        let zeta = self.params.get(crate::capsule::ParamKind::Zeta).map(|t| t.data());
        self.filter.materialize(zeta)
    }

    /// Inference without dropout.
    pub fn infer(&self, features: &Tensor) -> Result<Inference> {
        let features = self.prepare(features);
        let mut tape = Tape::new();
        let nodes = forward_on_tape(
            &mut tape,
            &self.params,
            &features,
            &self.aggregator,
            self.config.iterations,
            None,
        )?;
        let couplings = tape.value(*nodes.couplings.last().expect("one pass")).clone();
        Ok(Inference {
            class_caps: CapsuleTensor::from_tensor(tape.value(nodes.class_caps).clone())?,
            state: RoutingState {
                logits: tape.value(nodes.logits).clone(),
                couplings,
            },
        })
    }

    fn prepare(&self, features: &Tensor) -> Tensor {
        if self.config.row_normalize_features {
            row_normalize(features)
        } else {
            features.clone()
        }
    }

    pub fn checkpoint(&self, best_epoch: Option<usize>) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.config.clone(),
            best_epoch,
            params: self.params.clone(),
        }
    }

    /// Rebuilds a model from a checkpoint; the filter is recomputed from
    /// the stored configuration unless one is supplied.
    pub fn from_checkpoint(ck: Checkpoint, dataset: &GraphDataset, filter: Option<GraphFilter>) -> Result<Self> {
        ck.config.validate()?;
        let filter = match filter {
            Some(f) => f,
            None => GraphFilter::build(&normalize_adjacency(&dataset.adjacency)?, &ck.config.filter)?,
        };
        let dims = config_dims(&ck.config, &filter, dataset.n_features(), dataset.n_classes);
        if *ck.params.dims() != dims {
            return Err(Error::Dimension(format!(
                "checkpoint dims {:?} do not match dataset/filter dims {:?}",
                ck.params.dims(),
                dims
            )));
        }
        let params = ModelParams::from_tensors(dims, ck.params.tensors().clone())?;
        Ok(Self::from_parts(ck.config, filter, params))
    }
}

fn config_dims(config: &TrainConfig, filter: &GraphFilter, n_features: usize, n_classes: usize) -> ModelDims {
    ModelDims {
        n_features,
        n_primary: config.n_primary,
        primary_dim: config.primary_dim,
        n_classes,
        class_dim: config.class_dim,
        n_hops: filter.n_hops(),
    }
}

pub const CHECKPOINT_FORMAT: &str = "ncgnn-checkpoint/1";

/// Self-describing JSON checkpoint: format tag, effective configuration,
/// model dimensions and every parameter tensor with its shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: TrainConfig,
    pub best_epoch: Option<usize>,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(self).expect("checkpoints serialize");
        out.push(b'\n');
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck: Self = serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Validation(format!(
                "{}: unsupported checkpoint format {:?}",
                path.display(),
                ck.format
            )));
        }
        let params = ModelParams::from_tensors(*ck.params.dims(), ck.params.tensors().clone())?;
        Ok(Self { params, ..ck })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: Option<f64>,
    pub val_loss: Option<f64>,
    pub train_acc: f64,
}

pub fn history_jsonl(history: &[EpochRecord]) -> String {
    history
        .iter()
        .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
        .collect()
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    fs::write(path, history_jsonl(history)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

/// Called once per epoch with the record and the coupling coefficients
/// of every routing pass of that epoch's training forward pass.
pub type EpochObserver<'a> = dyn FnMut(&EpochRecord, &[&Tensor]) + 'a;

pub fn train(dataset: &GraphDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let model = Model::new(cfg.clone(), dataset)?;
    train_model(model, dataset, None)
}

fn accuracy(pred: &[usize], labels: &[usize], idx: &[usize]) -> f64 {
    let hits = idx.iter().filter(|&&i| pred[i] == labels[i]).count();
    hits as f64 / idx.len() as f64
}

/// Full-batch training of an initialized model, keeping the snapshot with
/// the best validation accuracy (ties go to the lower validation loss).
pub fn train_model(
    mut model: Model,
    dataset: &GraphDataset,
    mut observer: Option<&mut EpochObserver<'_>>,
) -> Result<TrainOutcome> {
    let cfg = model.config.clone();
    cfg.validate()?;
    dataset.validate()?;
    if model.filter.n_nodes() != dataset.n_nodes {
        return Err(Error::Dimension(format!(
            "filter covers {} nodes, dataset has {}",
            model.filter.n_nodes(),
            dataset.n_nodes
        )));
    }
    let splits = &dataset.splits;
    let train_idx = mask_indices(&splits.train);
    if cfg.epochs > 0 && train_idx.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    let val_idx = mask_indices(&splits.val);
    let features = model.prepare(&dataset.features);
    let train_targets = if cfg.epochs > 0 {
        Some(cfg.targets(&dataset.labels, &splits.train)?)
    } else {
        None
    };
    let mut adam = Adam::new(cfg.adam(), &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let k_fp = cfg.n_primary * cfg.primary_dim;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, f64, ModelParams)> = None;

    for epoch in 1..=cfg.epochs {
        let mut tape = Tape::new();
        let mask = dropout_mask(&[dataset.n_nodes, k_fp], cfg.dropout_p, &mut rng)?;
        let nodes = forward_on_tape(
            &mut tape,
            &model.params,
            &features,
            &model.aggregator,
            cfg.iterations,
            Some(mask),
        )?;
        let targets = train_targets.clone().expect("epochs > 0");
        let loss_node = tape.margin_loss(nodes.class_caps, targets)?;
        let train_loss = tape.value(loss_node).data()[0];
        if !train_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: train_loss,
            });
        }
        let grads = tape.backward(loss_node, &model.params)?;
        let snapshots: Vec<&Tensor> = nodes.couplings.iter().map(|&c| tape.value(c)).collect();

        adam.step(&mut model.params, &grads)?;

        let inf = model.infer(&dataset.features)?;
        let pred = inf.predictions();
        let train_acc = accuracy(&pred, &dataset.labels, &train_idx);
        let (val_acc, val_loss) = if val_idx.is_empty() {
            (None, None)
        } else {
            (
                Some(accuracy(&pred, &dataset.labels, &val_idx)),
                Some(margin_loss(&inf.class_caps, &dataset.labels, &splits.val, &cfg)?),
            )
        };
        let record = EpochRecord {
            epoch,
            train_loss,
            val_acc,
            val_loss,
            train_acc,
        };
        debug!(
            "epoch {epoch}: loss {train_loss:.6} train_acc {train_acc:.4} val_acc {:?}",
            val_acc
        );
        if let Some(obs) = observer.as_deref_mut() {
            obs(&record, &snapshots);
        }
        let score = (val_acc.unwrap_or(0.0), val_loss.unwrap_or(0.0));
        let better = match &best {
            None => true,
            Some((_, acc, vl, _)) => {
                if val_idx.is_empty() {
                    true
                } else {
                    score.0 > *acc || (score.0 == *acc && score.1 < *vl)
                }
            }
        };
        if better {
            best = Some((epoch, score.0, score.1, model.params.clone()));
        }
        history.push(record);
    }

    let best_epoch = best.as_ref().map(|b| b.0);
    if let Some((epoch, acc, _, params)) = best {
        info!("best validation accuracy {acc:.4} at epoch {epoch}");
        model.params = params;
    }
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}

/// Gradients of the training loss at the current parameters, without
/// dropout. Used by gradient checking.
pub fn loss_and_gradients(
    model: &Model,
    features: &Tensor,
    labels: &[usize],
    mask: &[bool],
) -> Result<(f64, ParamSet)> {
    let targets = model.config.targets(labels, mask)?;
    let mut tape = Tape::new();
    let nodes = forward_on_tape(
        &mut tape,
        &model.params,
        features,
        &model.aggregator,
        model.config.iterations,
        None,
    )?;
    let loss = tape.margin_loss(nodes.class_caps, targets)?;
    let grads = tape.backward(loss, &model.params)?;
    Ok((tape.value(loss).data()[0], grads))
}
