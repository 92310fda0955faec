//! Central finite-difference check of every parameter gradient of the full
//! model (primaries, hop attention, routing, squash, margin loss).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{MarginTargets, Tape};
use crate::capsule::{forward_on_tape, Gradients, ParamKind};
use crate::error::Result;
use crate::filter::{FilterMode, FilterSpec, GraphFilter, SparsifyRule, SparsifyStage};
use crate::graph::normalize_adjacency;
use crate::sparse::SparseMatrix;
use crate::tensor::Tensor;
use crate::train::{Model, TrainConfig};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradcheckSize {
    Tiny,
    Small,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradcheckFilter {
    Attention,
    Ppr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradcheckInstance {
    pub n_nodes: usize,
    pub n_features: usize,
    pub n_primary: usize,
    pub n_classes: usize,
    pub primary_dim: usize,
    pub class_dim: usize,
    pub iterations: usize,
    pub max_hop: usize,
}

impl GradcheckSize {
    pub fn instance(self) -> GradcheckInstance {
        match self {
            GradcheckSize::Tiny => GradcheckInstance {
                n_nodes: 12,
                n_features: 6,
                n_primary: 3,
                n_classes: 2,
                primary_dim: 5,
                class_dim: 4,
                iterations: 2,
                max_hop: 3,
            },
            GradcheckSize::Small => GradcheckInstance {
                n_nodes: 24,
                n_features: 8,
                n_primary: 4,
                n_classes: 3,
                primary_dim: 6,
                class_dim: 5,
                iterations: 3,
                max_hop: 3,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub param: ParamKind,
    pub entries: usize,
    /// `None` when the model has no such tensor.
    pub max_rel_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub instance: GradcheckInstance,
    pub filter: GradcheckFilter,
    pub rows: Vec<GradcheckRow>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows
            .iter()
            .all(|r| r.max_rel_error.is_none_or(|e| e < TOLERANCE))
    }
}

fn ring_with_chords(n: usize, rng: &mut ChaCha8Rng) -> SparseMatrix {
    let mut pairs = std::collections::BTreeSet::new();
    for i in 0..n {
        pairs.insert((i.min((i + 1) % n), i.max((i + 1) % n)));
    }
    for _ in 0..n / 2 {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b {
            pairs.insert((a.min(b), a.max(b)));
        }
    }
    let trip: Vec<(usize, usize, f64)> = pairs
        .into_iter()
        .flat_map(|(a, b)| [(a, b, 1.0), (b, a, 1.0)])
        .collect();
    SparseMatrix::from_triplets(n, n, &trip).expect("valid pattern")
}

struct Problem {
    model: Model,
    features: Tensor,
    targets: MarginTargets,
}

impl Problem {
    fn gradients(&self, fault: Option<f64>) -> Result<Gradients> {
        let mut tape = Tape::new();
        if let Some(f) = fault {
            tape.inject_squash_adjoint_fault(f);
        }
        let m = &self.model;
        let nodes = forward_on_tape(
            &mut tape,
            &m.params,
            &self.features,
            m.aggregator(),
            m.config.iterations,
            None,
        )?;
        let loss = tape.margin_loss(nodes.class_caps, self.targets.clone())?;
        tape.backward(loss, &m.params)
    }

    fn loss_only(&self) -> Result<f64> {
        let mut tape = Tape::new();
        let m = &self.model;
        let nodes = forward_on_tape(
            &mut tape,
            &m.params,
            &self.features,
            m.aggregator(),
            m.config.iterations,
            None,
        )?;
        let loss = tape.margin_loss(nodes.class_caps, self.targets.clone())?;
        Ok(tape.value(loss).data()[0])
    }
}

fn build_problem(size: GradcheckSize, filter: GradcheckFilter, seed: u64) -> Result<Problem> {
    let inst = size.instance();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = inst.n_nodes;
    let adjacency = ring_with_chords(n, &mut rng);
    let mode = match filter {
        GradcheckFilter::Attention => FilterMode::Attention {
            max_hop: inst.max_hop,
        },
        GradcheckFilter::Ppr => FilterMode::Ppr {
            alpha: 0.1,
            truncation: Some(10),
        },
    };
    let spec = FilterSpec {
        mode,
        sparsify: SparsifyRule::TopK { k: n / 2 },
        stage: SparsifyStage::PerHop,
    };
    let graph_filter = GraphFilter::build(&normalize_adjacency(&adjacency)?, &spec)?;
    let cfg = TrainConfig {
        n_primary: inst.n_primary,
        primary_dim: inst.primary_dim,
        class_dim: inst.class_dim,
        iterations: inst.iterations,
        seed,
        filter: spec,
        ..TrainConfig::default()
    };
    let mut model = Model::with_filter(cfg, graph_filter, inst.n_features, inst.n_classes)?;
    // Generic point: non-zero biases and hop logits.
    for (kind, t) in model.params.tensors_mut().iter_mut() {
        if !kind.is_weight() {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
    let features = Tensor::matrix(
        n,
        inst.n_features,
        (0..n * inst.n_features).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let targets = MarginTargets {
        targets: (0..n).map(|i| (i, rng.random_range(0..inst.n_classes))).collect(),
        m_plus: model.config.m_plus,
        m_minus: model.config.m_minus,
        lambda: model.config.lambda,
    };
    Ok(Problem {
        model,
        features,
        targets,
    })
}

/// Compares analytic and central-difference gradients for every tensor.
/// `squash_fault` corrupts the squash adjoint (negative control).
pub fn run_gradcheck(
    size: GradcheckSize,
    filter: GradcheckFilter,
    seed: u64,
    squash_fault: Option<f64>,
) -> Result<GradcheckReport> {
    let mut problem = build_problem(size, filter, seed)?;
    let grads = problem.gradients(squash_fault)?;
    let mut rows = Vec::new();
    for kind in ParamKind::ALL {
        let Some(analytic) = grads.get(kind).cloned() else {
            rows.push(GradcheckRow {
                param: kind,
                entries: 0,
                max_rel_error: None,
            });
            continue;
        };
        let mut worst: f64 = 0.0;
        for i in 0..analytic.len() {
            let orig = problem.model.params.get(kind).expect("present").data()[i];
            problem.model.params.get_mut(kind).expect("present").data_mut()[i] = orig + FD_STEP;
            let up = problem.loss_only()?;
            problem.model.params.get_mut(kind).expect("present").data_mut()[i] = orig - FD_STEP;
            let down = problem.loss_only()?;
            problem.model.params.get_mut(kind).expect("present").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
        }
        rows.push(GradcheckRow {
            param: kind,
            entries: analytic.len(),
            max_rel_error: Some(worst),
        });
    }
    Ok(GradcheckReport {
        instance: size.instance(),
        filter,
        rows,
    })
}
