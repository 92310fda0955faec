//! Node-level capsule graph neural networks.
//!
//! The pipeline: normalize the graph, build a multi-hop filter `Ā`
//! ([`filter`]), project node features into unit-norm primary capsules,
//! route them into per-class capsules with neighborhood routing by
//! agreement ([`capsule`]), and train with a margin loss through a small
//! reverse-mode tape ([`autodiff`], [`train`]).

pub mod autodiff;
pub mod capsule;
pub mod data;
pub mod error;
pub mod eval;
pub mod filter;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod sparse;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{GraphDataset, Splits};
pub use sparse::SparseMatrix;
pub use tensor::Tensor;
