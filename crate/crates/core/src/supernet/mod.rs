//! The searchable network: a DAG whose edges mix every candidate operation by
//! the softmax of per-edge logits, and its discretization.

mod arch;
mod net;
mod ops;

pub use arch::{
    edge_key, parse_edge_key, DiscreteArchitecture, DiscreteEdge, HeadKind, SupernetState,
};
pub use net::{ArchEdge, Bound, Forward, Mode, NetSpec, Supernet};
pub use ops::{OpKind, OpShape, OperationSet};

use crate::engine::softmax_values;

/// Mixing weights of a bundle.
pub fn edge_softmax(logits: &[f64]) -> Vec<f64> {
    softmax_values(logits)
}
