//! Dense tensors and a small reverse-mode differentiation engine covering the
//! searchable operations (convolution, pooling, batch norm, identity, zero),
//! the network head and the two training losses.

pub mod checkpoint;
mod graph;
pub(crate) mod kernels;
mod optim;
mod tensor;

pub use graph::{softmax_values, BatchStats, Graph, Var};
pub use kernels::PoolKind;
pub use optim::{sgd_step, Sgd};
pub use tensor::{Scalar, Tensor};

/// Batch-norm epsilon used throughout.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[cfg(test)]
mod tests;
