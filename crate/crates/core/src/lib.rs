//! Budget-constrained differentiable architecture search for iris
//! recognition networks, with the iris preprocessing pipeline, an IrisCode
//! baseline and verification metrics.

pub mod cost;
pub mod data;
pub mod engine;
pub mod eval;
pub mod iris;
pub mod iriscode;
mod error;
pub mod search;
pub mod supernet;

pub use error::{Error, Result};
