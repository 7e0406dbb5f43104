//! Minimal reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records every operation as a node whose inputs were created
//! before it. [`Graph::backward`] walks the nodes in reverse and returns a
//! [`GradientMap`] with one entry per parameter leaf. The operation set is
//! exactly what the encoders and random-walk losses need; there is no
//! broadcasting beyond the bias of [`Graph::affine`].

mod array;
pub mod check;
mod graph;

pub use array::Array;
pub use graph::{GradientMap, Graph, NodeId, Role};

pub(crate) use graph::check_tau;
