//! Recurrent video cells with convolutional and motion-based attention,
//! end-to-end training on synthetic motion video, attention-driven action
//! localization and its evaluation metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cells;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod graph;
pub mod localize;
pub mod model;
pub mod ops;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
