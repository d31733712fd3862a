//! Dense-matrix reverse-mode automatic differentiation.

mod check;
mod graph;
mod matrix;

pub use check::{finite_diff_check, DEFAULT_STEP};
pub(crate) use graph::argmax;
pub use graph::{Axis, Gradients, Graph, NodeId, L2_EPS, LAYER_NORM_EPS};
pub use matrix::Matrix;
