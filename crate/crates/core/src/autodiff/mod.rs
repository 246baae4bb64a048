//! Reverse-mode differentiation over dense `f64` matrices.

mod check;
mod graph;
mod nn;
mod params;

pub use check::finite_diff_check;
pub use graph::{Gradients, Graph, NodeGradients, NodeId};
pub use nn::{Activation, Dense, Mlp, MlpTrace};
pub use params::{ParamId, ParamStore, Parameter};

pub(crate) use graph::{center, sq_dist};
