//! Minimal reverse-mode automatic differentiation over dense rank-2 arrays.

mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, ParamGrads, Var};
pub use optim::{adaln_only, all_groups, Adam, AdamConfig};
pub use params::{Group, Param, ParamId, ParamStore};
pub use tensor::{Real, Tensor};
