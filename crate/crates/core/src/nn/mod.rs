//! Minimal neural network toolkit: tensors, a reverse-mode tape, parameters and Adam.

mod adam;
mod graph;
mod params;
mod tensor;

pub use adam::Adam;
pub use graph::{AttnMode, Graph, Var};
pub use params::{Init, ParamSet};
pub use tensor::{Real, Tensor};
