//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! Only the primitives the backbone, the attention head and the losses
//! need are provided. Every primitive has a finite-difference test.

mod gradcheck;
mod graph;
mod nn;
mod tensor;

pub use gradcheck::{compare_gradients, gradient_check, relative_error, GradCheckReport, ParamCheck};
pub use graph::{BatchNormMode, Graph, Var};
pub use nn::{BatchNormStats, ConvGeometry};
pub use tensor::{Element, ParameterSet, Tensor};

pub(crate) use graph::sigmoid;
