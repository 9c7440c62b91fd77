//! Minimal reverse-mode automatic differentiation over row-major matrices.
//!
//! Every model component records its forward computation on a [`Graph`];
//! a single backward sweep yields gradients for all parameters in the
//! [`ParamStore`] the graph reads from.

mod graph;
mod kernels;
mod params;
mod tensor;

pub use graph::{
    focal_term, sigmoid, sinusoid_row, softmax_in_place, softplus, BnUpdate, ConvGeom, Graph,
    Unary, Var, PROB_CLAMP,
};
pub use kernels::attention_rows;
pub use params::{Gradients, ParamEntry, ParamStore, Pid};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
