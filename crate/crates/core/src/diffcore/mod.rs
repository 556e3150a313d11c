//! Differentiable dense-matrix numerics.
//!
//! All values are `f64` matrices (vectors are `[1, n]` or `[n, 1]`). A
//! [`Graph`] records primitives during the forward pass and replays them in
//! reverse to produce [`Gradients`]; [`grad_check`] verifies those gradients
//! against central finite differences.

mod gradcheck;
mod graph;
mod params;

pub use gradcheck::{grad_check, relative_error, GradientReport, ParamCheck};
pub use graph::{Gradients, Graph, Segment, Var};
pub use params::{Param, ParamId, ParamStore};

/// Dense row-major matrix of doubles.
pub type Tensor = ndarray::Array2<f64>;

/// Names of the differentiable primitives a [`Graph`] provides.
pub fn primitive_set() -> &'static [&'static str] {
    &[
        "matmul",
        "matmul_t",
        "concat",
        "slice_cols",
        "add",
        "sub",
        "mul",
        "add_row",
        "mul_col",
        "scale",
        "sigmoid",
        "relu",
        "silu",
        "softmax",
        "log_softmax",
        "cosine",
        "gather",
        "pick",
        "sum",
        "mean",
        "weighted_sum",
        "sq_err",
        "layer_norm",
        "causal_attention",
    ]
}
