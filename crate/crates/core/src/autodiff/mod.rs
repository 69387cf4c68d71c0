//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation as it runs. [`Graph::backward`]
//! sweeps the record in reverse and accumulates gradients in a fixed order,
//! so identical inputs always give bit-identical gradients. The same model
//! code runs on `Graph<f32>` for training and `Graph<f64>` for gradient
//! checks.

mod adam;
pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{Gradients, Graph, Var, LOG_ZERO};
pub use params::{Init, ParamBuilder, ParamStore};
pub use tensor::{Real, Tensor};

/// Names of the differentiable primitives a [`Graph`] provides.
pub fn op_catalogue() -> &'static [&'static str] {
    &[
        "add",
        "sub",
        "mul",
        "add_row",
        "mul_row",
        "div_rows",
        "scale",
        "matmul",
        "transpose",
        "reshape",
        "concat_last",
        "gather_rows",
        "slice_cols",
        "gather",
        "shift_right",
        "mask_rows",
        "layer_norm",
        "softmax",
        "log_softmax",
        "gelu",
        "relu",
        "sum",
        "mean",
        "mean_last",
        "l2_norm_last",
        "log_add_exp",
        "conv1d",
        "conv2d",
    ]
}

/// Linear layer `x[T, in] @ w[in, out] + b[out]` over named parameters.
pub fn linear<R: Real>(g: &mut Graph<R>, p: &ParamStore<R>, prefix: &str, x: Var) -> crate::Result<Var> {
    let w = g.param(p, &format!("{prefix}.weight"))?;
    let b = g.param(p, &format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Declares the weight and bias used by [`linear`].
pub fn declare_linear(b: &mut ParamBuilder, prefix: &str, d_in: usize, d_out: usize) {
    b.declare(
        format!("{prefix}.weight"),
        &[d_in, d_out],
        Init::Xavier {
            fan_in: d_in,
            fan_out: d_out,
        },
    );
    b.declare(format!("{prefix}.bias"), &[d_out], Init::Zeros);
}

/// Layer norm over the last axis followed by a learned gain and bias.
pub fn layer_norm_affine<R: Real>(g: &mut Graph<R>, p: &ParamStore<R>, prefix: &str, x: Var) -> crate::Result<Var> {
    let gain = g.param(p, &format!("{prefix}.gain"))?;
    let bias = g.param(p, &format!("{prefix}.bias"))?;
    let y = g.layer_norm(x, 1e-5)?;
    let y = g.mul_row(y, gain)?;
    g.add_row(y, bias)
}

pub fn declare_layer_norm(b: &mut ParamBuilder, prefix: &str, d: usize) {
    b.declare(format!("{prefix}.gain"), &[d], Init::Ones);
    b.declare(format!("{prefix}.bias"), &[d], Init::Zeros);
}
