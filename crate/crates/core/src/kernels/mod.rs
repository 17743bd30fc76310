//! Numeric kernels, each with a hand-written vector-Jacobian product.

pub mod aggregate;
pub mod conv;
pub mod dense;
pub mod dropout;
pub mod fd;
pub mod params;

pub use aggregate::{aggregate, aggregate_vjp, AggCache, AggKind, AggSpec, EdgeInputs};
pub use conv::{graph_conv, graph_conv_vjp, ConvCache, ConvKind, ConvParams, Topology};
pub use dense::{
    layer_norm, layer_norm_vjp, linear, linear_param_vjp, linear_vjp, norm, norm_vjp, relu, relu_vjp,
    NormCache,
};
pub use dropout::{dropout_apply, DropoutMask};
pub use fd::{directional_diff, finite_diff_grad, rel_err, rel_err_vec};
pub use params::{LinearParams, NormKind, NormParams, ParamSet, DEFAULT_NORM_EPS};
