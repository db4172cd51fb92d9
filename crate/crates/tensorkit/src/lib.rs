//! Reverse-mode automatic differentiation over NHWC tensors, with the
//! convolution, separable convolution, batch-norm and residual layers needed
//! for grid-shaped neural transceivers.

mod conv;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod shape;

pub use conv::{conv2d_direct, conv_weight_shape};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{CustomOp, Gradients, Graph, Mode, RunningStatUpdate, Var};
pub use layers::{
    apply_stat_updates, forward_layer, BatchNormLayer, Conv2dLayer, Layer, ResidualBlock, SeparableConv2dLayer,
    Sequential,
};
pub use ops::{BnRunning, BN_EPS};
pub use optim::Adam;
pub use params::{Param, ParamId, ParamStore};
pub use scalar::{gemm, Scalar};
pub use shape::{numel, positions, Shape, SCALAR};
