//! Elementary tensor kernels: forward functions and their adjoints.
//!
//! These are plain functions on [`Tensor`](crate::Tensor)s; the differentiable
//! wrappers that record onto a [`Tape`](crate::autograd::Tape) live in
//! [`crate::autograd`].

pub mod activation;
pub mod conv;
pub mod elementwise;
pub mod gemm;
pub mod linear;
pub mod norm;
pub mod pool;
pub mod shape;

pub use activation::{relu, sigmoid, sigmoid_scalar, softmax, tanh};
pub use conv::{conv2d, conv2d_backward, conv_out_len, Conv2dGrads};
pub use elementwise::{add, binary, broadcast_shape, mul, scale, BinaryOp};
pub use linear::linear;
pub use norm::{ChannelStats, BN_EPS};
pub use pool::{global_avg_pool, pool2d, PoolMode};
pub use shape::{concat, permute, reduce_axis};
