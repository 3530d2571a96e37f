//! Full-frequency dynamic convolution (FFDConv) for sound event detection.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`ops`], [`autograd`]: dense tensors, elementary kernels and a
//!   reverse-mode tape.
//! - [`audio`]: WAV decoding, STFT and log-mel features.
//! - [`ddf`]: the fused decoupled dynamic-filtering operator with its adjoint
//!   and a brute-force reference.
//! - [`filtergen`]: the spatial and channel filter-generating branches.
//! - [`block`]: static / FFD / FTD / DDF convolution blocks.
//! - [`model`]: the CRNN detector, GRU and checkpoints.
//! - [`sed`]: synthetic data, training, post-processing and event metrics.
//! - [`gradcheck`]: finite-difference verification of every differentiable op.

pub mod audio;
pub mod autograd;
pub mod block;
pub mod ddf;
pub mod error;
pub mod filtergen;
pub mod gradcheck;
pub mod init;
pub mod io;
pub mod kv;
pub mod model;
pub mod ops;
pub mod sed;
pub mod tensor;

pub use autograd::{Gradients, ParamStore, Parameter, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
