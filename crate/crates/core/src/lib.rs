//! Streaming video depth estimation built around a memory of visual and
//! displacement tokens. The tokens are refined at test time by gradient
//! descent through a frozen depth network and fused into the current frame's
//! features with self- and cross-attention.
//!
//! The crate is self-contained: a minimal reverse-mode autodiff engine
//! (`tensor`), optical-flow warping and file IO (`flow`), a small
//! encoder-decoder depth network with the memory attention blocks (`model`),
//! the memory store and its update rules (`memory`), losses and evaluation
//! metrics (`metrics`), streaming inference and training (`pipeline`), a
//! synthetic video benchmark with exact ground truth (`synthdata`), and
//! brute-force reference implementations used by the self-test suites
//! (`verify`).

pub mod config;
pub mod flow;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod synthdata;
pub mod tensor;
pub mod verify;

pub use tensor::{NodeId, Scalar, Tape, Tensor, TensorError};
