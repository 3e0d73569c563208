//! Joint neural-architecture and mixed-precision quantization search.
//!
//! A single-path supernet holds every candidate architecture as masked subsets
//! of over-parameterized depthwise kernels ("weight-sharing") and every
//! candidate bit width as residual decompositions of the same weights
//! ("bit-sharing"). Decisions are sigmoid-relaxed group-Lasso indicators whose
//! thresholds are trained with REINFORCE against a latency/accuracy reward,
//! while the weights themselves are trained with momentum SGD.
//!
//! Module map:
//!
//! - [`tensor`]: small reverse-mode engine (conv, batch-norm, relu6, pooling,
//!   dense, cross-entropy) plus momentum SGD and a finite-difference checker.
//! - [`quantizer`]: min/max normalization, grid rounding and the bit-sharing
//!   residual decomposition.
//! - [`superkernel`]: the 5x5 / expand-6 super-kernel and its decisions.
//! - [`supernet`]: the MobileNetV2-like backbone, subnet extraction and
//!   search-space counting.
//! - [`objective`]: the Pareto reward, latency tables and accuracy evaluation.
//! - [`search`]: the alternating search loop, checkpoints and lifelong
//!   warm-start.
//! - [`data`]: synthetic and CIFAR-10 datasets.
//! - [`cli`]: the command implementations behind the `bitshare-nas` binary.

pub mod archive;
pub mod cli;
pub mod data;
pub mod error;
pub mod gate;
pub mod objective;
pub mod quantizer;
pub mod search;
pub mod superkernel;
pub mod supernet;
pub mod tensor;

pub use error::{Error, Result};

/// Random number generator used throughout the crate. Its full state can be
/// captured and restored, which checkpoints rely on.
pub type SearchRng = rand_chacha::ChaCha8Rng;
