//! Gated sliding-window attention with a cumulative decay bias, on the CPU.
//!
//! The crate provides, end to end:
//!
//! * a data-dependent memory gate and three interchangeable prefix-scan
//!   strategies that turn per-token gates into a decay ladder ([`gate`]);
//! * dense reference attention oracles and streaming tiled kernels with
//!   window-aware pruning, online softmax, and a recomputation-based
//!   backward pass ([`attn`]);
//! * an associative-memory simulator that executes the recurrence and
//!   objective identities behind each attention variant ([`memory`]);
//! * a compression/selection/local three-branch extension ([`nsa`]);
//! * a full attention layer, transformer block, and a toy recall training
//!   demo ([`model`]);
//! * the verification and benchmarking machinery behind the `gfwa` binary
//!   ([`cli`]).
//!
//! The narrative guide with runnable snippets lives in [`guide`]; the same
//! chapters build as an mdbook from `book/`.

// Index-based loops over matrix coordinates are the house style here.
#![allow(clippy::needless_range_loop)]

pub mod attn;
pub mod cli;
pub mod error;
pub mod gate;
pub mod guide;
pub mod memory;
pub mod model;
pub mod nsa;
pub mod numerics;

pub use error::{Error, Result};
