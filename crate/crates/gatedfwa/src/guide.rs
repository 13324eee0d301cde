//! The narrative guide, included from the mdbook chapters under `book/` so
//! every code block runs as a doctest and the rendered book can never drift
//! from the library.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/gates-and-scans.md")]
pub mod gates_and_scans {}

#[doc = include_str!("../../../book/src/windowed-attention.md")]
pub mod windowed_attention {}

#[doc = include_str!("../../../book/src/backward-and-gradients.md")]
pub mod backward_and_gradients {}

#[doc = include_str!("../../../book/src/associative-memory.md")]
pub mod associative_memory {}

#[doc = include_str!("../../../book/src/global-context.md")]
pub mod global_context {}

#[doc = include_str!("../../../book/src/layers-and-training.md")]
pub mod layers_and_training {}

#[doc = include_str!("../../../book/src/cli-reference.md")]
pub mod cli_reference {}
