//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Exactly the primitives the embedding nets, distance heads, losses, and
//! optimizer need; no convolutions, no GPU, no graph caching.

mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;
