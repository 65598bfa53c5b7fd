//! Reduction-based attention kit.
//!
//! A small dense-tensor engine with reverse-mode differentiation, the
//! ReduceFormer attention operator and its ReLU linear attention baseline,
//! the B1/B2/B3 model family, parameter/MAC/FLOP counters, a binary weight
//! format and a micro-benchmark harness.

pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod checks;
pub mod cost;
pub mod counter;
pub mod error;
pub mod model;
pub mod par;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Scalar, Shape, Tensor};
