//! Binary arousal classification from gameplay video pixels.

pub mod error;
pub mod eval;
pub mod explain;
pub mod gradcheck;
pub mod manifest;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod traces;
pub mod video;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Real, Tensor};
