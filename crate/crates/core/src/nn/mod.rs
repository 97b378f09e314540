//! Layers, the three architectures, and their parameters.

pub mod arch;
pub mod checkpoint;
pub mod layers;
pub mod model;

pub use arch::{build_architecture, count_parameters, LayerSpec, ModelName, ModelSpec};
pub use checkpoint::Checkpoint;
pub use layers::Mode;
pub use model::{ForwardCache, Gradients, ModelParams};
