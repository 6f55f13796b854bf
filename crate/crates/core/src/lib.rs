//! Filter-importance ranking, structured pruning, fine-tuning, and
//! evaluation for small convolutional networks, built on a deterministic
//! CPU tensor engine.

pub mod analysis;
pub mod arch;
pub mod dataio;
pub mod engine;
pub mod error;
pub mod flops;
pub mod graph;
pub mod layers;
pub mod parallel;
pub mod pruning;
pub mod ranking;
pub mod rng;
pub mod serialize;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{ModelGraph, ModelWeights, Node, NodeParams};
pub use layers::{ConvParams, LayerKind};
pub use tensor::{Scalar, Tensor};
