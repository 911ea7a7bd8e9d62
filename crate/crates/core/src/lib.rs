//! Image-adaptive codebooks: class-specific vector-quantized codebooks
//! blended per location by a learned weight map, trained in three stages
//! and applied to reconstruction, super-resolution and inpainting.

pub mod error;
pub mod graph;
pub mod nn;
pub mod patch;
pub mod tensor;

pub mod adaptive;
pub mod checkpoint;
pub mod cli;
pub mod codebook;
pub mod config;
pub mod degradation;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
