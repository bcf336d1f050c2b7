pub mod attention;
pub mod checkpoint;
pub mod color;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod graph;
pub mod guidance;
pub mod io;
pub mod linalg;
pub mod mask;
pub mod multisample;
pub mod nn;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
