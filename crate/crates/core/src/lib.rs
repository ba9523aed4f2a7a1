pub mod attention;
pub mod autoencoder;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod datapipe;
pub mod diffusion;
pub mod distribution;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod ldm;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod tcam;
pub mod tensor;
pub mod tonemap;
pub mod training;
pub mod toy;
pub mod zica;

pub use autograd::Var;
pub use error::{Error, Result};
pub use tensor::Tensor;
