pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod io;
pub mod kernel;
pub mod objective;
pub mod paramnet;
pub mod phantom;
pub mod pipeline;
pub mod scalar;
pub mod smooth;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double precision aliases for the generic types.
pub type Volume = volume::Volume3D<f64>;
pub type Kernel = kernel::GaussianKernel<f64>;
pub type ParamNet = paramnet::ParamNetWeights<f64>;
pub type Decoder = objective::DecoderWeights<f64>;
