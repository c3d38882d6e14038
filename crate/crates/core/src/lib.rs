//! Linear model of coregionalization with a projected likelihood.

pub mod error;
pub mod inference;
pub mod kernels;
pub mod linalg;
pub mod metrics;
pub mod noise_param;
pub mod scalar;
pub mod synthdata;
pub mod training;
pub mod verify;

pub use error::{LmcError, Result};
pub use scalar::Scalar;

pub type DatasetF64 = inference::Dataset<f64>;
pub type DatasetF32 = inference::Dataset<f32>;
pub type LmcModelF64 = training::LmcModel<f64>;
pub type LmcModelF32 = training::LmcModel<f32>;
pub type NoiseParametrizationF64 = noise_param::NoiseParametrization<f64>;
pub type NoiseParametrizationF32 = noise_param::NoiseParametrization<f32>;
pub type PredictionF64 = inference::PredictionResult<f64>;
pub type PredictionF32 = inference::PredictionResult<f32>;
pub type SyntheticDataF64 = synthdata::SyntheticData<f64>;
pub type SyntheticDataF32 = synthdata::SyntheticData<f32>;
