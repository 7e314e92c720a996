//! Pairwise image matching by graph reasoning over a pyramid of local
//! similarity vectors.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod pyramid;
pub mod reasoning;
pub mod retrieval;
pub mod scalar;
pub mod simgraph;
pub mod tensor;
pub mod training;

pub use error::{Error, ManifestError, Result};
pub use scalar::{DType, Scalar};

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type FeatureMap64 = pyramid::FeatureMap<f64>;
pub type FeatureMap32 = pyramid::FeatureMap<f32>;
pub type GrNet64 = reasoning::GrNet<f64>;
pub type GrNet32 = reasoning::GrNet<f32>;
pub type Dataset64 = data::dataset::Dataset<f64>;
pub type Dataset32 = data::dataset::Dataset<f32>;
