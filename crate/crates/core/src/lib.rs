//! Convolutional networks pretrained to replicate HOG and region-covariance
//! descriptors, and a pedestrian detector built on them.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the common instantiations.

pub mod config;
pub mod detector;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod imaging;
pub mod linalg;
pub mod neural;
pub mod pipeline;
pub mod pretrain;
pub mod scalar;
pub mod svm_bbox;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = neural::Tensor<f32>;
pub type Tensor64 = neural::Tensor<f64>;
pub type Network32 = neural::Network<f32>;
pub type Network64 = neural::Network<f64>;
pub type GrayImage32 = imaging::GrayImage<f32>;
pub type GrayImage64 = imaging::GrayImage<f64>;
pub type FeatureVec32 = features::FeatureVec36<f32>;
pub type FeatureVec64 = features::FeatureVec36<f64>;
