//! Class-count-agnostic image classification: the label is rendered as text
//! beside the image, masked out, and reconstructed by a masked autoencoder.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used for training.

pub mod canvas;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod glyphfont;
pub mod gradcheck;
pub mod mae;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pnm;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type Image32 = canvas::Image<f32>;
pub type Image64 = canvas::Image<f64>;
pub type Canvas32 = canvas::Canvas<f32>;
pub type Canvas64 = canvas::Canvas<f64>;
pub type MaeModel32 = mae::MaeModel<f32>;
pub type MaeModel64 = mae::MaeModel<f64>;
pub type Checkpoint32 = checkpoint::Checkpoint<f32>;
pub type Trainer32 = train::Trainer<f32>;
pub type Datasets32 = train::Datasets<f32>;
pub type LabeledImage32 = data::LabeledImage<f32>;
