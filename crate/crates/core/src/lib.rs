//! Gaze-assisted teacher–student domain adaptation for binary segmentation.
//!
//! A U-Net teacher is trained on labelled source images, labels the target
//! domain, and a student adapts on the target using radiologist-style gaze:
//! gaze-assisted feature alignment against the frozen teacher bottleneck
//! (GAA) and a gaze-weighted balance loss on pseudo-labels (GBL).
//!
//! Numerics are generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checks); the aliases below fix the common choices.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gaa;
pub mod gaze;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod plot;
pub mod scalar;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Image32 = dataset::Image<f32>;
pub type Image64 = dataset::Image<f64>;
pub type Dataset32 = dataset::DomainDataset<f32>;
pub type Dataset64 = dataset::DomainDataset<f64>;
pub type ModelParams32 = backbone::ModelParams<f32>;
pub type ModelParams64 = backbone::ModelParams<f64>;
pub type Prediction32 = backbone::Prediction<f32>;
pub type Prediction64 = backbone::Prediction<f64>;
pub type GazeHeatmap32 = gaze::GazeHeatmap<f32>;
pub type GazeHeatmap64 = gaze::GazeHeatmap<f64>;
pub type WeightMask32 = gaze::WeightMask<f32>;
pub type WeightMask64 = gaze::WeightMask<f64>;
pub type GaaParams32 = gaa::GaaParams<f32>;
pub type GaaParams64 = gaa::GaaParams<f64>;
pub type FeatureMap32 = nn::FeatureMap<f32>;
pub type FeatureMap64 = nn::FeatureMap<f64>;
