//! Semi-supervised semantic correspondence laboratory.
//!
//! A small differentiable matcher (fixed filter bank + learnable projection,
//! cosine correlation, soft-argmax transfer) trained with sparse keypoint
//! supervision and confidence-gated machine annotations on unlabeled pairs,
//! together with PCK evaluation, a corruption robustness benchmark generator
//! and a synthetic dataset with exact ground truth.

pub mod annotator;
pub mod augment;
pub mod cli;
pub mod config;
pub mod corruption;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod formats;
pub mod geometry;
pub mod image;
pub mod manifest;
pub mod matcher;
pub mod pairs;
pub mod rng;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::{GeometricTransform, PixelGrid, Point2};
pub use image::Image;
