//! Image-guided point cloud completion: a coarse generator driven by a
//! single image followed by a transformer refiner that moves points with
//! predicted offsets.
//!
//! [`geometry`] holds the point-cloud model and metrics, [`autodiff`] the
//! small reverse-mode engine the networks run on, and [`training`] the
//! data, loss and optimization loop.

pub mod autodiff;
pub mod config;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod i2p;
pub mod model;
pub mod p2p;
pub mod training;

pub use config::{ArchConfig, PipelineConfig};
pub use error::{Error, Result};
pub use model::{Completion, CompletionModel};
pub use training::AblationVariant;
