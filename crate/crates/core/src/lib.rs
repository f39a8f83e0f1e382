//! Coarse-to-fine registration of airborne LiDAR point clouds to optical
//! imagery.
//!
//! The coarse stage extracts building primitives from both datasets, matches
//! them and estimates a global camera pose. The fine stage super-resolves the
//! cloud into image-resolution altitude and intensity rasters and maximizes
//! mutual information patch by patch, blending the per-patch poses by
//! inverse distance weighting.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the scalar for the common double-precision case.

pub mod cloud;
pub mod config;
pub mod error;
pub mod eval;
pub mod geom;
pub mod hull;
pub mod image_extract;
pub mod io;
pub mod lidar_extract;
pub mod matching;
pub mod pipeline;
pub mod pose_estimate;
pub mod raster;
pub mod scalar;
pub mod simreg;
pub mod superres;
pub mod synth;

pub use error::{Error, ErrorClass, Result};
pub use scalar::Scalar;

pub type CameraPose = geom::CameraPose<f64>;
pub type CameraPoseF32 = geom::CameraPose<f32>;
pub type ProjectionMatrix = geom::ProjectionMatrix<f64>;
pub type PointCloud = cloud::PointCloud<f64>;
pub type PointCloudF32 = cloud::PointCloud<f32>;
pub type BuildingRegion = lidar_extract::BuildingRegion<f64>;
pub type Correspondence = matching::Correspondence<f64>;
