//! Stereo pixel-aligned implicit surface reconstruction.
//!
//! A rectified stereo pair is turned into a cost volume `Φ′`, an aggregated
//! cost volume `Φ` and a confidence volume `Ψ`; soft-argmax over `Ψ` gives a
//! depth map `E`. For any 3D query point the occupancy network consumes the
//! pixel-aligned feature, the voxel-aligned features and the encoded relative
//! z-offset to the predicted depth. Meshes are extracted with marching cubes
//! and scored against analytic ground truth.
//!
//! Numeric code is generic over [`Real`]; the `*32`/`*64` aliases below name
//! the two instantiations used in practice.

pub mod cost;
pub mod descriptors;
pub mod error;
pub mod features;
pub mod geometry;
pub mod grad;
pub mod grid;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod sampling;
pub mod scalar;
pub mod surface;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{volume_coordinate, Aabb, RectifiedRig, VolumeStrides, VoxelCoord};
pub use grid::{DepthMap, DisparityMap, FeatureGrid, PixelMap, Volume4};
pub use scalar::Real;

pub type FeatureGrid32 = FeatureGrid<f32>;
pub type FeatureGrid64 = FeatureGrid<f64>;
pub type Volume32 = Volume4<f32>;
pub type Volume64 = Volume4<f64>;
pub type DepthMap32 = DepthMap<f32>;
pub type DisparityMap32 = DisparityMap<f32>;
