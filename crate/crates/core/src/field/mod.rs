//! Dense grid geometry and the non-learned field operations.
//!
//! Coordinates are in voxel units throughout. Arrays are channel-major and
//! row-major within a channel (the last axis varies fastest). Displacement
//! component `j` points along axis `j`.

mod grid;
pub mod kernels;
mod ops;
pub mod volb;

pub use grid::{FieldKind, Grid, LabelMap, VectorField, Volume};
pub use ops::{
    compose, downsample_field, downsample_volume, identity_coords, integrate_velocity, interpolate, invert_velocity,
    jacobian_determinant, resample_linear, spatial_gradient, upsample_field, upsample_volume, warp, warp_labels,
    GradientStack, Pool, DEFAULT_STEPS,
};
