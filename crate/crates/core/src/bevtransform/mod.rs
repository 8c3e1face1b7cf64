//! Multi-view features to a bird's-eye-view grid, and grid-to-grid updates
//! between consecutive steps.

mod grid;
mod overlap;
mod temporal;
mod view;

pub use grid::{make_reference_points, positional_encoding, BevConfig, BevFeature, ReferencePoints};
pub use overlap::compute_overlap;
pub use temporal::{TemporalCache, TemporalUpdate};
pub use view::{
    voxel_pool, voxel_pool_backward, BevEncoder, BevEncoderCache, Camera, ViewTransform, ViewTransformCache,
};
