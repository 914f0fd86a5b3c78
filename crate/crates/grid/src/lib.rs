//! HEALPix grid engine and the index plans consumed by spherical windowed
//! attention: patch grids, windows, merge/expand maps and shift plans.

pub mod error;
pub mod healpix;
pub mod patch;
pub mod shift;
pub mod zorder;

pub use error::GridError;
pub use healpix::{
    ang_to_pix, base_pixel, child_range, convert, from_local_xy, local_xy, nest_to_ring, npix,
    pix_to_ang, ring_position, ring_to_nest, FaceCoord, NSide, PixelId, Scheme, SphericalAngle,
};
pub use patch::{
    build_patches, expand_index, is_power_of_four, layer_chain, merge_index, partition_windows,
    subset_base8, LayerShape, PatchGrid, WindowPartition, SUBSET_FACES,
};
pub use shift::{
    attention_mask, cached_plan, grid_shift_plan, ring_order, shift_plan, spiral_shift_plan,
    AttentionMask, ShiftPlan, ShiftStrategy,
};
