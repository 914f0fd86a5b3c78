//! Patch grids, window partitions and the merge/expand index structure.
//!
//! Everything here is a statement about runs of consecutive nested indices:
//! a patch is `patch_size` consecutive pixels, a window is `window_size`
//! consecutive patches, and merging joins four consecutive patches.

use std::ops::Range;

use crate::error::GridError;
use crate::healpix::NSide;

/// Number of base pixels covering the fisheye half sphere.
pub const SUBSET_FACES: usize = 8;

pub fn is_power_of_four(v: usize) -> bool {
    v.is_power_of_two() && v.trailing_zeros() % 2 == 0
}

fn check_faces(num_faces: usize) -> Result<(), GridError> {
    if num_faces == 8 || num_faces == 12 {
        Ok(())
    } else {
        Err(GridError::InvalidFaceCount(num_faces))
    }
}

/// Nested index range of the first eight base pixels.
pub fn subset_base8(nside: NSide) -> Range<u64> {
    0..SUBSET_FACES as u64 * nside.face_pixels()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PatchGrid {
    nside: NSide,
    patch_size: usize,
    num_faces: usize,
}

impl PatchGrid {
    /// Grid whose tokens are single pixels.
    pub fn pixels(nside: NSide, num_faces: usize) -> Result<Self, GridError> {
        check_faces(num_faces)?;
        Ok(Self { nside, patch_size: 1, num_faces })
    }

    /// Patch-level resolution.
    pub fn nside(&self) -> NSide {
        self.nside
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn num_faces(&self) -> usize {
        self.num_faces
    }

    pub fn len(&self) -> usize {
        self.num_faces * self.nside.face_pixels() as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Patches per base pixel.
    pub fn face_len(&self) -> usize {
        self.nside.face_pixels() as usize
    }

    /// Pixel-level nested range covered by patch `k`.
    pub fn pixel_range(&self, k: usize) -> Range<u64> {
        let p = self.patch_size as u64;
        k as u64 * p..(k as u64 + 1) * p
    }
}

/// Groups `patch_size` consecutive pixels of an `nside_pixels` grid into patches.
pub fn build_patches(
    nside_pixels: NSide,
    patch_size: usize,
    num_faces: usize,
) -> Result<PatchGrid, GridError> {
    check_faces(num_faces)?;
    if !is_power_of_four(patch_size) {
        return Err(GridError::NotPowerOfFour { what: "patch size", value: patch_size });
    }
    let face = nside_pixels.face_pixels() as usize;
    if patch_size > face {
        return Err(GridError::Indivisible { len: face, size: patch_size });
    }
    let edge = 1u32 << (patch_size.trailing_zeros() / 2);
    let nside = NSide::new(nside_pixels.get() / edge)?;
    Ok(PatchGrid { nside, patch_size, num_faces })
}

/// Coarse grid in which patch `k` joins fine patches `[4k, 4k + 4)`.
pub fn merge_index(grid: &PatchGrid) -> Result<PatchGrid, GridError> {
    if grid.nside.get() < 2 {
        return Err(GridError::CannotMerge);
    }
    Ok(PatchGrid {
        nside: NSide::new(grid.nside.get() / 2)?,
        patch_size: grid.patch_size * 4,
        num_faces: grid.num_faces,
    })
}

/// Inverse of [`merge_index`]: every patch becomes four consecutive patches.
pub fn expand_index(grid: &PatchGrid) -> Result<PatchGrid, GridError> {
    if grid.patch_size < 4 {
        return Err(GridError::NotPowerOfFour { what: "expanded patch size", value: 0 });
    }
    Ok(PatchGrid {
        nside: NSide::new(grid.nside.get() * 2)?,
        patch_size: grid.patch_size / 4,
        num_faces: grid.num_faces,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WindowPartition {
    grid: PatchGrid,
    window_size: usize,
}

impl WindowPartition {
    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    pub fn num_windows(&self) -> usize {
        self.grid.len() / self.window_size
    }

    /// Patch indices of window `w`.
    pub fn window(&self, w: usize) -> Range<usize> {
        w * self.window_size..(w + 1) * self.window_size
    }

    pub fn windows_per_face(&self) -> f64 {
        self.grid.face_len() as f64 / self.window_size as f64
    }
}

pub fn partition_windows(grid: &PatchGrid, window_size: usize) -> Result<WindowPartition, GridError> {
    if !is_power_of_four(window_size) {
        return Err(GridError::NotPowerOfFour { what: "window size", value: window_size });
    }
    if grid.len() % window_size != 0 {
        return Err(GridError::Indivisible { len: grid.len(), size: window_size });
    }
    Ok(WindowPartition { grid: *grid, window_size })
}

/// One row of the spatial layer chain of the UNet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShape {
    pub layer: String,
    pub tokens: usize,
    pub windows: usize,
    pub windows_per_base_pixel: usize,
    pub nside: u32,
    pub followed_by: String,
}

/// Spatial sizes through an encoder of `stages` stages (the last being the
/// bottleneck), the mirrored decoder and the pixel-level output.
pub fn layer_chain(
    nside_pixels: NSide,
    patch_size: usize,
    window_size: usize,
    stages: usize,
    num_faces: usize,
) -> Result<Vec<LayerShape>, GridError> {
    let pixels = PatchGrid::pixels(nside_pixels, num_faces)?;
    let row = |layer: String, g: &PatchGrid, followed_by: &str| -> Result<LayerShape, GridError> {
        let part = partition_windows(g, window_size)?;
        Ok(LayerShape {
            layer,
            tokens: g.len(),
            windows: part.num_windows(),
            windows_per_base_pixel: part.num_windows() / num_faces,
            nside: g.nside().get(),
            followed_by: followed_by.to_string(),
        })
    };

    let mut grids = vec![build_patches(nside_pixels, patch_size, num_faces)?];
    for _ in 1..stages {
        let next = merge_index(grids.last().unwrap())?;
        grids.push(next);
    }

    let mut out = vec![row("input".into(), &pixels, "patch embedding")?];
    let mut block = 1;
    for (i, g) in grids.iter().enumerate() {
        let follow = if i + 1 < stages { "patch merging" } else { "patch expansion" };
        out.push(row(format!("block {block}"), g, follow)?);
        block += 1;
    }
    for g in grids.iter().rev().skip(1) {
        out.push(row(format!("block {block}"), g, "patch expansion")?);
        block += 1;
    }
    out.push(row("output".into(), &pixels, "none")?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ns(v: u32) -> NSide {
        NSide::new(v).unwrap()
    }

    #[test]
    fn subset_ranges() {
        assert_eq!(subset_base8(ns(256)).end, 524_288);
        assert_eq!(subset_base8(ns(1)), 0..8);
    }

    #[test]
    fn patches() {
        let g = build_patches(ns(256), 4, 8).unwrap();
        assert_eq!(g.len(), 131_072);
        assert_eq!(g.nside().get(), 128);
        let id = build_patches(ns(16), 1, 8).unwrap();
        assert_eq!(id.len(), 2048);
        assert_eq!(id.pixel_range(7), 7..8);
        let g16 = build_patches(ns(16), 16, 8).unwrap();
        assert_eq!((g16.len(), g16.nside().get()), (128, 4));
        assert_eq!(g16.pixel_range(2), 32..48);
        assert!(build_patches(ns(16), 8, 8).is_err());
        assert!(build_patches(ns(16), 4, 9).is_err());
    }

    #[test]
    fn windows() {
        let g = build_patches(ns(256), 4, 8).unwrap();
        let w = partition_windows(&g, 64).unwrap();
        assert_eq!(w.num_windows(), 2048);
        assert_eq!(w.windows_per_face(), 256.0);
        let px = PatchGrid::pixels(ns(256), 8).unwrap();
        assert_eq!(partition_windows(&px, 64).unwrap().num_windows(), 8192);
        let small = build_patches(ns(16), 16, 8).unwrap();
        assert_eq!(partition_windows(&small, 64).unwrap().num_windows(), 2);
        assert!(partition_windows(&small, 32).is_err());
        let tiny = PatchGrid::pixels(ns(1), 8).unwrap();
        assert!(partition_windows(&tiny, 16).is_err());
    }

    #[test]
    fn windows_tile_the_grid() {
        let g = build_patches(ns(16), 4, 8).unwrap();
        let w = partition_windows(&g, 16).unwrap();
        let mut seen = vec![0u8; g.len()];
        for k in 0..w.num_windows() {
            for i in w.window(k) {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn merge_and_expand() {
        let g = build_patches(ns(256), 4, 8).unwrap();
        let m = merge_index(&g).unwrap();
        assert_eq!(m.len(), 32_768);
        assert_eq!(expand_index(&m).unwrap(), g);
        let b = build_patches(ns(256), 256, 8).unwrap();
        assert_eq!(b.len(), 2048);
        assert_eq!(expand_index(&b).unwrap().len(), 8192);
        let p16 = build_patches(ns(256), 16, 8).unwrap();
        assert_eq!(p16.len(), 32_768);
        assert_eq!(expand_index(&p16).unwrap().len(), 131_072);
        let one = build_patches(ns(2), 4, 8).unwrap();
        assert_eq!(merge_index(&one), Err(GridError::CannotMerge));
    }
}
