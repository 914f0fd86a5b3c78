use healswin_grid::{NSide, SUBSET_FACES};

use crate::error::{invalid, Result};

/// Samples on the first `num_faces` base pixels in nested order, channel-minor.
#[derive(Debug, Clone, PartialEq)]
pub struct HealpixMap {
    pub nside: NSide,
    pub num_faces: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    pub validity: Vec<bool>,
}

impl HealpixMap {
    pub fn new(nside: NSide, num_faces: usize, channels: usize, data: Vec<f32>, validity: Vec<bool>) -> Result<Self> {
        if num_faces != SUBSET_FACES && num_faces != 12 {
            return Err(invalid(format!("num_faces must be 8 or 12, got {num_faces}")));
        }
        let n = num_faces * nside.face_pixels() as usize;
        if channels == 0 || data.len() != n * channels || validity.len() != n {
            return Err(invalid(format!(
                "map of {n} pixels x {channels} channels got {} samples and {} validity flags",
                data.len(),
                validity.len()
            )));
        }
        Ok(Self { nside, num_faces, channels, data, validity })
    }

    pub fn zeros(nside: NSide, num_faces: usize, channels: usize) -> Self {
        let n = num_faces * nside.face_pixels() as usize;
        Self { nside, num_faces, channels, data: vec![0.0; n * channels], validity: vec![true; n] }
    }

    pub fn len(&self) -> usize {
        self.validity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.validity.is_empty()
    }

    pub fn pixel(&self, i: usize) -> &[f32] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    /// A single channel as its own vector.
    pub fn channel(&self, c: usize) -> Vec<f32> {
        self.data.iter().skip(c).step_by(self.channels).copied().collect()
    }

    /// Keeps the listed channels, in order.
    pub fn select(&self, channels: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.len() * channels.len());
        for i in 0..self.len() {
            let px = self.pixel(i);
            data.extend(channels.iter().map(|&c| px[c]));
        }
        Self { data, channels: channels.len(), ..self.clone() }
    }
}

/// Row-major raster, channel-minor.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRaster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ImageRaster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 || data.len() != width * height * channels {
            return Err(invalid(format!(
                "raster {width}x{height}x{channels} got {} samples",
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> &[f32] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn channel(&self, c: usize) -> Vec<f32> {
        self.data.iter().skip(c).step_by(self.channels).copied().collect()
    }
}
