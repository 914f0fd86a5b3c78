//! Spherical segmentation and depth estimation with HEAL-SWIN on the HEALPix
//! subset seen by a fisheye camera: resampling, synthetic scenes, the model,
//! training and metrics.

pub mod error;
pub mod fisheye;
pub mod io;
pub mod map;
pub mod metrics;
pub mod model;
pub mod synthetic;
pub mod train;

pub use error::{CoreError, Result};
pub use fisheye::{
    coverage_mask, project_sphere_to_image, resample_to_healpix, resample_to_raster, CameraCalibration, Interp,
    RadiusInverse,
};
pub use map::{HealpixMap, ImageRaster};
pub use model::{rel_pos_index, Model, ModelConfig};
pub use synthetic::{generate, render_fisheye, Sample, SceneSpec};
pub use train::{evaluate, train, EvalReport, Task, TrainConfig, TrainMeta};
