//! Procedural spherical street scenes with exact labels and depth.
//!
//! Camera frame: the optical axis is `+z` (`theta = 0`), image "down" is `+y`.
//! A ground plane lies `CAMERA_HEIGHT` below the camera; a straight road runs
//! along `z` with off-road terrain (void) on both sides. Spherical-cap objects
//! stand in front of the ground, sky fills everything above the horizon and
//! the ego vehicle body covers the rear cap.

use std::f64::consts::PI;

use healswin_grid::{pix_to_ang, NSide, PixelId, SphericalAngle, SUBSET_FACES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{invalid, Result};
use crate::fisheye::{CameraCalibration, RadiusInverse};
use crate::map::{HealpixMap, ImageRaster};

pub const NUM_CLASSES: usize = 6;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["void", "road", "sky", "object-a", "object-b", "ego"];
pub const VOID: u8 = 0;
pub const ROAD: u8 = 1;
pub const SKY: u8 = 2;
pub const OBJECT_A: u8 = 3;
pub const EGO: u8 = 5;

pub const MIN_DEPTH: f64 = 0.5;
pub const MAX_DEPTH: f64 = 100.0;
pub const CAMERA_HEIGHT: f64 = 1.5;
const EGO_THETA: f64 = 110.0 * PI / 180.0;
const FOG_RANGE: f64 = 35.0;

const BASE_COLORS: [[f64; 3]; NUM_CLASSES] = [
    [0.45, 0.33, 0.18],
    [0.30, 0.30, 0.36],
    [0.40, 0.60, 0.95],
    [0.85, 0.22, 0.18],
    [0.18, 0.70, 0.28],
    [0.08, 0.08, 0.12],
];
const FOG_COLOR: [f64; 3] = [0.78, 0.80, 0.84];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub nside: u32,
    #[serde(default = "default_objects")]
    pub num_objects: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_camera")]
    pub camera: CameraCalibration,
}

fn default_objects() -> usize {
    6
}

fn default_classes() -> usize {
    NUM_CLASSES
}

fn default_camera() -> CameraCalibration {
    CameraCalibration::equidistant(256)
}

impl SceneSpec {
    pub fn new(seed: u64, nside: u32) -> Self {
        Self {
            seed,
            nside,
            num_objects: default_objects(),
            num_classes: NUM_CLASSES,
            camera: default_camera(),
        }
    }

    pub fn validate(&self) -> Result<NSide> {
        if self.num_classes != NUM_CLASSES {
            return Err(invalid(format!("the scene vocabulary has {NUM_CLASSES} classes, got {}", self.num_classes)));
        }
        Ok(NSide::new(self.nside)?)
    }
}

#[derive(Debug, Clone)]
struct Cap {
    center: [f64; 3],
    cos_radius: f64,
    depth: f64,
    class: u8,
}

#[derive(Debug, Clone)]
struct Wave {
    k: [f64; 3],
    phase: f64,
}

/// Analytic scene drawn from a seed.
#[derive(Debug, Clone)]
pub struct Scene {
    caps: Vec<Cap>,
    waves: Vec<Wave>,
    road_half_width: f64,
}

/// What one viewing ray sees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub label: u8,
    /// Meters along the ray; 0 for sky.
    pub depth: f64,
    pub rgb: [f32; 3],
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl Scene {
    pub fn new(spec: &SceneSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let road_half_width = rng.gen_range(3.0..7.0);
        let caps = (0..spec.num_objects)
            .map(|k| {
                let theta = rng.gen_range(15f64..85.0).to_radians();
                let phi = rng.gen_range(0.0..2.0 * PI);
                let radius = rng.gen_range(7f64..16.0).to_radians();
                Cap {
                    center: SphericalAngle::new(theta, phi).unit_vector(),
                    cos_radius: radius.cos(),
                    depth: rng.gen_range(4.0..40.0),
                    class: OBJECT_A + (k % 2) as u8,
                }
            })
            .collect();
        let waves = (0..3)
            .map(|_| {
                let f = rng.gen_range(4.0..10.0);
                let dir = SphericalAngle::new(rng.gen_range(0.0..PI), rng.gen_range(0.0..2.0 * PI)).unit_vector();
                Wave { k: dir.map(|c| c * f), phase: rng.gen_range(0.0..2.0 * PI) }
            })
            .collect();
        Self { caps, waves, road_half_width }
    }

    fn texture(&self, d: [f64; 3]) -> f64 {
        let s: f64 = self.waves.iter().map(|w| (dot(w.k, d) + w.phase).sin()).sum();
        1.0 + 0.06 * s / self.waves.len() as f64
    }

    /// Label and depth along unit direction `d`.
    pub fn geometry(&self, d: [f64; 3]) -> (u8, f64) {
        if d[2] < EGO_THETA.cos() {
            // body panel roughly a meter away, nearer towards the rear
            let t = (d[2].acos() - EGO_THETA) / (PI - EGO_THETA);
            return (EGO, 1.2 - 0.6 * t);
        }
        let ground = if d[1] > 0.0 { CAMERA_HEIGHT / d[1] } else { f64::INFINITY };
        let mut best: Option<(u8, f64)> = None;
        for cap in &self.caps {
            if dot(d, cap.center) >= cap.cos_radius {
                let depth = cap.depth.min(0.95 * ground);
                if best.map_or(true, |(_, b)| depth < b) {
                    best = Some((cap.class, depth));
                }
            }
        }
        let (label, depth) = match best {
            Some(hit) => hit,
            None if ground.is_finite() => {
                let lateral = (ground * d[0]).abs();
                (if lateral <= self.road_half_width { ROAD } else { VOID }, ground)
            }
            None => return (SKY, 0.0),
        };
        (label, depth.clamp(MIN_DEPTH, MAX_DEPTH))
    }

    pub fn ray(&self, d: [f64; 3]) -> RayHit {
        let (label, depth) = self.geometry(d);
        let tex = self.texture(d);
        let rgb = if label == SKY {
            let up = (-d[1]).clamp(0.0, 1.0);
            let horizon = [0.80, 0.85, 0.92];
            std::array::from_fn(|c| (horizon[c] * (1.0 - up) + BASE_COLORS[2][c] * up) * tex)
        } else {
            let fog = 1.0 - (-depth / FOG_RANGE).exp();
            let base = BASE_COLORS[label as usize];
            std::array::from_fn(|c| (1.0 - fog) * base[c] * tex + fog * FOG_COLOR[c])
        };
        RayHit { label, depth, rgb: rgb.map(|v| v.clamp(0.0, 1.0) as f32) }
    }
}

/// Aligned image, labels and depth on one grid or raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Vec<f32>,
    pub labels: Vec<u8>,
    pub depth: Vec<f32>,
    pub sky_mask: Vec<bool>,
    /// False where the element has no data (outside the lens on rasters).
    pub validity: Vec<bool>,
}

impl Sample {
    fn from_hits(hits: Vec<Option<RayHit>>) -> Self {
        let n = hits.len();
        let mut s = Sample {
            image: Vec::with_capacity(3 * n),
            labels: Vec::with_capacity(n),
            depth: Vec::with_capacity(n),
            sky_mask: Vec::with_capacity(n),
            validity: Vec::with_capacity(n),
        };
        for h in hits {
            let h = h.unwrap_or(RayHit { label: VOID, depth: 0.0, rgb: [0.0; 3] });
            let ok = h.depth > 0.0 || h.label == SKY;
            s.image.extend_from_slice(&h.rgb);
            s.labels.push(h.label);
            s.depth.push(h.depth as f32);
            s.sky_mask.push(h.label == SKY && ok);
            s.validity.push(ok);
        }
        s
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Five channels: r, g, b, label, depth.
    fn packed(&self) -> Vec<f32> {
        let mut data = Vec::with_capacity(self.len() * 5);
        for i in 0..self.len() {
            data.extend_from_slice(&self.image[3 * i..3 * i + 3]);
            data.push(self.labels[i] as f32);
            data.push(self.depth[i]);
        }
        data
    }

    fn unpack(data: &[f32], validity: Vec<bool>, channels: usize) -> Result<Self> {
        if channels != 5 {
            return Err(invalid(format!("a sample file has 5 channels, found {channels}")));
        }
        let mut s = Sample {
            image: Vec::new(),
            labels: Vec::new(),
            depth: Vec::new(),
            sky_mask: Vec::new(),
            validity,
        };
        for (i, px) in data.chunks(5).enumerate() {
            let label = px[3];
            if !(label >= 0.0 && label < NUM_CLASSES as f32 && label.fract() == 0.0) {
                return Err(invalid(format!("element {i} has label {label}")));
            }
            s.image.extend_from_slice(&px[..3]);
            s.labels.push(label as u8);
            s.depth.push(px[4]);
            s.sky_mask.push(s.validity[i] && label as u8 == SKY);
        }
        Ok(s)
    }

    pub fn to_map(&self, nside: NSide) -> Result<HealpixMap> {
        HealpixMap::new(nside, SUBSET_FACES, 5, self.packed(), self.validity.clone())
    }

    pub fn from_map(map: &HealpixMap) -> Result<Self> {
        Self::unpack(&map.data, map.validity.clone(), map.channels)
    }

    pub fn to_raster(&self, width: usize, height: usize) -> Result<ImageRaster> {
        ImageRaster::new(width, height, 5, self.packed())
    }

    pub fn from_raster(r: &ImageRaster, validity: Option<Vec<bool>>) -> Result<Self> {
        let v = validity.unwrap_or_else(|| vec![true; r.width * r.height]);
        Self::unpack(&r.data, v, r.channels)
    }

    pub fn image_map(&self, nside: NSide) -> Result<HealpixMap> {
        HealpixMap::new(nside, SUBSET_FACES, 3, self.image.clone(), self.validity.clone())
    }

    pub fn label_histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for (&l, &ok) in self.labels.iter().zip(&self.validity) {
            if ok {
                h[l as usize] += 1;
            }
        }
        h
    }
}

/// Header extras describing a sample file.
pub fn sample_header(spec: &SceneSpec) -> Map<String, Value> {
    let v = json!({
        "content": "sample",
        "channel_names": ["r", "g", "b", "label", "depth"],
        "class_names": CLASS_NAMES,
        "seed": spec.seed,
        "camera": spec.camera,
    });
    v.as_object().unwrap().clone()
}

/// The scene on the HEALPix subset, sampled at pixel centers.
pub fn generate(spec: &SceneSpec) -> Result<Sample> {
    let nside = spec.validate()?;
    let scene = Scene::new(spec);
    let n = SUBSET_FACES * nside.face_pixels() as usize;
    let hits = (0..n)
        .into_par_iter()
        .map(|i| {
            let ang = pix_to_ang(nside, PixelId::nested(i as u64)).expect("subset pixel");
            Some(scene.ray(ang.unit_vector()))
        })
        .collect();
    Ok(Sample::from_hits(hits))
}

/// The same scene seen through `spec.camera`, one ray per raster pixel.
pub fn render_fisheye(spec: &SceneSpec) -> Result<Sample> {
    spec.validate()?;
    let scene = Scene::new(spec);
    let cal = &spec.camera;
    let inv = RadiusInverse::new(cal)?;
    let hits = (0..cal.width * cal.height)
        .into_par_iter()
        .map(|e| {
            let ang = inv.back_project((e % cal.width) as f64, (e / cal.width) as f64)?;
            Some(scene.ray(ang.unit_vector()))
        })
        .collect();
    Ok(Sample::from_hits(hits))
}
