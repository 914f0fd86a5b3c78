//! Polynomial fisheye camera with the optical axis at `theta = 0`, and
//! resampling between fisheye rasters and the HEALPix subset.

use std::f64::consts::{FRAC_PI_2, PI};
use std::str::FromStr;

use healswin_grid::{ang_to_pix, pix_to_ang, NSide, PixelId, Scheme, SphericalAngle, SUBSET_FACES};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::map::{HealpixMap, ImageRaster};

const INVERT_TOL: f64 = 1e-10;
const LUT_PER_PIXEL: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraCalibration {
    /// `r(theta) = a1 θ + a2 θ² + a3 θ³ + a4 θ⁴`, in pixels.
    pub poly: [f64; 4],
    pub cx: f64,
    pub cy: f64,
    pub aspect: f64,
    pub width: usize,
    pub height: usize,
    /// Half field of view in radians. When absent the lens is usable up to
    /// the first turning point of `r` (at most π).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_theta: Option<f64>,
}

impl CameraCalibration {
    /// Equidistant lens whose `θ = π/2` ray lands on the inscribed circle,
    /// with a 190° field of view.
    pub fn equidistant(size: usize) -> Self {
        let f = (size as f64 / 2.0) / FRAC_PI_2;
        let c = (size as f64 - 1.0) / 2.0;
        Self {
            poly: [f, 0.0, 0.0, 0.0],
            cx: c,
            cy: c,
            aspect: 1.0,
            width: size,
            height: size,
            max_theta: Some(95f64.to_radians()),
        }
    }

    pub fn radius(&self, theta: f64) -> f64 {
        let [a1, a2, a3, a4] = self.poly;
        theta * (a1 + theta * (a2 + theta * (a3 + theta * a4)))
    }

    fn slope(&self, theta: f64) -> f64 {
        let [a1, a2, a3, a4] = self.poly;
        a1 + theta * (2.0 * a2 + theta * (3.0 * a3 + theta * 4.0 * a4))
    }

    /// Usable half field of view.
    pub fn fov_limit(&self) -> f64 {
        if let Some(t) = self.max_theta {
            return t;
        }
        let steps = 100_000;
        for i in 1..=steps {
            let t = PI * i as f64 / steps as f64;
            if self.slope(t) <= 0.0 {
                return PI * (i - 1) as f64 / steps as f64;
            }
        }
        PI
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Calibration(m));
        if self.width == 0 || self.height == 0 {
            return bad("raster size must be positive".into());
        }
        if !(self.aspect.is_finite() && self.aspect > 0.0) {
            return bad(format!("aspect must be positive, got {}", self.aspect));
        }
        let limit = self.fov_limit();
        if !(limit > 0.0 && limit <= PI) {
            return bad(format!("field of view limit {limit} outside (0, pi]"));
        }
        let n = 4096;
        let mut prev = 0.0;
        for i in 1..=n {
            let r = self.radius(limit * i as f64 / n as f64);
            if !(r > prev) {
                return bad(format!("r(theta) is not strictly increasing below theta={limit:.4}"));
            }
            prev = r;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cal: Self = serde_json::from_str(text)?;
        cal.validate()?;
        Ok(cal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub in_bounds: bool,
}

pub fn project_sphere_to_image(cal: &CameraCalibration, ang: SphericalAngle) -> Projection {
    let r = cal.radius(ang.theta);
    let u = cal.cx + r * ang.phi.cos();
    let v = cal.cy + cal.aspect * r * ang.phi.sin();
    let inside = |x: f64, n: usize| x >= -0.5 && x < n as f64 - 0.5;
    let in_bounds = ang.theta <= cal.fov_limit() && inside(u, cal.width) && inside(v, cal.height);
    Projection { u, v, in_bounds }
}

/// Inverse of `r(θ)` over the usable field of view. A table of θ at evenly
/// spaced radii brackets the root, bisection then narrows it to 1e-10.
#[derive(Debug, Clone)]
pub struct RadiusInverse {
    cal: CameraCalibration,
    step: f64,
    r_max: f64,
    thetas: Vec<f64>,
}

impl RadiusInverse {
    pub fn new(cal: &CameraCalibration) -> Result<Self> {
        cal.validate()?;
        let limit = cal.fov_limit();
        let r_max = cal.radius(limit);
        let diag = ((cal.width * cal.width + cal.height * cal.height) as f64).sqrt();
        let n = ((diag.min(r_max) * LUT_PER_PIXEL).ceil() as usize).max(16);
        let step = r_max / n as f64;
        let mut thetas = Vec::with_capacity(n + 1);
        thetas.push(0.0);
        for i in 1..n {
            let lo = *thetas.last().unwrap();
            thetas.push(bisect(cal, i as f64 * step, lo, limit));
        }
        thetas.push(limit);
        Ok(Self { cal: cal.clone(), step, r_max, thetas })
    }

    /// `None` beyond the field of view.
    pub fn invert(&self, r: f64) -> Option<f64> {
        if !(0.0..=self.r_max).contains(&r) {
            return None;
        }
        let k = ((r / self.step) as usize).min(self.thetas.len() - 2);
        Some(bisect(&self.cal, r, self.thetas[k], self.thetas[k + 1]))
    }

    /// Viewing direction of image point `(u, v)`.
    pub fn back_project(&self, u: f64, v: f64) -> Option<SphericalAngle> {
        let dx = u - self.cal.cx;
        let dy = (v - self.cal.cy) / self.cal.aspect;
        let theta = self.invert(dx.hypot(dy))?;
        Some(SphericalAngle::new(theta, dy.atan2(dx).rem_euclid(2.0 * PI)))
    }
}

fn bisect(cal: &CameraCalibration, r: f64, mut lo: f64, mut hi: f64) -> f64 {
    while hi - lo > INVERT_TOL {
        let mid = 0.5 * (lo + hi);
        if cal.radius(mid) < r {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    Bilinear,
    Nearest,
}

impl FromStr for Interp {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "bilinear" => Ok(Self::Bilinear),
            "nearest" => Ok(Self::Nearest),
            _ => Err(format!("unknown interpolation {s:?} (expected bilinear or nearest)")),
        }
    }
}

/// Samples `img` at `(u, v)` into `out`. Bilinear taps outside the raster
/// clamp to the edge; returns false when no tap lies inside it.
pub fn sample(img: &ImageRaster, u: f64, v: f64, interp: Interp, out: &mut [f32]) -> bool {
    let (w, h) = (img.width as i64, img.height as i64);
    match interp {
        Interp::Nearest => {
            let (x, y) = ((u + 0.5).floor() as i64, (v + 0.5).floor() as i64);
            if x < 0 || y < 0 || x >= w || y >= h {
                return false;
            }
            out.copy_from_slice(img.at(x as usize, y as usize));
            true
        }
        Interp::Bilinear => {
            let (x0, y0) = (u.floor() as i64, v.floor() as i64);
            let (fx, fy) = (u - x0 as f64, v - y0 as f64);
            let any_in = [x0, x0 + 1].iter().any(|&x| (0..w).contains(&x))
                && [y0, y0 + 1].iter().any(|&y| (0..h).contains(&y));
            if !any_in {
                return false;
            }
            let cx = |x: i64| x.clamp(0, w - 1) as usize;
            let cy = |y: i64| y.clamp(0, h - 1) as usize;
            let taps = [
                (cx(x0), cy(y0), (1.0 - fx) * (1.0 - fy)),
                (cx(x0 + 1), cy(y0), fx * (1.0 - fy)),
                (cx(x0), cy(y0 + 1), (1.0 - fx) * fy),
                (cx(x0 + 1), cy(y0 + 1), fx * fy),
            ];
            for (c, o) in out.iter_mut().enumerate() {
                let mut acc = 0.0f64;
                for &(x, y, wgt) in &taps {
                    acc += wgt * img.at(x, y)[c] as f64;
                }
                *o = acc as f32;
            }
            true
        }
    }
}

/// Samples the raster at every subset pixel center. Pixels projecting
/// outside the raster or the lens get validity false and value 0.
pub fn resample_to_healpix(
    img: &ImageRaster,
    cal: &CameraCalibration,
    nside: NSide,
    interp: Interp,
) -> Result<HealpixMap> {
    cal.validate()?;
    let n = SUBSET_FACES * nside.face_pixels() as usize;
    let ch = img.channels;
    let per_pixel: Vec<(Vec<f32>, bool)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let ang = pix_to_ang(nside, PixelId::nested(i as u64)).expect("subset pixel");
            let p = project_sphere_to_image(cal, ang);
            let mut px = vec![0.0f32; ch];
            if !p.in_bounds || !sample(img, p.u, p.v, interp, &mut px) {
                px.iter_mut().for_each(|x| *x = 0.0);
                return (px, false);
            }
            (px, true)
        })
        .collect();
    let mut data = Vec::with_capacity(n * ch);
    let mut validity = Vec::with_capacity(n);
    for (px, ok) in per_pixel {
        data.extend(px);
        validity.push(ok);
    }
    HealpixMap::new(nside, SUBSET_FACES, ch, data, validity)
}

/// Subset pixel seen by every raster pixel, `None` where uncovered.
pub fn raster_pixel_lookup(cal: &CameraCalibration, width: usize, height: usize, nside: NSide, faces: usize) -> Result<Vec<Option<usize>>> {
    let inv = RadiusInverse::new(cal)?;
    let limit = faces as u64 * nside.face_pixels();
    Ok((0..width * height)
        .into_par_iter()
        .map(|e| {
            let ang = inv.back_project((e % width) as f64, (e / width) as f64)?;
            let p = ang_to_pix(nside, ang, Scheme::Nested).index;
            (p < limit).then_some(p as usize)
        })
        .collect())
}

/// Nearest-neighbour projection of a map onto the raster grid, with the
/// coverage mask of raster pixels that see the subset.
pub fn resample_to_raster(
    map: &HealpixMap,
    cal: &CameraCalibration,
    width: usize,
    height: usize,
) -> Result<(ImageRaster, Vec<bool>)> {
    let lookup = raster_pixel_lookup(cal, width, height, map.nside, map.num_faces)?;
    let ch = map.channels;
    let mut raster = ImageRaster::zeros(width, height, ch);
    let mut covered = vec![false; width * height];
    for (e, p) in lookup.iter().enumerate() {
        if let Some(p) = *p {
            covered[e] = true;
            if map.validity[p] {
                raster.data[e * ch..(e + 1) * ch].copy_from_slice(map.pixel(p));
            }
        }
    }
    Ok((raster, covered))
}

/// True where the raster pixel's viewing direction falls inside the
/// 8-face subset and the lens field of view.
pub fn coverage_mask(cal: &CameraCalibration, width: usize, height: usize, nside: NSide) -> Result<Vec<bool>> {
    Ok(raster_pixel_lookup(cal, width, height, nside, SUBSET_FACES)?
        .into_iter()
        .map(|p| p.is_some())
        .collect())
}
