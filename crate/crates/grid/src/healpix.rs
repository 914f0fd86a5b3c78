//! HEALPix pixelization: counts, nested/ring conversion, pixel centers and
//! point lookup, following the usual Górski et al. conventions (base pixels
//! 0-3 north, 4-7 equatorial, 8-11 south).

use std::f64::consts::{FRAC_PI_2, PI};
use std::ops::Range;

use crate::error::GridError;
use crate::zorder;

const TWO_THIRDS: f64 = 2.0 / 3.0;
const MAX_ORDER: u32 = 29;

/// Row of each base pixel in units of nside (north-east edge lines).
const JRLL: [i64; 12] = [2, 2, 2, 2, 3, 3, 3, 3, 4, 4, 4, 4];
/// Azimuthal position of each base pixel in units of pi/4.
const JPLL: [i64; 12] = [1, 3, 5, 7, 0, 2, 4, 6, 1, 3, 5, 7];

/// Number of subdivisions along each edge of a base pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NSide(u32);

impl NSide {
    pub fn new(value: u32) -> Result<Self, GridError> {
        if value == 0 || !value.is_power_of_two() || value.trailing_zeros() > MAX_ORDER {
            return Err(GridError::InvalidNSide(value as u64));
        }
        Ok(Self(value))
    }

    #[inline]
    pub fn get(self) -> u32 {
        self.0
    }

    /// log2(nside).
    #[inline]
    pub fn order(self) -> u32 {
        self.0.trailing_zeros()
    }

    /// Pixels per base pixel.
    #[inline]
    pub fn face_pixels(self) -> u64 {
        (self.0 as u64) * (self.0 as u64)
    }

    #[inline]
    pub fn npix(self) -> u64 {
        12 * self.face_pixels()
    }

    /// Pixels in each polar cap (rings 1..nside-1).
    #[inline]
    fn ncap(self) -> u64 {
        let n = self.0 as u64;
        2 * n * (n - 1)
    }

    /// Number of iso-latitude rings, `4·nside − 1`.
    #[inline]
    pub fn num_rings(self) -> u64 {
        4 * self.0 as u64 - 1
    }

    fn check(self, index: u64) -> Result<(), GridError> {
        if index >= self.npix() {
            return Err(GridError::IndexOutOfRange {
                index,
                nside: self.0,
                npix: self.npix(),
            });
        }
        Ok(())
    }
}

impl std::fmt::Display for NSide {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    Nested,
    Ring,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PixelId {
    pub index: u64,
    pub scheme: Scheme,
}

impl PixelId {
    pub fn nested(index: u64) -> Self {
        Self { index, scheme: Scheme::Nested }
    }

    pub fn ring(index: u64) -> Self {
        Self { index, scheme: Scheme::Ring }
    }
}

/// Colatitude `theta` in [0, pi] (0 at the north pole) and azimuth `phi` in [0, 2pi).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalAngle {
    pub theta: f64,
    pub phi: f64,
}

impl SphericalAngle {
    pub fn new(theta: f64, phi: f64) -> Self {
        Self { theta, phi }
    }

    /// Unit vector `(sinθ cosφ, sinθ sinφ, cosθ)`.
    pub fn unit_vector(self) -> [f64; 3] {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        [st * cp, st * sp, ct]
    }

    pub fn from_vector(v: [f64; 3]) -> Self {
        let rho = (v[0] * v[0] + v[1] * v[1]).sqrt();
        let theta = rho.atan2(v[2]);
        let mut phi = v[1].atan2(v[0]);
        if phi < 0.0 {
            phi += 2.0 * PI;
        }
        if phi >= 2.0 * PI {
            phi = 0.0;
        }
        Self { theta, phi }
    }
}

/// Position of a pixel inside its base pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FaceCoord {
    pub face: u8,
    pub x: u32,
    pub y: u32,
}

pub fn npix(nside: NSide) -> u64 {
    nside.npix()
}

pub fn base_pixel(nside: NSide, nested: u64) -> Result<u8, GridError> {
    nside.check(nested)?;
    Ok((nested >> (2 * nside.order())) as u8)
}

pub fn local_xy(nside: NSide, nested: u64) -> Result<FaceCoord, GridError> {
    nside.check(nested)?;
    Ok(local_xy_unchecked(nside, nested))
}

#[inline]
pub(crate) fn local_xy_unchecked(nside: NSide, nested: u64) -> FaceCoord {
    let bits = 2 * nside.order();
    let face = (nested >> bits) as u8;
    let (x, y) = zorder::deinterleave(nested & ((1u64 << bits) - 1));
    FaceCoord { face, x, y }
}

/// Inverse of [`local_xy`].
pub fn from_local_xy(nside: NSide, c: FaceCoord) -> Result<u64, GridError> {
    let n = nside.get();
    if c.face >= 12 || c.x >= n || c.y >= n {
        return Err(GridError::IndexOutOfRange {
            index: ((c.face as u64) << (2 * nside.order())) | zorder::interleave(c.x, c.y),
            nside: n,
            npix: nside.npix(),
        });
    }
    Ok(from_local_xy_unchecked(nside, c))
}

#[inline]
pub(crate) fn from_local_xy_unchecked(nside: NSide, c: FaceCoord) -> u64 {
    ((c.face as u64) << (2 * nside.order())) | zorder::interleave(c.x, c.y)
}

/// Nested children of `p` at a finer resolution, a contiguous index range.
pub fn child_range(coarse: NSide, p: u64, fine: NSide) -> Result<Range<u64>, GridError> {
    if fine.get() <= coarse.get() {
        return Err(GridError::InvalidResolutionPair {
            coarse: coarse.get(),
            fine: fine.get(),
        });
    }
    coarse.check(p)?;
    let r = 1u64 << (2 * (fine.order() - coarse.order()));
    Ok(p * r..(p + 1) * r)
}

fn isqrt(v: u64) -> u64 {
    let mut r = (v as f64).sqrt() as u64;
    while r * r > v {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= v {
        r += 1;
    }
    r
}

fn xyf_to_ring(nside: NSide, ix: i64, iy: i64, face: usize) -> u64 {
    let ns = nside.get() as i64;
    let nl4 = 4 * ns;
    let jr = JRLL[face] * ns - ix - iy - 1;
    let (nr, n_before, kshift) = if jr < ns {
        (jr, 2 * jr * (jr - 1), 0)
    } else if jr > 3 * ns {
        let nr = nl4 - jr;
        (nr, nside.npix() as i64 - 2 * (nr + 1) * nr, 0)
    } else {
        (ns, nside.ncap() as i64 + (jr - ns) * nl4, (jr - ns) & 1)
    };
    let mut jp = (JPLL[face] * nr + ix - iy + 1 + kshift) / 2;
    if jp > nl4 {
        jp -= nl4;
    } else if jp < 1 {
        jp += nl4;
    }
    (n_before + jp - 1) as u64
}

fn ring_to_xyf(nside: NSide, pix: u64) -> (i64, i64, usize) {
    let ns = nside.get() as i64;
    let nl2 = 2 * ns;
    let npix = nside.npix() as i64;
    let ncap = nside.ncap() as i64;
    let pix = pix as i64;
    let (iring, iphi, kshift, nr, face) = if pix < ncap {
        let iring = (1 + isqrt((1 + 2 * pix) as u64) as i64) >> 1;
        let iphi = pix + 1 - 2 * iring * (iring - 1);
        (iring, iphi, 0, iring, ((iphi - 1) / iring) as usize)
    } else if pix < npix - ncap {
        let ip = pix - ncap;
        let tmp = ip / (4 * ns);
        let iring = tmp + ns;
        let iphi = ip - tmp * 4 * ns + 1;
        let kshift = (iring + ns) & 1;
        let ire = tmp + 1;
        let irm = nl2 + 1 - tmp;
        let ifm = (iphi - (ire >> 1) + ns - 1) / ns;
        let ifp = (iphi - (irm >> 1) + ns - 1) / ns;
        let face = if ifp == ifm {
            ifp | 4
        } else if ifp < ifm {
            ifp
        } else {
            ifm + 8
        };
        (iring, iphi, kshift, ns, face as usize)
    } else {
        let ip = npix - pix;
        let iring = (1 + isqrt((2 * ip - 1) as u64) as i64) >> 1;
        let iphi = 4 * iring + 1 - (ip - 2 * iring * (iring - 1));
        let face = ((iphi - 1) / iring + 8) as usize;
        (2 * nl2 - iring, iphi, 0, iring, face)
    };
    let irt = iring - JRLL[face] * ns + 1;
    let mut ipt = 2 * iphi - JPLL[face] * nr - kshift - 1;
    if ipt >= nl2 {
        ipt -= 8 * ns;
    }
    ((ipt - irt) >> 1, (-ipt - irt) >> 1, face)
}

pub fn nest_to_ring(nside: NSide, nested: u64) -> Result<u64, GridError> {
    nside.check(nested)?;
    Ok(nest_to_ring_unchecked(nside, nested))
}

#[inline]
pub(crate) fn nest_to_ring_unchecked(nside: NSide, nested: u64) -> u64 {
    let c = local_xy_unchecked(nside, nested);
    xyf_to_ring(nside, c.x as i64, c.y as i64, c.face as usize)
}

pub fn ring_to_nest(nside: NSide, ring: u64) -> Result<u64, GridError> {
    nside.check(ring)?;
    let (x, y, face) = ring_to_xyf(nside, ring);
    Ok(from_local_xy_unchecked(
        nside,
        FaceCoord { face: face as u8, x: x as u32, y: y as u32 },
    ))
}

/// Converts a pixel to the other (or the same) ordering scheme.
pub fn convert(nside: NSide, p: PixelId, to: Scheme) -> Result<PixelId, GridError> {
    let index = match (p.scheme, to) {
        (a, b) if a == b => {
            nside.check(p.index)?;
            p.index
        }
        (Scheme::Nested, Scheme::Ring) => nest_to_ring(nside, p.index)?,
        _ => ring_to_nest(nside, p.index)?,
    };
    Ok(PixelId { index, scheme: to })
}

/// Ring number (1 at the north pole, `4·nside − 1` at the south pole) and the
/// 1-based position within that ring for a ring-ordered index.
pub fn ring_position(nside: NSide, ring: u64) -> Result<(u64, u64), GridError> {
    nside.check(ring)?;
    Ok(ring_position_unchecked(nside, ring))
}

pub(crate) fn ring_position_unchecked(nside: NSide, pix: u64) -> (u64, u64) {
    let ns = nside.get() as u64;
    let npix = nside.npix();
    let ncap = nside.ncap();
    if pix < ncap {
        let iring = (1 + isqrt(1 + 2 * pix)) >> 1;
        (iring, pix + 1 - 2 * iring * (iring - 1))
    } else if pix < npix - ncap {
        let ip = pix - ncap;
        let tmp = ip / (4 * ns);
        (tmp + ns, ip - tmp * 4 * ns + 1)
    } else {
        let ip = npix - pix;
        let iring = (1 + isqrt(2 * ip - 1)) >> 1;
        (4 * ns - iring, 4 * iring + 1 - (ip - 2 * iring * (iring - 1)))
    }
}

/// Angles of the pixel center.
pub fn pix_to_ang(nside: NSide, p: PixelId) -> Result<SphericalAngle, GridError> {
    let ring = match p.scheme {
        Scheme::Ring => {
            nside.check(p.index)?;
            p.index
        }
        Scheme::Nested => nest_to_ring(nside, p.index)?,
    };
    Ok(ring_center(nside, ring))
}

fn ring_center(nside: NSide, pix: u64) -> SphericalAngle {
    let ns = nside.get() as f64;
    let npix = nside.npix();
    let ncap = nside.ncap();
    let fact2 = 4.0 / npix as f64;
    let (iring, iphi) = ring_position_unchecked(nside, pix);
    let (z, phi) = if pix < ncap {
        let r = iring as f64;
        (1.0 - r * r * fact2, (iphi as f64 - 0.5) * FRAC_PI_2 / r)
    } else if pix < npix - ncap {
        let fodd = if (iring + nside.get() as u64) & 1 == 1 { 1.0 } else { 0.5 };
        let z = (2.0 * ns - iring as f64) * 2.0 / (3.0 * ns);
        (z, (iphi as f64 - fodd) * PI / (2.0 * ns))
    } else {
        let r = (4 * nside.get() as u64 - iring) as f64;
        (-1.0 + r * r * fact2, (iphi as f64 - 0.5) * FRAC_PI_2 / r)
    };
    SphericalAngle { theta: z.clamp(-1.0, 1.0).acos(), phi }
}

/// Pixel containing the direction. Poles resolve to the polar-ring pixel that
/// contains the given azimuth.
pub fn ang_to_pix(nside: NSide, ang: SphericalAngle, scheme: Scheme) -> PixelId {
    let nested = ang_to_nest(nside, ang);
    match scheme {
        Scheme::Nested => PixelId::nested(nested),
        Scheme::Ring => PixelId::ring(nest_to_ring_unchecked(nside, nested)),
    }
}

fn ang_to_nest(nside: NSide, ang: SphericalAngle) -> u64 {
    let ns = nside.get() as i64;
    let theta = ang.theta.clamp(0.0, PI);
    let z = theta.cos();
    let za = z.abs();
    let tt = (ang.phi / FRAC_PI_2).rem_euclid(4.0);
    let tt = if tt >= 4.0 { 0.0 } else { tt };
    let nsf = ns as f64;

    let (ix, iy, face) = if za <= TWO_THIRDS {
        let temp1 = nsf * (0.5 + tt);
        let temp2 = nsf * z * 0.75;
        let jp = (temp1 - temp2) as i64;
        let jm = (temp1 + temp2) as i64;
        let ifp = jp >> nside.order();
        let ifm = jm >> nside.order();
        let face = if ifp == ifm {
            ifp | 4
        } else if ifp < ifm {
            ifp
        } else {
            ifm + 8
        };
        (jm & (ns - 1), ns - (jp & (ns - 1)) - 1, face)
    } else {
        let ntt = (tt as i64).min(3);
        let tp = tt - ntt as f64;
        let tmp = if za < 0.99 {
            nsf * (3.0 * (1.0 - za)).sqrt()
        } else {
            // 1 - za loses precision near the poles
            nsf * theta.sin() * (3.0 / (1.0 + za)).sqrt()
        };
        let jp = ((tp * tmp) as i64).min(ns - 1);
        let jm = (((1.0 - tp) * tmp) as i64).min(ns - 1);
        if z >= 0.0 {
            (ns - jm - 1, ns - jp - 1, ntt)
        } else {
            (jp, jm, ntt + 8)
        }
    };
    from_local_xy_unchecked(
        nside,
        FaceCoord { face: face as u8, x: ix as u32, y: iy as u32 },
    )
}
