//! The HSWM1 container: 8-byte magic, little-endian u32 header length, a JSON
//! header, an optional LSB-first validity bitmap and a little-endian payload.
//!
//! Maps use scheme `"nested"`, float rasters `"raster"`, shift plans `"plan"`
//! (i64 payload) and attention masks `"mask"` (u8 payload).

use std::fs;
use std::io::Write;
use std::path::Path;

use healswin_grid::{AttentionMask, NSide, ShiftPlan};
use serde_json::{json, Map, Value};

use crate::error::{CoreError, Result};
use crate::map::{HealpixMap, ImageRaster};

pub const MAGIC: &[u8; 8] = b"HSWM1\0\0\0";

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    I64(Vec<i64>),
    U8(Vec<u8>),
}

impl Payload {
    fn dtype(&self) -> &'static str {
        match self {
            Payload::F32(_) => "f32le",
            Payload::I64(_) => "i64le",
            Payload::U8(_) => "u8",
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::I64(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Map<String, Value>,
    pub validity: Option<Vec<bool>>,
    pub payload: Payload,
}

fn format_err(msg: impl Into<String>) -> CoreError {
    CoreError::Format(msg.into())
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = self.header.clone();
        header.insert("dtype".into(), json!(self.payload.dtype()));
        header.insert("validity".into(), json!(self.validity.is_some()));
        let text = serde_json::to_vec(&Value::Object(header))?;
        let mut out = Vec::with_capacity(12 + text.len() + self.payload.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(&text);
        if let Some(v) = &self.validity {
            out.extend(pack_bits(v));
        }
        match &self.payload {
            Payload::F32(d) => d.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::I64(d) => d.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U8(d) => out.extend_from_slice(d),
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(format_err("missing HSWM1 magic"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| format_err("truncated header"))?;
        let header: Map<String, Value> = match serde_json::from_slice(body)? {
            Value::Object(m) => m,
            _ => return Err(format_err("header is not a JSON object")),
        };
        let mut rest = &bytes[12 + hlen..];
        let has_validity = header.get("validity").and_then(Value::as_bool).unwrap_or(false);
        let elements = element_count(&header)?;
        let validity = if has_validity {
            let nbytes = elements.div_ceil(8);
            if rest.len() < nbytes {
                return Err(format_err("truncated validity bitmap"));
            }
            let v = unpack_bits(&rest[..nbytes], elements);
            rest = &rest[nbytes..];
            Some(v)
        } else {
            None
        };
        let dtype = header.get("dtype").and_then(Value::as_str).unwrap_or("");
        let payload = match dtype {
            "f32le" => Payload::F32(chunks::<4>(rest)?.map(f32::from_le_bytes).collect()),
            "i64le" => Payload::I64(chunks::<8>(rest)?.map(i64::from_le_bytes).collect()),
            "u8" => Payload::U8(rest.to_vec()),
            other => return Err(format_err(format!("unsupported dtype {other:?}"))),
        };
        Ok(Self { header, validity, payload })
    }

    /// Writes through a temporary sibling and renames, so a failed write
    /// never leaves a partial file behind.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| format_err(format!("{}: {e}", path.display())))
    }

    pub fn scheme(&self) -> &str {
        self.header.get("scheme").and_then(Value::as_str).unwrap_or("")
    }

    fn usize_field(&self, key: &str) -> Result<usize> {
        usize_of(&self.header, key)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().ok_or_else(|| format_err("output path has no file name"))?;
    let tmp = path.with_file_name(format!(".{}.partial", name.to_string_lossy()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

fn usize_of(h: &Map<String, Value>, key: &str) -> Result<usize> {
    h.get(key)
        .and_then(Value::as_u64)
        .map(|v| v as usize)
        .ok_or_else(|| format_err(format!("header field {key:?} missing or not an integer")))
}

fn element_count(h: &Map<String, Value>) -> Result<usize> {
    match h.get("scheme").and_then(Value::as_str) {
        Some("raster") => Ok(usize_of(h, "width")? * usize_of(h, "height")?),
        Some("nested") => {
            let nside = usize_of(h, "nside")?;
            Ok(usize_of(h, "num_faces")? * nside * nside)
        }
        _ if h.get("validity").and_then(Value::as_bool).unwrap_or(false) => {
            Err(format_err("validity bitmap is only defined for maps and rasters"))
        }
        _ => Ok(0),
    }
}

fn chunks<const N: usize>(bytes: &[u8]) -> Result<impl Iterator<Item = [u8; N]> + '_> {
    if bytes.len() % N != 0 {
        return Err(format_err(format!("payload of {} bytes is not a multiple of {N}", bytes.len())));
    }
    Ok(bytes.chunks_exact(N).map(|c| c.try_into().unwrap()))
}

pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

pub fn map_container(map: &HealpixMap, extras: &Map<String, Value>) -> Container {
    let mut header = extras.clone();
    header.insert("nside".into(), json!(map.nside.get()));
    header.insert("num_faces".into(), json!(map.num_faces));
    header.insert("scheme".into(), json!("nested"));
    header.insert("channels".into(), json!(map.channels));
    Container { header, validity: Some(map.validity.clone()), payload: Payload::F32(map.data.clone()) }
}

pub fn write_map(path: &Path, map: &HealpixMap, extras: &Map<String, Value>) -> Result<()> {
    map_container(map, extras).write(path)
}

/// Reads a nested-scheme map; header fields other than the core ones are
/// returned as extras.
pub fn read_map(path: &Path) -> Result<(HealpixMap, Map<String, Value>)> {
    map_from_container(Container::read(path)?)
}

pub fn map_from_container(c: Container) -> Result<(HealpixMap, Map<String, Value>)> {
    if c.scheme() != "nested" {
        return Err(format_err(format!("expected a nested map, found scheme {:?}", c.scheme())));
    }
    let nside = NSide::new(c.usize_field("nside")? as u32)?;
    let faces = c.usize_field("num_faces")?;
    let channels = c.usize_field("channels")?;
    let n = faces * nside.face_pixels() as usize;
    let Payload::F32(data) = c.payload else {
        return Err(format_err("map payload must be f32le"));
    };
    let validity = c.validity.unwrap_or_else(|| vec![true; n]);
    let map = HealpixMap::new(nside, faces, channels, data, validity)
        .map_err(|e| format_err(e.to_string()))?;
    Ok((map, strip(c.header, &["nside", "num_faces", "scheme", "channels", "dtype", "validity"])))
}

pub fn write_raster(
    path: &Path,
    raster: &ImageRaster,
    validity: Option<&[bool]>,
    extras: &Map<String, Value>,
) -> Result<()> {
    let mut header = extras.clone();
    header.insert("scheme".into(), json!("raster"));
    header.insert("width".into(), json!(raster.width));
    header.insert("height".into(), json!(raster.height));
    header.insert("channels".into(), json!(raster.channels));
    Container { header, validity: validity.map(<[bool]>::to_vec), payload: Payload::F32(raster.data.clone()) }
        .write(path)
}

pub type RasterFile = (ImageRaster, Option<Vec<bool>>, Map<String, Value>);

pub fn read_raster(path: &Path) -> Result<RasterFile> {
    raster_from_container(Container::read(path)?)
}

pub fn raster_from_container(c: Container) -> Result<RasterFile> {
    if c.scheme() != "raster" {
        return Err(format_err(format!("expected a raster, found scheme {:?}", c.scheme())));
    }
    let (w, h, ch) = (c.usize_field("width")?, c.usize_field("height")?, c.usize_field("channels")?);
    let Payload::F32(data) = c.payload else {
        return Err(format_err("raster payload must be f32le"));
    };
    let raster = ImageRaster::new(w, h, ch, data).map_err(|e| format_err(e.to_string()))?;
    Ok((raster, c.validity, strip(c.header, &["scheme", "width", "height", "channels", "dtype", "validity"])))
}

fn strip(mut h: Map<String, Value>, keys: &[&str]) -> Map<String, Value> {
    for k in keys {
        h.remove(*k);
    }
    h
}

/// Plan sidecar: `forward`, `inverse` and `origin_group`, each `len` entries, concatenated.
pub fn plan_container(plan: &ShiftPlan) -> Container {
    let g = &plan.grid;
    let header = json!({
        "scheme": "plan",
        "nside": g.nside().get(),
        "num_faces": g.num_faces(),
        "patch_size": g.patch_size(),
        "strategy": plan.strategy.to_string(),
        "shift": plan.shift,
        "len": plan.len(),
        "arrays": ["forward", "inverse", "origin_group"],
    });
    let mut data = Vec::with_capacity(plan.len() * 3);
    data.extend(plan.forward.iter().map(|&v| v as i64));
    data.extend(plan.inverse.iter().map(|&v| v as i64));
    data.extend(plan.origin_group.iter().map(|&v| v as i64));
    Container { header: header.as_object().unwrap().clone(), validity: None, payload: Payload::I64(data) }
}

/// The three plan arrays as read back from a sidecar.
pub struct PlanArrays {
    pub forward: Vec<usize>,
    pub inverse: Vec<usize>,
    pub origin_group: Vec<u32>,
}

pub fn read_plan(path: &Path) -> Result<PlanArrays> {
    let c = Container::read(path)?;
    if c.scheme() != "plan" {
        return Err(format_err("not a plan sidecar"));
    }
    let len = c.usize_field("len")?;
    let Payload::I64(d) = c.payload else {
        return Err(format_err("plan payload must be i64le"));
    };
    if d.len() != 3 * len || d.iter().any(|&v| v < 0) {
        return Err(format_err("plan payload has the wrong length or negative entries"));
    }
    Ok(PlanArrays {
        forward: d[..len].iter().map(|&v| v as usize).collect(),
        inverse: d[len..2 * len].iter().map(|&v| v as usize).collect(),
        origin_group: d[2 * len..].iter().map(|&v| v as u32).collect(),
    })
}

/// Mask sidecar: one byte per `(window, i, j)`, 1 meaning "may attend".
pub fn mask_container(mask: &AttentionMask) -> Container {
    let header = json!({
        "scheme": "mask",
        "window_size": mask.window_size(),
        "num_windows": mask.num_windows(),
    });
    Container {
        header: header.as_object().unwrap().clone(),
        validity: None,
        payload: Payload::U8(mask.as_slice().iter().map(|&b| b as u8).collect()),
    }
}

/// Binary PPM (P6).
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(format_err("ppm buffer size does not match dimensions"));
    }
    let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(rgb);
    write_atomic(path, &bytes)
}
