use anyhow::{bail, ensure, Context, Result};
use healswin_core::io::{read_map, write_ppm};
use healswin_core::{resample_to_raster, CameraCalibration, HealpixMap};
use healswin_grid::local_xy;
use serde_json::{json, Value};

use crate::outputs::Outputs;
use crate::PlotArgs;

const INVALID: [u8; 3] = [48, 48, 48];
const HATCH: [[u8; 3]; 2] = [[96, 96, 96], [160, 160, 160]];

/// Class colors; labels past the end wrap around.
const PALETTE: [[u8; 3]; 6] = [
    [0, 0, 0],
    [128, 64, 128],
    [70, 130, 180],
    [220, 20, 60],
    [250, 170, 30],
    [107, 142, 35],
];

enum Mode {
    Rgb,
    Gray { channel: usize, lo: f32, hi: f32 },
    Labels { channel: usize },
}

impl Mode {
    fn pick(map: &HealpixMap, channel: Option<usize>, labels: bool) -> Result<Self> {
        let channel = match (channel, labels) {
            (None, false) => {
                ensure!(map.channels >= 3, "map has {} channels; pass --channel to plot one", map.channels);
                return Ok(Mode::Rgb);
            }
            (None, true) if map.channels == 1 => 0,
            // sample files keep the label in channel 3
            (None, true) if map.channels == 5 => 3,
            (None, true) => bail!("--labels needs --channel for a map of {} channels", map.channels),
            (Some(c), _) => c,
        };
        ensure!(channel < map.channels, "channel {channel} out of range for {} channels", map.channels);
        if labels {
            return Ok(Mode::Labels { channel });
        }
        let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
        for (i, _) in map.validity.iter().enumerate().filter(|(_, &ok)| ok) {
            let v = map.pixel(i)[channel];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        Ok(Mode::Gray { channel, lo, hi })
    }

    fn color(&self, px: &[f32]) -> [u8; 3] {
        let byte = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        match *self {
            Mode::Rgb => [byte(px[0]), byte(px[1]), byte(px[2])],
            Mode::Gray { channel, lo, hi } => {
                let g = if hi > lo { byte((px[channel] - lo) / (hi - lo)) } else { 128 };
                [g; 3]
            }
            Mode::Labels { channel } => PALETTE[(px[channel].max(0.0) as usize) % PALETTE.len()],
        }
    }
}

/// Faces laid out four across and two down, each drawn in its local
/// (x right, y up) coordinates.
fn montage(map: &HealpixMap, mode: &Mode) -> Result<(usize, usize, Vec<u8>)> {
    let n = map.nside.get() as usize;
    let cols = 4;
    let rows = map.num_faces.div_ceil(cols);
    let (w, h) = (cols * n, rows * n);
    let mut rgb = vec![0u8; w * h * 3];
    for i in 0..map.len() {
        let c = local_xy(map.nside, i as u64)?;
        let f = c.face as usize;
        let col = (f % cols) * n + c.x as usize;
        let row = (f / cols) * n + (n - 1 - c.y as usize);
        let color = if map.validity[i] { mode.color(map.pixel(i)) } else { INVALID };
        rgb[(row * w + col) * 3..][..3].copy_from_slice(&color);
    }
    Ok((w, h, rgb))
}

fn fisheye(map: &HealpixMap, mode: &Mode, cal: &CameraCalibration) -> Result<(usize, usize, Vec<u8>)> {
    // carry validity through the lookup as an extra channel
    let ch = map.channels;
    let mut data = Vec::with_capacity(map.len() * (ch + 1));
    for i in 0..map.len() {
        data.extend_from_slice(map.pixel(i));
        data.push(map.validity[i] as u8 as f32);
    }
    let aug = HealpixMap::new(map.nside, map.num_faces, ch + 1, data, vec![true; map.len()])?;
    let (raster, covered) = resample_to_raster(&aug, cal, cal.width, cal.height)?;
    let w = cal.width;
    let mut rgb = Vec::with_capacity(w * cal.height * 3);
    for (e, &cov) in covered.iter().enumerate() {
        let px = raster.at(e % w, e / w);
        let color = if !cov {
            HATCH[((e % w + e / w) / 4) % 2]
        } else if px[ch] < 0.5 {
            INVALID
        } else {
            mode.color(&px[..ch])
        };
        rgb.extend_from_slice(&color);
    }
    Ok((w, cal.height, rgb))
}

pub fn plot(a: &PlotArgs) -> Result<Value> {
    let (map, _) = read_map(&a.input)?;
    let mode = Mode::pick(&map, a.channel, a.labels)?;
    let camera = match (&a.calib, &a.fisheye_out) {
        (Some(c), Some(_)) => {
            let text = std::fs::read_to_string(c).with_context(|| format!("reading {}", c.display()))?;
            Some(CameraCalibration::from_json(&text)?)
        }
        (None, None) => None,
        _ => bail!("--calib and --fisheye-out go together"),
    };
    let mut outs = Outputs::default();
    let (w, h, rgb) = montage(&map, &mode)?;
    outs.parent_of(&a.out)?;
    write_ppm(&a.out, w, h, &rgb)?;
    outs.wrote(&a.out);
    let mut summary = json!({ "status": "ok", "out": a.out, "width": w, "height": h });
    if let (Some(cal), Some(path)) = (camera, &a.fisheye_out) {
        let (fw, fh, rgb) = fisheye(&map, &mode, &cal)?;
        outs.parent_of(path)?;
        write_ppm(path, fw, fh, &rgb)?;
        outs.wrote(path);
        summary["fisheye"] = json!(path);
    }
    outs.commit();
    Ok(summary)
}
