//! HEAL-SWIN: a windowed-attention UNet on the nested HEALPix subset.
//!
//! Tokens are rows of a `[N, C]` matrix in nested order. Windows are runs of
//! consecutive rows, merging joins four consecutive rows and expansion splits
//! one row into four, so no spatial bookkeeping is needed beyond the shift
//! plans and the relative-position index.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use healswin_grid::{
    attention_mask, build_patches, cached_plan, is_power_of_four, merge_index, partition_windows,
    zorder::deinterleave, GridError, LayerShape, NSide, PatchGrid, ShiftPlan, ShiftStrategy,
};
use healswin_tensor::{cosine_attention, Real, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{CoreError, Result};
use crate::io::{Container, Payload};
use crate::map::HealpixMap;

mod strategy_serde {
    use super::ShiftStrategy;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: &ShiftStrategy, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(&s.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<ShiftStrategy, D::Error> {
        String::deserialize(de)?.parse().map_err(D::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Pixel-level resolution of the input map.
    pub nside: u32,
    pub patch_size: usize,
    pub window_size: usize,
    pub shift: usize,
    #[serde(with = "strategy_serde")]
    pub shift_strategy: ShiftStrategy,
    /// Blocks per encoder stage; the last stage is the bottleneck and the
    /// decoder mirrors the others.
    pub depths: Vec<usize>,
    pub dims: Vec<usize>,
    pub heads: Vec<usize>,
    pub mlp_ratio: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub num_faces: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            nside: 256,
            patch_size: 4,
            window_size: 64,
            shift: 4,
            shift_strategy: ShiftStrategy::Spiral,
            depths: vec![2, 2, 2, 2],
            dims: vec![32, 64, 128, 256],
            heads: vec![2, 4, 8, 16],
            mlp_ratio: 4,
            in_channels: 3,
            out_channels: 6,
            num_faces: 8,
            seed: 0,
        }
    }
}

/// Per-stage window geometry after fitting the configured window into the
/// stage's base pixels.
#[derive(Debug, Clone)]
pub struct StageGeometry {
    pub grid: PatchGrid,
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub shift: usize,
    pub rel_index: Arc<[usize]>,
    pub shifted: Option<ShiftGeometry>,
}

#[derive(Debug, Clone)]
pub struct ShiftGeometry {
    pub plan: Arc<ShiftPlan>,
    pub forward: Arc<[usize]>,
    pub inverse: Arc<[usize]>,
    /// `[windows, n, n]`, absent when every origin group agrees.
    pub mask: Option<Arc<[bool]>>,
}

fn config_err(msg: impl Into<String>) -> CoreError {
    CoreError::Config(msg.into())
}

impl ModelConfig {
    pub fn stages(&self) -> usize {
        self.depths.len()
    }

    /// Validates the config and derives every stage's geometry. A window
    /// larger than a stage's base pixel shrinks to the base pixel, and the
    /// shift to at most half the window side.
    pub fn geometry(&self) -> Result<Vec<StageGeometry>> {
        let s = self.stages();
        if s == 0 || self.dims.len() != s || self.heads.len() != s {
            return Err(config_err(format!(
                "depths, dims and heads need one entry per stage (got {}, {}, {})",
                s,
                self.dims.len(),
                self.heads.len()
            )));
        }
        for (i, (&d, &h)) in self.dims.iter().zip(&self.heads).enumerate() {
            if h == 0 || d % h != 0 {
                return Err(config_err(format!("stage {i}: dim {d} not divisible by {h} heads")));
            }
        }
        if !is_power_of_four(self.window_size) {
            return Err(config_err(format!("window_size {} is not a power of four", self.window_size)));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.mlp_ratio == 0 {
            return Err(config_err("in_channels, out_channels and mlp_ratio must be positive"));
        }
        let nside = NSide::new(self.nside)?;
        let mut grid = build_patches(nside, self.patch_size, self.num_faces)?;
        let mut out = Vec::with_capacity(s);
        for i in 0..s {
            if i > 0 {
                grid = merge_index(&grid).map_err(|e| match e {
                    GridError::CannotMerge => config_err(format!(
                        "{s} stages need merging below nside 1 (input nside {}, patch {})",
                        self.nside, self.patch_size
                    )),
                    other => other.into(),
                })?;
            }
            let face = grid.face_len();
            let window = self.window_size.min(face);
            let side = (window as f64).sqrt().round() as usize;
            let shift = self.shift.min(side / 2);
            let part = partition_windows(&grid, window)?;
            let shifted = if shift == 0 {
                None
            } else {
                let plan = cached_plan(self.shift_strategy, &grid, shift)?;
                let mask = if plan.masked {
                    let m = attention_mask(&plan, &part)?;
                    Some(Arc::from(m.as_slice()))
                } else {
                    None
                };
                Some(ShiftGeometry {
                    forward: Arc::from(plan.forward.as_slice()),
                    inverse: Arc::from(plan.inverse.as_slice()),
                    plan,
                    mask,
                })
            };
            out.push(StageGeometry {
                grid,
                dim: self.dims[i],
                heads: self.heads[i],
                window,
                shift,
                rel_index: rel_pos_index(window)?,
                shifted,
            });
        }
        Ok(out)
    }

    pub fn npix(&self) -> usize {
        self.num_faces * (self.nside as usize).pow(2)
    }
}

fn rel_index_cache() -> &'static Mutex<HashMap<usize, Arc<[usize]>>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<[usize]>>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

/// Table row of every `(i, j)` pair in a window of `window_size` patches,
/// stored row-major as `i·n + j`. Positions come from de-interleaving the
/// nested index within the window; the row is
/// `(Δx + s − 1)·(2s − 1) + (Δy + s − 1)`. One shared allocation per size.
pub fn rel_pos_index(window_size: usize) -> Result<Arc<[usize]>> {
    if !is_power_of_four(window_size) {
        return Err(config_err(format!("window size {window_size} is not a power of four")));
    }
    if let Some(v) = rel_index_cache().lock().unwrap().get(&window_size) {
        return Ok(v.clone());
    }
    let n = window_size;
    let s = (n as f64).sqrt().round() as i64;
    let pos: Vec<(i64, i64)> = (0..n)
        .map(|i| {
            let (x, y) = deinterleave(i as u64);
            (x as i64, y as i64)
        })
        .collect();
    let mut index = Vec::with_capacity(n * n);
    for &(xi, yi) in &pos {
        for &(xj, yj) in &pos {
            index.push(((xi - xj + s - 1) * (2 * s - 1) + (yi - yj + s - 1)) as usize);
        }
    }
    let arc: Arc<[usize]> = index.into();
    let mut cache = rel_index_cache().lock().unwrap();
    Ok(cache.entry(window_size).or_insert(arc).clone())
}

/// Rows of the relative position bias table for a window of `window_size`.
pub fn rel_table_rows(window_size: usize) -> usize {
    let s = (window_size as f64).sqrt().round() as usize;
    (2 * s - 1).pow(2)
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Block {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub log_tau: usize,
    pub bias_table: usize,
    pub norm1: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub norm2: Norm,
    pub shifted: bool,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: Linear,
    embed_norm: Norm,
    encoder: Vec<Vec<Block>>,
    merges: Vec<(Linear, Norm)>,
    expands: Vec<(Linear, Norm)>,
    fuses: Vec<Linear>,
    decoder: Vec<Vec<Block>>,
    final_expand: (Linear, Norm),
    head: Linear,
}

struct Init<T> {
    rng: ChaCha8Rng,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

const INIT_STD: f64 = 0.02;

impl<T: Real> Init<T> {
    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    /// Truncated at two standard deviations.
    fn trunc_normal(&mut self) -> T {
        loop {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            if z.abs() <= 2.0 {
                return T::of(z * INIT_STD);
            }
        }
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let data: Vec<T> = (0..fan_in * fan_out).map(|_| self.trunc_normal()).collect();
        let w = self.push(format!("{name}.weight"), Tensor::new(&[fan_in, fan_out], data).unwrap());
        let b = self.push(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Linear { w, b }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        let gamma = self.push(format!("{name}.gamma"), Tensor::full(&[dim], T::one()));
        let beta = self.push(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Norm { gamma, beta }
    }

    fn block(&mut self, name: &str, g: &StageGeometry, mlp_ratio: usize, shifted: bool) -> Block {
        let c = g.dim;
        Block {
            q: self.linear(&format!("{name}.q"), c, c),
            k: self.linear(&format!("{name}.k"), c, c),
            v: self.linear(&format!("{name}.v"), c, c),
            proj: self.linear(&format!("{name}.proj"), c, c),
            // temperature 0.1, as in SwinV2
            log_tau: self.push(format!("{name}.log_tau"), Tensor::full(&[g.heads], T::of(0.1f64.ln()))),
            bias_table: self.push(
                format!("{name}.rel_bias"),
                Tensor::zeros(&[rel_table_rows(g.window), g.heads]),
            ),
            norm1: self.norm(&format!("{name}.norm1"), c),
            fc1: self.linear(&format!("{name}.fc1"), c, c * mlp_ratio),
            fc2: self.linear(&format!("{name}.fc2"), c * mlp_ratio, c),
            norm2: self.norm(&format!("{name}.norm2"), c),
            shifted,
        }
    }
}

pub struct Model<T> {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub params: Vec<Tensor<T>>,
    geometry: Vec<StageGeometry>,
    layout: Layout,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let geometry = config.geometry()?;
        let mut init = Init::<T> {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            names: Vec::new(),
            tensors: Vec::new(),
        };
        let s = config.stages();
        let (p, r) = (config.patch_size, config.mlp_ratio);
        let embed = init.linear("embed", p * config.in_channels, config.dims[0]);
        let embed_norm = init.norm("embed_norm", config.dims[0]);
        let mut encoder = Vec::new();
        let mut merges = Vec::new();
        for (i, g) in geometry.iter().enumerate() {
            encoder.push(
                (0..config.depths[i])
                    .map(|j| init.block(&format!("enc{i}.{j}"), g, r, j % 2 == 1))
                    .collect(),
            );
            if i + 1 < s {
                let lin = init.linear(&format!("merge{i}"), 4 * g.dim, config.dims[i + 1]);
                merges.push((lin, init.norm(&format!("merge{i}.norm"), config.dims[i + 1])));
            }
        }
        let mut expands = Vec::new();
        let mut fuses = Vec::new();
        let mut decoder = Vec::new();
        for i in 0..s - 1 {
            let g = &geometry[i];
            let lin = init.linear(&format!("expand{i}"), config.dims[i + 1], 4 * g.dim);
            expands.push((lin, init.norm(&format!("expand{i}.norm"), g.dim)));
            fuses.push(init.linear(&format!("fuse{i}"), 2 * g.dim, g.dim));
            decoder.push(
                (0..config.depths[i])
                    .map(|j| init.block(&format!("dec{i}.{j}"), g, r, j % 2 == 1))
                    .collect(),
            );
        }
        let c0 = config.dims[0];
        let final_expand = (init.linear("final_expand", c0, p * c0), init.norm("final_expand.norm", c0));
        let head = init.linear("head", c0, config.out_channels);
        let layout = Layout { embed, embed_norm, encoder, merges, expands, fuses, decoder, final_expand, head };
        Ok(Self { config, names: init.names, params: init.tensors, geometry, layout })
    }

    pub fn geometry(&self) -> &[StageGeometry] {
        &self.geometry
    }

    pub fn encoder_block(&self, stage: usize, j: usize) -> Block {
        self.layout.encoder[stage][j]
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Puts every parameter on the tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if trainable { tape.leaf(p.clone()) } else { tape.constant(p.clone()) })
            .collect()
    }

    fn linear(&self, tape: &mut Tape<T>, v: &[Var], x: Var, l: Linear) -> Result<Var> {
        Ok(tape.linear(x, v[l.w], Some(v[l.b]))?)
    }

    fn norm(&self, tape: &mut Tape<T>, v: &[Var], x: Var, n: Norm) -> Result<Var> {
        Ok(tape.layer_norm(x, v[n.gamma], v[n.beta])?)
    }

    /// Cosine window attention with relative position bias over tokens
    /// already in window order; output projection included.
    pub fn window_attention(
        &self,
        tape: &mut Tape<T>,
        v: &[Var],
        x: Var,
        g: &StageGeometry,
        b: &Block,
        mask: Option<Arc<[bool]>>,
    ) -> Result<Var> {
        let split = |tape: &mut Tape<T>, t: Var| tape.split_heads(t, g.window, g.heads);
        let q = self.linear(tape, v, x, b.q)?;
        let q = split(tape, q)?;
        let k = self.linear(tape, v, x, b.k)?;
        let k = split(tape, k)?;
        let vv = self.linear(tape, v, x, b.v)?;
        let vv = split(tape, vv)?;
        let n = g.window;
        let bias = tape.gather_rows(v[b.bias_table], g.rel_index.clone())?;
        let bias = tape.transpose_last2(bias)?;
        let bias = tape.reshape(bias, &[g.heads, n, n])?;
        let att = cosine_attention(tape, q, k, vv, v[b.log_tau], Some(bias), mask)?;
        let merged = tape.merge_heads(att)?;
        self.linear(tape, v, merged, b.proj)
    }

    /// One transformer block with post-norm residual branches:
    /// `x + LN(attn(x))`, then `x + LN(mlp(x))`. Shifted blocks attend in
    /// the shifted token order under the origin-group mask.
    pub fn block_forward(&self, tape: &mut Tape<T>, v: &[Var], x: Var, stage: usize, b: &Block) -> Result<Var> {
        let g = &self.geometry[stage];
        let sh = if b.shifted { g.shifted.as_ref() } else { None };
        let h = match sh {
            Some(sh) => {
                let xs = tape.gather_rows(x, sh.forward.clone())?;
                let h = self.window_attention(tape, v, xs, g, b, sh.mask.clone())?;
                tape.gather_rows(h, sh.inverse.clone())?
            }
            None => self.window_attention(tape, v, x, g, b, None)?,
        };
        let h = self.norm(tape, v, h, b.norm1)?;
        let x = tape.add(x, h)?;
        let m = self.linear(tape, v, x, b.fc1)?;
        let m = tape.gelu(m);
        let m = self.linear(tape, v, m, b.fc2)?;
        let m = self.norm(tape, v, m, b.norm2)?;
        Ok(tape.add(x, m)?)
    }

    /// Pixels `[npix, in_channels]` to patch tokens `[npatch, dims[0]]`.
    pub fn patch_embed(&self, tape: &mut Tape<T>, v: &[Var], input: Var) -> Result<Var> {
        let c = &self.config;
        let x = tape.reshape(input, &[c.npix() / c.patch_size, c.patch_size * c.in_channels])?;
        let x = self.linear(tape, v, x, self.layout.embed)?;
        self.norm(tape, v, x, self.layout.embed_norm)
    }

    /// `[npix, in_channels]` to `[npix, out_channels]`.
    pub fn forward(&self, tape: &mut Tape<T>, v: &[Var], input: Var) -> Result<Var> {
        let c = &self.config;
        let want = [c.npix(), c.in_channels];
        if tape.shape(input) != want {
            return Err(config_err(format!(
                "input shape {:?} does not match the model's {:?}",
                tape.shape(input),
                want
            )));
        }
        let l = &self.layout;
        let s = c.stages();
        let mut x = self.patch_embed(tape, v, input)?;
        let mut skips = Vec::with_capacity(s - 1);
        for i in 0..s {
            for b in &l.encoder[i] {
                x = self.block_forward(tape, v, x, i, b)?;
            }
            if i + 1 < s {
                skips.push(x);
                let n = tape.shape(x)[0];
                x = tape.reshape(x, &[n / 4, 4 * c.dims[i]])?;
                x = self.linear(tape, v, x, l.merges[i].0)?;
                x = self.norm(tape, v, x, l.merges[i].1)?;
            }
        }
        for i in (0..s - 1).rev() {
            let n = tape.shape(x)[0];
            x = self.linear(tape, v, x, l.expands[i].0)?;
            x = tape.reshape(x, &[4 * n, c.dims[i]])?;
            x = self.norm(tape, v, x, l.expands[i].1)?;
            x = tape.concat_cols(x, skips[i])?;
            x = self.linear(tape, v, x, l.fuses[i])?;
            for b in &l.decoder[i] {
                x = self.block_forward(tape, v, x, i, b)?;
            }
        }
        x = self.linear(tape, v, x, l.final_expand.0)?;
        x = tape.reshape(x, &[c.npix(), c.dims[0]])?;
        x = self.norm(tape, v, x, l.final_expand.1)?;
        self.linear(tape, v, x, l.head)
    }

    /// Inference on one map; returns `[npix, out_channels]`.
    pub fn predict(&self, input: &HealpixMap) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let v = self.bind(&mut tape, false);
        let x = tape.constant(map_tensor(input, &self.config)?);
        let y = self.forward(&mut tape, &v, x)?;
        Ok(tape.value(y).clone())
    }

    /// Spatial sizes through the UNet, one row per block group plus input
    /// and output, using the fitted per-stage windows.
    pub fn layer_trace(&self) -> Vec<LayerShape> {
        let c = &self.config;
        let faces = c.num_faces;
        let row = |layer: String, tokens: usize, nside: u32, window: usize, follow: &str| LayerShape {
            layer,
            tokens,
            windows: tokens / window,
            windows_per_base_pixel: tokens / window / faces,
            nside,
            followed_by: follow.into(),
        };
        let pix_window = c.window_size.min((c.nside as usize).pow(2));
        let s = self.geometry.len();
        let mut out = vec![row("input".into(), c.npix(), c.nside, pix_window, "patch embedding")];
        let mut block = 1;
        for (i, g) in self.geometry.iter().enumerate() {
            let follow = if i + 1 < s { "patch merging" } else { "patch expansion" };
            out.push(row(format!("block {block}"), g.grid.len(), g.grid.nside().get(), g.window, follow));
            block += 1;
        }
        for g in self.geometry.iter().rev().skip(1) {
            out.push(row(format!("block {block}"), g.grid.len(), g.grid.nside().get(), g.window, "patch expansion"));
            block += 1;
        }
        out.push(row("output".into(), c.npix(), c.nside, pix_window, "none"));
        out
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            geometry: self.geometry.clone(),
            layout: self.layout.clone(),
        }
    }

    /// Checkpoint container: f32 parameters concatenated in registration
    /// order; the header carries the config and a manifest of names, shapes
    /// and offsets, plus `extras`.
    pub fn to_container(&self, extras: &Map<String, Value>) -> Container {
        let mut header = extras.clone();
        header.insert("scheme".into(), json!("params"));
        header.insert("manifest".into(), self.manifest());
        let mut data = Vec::with_capacity(self.num_parameters());
        for p in &self.params {
            data.extend(p.data().iter().map(|v| v.as_f64() as f32));
        }
        Container { header, validity: None, payload: Payload::F32(data) }
    }

    pub fn manifest(&self) -> Value {
        let mut offset = 0;
        let tensors: Vec<Value> = self
            .names
            .iter()
            .zip(&self.params)
            .map(|(n, p)| {
                let v = json!({"name": n, "shape": p.shape(), "offset": offset});
                offset += p.numel();
                v
            })
            .collect();
        json!({"config": self.config, "tensors": tensors})
    }

    /// Writes the checkpoint and a `.json` manifest next to it.
    pub fn save(&self, path: &Path, extras: &Map<String, Value>) -> Result<()> {
        self.to_container(extras).write(path)?;
        let manifest = serde_json::to_vec_pretty(&self.manifest())?;
        crate::io::write_atomic(&manifest_path(path), &manifest)
    }

    pub fn load(path: &Path) -> Result<(Self, Map<String, Value>)> {
        Self::from_container(Container::read(path)?)
    }

    pub fn from_container(c: Container) -> Result<(Self, Map<String, Value>)> {
        let bad = |m: &str| CoreError::Format(format!("checkpoint: {m}"));
        if c.scheme() != "params" {
            return Err(bad("not a parameter file"));
        }
        let mut header = c.header;
        let manifest = header.remove("manifest").ok_or_else(|| bad("missing manifest"))?;
        let config: ModelConfig = serde_json::from_value(manifest["config"].clone())?;
        let mut model = Self::new(config)?;
        let Payload::F32(data) = c.payload else {
            return Err(bad("payload must be f32le"));
        };
        let tensors = manifest["tensors"].as_array().ok_or_else(|| bad("manifest has no tensor list"))?;
        if tensors.len() != model.params.len() {
            return Err(bad("tensor count does not match the config"));
        }
        for (i, t) in tensors.iter().enumerate() {
            let offset = t["offset"].as_u64().ok_or_else(|| bad("tensor without offset"))? as usize;
            let p = &mut model.params[i];
            if t["name"] != model.names[i].as_str() {
                return Err(bad(&format!("tensor {i} is {}, expected {}", t["name"], model.names[i])));
            }
            let src = data.get(offset..offset + p.numel()).ok_or_else(|| bad("payload too short"))?;
            for (d, &s) in p.data_mut().iter_mut().zip(src) {
                *d = T::of(s as f64);
            }
        }
        for k in ["scheme", "dtype", "validity"] {
            header.remove(k);
        }
        Ok((model, header))
    }
}

pub fn manifest_path(ckpt: &Path) -> std::path::PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Map samples as a `[npix, channels]` tensor; invalid pixels are zeroed.
pub fn map_tensor<T: Real>(map: &HealpixMap, cfg: &ModelConfig) -> Result<Tensor<T>> {
    if map.nside.get() != cfg.nside || map.num_faces != cfg.num_faces || map.channels != cfg.in_channels {
        return Err(config_err(format!(
            "map (nside {}, {} faces, {} channels) does not match the model (nside {}, {} faces, {} channels)",
            map.nside,
            map.num_faces,
            map.channels,
            cfg.nside,
            cfg.num_faces,
            cfg.in_channels
        )));
    }
    let ch = map.channels;
    let data = map
        .data
        .iter()
        .enumerate()
        .map(|(e, &x)| if map.validity[e / ch] { T::of(x as f64) } else { T::zero() })
        .collect();
    Ok(Tensor::new(&[map.len(), ch], data)?)
}
