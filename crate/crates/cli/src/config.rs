use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use healswin_core::{CameraCalibration, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// Everything `train`, `eval` and `predict` need, read from one JSON file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub io: IoConfig,
}

/// Scenes to train and evaluate on. Samples are generated from `seed`,
/// `seed + 1`, ... at the model's nside unless `dir` points at `gen-data`
/// output.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub count: usize,
    pub num_objects: usize,
    pub camera: CameraCalibration,
    /// Also render fisheye ground truth so `eval` reports flat mIoU.
    pub rasters: bool,
    pub dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 4,
            num_objects: 6,
            camera: CameraCalibration::equidistant(256),
            rasters: false,
            dir: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub loss_curve: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self { out_dir: "run".into(), checkpoint: None, loss_curve: None, metrics: None }
    }
}

impl IoConfig {
    pub fn checkpoint(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("model.hswm"))
    }

    pub fn loss_curve(&self) -> PathBuf {
        self.loss_curve.clone().unwrap_or_else(|| self.out_dir.join("loss.json"))
    }

    pub fn metrics(&self) -> PathBuf {
        self.metrics.clone().unwrap_or_else(|| self.out_dir.join("metrics.json"))
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    /// Parses `text`; errors name the offending field path.
    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            anyhow::anyhow!("config field {path}: {}", e.into_inner())
        })?;
        cfg.model.geometry().context("config field model")?;
        cfg.data.camera.validate().context("config field data.camera")?;
        if cfg.data.count == 0 && cfg.data.dir.is_none() {
            bail!("config field data.count: need at least one sample");
        }
        Ok(cfg)
    }

    /// Loads a config file; relative paths are taken from its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        resolve(base, &mut cfg.io.out_dir);
        for p in [&mut cfg.io.checkpoint, &mut cfg.io.loss_curve, &mut cfg.io.metrics, &mut cfg.data.dir]
            .into_iter()
            .flatten()
        {
            resolve(base, p);
        }
        if let Some(dir) = &cfg.data.dir {
            if !dir.is_dir() {
                bail!("config field data.dir: {} is not a directory", dir.display());
            }
        }
        Ok(cfg)
    }
}
