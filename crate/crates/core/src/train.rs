use std::sync::Arc;

use healswin_grid::NSide;
use healswin_tensor::{AdamW, AdamWConfig, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::fisheye::{resample_to_raster, CameraCalibration};
use crate::map::HealpixMap;
use crate::metrics::{
    chamfer, class_counts, class_weights, depth_l2_loss, depth_to_pointcloud, flat_miou, healpix_angles,
    pixel_accuracy, spherical_miou, weighted_cross_entropy, DepthStats, IouReport,
};
use crate::model::{map_tensor, Model, ModelConfig};
use crate::synthetic::{Sample, NUM_CLASSES, VOID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Segmentation,
    Depth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub task: Task,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 9.4e-4, batch: 4, steps: 500, seed: 0, task: Task::Segmentation, weight_decay: 0.01, grad_clip: 1.0 }
    }
}

/// What evaluation needs to know about how a model was trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub task: Task,
    pub num_classes: usize,
    pub class_weights: Vec<f64>,
    pub depth_stats: Option<DepthStats>,
}

pub fn out_channels(task: Task) -> usize {
    match task {
        Task::Segmentation => NUM_CLASSES,
        Task::Depth => 1,
    }
}

fn depth_mask(s: &Sample) -> Vec<bool> {
    s.validity.iter().zip(&s.sky_mask).map(|(&v, &sky)| v && !sky).collect()
}

/// Class weights or depth statistics over the training split.
pub fn fit_meta(task: Task, samples: &[Sample]) -> Result<TrainMeta> {
    if samples.is_empty() {
        return Err(invalid("no training samples"));
    }
    let mut counts = vec![0u64; NUM_CLASSES];
    for s in samples {
        for (c, n) in class_counts(&s.labels, &s.validity, NUM_CLASSES).into_iter().enumerate() {
            counts[c] += n;
        }
    }
    let depth_stats = match task {
        Task::Depth => Some(DepthStats::from_values(samples.iter().flat_map(|s| {
            let m = depth_mask(s);
            s.depth.iter().zip(m).filter(|(_, ok)| *ok).map(|(&d, _)| d as f64).collect::<Vec<_>>()
        }))?),
        Task::Segmentation => None,
    };
    Ok(TrainMeta { task, num_classes: NUM_CLASSES, class_weights: class_weights(&counts), depth_stats })
}

struct Prepared {
    input: Tensor<f32>,
    labels: Arc<[usize]>,
    target: Arc<[f32]>,
    valid: Arc<[bool]>,
}

fn prepare(s: &Sample, cfg: &ModelConfig, meta: &TrainMeta) -> Result<Prepared> {
    let nside = NSide::new(cfg.nside)?;
    let input = map_tensor(&s.image_map(nside)?, cfg)?;
    let (target, valid): (Arc<[f32]>, Arc<[bool]>) = match meta.depth_stats {
        Some(st) => (
            s.depth.iter().map(|&d| st.standardize(d as f64) as f32).collect(),
            depth_mask(s).into(),
        ),
        None => (Arc::from(Vec::new()), s.validity.clone().into()),
    };
    Ok(Prepared { input, labels: s.labels.iter().map(|&l| l as usize).collect(), target, valid })
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub meta: TrainMeta,
    /// Mean batch loss before each optimizer step.
    pub losses: Vec<f64>,
}

/// AdamW on a fixed schedule of mini-batches drawn by a seeded shuffle.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    samples: &[Sample],
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    if cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(invalid("train.batch and train.lr must be positive"));
    }
    let mut mc = model_cfg.clone();
    mc.out_channels = out_channels(cfg.task);
    let meta = fit_meta(cfg.task, samples)?;
    let mut model = Model::<f32>::new(mc)?;
    let prepared = samples.iter().map(|s| prepare(s, &model.config, &meta)).collect::<Result<Vec<_>>>()?;
    let weights: Arc<[f32]> = meta.class_weights.iter().map(|&w| w as f32).collect();
    let mut opt = AdamW::new(
        AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() },
        &model.params,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut queue: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<usize> = if cfg.batch >= prepared.len() {
            (0..prepared.len()).collect()
        } else {
            (0..cfg.batch)
                .map(|_| {
                    if queue.is_empty() {
                        queue = (0..prepared.len()).collect();
                        queue.shuffle(&mut rng);
                    }
                    queue.pop().unwrap()
                })
                .collect()
        };
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, true);
        let mut total = None;
        for &i in &batch {
            let p = &prepared[i];
            let x = tape.constant(p.input.clone());
            let y = model.forward(&mut tape, &vars, x)?;
            let l = match cfg.task {
                Task::Segmentation => {
                    tape.weighted_cross_entropy(y, p.labels.clone(), weights.clone(), p.valid.clone())?
                }
                Task::Depth => tape.masked_mse(y, p.target.clone(), p.valid.clone())?,
            };
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
        }
        let loss = tape.scale(total.unwrap(), 1.0 / batch.len() as f32);
        let value = tape.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(invalid(format!("loss diverged at step {step}")));
        }
        let grads = tape.backward(loss)?;
        let mut g: Vec<Vec<f32>> = vars
            .iter()
            .zip(&model.params)
            .map(|(&v, p)| grads.get_or_zeros(v, p.numel()))
            .collect();
        clip_global_norm(&mut g, cfg.grad_clip);
        opt.step(&mut model.params, &g)?;
        losses.push(value);
        on_step(step, value);
    }
    Ok(TrainOutcome { model, meta, losses })
}

/// Rescales all gradients together so their joint L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Per-pixel argmax labels, or destandardized depth in meters.
pub enum Prediction {
    Labels(Vec<u8>),
    Depth(Vec<f32>),
}

pub fn predict(model: &Model<f32>, meta: &TrainMeta, image: &HealpixMap) -> Result<(Tensor<f32>, Prediction)> {
    let out = model.predict(image)?;
    let pred = match meta.depth_stats {
        Some(st) => Prediction::Depth(out.data().iter().map(|&z| st.destandardize(z as f64) as f32).collect()),
        None => Prediction::Labels(
            out.data()
                .chunks(out.last_dim())
                .map(|row| {
                    let mut best = 0;
                    for (c, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect(),
        ),
    };
    Ok((out, pred))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pixel_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spherical: Option<IouReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chamfer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clamped_depths: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub samples: usize,
    /// Mean loss in training units (weighted CE, or standardized MSE).
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pixel_accuracy: Option<f64>,
    /// Over all evaluated pixels pooled; void left out of the mean.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spherical: Option<IouReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flat: Option<IouReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chamfer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clamped_depths: Option<usize>,
    pub per_sample: Vec<SampleMetrics>,
}

/// Ground-truth raster and camera for flat mIoU.
pub struct RasterTruth<'a> {
    pub sample: &'a Sample,
    pub camera: &'a CameraCalibration,
}

pub fn evaluate(
    model: &Model<f32>,
    meta: &TrainMeta,
    samples: &[Sample],
    rasters: &[RasterTruth<'_>],
) -> Result<EvalReport> {
    let nside = NSide::new(model.config.nside)?;
    let exclude = [VOID as usize];
    let mut per_sample = Vec::with_capacity(samples.len());
    let (mut all_pred, mut all_gt, mut all_valid) = (Vec::new(), Vec::new(), Vec::new());
    let mut pred_maps = Vec::new();
    for s in samples {
        let (out, pred) = predict(model, meta, &s.image_map(nside)?)?;
        match pred {
            Prediction::Labels(labels) => {
                let loss = weighted_cross_entropy(out.data(), &s.labels, &meta.class_weights, &s.validity)?;
                let iou = spherical_miou(&labels, &s.labels, &s.validity, meta.num_classes, &exclude)?;
                per_sample.push(SampleMetrics {
                    loss,
                    pixel_accuracy: Some(pixel_accuracy(&labels, &s.labels, &s.validity)),
                    spherical: Some(iou),
                    chamfer: None,
                    clamped_depths: None,
                });
                all_pred.extend_from_slice(&labels);
                all_gt.extend_from_slice(&s.labels);
                all_valid.extend_from_slice(&s.validity);
                pred_maps.push(labels);
            }
            Prediction::Depth(depth) => {
                let st = meta.depth_stats.expect("depth task has stats");
                let mask = depth_mask(s);
                let loss = depth_l2_loss(&depth, &s.depth, &s.sky_mask, &s.validity, st)?;
                let angles = healpix_angles(nside, s.len());
                let (pc, clamped) = depth_to_pointcloud(&depth, &angles, &mask);
                let (gc, _) = depth_to_pointcloud(&s.depth, &angles, &mask);
                per_sample.push(SampleMetrics {
                    loss,
                    pixel_accuracy: None,
                    spherical: None,
                    chamfer: Some(chamfer(&pc, &gc)?),
                    clamped_depths: Some(clamped),
                });
            }
        }
    }
    let n = per_sample.len().max(1) as f64;
    let mean = |f: &dyn Fn(&SampleMetrics) -> Option<f64>| -> Option<f64> {
        let v: Vec<f64> = per_sample.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let spherical = match meta.task {
        Task::Segmentation if !all_gt.is_empty() => {
            Some(spherical_miou(&all_pred, &all_gt, &all_valid, meta.num_classes, &exclude)?)
        }
        _ => None,
    };
    let flat = if meta.task == Task::Segmentation && !rasters.is_empty() {
        if rasters.len() != samples.len() {
            return Err(invalid("need one raster per evaluated sample for flat mIoU"));
        }
        let (mut fp, mut fg, mut fc) = (Vec::new(), Vec::new(), Vec::new());
        for (r, labels) in rasters.iter().zip(&pred_maps) {
            let data: Vec<f32> = labels.iter().map(|&l| l as f32).collect();
            let map = HealpixMap::new(nside, model.config.num_faces, 1, data, vec![true; labels.len()])?;
            let (raster, covered) = resample_to_raster(&map, r.camera, r.camera.width, r.camera.height)?;
            if covered.len() != r.sample.len() {
                return Err(invalid("raster size does not match its camera"));
            }
            fp.extend(raster.data.iter().map(|&v| v as u8));
            fg.extend_from_slice(&r.sample.labels);
            fc.extend(covered.iter().zip(&r.sample.validity).map(|(&a, &b)| a && b));
        }
        Some(flat_miou(&fp, &fg, &fc, meta.num_classes, &exclude)?)
    } else {
        None
    };
    Ok(EvalReport {
        task: meta.task,
        samples: samples.len(),
        loss: per_sample.iter().map(|m| m.loss).sum::<f64>() / n,
        pixel_accuracy: mean(&|m| m.pixel_accuracy),
        spherical,
        flat,
        chamfer: mean(&|m| m.chamfer),
        clamped_depths: per_sample.iter().map(|m| m.clamped_depths).sum(),
        per_sample,
    })
}
