use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use healswin_core::io::{mask_container, plan_container, read_map, read_raster, write_map, write_raster};
use healswin_core::model::manifest_path;
use healswin_core::synthetic::{sample_header, CLASS_NAMES, NUM_CLASSES};
use healswin_core::train::{self as training, Prediction, RasterTruth, TrainMeta};
use healswin_core::{
    generate, render_fisheye, resample_to_healpix, CameraCalibration, HealpixMap, Interp, Model, Sample, SceneSpec,
};
use healswin_grid::{attention_mask, build_patches, cached_plan, layer_chain, partition_windows, NSide, ShiftPlan};
use rayon::prelude::*;
use serde_json::{json, Map, Value};

use crate::config::{DataConfig, RunConfig};
use crate::outputs::Outputs;
use crate::{EvalArgs, GenDataArgs, GridInfoArgs, MakePlanArgs, PredictArgs, ResampleArgs, TrainArgs};

fn extras(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => Map::new(),
    }
}

pub fn grid_info(a: &GridInfoArgs) -> Result<Value> {
    let ns = NSide::new(a.nside)?;
    ensure!(a.faces == 8 || a.faces == 12, "--faces must be 8 or 12");
    let mut out = json!({
        "nside": a.nside,
        "npix": ns.npix(),
        "num_faces": a.faces,
        "subset_len": a.faces as u64 * ns.face_pixels(),
    });
    match (a.patch, a.window) {
        (Some(p), Some(w)) => {
            let layers: Vec<Value> = layer_chain(ns, p, w, a.stages, a.faces)?
                .into_iter()
                .map(|l| {
                    json!({
                        "layer": l.layer,
                        "pixels": l.tokens,
                        "windows": l.windows,
                        "windows_per_base_pixel": l.windows_per_base_pixel,
                        "nside": l.nside,
                        "followed_by": l.followed_by,
                    })
                })
                .collect();
            out["patch"] = json!(p);
            out["window"] = json!(w);
            out["layers"] = Value::Array(layers);
        }
        (None, None) => {}
        _ => bail!("--patch and --window go together"),
    }
    Ok(out)
}

pub fn make_plan(a: &MakePlanArgs) -> Result<Value> {
    let grid = build_patches(NSide::new(a.nside)?, a.patch, a.faces)?;
    let plan = if a.shift == 0 {
        Arc::new(ShiftPlan::identity(grid, a.strategy))
    } else {
        cached_plan(a.strategy, &grid, a.shift)?
    };
    let part = partition_windows(&grid, a.window)?;
    let mask = attention_mask(&plan, &part)?;
    let mask_path = a.mask.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".mask");
        PathBuf::from(s)
    });
    let mut outs = Outputs::default();
    outs.parent_of(&a.out)?;
    outs.parent_of(&mask_path)?;
    plan_container(&plan).write(&a.out)?;
    outs.wrote(&a.out);
    mask_container(&mask).write(&mask_path)?;
    outs.wrote(&mask_path);
    outs.commit();
    Ok(json!({
        "status": "ok",
        "plan": a.out,
        "mask": mask_path,
        "len": plan.len(),
        "identity": plan.is_identity(),
        "masked": plan.masked,
    }))
}

fn read_calib(path: &Path) -> Result<CameraCalibration> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    CameraCalibration::from_json(&text).with_context(|| format!("calibration {}", path.display()))
}

fn sample_name(k: usize) -> String {
    format!("sample_{k:04}.hswm")
}

fn raster_name(k: usize) -> String {
    format!("sample_{k:04}.raster.hswm")
}

pub fn gen_data(a: &GenDataArgs) -> Result<Value> {
    ensure!(a.count > 0, "--count must be positive");
    let camera = match &a.calib {
        Some(p) => read_calib(p)?,
        None => CameraCalibration::equidistant(256),
    };
    let specs: Vec<SceneSpec> = (0..a.count as u64)
        .map(|k| SceneSpec { num_objects: a.objects, camera: camera.clone(), ..SceneSpec::new(a.seed + k, a.nside) })
        .collect();
    specs[0].validate()?;
    let mut outs = Outputs::default();
    outs.dir(&a.out)?;
    let nside = NSide::new(a.nside)?;
    let written: Vec<Result<Vec<PathBuf>>> = specs
        .par_iter()
        .enumerate()
        .map(|(k, spec)| {
            let mut files = Vec::new();
            let path = a.out.join(sample_name(k));
            write_map(&path, &generate(spec)?.to_map(nside)?, &sample_header(spec))?;
            files.push(path);
            if a.raster {
                let r = render_fisheye(spec)?;
                let path = a.out.join(raster_name(k));
                write_raster(&path, &r.to_raster(camera.width, camera.height)?, Some(&r.validity), &sample_header(spec))?;
                files.push(path);
            }
            Ok(files)
        })
        .collect();
    let mut n = 0;
    let mut first_err = None;
    for w in written {
        match w {
            Ok(files) => files.iter().for_each(|f| {
                outs.wrote(f);
                n += 1;
            }),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    outs.commit();
    Ok(json!({ "status": "ok", "dir": a.out, "files": n, "samples": a.count }))
}

pub fn resample(a: &ResampleArgs) -> Result<Value> {
    let cal = read_calib(&a.calib)?;
    let (raster, validity, header) = read_raster(&a.input)?;
    ensure!(
        raster.width == cal.width && raster.height == cal.height,
        "raster is {}x{} but the calibration describes {}x{}",
        raster.width,
        raster.height,
        cal.width,
        cal.height
    );
    let nside = NSide::new(a.nside)?;
    let ch = raster.channels;
    // invalid raster pixels travel as an extra channel so they taint what they touch
    let map = match &validity {
        None => resample_to_healpix(&raster, &cal, nside, a.interp)?,
        Some(v) => {
            let mut data = Vec::with_capacity(raster.data.len() + v.len());
            for (px, &ok) in raster.data.chunks(ch).zip(v) {
                data.extend_from_slice(px);
                data.push(ok as u8 as f32);
            }
            let aug = healswin_core::ImageRaster::new(raster.width, raster.height, ch + 1, data)?;
            let m = resample_to_healpix(&aug, &cal, nside, a.interp)?;
            let keep: Vec<usize> = (0..ch).collect();
            let mut out = m.select(&keep);
            for i in 0..m.len() {
                if m.pixel(i)[ch] < 1.0 - 1e-6 {
                    out.validity[i] = false;
                    out.data[i * ch..(i + 1) * ch].iter_mut().for_each(|x| *x = 0.0);
                }
            }
            out
        }
    };
    let mut ex = header;
    ex.insert("interp".into(), json!(match a.interp {
        Interp::Bilinear => "bilinear",
        Interp::Nearest => "nearest",
    }));
    ex.insert("camera".into(), serde_json::to_value(&cal)?);
    let mut outs = Outputs::default();
    outs.parent_of(&a.out)?;
    write_map(&a.out, &map, &ex)?;
    outs.wrote(&a.out);
    outs.commit();
    let valid = map.validity.iter().filter(|&&v| v).count();
    Ok(json!({ "status": "ok", "out": a.out, "pixels": map.len(), "valid": valid }))
}

/// Samples and, when asked for, their fisheye ground truth.
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub rasters: Vec<(Sample, CameraCalibration)>,
}

pub fn load_data(data: &DataConfig, nside: u32) -> Result<Dataset> {
    if let Some(dir) = &data.dir {
        let mut names: Vec<String> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
            .filter(|n| n.starts_with("sample_") && n.ends_with(".hswm") && !n.ends_with(".raster.hswm"))
            .collect();
        names.sort();
        ensure!(!names.is_empty(), "no sample_*.hswm files in {}", dir.display());
        let mut samples = Vec::new();
        let mut rasters = Vec::new();
        for name in &names {
            let path = dir.join(name);
            let (map, _) = read_map(&path).with_context(|| format!("reading {}", path.display()))?;
            ensure!(map.nside.get() == nside, "{} has nside {}, the model expects {nside}", path.display(), map.nside.get());
            samples.push(Sample::from_map(&map)?);
            if data.rasters {
                let rpath = dir.join(name.replace(".hswm", ".raster.hswm"));
                let (r, validity, header) =
                    read_raster(&rpath).with_context(|| format!("reading {}", rpath.display()))?;
                let camera: CameraCalibration = serde_json::from_value(
                    header.get("camera").cloned().context("raster header has no camera")?,
                )?;
                rasters.push((Sample::from_raster(&r, validity)?, camera));
            }
        }
        return Ok(Dataset { samples, rasters });
    }
    let specs: Vec<SceneSpec> = (0..data.count as u64)
        .map(|k| SceneSpec {
            num_objects: data.num_objects,
            camera: data.camera.clone(),
            ..SceneSpec::new(data.seed + k, nside)
        })
        .collect();
    let samples = specs.par_iter().map(generate).collect::<Result<Vec<_>, _>>()?;
    let rasters = if data.rasters {
        specs
            .par_iter()
            .map(|s| Ok((render_fisheye(s)?, s.camera.clone())))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    Ok(Dataset { samples, rasters })
}

fn write_json(outs: &mut Outputs, path: &Path, v: &Value) -> Result<()> {
    outs.parent_of(path)?;
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    healswin_core::io::write_atomic(path, text.as_bytes())?;
    outs.wrote(path);
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<Value> {
    let cfg = RunConfig::load(&a.config)?;
    let data = load_data(&cfg.data, cfg.model.nside)?;
    let out = training::train(&cfg.model, &cfg.train, &data.samples, |_, _| {})?;
    let ckpt = cfg.io.checkpoint();
    let curve = cfg.io.loss_curve();
    let mut outs = Outputs::default();
    outs.parent_of(&ckpt)?;
    let ex = extras(json!({ "train_meta": out.meta, "train": cfg.train }));
    out.model.save(&ckpt, &ex)?;
    outs.wrote(&ckpt);
    outs.wrote(&manifest_path(&ckpt));
    write_json(&mut outs, &curve, &json!({ "task": cfg.train.task, "losses": out.losses }))?;
    outs.commit();
    Ok(json!({
        "status": "ok",
        "checkpoint": ckpt,
        "loss_curve": curve,
        "steps": out.losses.len(),
        "final_loss": out.losses.last(),
        "parameters": out.model.num_parameters(),
    }))
}

fn load_checkpoint(path: &Path) -> Result<(Model<f32>, TrainMeta)> {
    let (model, ex) = Model::<f32>::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let meta = ex.get("train_meta").cloned().context("checkpoint has no train_meta")?;
    Ok((model, serde_json::from_value(meta)?))
}

pub fn eval(a: &EvalArgs) -> Result<Value> {
    let cfg = RunConfig::load(&a.config)?;
    let (model, meta) = load_checkpoint(&a.ckpt)?;
    let data = load_data(&cfg.data, model.config.nside)?;
    let truth: Vec<RasterTruth> = data
        .rasters
        .iter()
        .map(|(sample, camera)| RasterTruth { sample, camera })
        .collect();
    let report = training::evaluate(&model, &meta, &data.samples, &truth)?;
    let path = a.out.clone().unwrap_or_else(|| cfg.io.metrics());
    let mut outs = Outputs::default();
    let mut v = serde_json::to_value(&report)?;
    v["class_names"] = json!(CLASS_NAMES);
    write_json(&mut outs, &path, &v)?;
    outs.commit();
    Ok(json!({
        "status": "ok",
        "metrics": path,
        "pixel_accuracy": report.pixel_accuracy,
        "miou": report.spherical.as_ref().map(|r| r.miou),
        "flat_miou": report.flat.as_ref().map(|r| r.miou),
        "chamfer": report.chamfer,
        "loss": report.loss,
    }))
}

pub fn predict(a: &PredictArgs) -> Result<Value> {
    let (model, meta) = load_checkpoint(&a.ckpt)?;
    let (map, _) = read_map(&a.input)?;
    ensure!(map.channels >= 3, "input map needs RGB in its first three channels, found {}", map.channels);
    let image = map.select(&[0, 1, 2]);
    let (_, pred) = training::predict(&model, &meta, &image)?;
    let (data, content) = match pred {
        Prediction::Labels(l) => (l.into_iter().map(f32::from).collect::<Vec<_>>(), "labels"),
        Prediction::Depth(d) => (d, "depth"),
    };
    let data: Vec<f32> = data.iter().zip(&map.validity).map(|(&v, &ok)| if ok { v } else { 0.0 }).collect();
    let out = HealpixMap::new(map.nside, map.num_faces, 1, data, map.validity.clone())?;
    let mut ex = extras(json!({ "content": content, "task": meta.task }));
    if content == "labels" {
        ex.insert("class_names".into(), json!(&CLASS_NAMES[..NUM_CLASSES]));
    }
    let mut outs = Outputs::default();
    outs.parent_of(&a.out)?;
    write_map(&a.out, &out, &ex)?;
    outs.wrote(&a.out);
    outs.commit();
    Ok(json!({ "status": "ok", "out": a.out, "content": content }))
}
