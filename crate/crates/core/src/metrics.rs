use healswin_grid::{pix_to_ang, NSide, PixelId, SphericalAngle};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Raw per-class counts over valid elements.
pub fn class_counts(labels: &[u8], valid: &[bool], num_classes: usize) -> Vec<u64> {
    let mut n = vec![0u64; num_classes];
    for (&l, &ok) in labels.iter().zip(valid) {
        if ok && (l as usize) < num_classes {
            n[l as usize] += 1;
        }
    }
    n
}

/// `w_i = n_i^(-1/4)`; classes never seen get weight 0.
pub fn class_weights(counts: &[u64]) -> Vec<f64> {
    counts.iter().map(|&n| if n == 0 { 0.0 } else { (n as f64).powf(-0.25) }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthStats {
    pub mean: f64,
    pub std: f64,
}

impl DepthStats {
    pub fn from_values(values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
        for v in values {
            n += 1;
            sum += v;
            sq += v * v;
        }
        if n == 0 {
            return Err(invalid("depth statistics need at least one value"));
        }
        let mean = sum / n as f64;
        let std = (sq / n as f64 - mean * mean).max(0.0).sqrt();
        if !(std > 0.0) {
            return Err(invalid("depth values have zero spread"));
        }
        Ok(Self { mean, std })
    }

    pub fn standardize(&self, d: f64) -> f64 {
        (d - self.mean) / self.std
    }

    pub fn destandardize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Mean over valid rows of `w[label] · (−log softmax(logits)[label])`.
pub fn weighted_cross_entropy(
    logits: &[f32],
    labels: &[u8],
    weights: &[f64],
    valid: &[bool],
) -> Result<f64> {
    let c = weights.len();
    if c == 0 || logits.len() != labels.len() * c || valid.len() != labels.len() {
        return Err(invalid("cross entropy inputs disagree in size"));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for (r, row) in logits.chunks(c).enumerate() {
        if !valid[r] {
            continue;
        }
        let y = labels[r] as usize;
        if y >= c {
            return Err(invalid(format!("label {y} out of range for {c} classes")));
        }
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
        total += weights[y] * (lse - row[y] as f64);
        count += 1;
    }
    if count == 0 {
        return Err(invalid("no valid pixels"));
    }
    Ok(total / count as f64)
}

/// Mean squared error in standardized units over valid non-sky elements.
/// Both `pred` and `gt` are in meters.
pub fn depth_l2_loss(pred: &[f32], gt: &[f32], sky: &[bool], valid: &[bool], stats: DepthStats) -> Result<f64> {
    if pred.len() != gt.len() || sky.len() != gt.len() || valid.len() != gt.len() {
        return Err(invalid("depth loss inputs disagree in size"));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for i in 0..gt.len() {
        if valid[i] && !sky[i] {
            let d = stats.standardize(pred[i] as f64) - stats.standardize(gt[i] as f64);
            total += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(invalid("depth loss has an empty valid set"));
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    /// Absent classes left out of the mean.
    pub skipped: Vec<usize>,
}

pub fn miou(pred: &[u8], gt: &[u8], valid: &[bool], num_classes: usize, exclude: &[usize]) -> Result<IouReport> {
    if pred.len() != gt.len() || valid.len() != gt.len() {
        return Err(invalid("mIoU inputs disagree in size"));
    }
    let (mut tp, mut fp, mut fnn) = (vec![0u64; num_classes], vec![0u64; num_classes], vec![0u64; num_classes]);
    for i in 0..gt.len() {
        if !valid[i] {
            continue;
        }
        let (p, g) = (pred[i] as usize, gt[i] as usize);
        if p >= num_classes || g >= num_classes {
            return Err(invalid(format!("label out of range at element {i}")));
        }
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fnn[g] += 1;
        }
    }
    let mut per_class = vec![None; num_classes];
    let mut skipped = Vec::new();
    let (mut sum, mut n) = (0.0, 0usize);
    for c in 0..num_classes {
        let denom = tp[c] + fp[c] + fnn[c];
        if denom == 0 {
            if !exclude.contains(&c) {
                skipped.push(c);
            }
            continue;
        }
        let iou = tp[c] as f64 / denom as f64;
        per_class[c] = Some(iou);
        if !exclude.contains(&c) {
            sum += iou;
            n += 1;
        }
    }
    if n == 0 {
        return Err(invalid("no classes left to average"));
    }
    Ok(IouReport { per_class_iou: per_class, miou: sum / n as f64, skipped })
}

/// mIoU on the sphere; the void convention passes `exclude = [0]`.
pub fn spherical_miou(pred: &[u8], gt: &[u8], valid: &[bool], num_classes: usize, exclude: &[usize]) -> Result<IouReport> {
    miou(pred, gt, valid, num_classes, exclude)
}

/// mIoU over covered raster pixels only.
pub fn flat_miou(
    pred: &[u8],
    gt: &[u8],
    coverage: &[bool],
    num_classes: usize,
    exclude: &[usize],
) -> Result<IouReport> {
    if !coverage.iter().any(|&c| c) {
        return Err(invalid("coverage mask is empty"));
    }
    miou(pred, gt, coverage, num_classes, exclude)
}

pub fn pixel_accuracy(pred: &[u8], gt: &[u8], valid: &[bool]) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for i in 0..gt.len() {
        if valid[i] {
            n += 1;
            hit += (pred[i] == gt[i]) as usize;
        }
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Pixel-center directions of the first `n` nested pixels.
pub fn healpix_angles(nside: NSide, n: usize) -> Vec<SphericalAngle> {
    (0..n)
        .map(|i| pix_to_ang(nside, PixelId::nested(i as u64)).expect("pixel in range"))
        .collect()
}

/// Scales the unit vector of every valid element by its depth. Negative
/// depths are clamped to zero; the number of clamped elements is returned.
pub fn depth_to_pointcloud(depth: &[f32], angles: &[SphericalAngle], valid: &[bool]) -> (PointCloud, usize) {
    let mut clamped = 0;
    let mut points = Vec::new();
    for i in 0..depth.len() {
        if !valid[i] {
            continue;
        }
        let mut d = depth[i] as f64;
        if d < 0.0 {
            d = 0.0;
            clamped += 1;
        }
        points.push(angles[i].unit_vector().map(|c| c * d));
    }
    (PointCloud { points }, clamped)
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let (x, y, z) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    x * x + y * y + z * z
}

/// Mean squared nearest-neighbour distance from `p` to `q`, by exhaustive search.
pub fn mean_nn_sq_brute(p: &PointCloud, q: &PointCloud) -> f64 {
    let d: Vec<f64> = p
        .points
        .par_iter()
        .map(|a| q.points.iter().map(|b| dist2(a, b)).fold(f64::INFINITY, f64::min))
        .collect();
    d.iter().sum::<f64>() / p.len() as f64
}

pub fn chamfer_brute(p: &PointCloud, q: &PointCloud) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(invalid("chamfer distance of an empty cloud"));
    }
    Ok(mean_nn_sq_brute(p, q) + mean_nn_sq_brute(q, p))
}

const BRUTE_BELOW: usize = 64;

/// Uniform grid over a cloud's bounding box with points bucketed per cell.
pub struct SpatialHash<'a> {
    points: &'a [[f64; 3]],
    origin: [f64; 3],
    cell: f64,
    dims: [i64; 3],
    starts: Vec<usize>,
    order: Vec<u32>,
}

impl<'a> SpatialHash<'a> {
    pub fn new(points: &'a [[f64; 3]]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent: Vec<f64> = (0..3).map(|a| (hi[a] - lo[a]).max(1e-9)).collect();
        let volume: f64 = extent.iter().product();
        // about two points per cell for a volume-filling cloud
        let mut cell = (2.0 * volume / points.len() as f64).cbrt();
        let max_extent = extent.iter().cloned().fold(0.0, f64::max);
        cell = cell.max(max_extent / 256.0);
        let dims = std::array::from_fn(|a| (extent[a] / cell).floor() as i64 + 1);
        let cell_of = |p: &[f64; 3]| -> usize {
            let c: [i64; 3] = std::array::from_fn(|a| (((p[a] - lo[a]) / cell) as i64).clamp(0, dims[a] - 1));
            ((c[2] * dims[1] + c[1]) * dims[0] + c[0]) as usize
        };
        let ncells = (dims[0] * dims[1] * dims[2]) as usize;
        let mut counts = vec![0usize; ncells + 1];
        let cells: Vec<usize> = points.iter().map(cell_of).collect();
        for &c in &cells {
            counts[c + 1] += 1;
        }
        for i in 0..ncells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0u32; points.len()];
        for (i, &c) in cells.iter().enumerate() {
            order[fill[c]] = i as u32;
            fill[c] += 1;
        }
        Self { points, origin: lo, cell, dims, starts: counts, order }
    }

    /// Squared distance from `p` to the nearest indexed point.
    pub fn nearest_sq(&self, p: &[f64; 3]) -> f64 {
        let home: [i64; 3] = std::array::from_fn(|a| ((p[a] - self.origin[a]) / self.cell).floor() as i64);
        let outside = (0..3).any(|a| home[a] < -2 || home[a] > self.dims[a] + 1);
        if outside {
            return self.points.iter().map(|b| dist2(p, b)).fold(f64::INFINITY, f64::min);
        }
        let kmax = (0..3)
            .map(|a| home[a].abs().max((self.dims[a] - 1 - home[a]).abs()))
            .max()
            .unwrap();
        let mut best = f64::INFINITY;
        for k in 0..=kmax {
            // p sits inside its home cell, so cells on ring k are at least k-1 cells away
            let reach = (k - 1).max(0) as f64 * self.cell;
            if k > 0 && best <= reach * reach {
                break;
            }
            self.visit_shell(home, k, |c| {
                for &i in &self.order[self.starts[c]..self.starts[c + 1]] {
                    best = best.min(dist2(p, &self.points[i as usize]));
                }
            });
        }
        best
    }

    /// Calls `f` for every in-grid cell at Chebyshev distance exactly `k` from `home`.
    fn visit_shell(&self, home: [i64; 3], k: i64, mut f: impl FnMut(usize)) {
        let [dx, dy, dz] = self.dims;
        let range = |h: i64, d: i64| (h - k).max(0)..=(h + k).min(d - 1);
        for z in range(home[2], dz) {
            for y in range(home[1], dy) {
                let idx = |x: i64| ((z * dy + y) * dx + x) as usize;
                if (z - home[2]).abs() == k || (y - home[1]).abs() == k {
                    range(home[0], dx).for_each(|x| f(idx(x)));
                } else {
                    for x in [home[0] - k, home[0] + k] {
                        if (0..dx).contains(&x) {
                            f(idx(x));
                        }
                    }
                }
            }
        }
    }
}

fn mean_nn_sq(p: &PointCloud, q: &PointCloud) -> f64 {
    if q.len() < BRUTE_BELOW {
        return mean_nn_sq_brute(p, q);
    }
    let index = SpatialHash::new(&q.points);
    let d: Vec<f64> = p.points.par_iter().map(|a| index.nearest_sq(a)).collect();
    d.iter().sum::<f64>() / p.len() as f64
}

/// Symmetric Chamfer distance with squared Euclidean nearest-neighbour terms.
pub fn chamfer(p: &PointCloud, q: &PointCloud) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(invalid("chamfer distance of an empty cloud"));
    }
    Ok(mean_nn_sq(p, q) + mean_nn_sq(q, p))
}
