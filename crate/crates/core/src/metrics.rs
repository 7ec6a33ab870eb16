//! Region Jaccard `J`, boundary F-measure `F` and their mean, evaluated the
//! DAVIS way with an exact Euclidean distance transform.

use serde::{Deserialize, Serialize};

use crate::decoder::LabelMask;
use crate::error::{Error, Result};

/// Fraction of the image diagonal used as boundary tolerance.
pub const BOUNDARY_FRACTION: f64 = 0.008;

/// A binary mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim(format!(
                "{} pixels for {height}×{width}",
                data.len()
            )));
        }
        Ok(BinaryMask {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_labels(mask: &LabelMask, id: u8) -> Self {
        BinaryMask {
            height: mask.height,
            width: mask.width,
            data: mask.object(id),
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

fn same_shape(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::dim(format!(
            "masks {}×{} and {}×{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// `|pred ∩ gt| / |pred ∪ gt|`, 1 when both are empty.
pub fn jaccard(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    same_shape(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Mask pixels with a 4-neighbour outside the mask or on the image border.
pub fn boundary_extract(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = (mask.height, mask.width);
    let data = (0..h * w)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            mask.data[i]
                && (x == 0
                    || y == 0
                    || x + 1 == w
                    || y + 1 == h
                    || !mask.get(x - 1, y)
                    || !mask.get(x + 1, y)
                    || !mask.get(x, y - 1)
                    || !mask.get(x, y + 1))
        })
        .collect();
    BinaryMask {
        height: h,
        width: w,
        data,
    }
}

/// DAVIS tolerance in pixels for an image: `ceil(0.008 · diagonal)`.
pub fn default_tolerance(height: usize, width: usize) -> f64 {
    (BOUNDARY_FRACTION * ((height * height + width * width) as f64).sqrt()).ceil()
}

/// One-dimensional squared distance transform: lower envelope of the
/// parabolas rooted at finite samples.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let mut k: isize = -1;
    for (q, &fq) in f.iter().enumerate() {
        if fq.is_infinite() {
            continue;
        }
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            let p = v[k as usize];
            let s = ((fq + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = s;
            z[k as usize + 1] = f64::INFINITY;
            break;
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest set
/// pixel of `mask`; infinite everywhere when `mask` is empty.
pub fn squared_distance_transform(mask: &BinaryMask) -> Vec<f64> {
    let (h, w) = (mask.height, mask.width);
    let n = h.max(w);
    let mut grid: Vec<f64> = mask
        .data
        .iter()
        .map(|&b| if b { 0.0 } else { f64::INFINITY })
        .collect();
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

fn matched_fraction(from: &BinaryMask, dist_to: &[f64], tol2: f64) -> Option<f64> {
    let total = from.count();
    if total == 0 {
        return None;
    }
    let hit = from
        .data
        .iter()
        .zip(dist_to)
        .filter(|(&b, &d)| b && d <= tol2)
        .count();
    Some(hit as f64 / total as f64)
}

/// Boundary F-measure with pixel tolerance `tol`. A boundary pixel counts as
/// matched when the other boundary lies within Euclidean distance `tol`.
pub fn boundary_f(pred: &BinaryMask, gt: &BinaryMask, tol: f64) -> Result<f64> {
    same_shape(pred, gt)?;
    if !(tol >= 0.0) {
        return Err(Error::Evaluation(format!(
            "tolerance {tol} is not a distance"
        )));
    }
    let bp = boundary_extract(pred);
    let bg = boundary_extract(gt);
    let tol2 = tol * tol;
    let precision = matched_fraction(&bp, &squared_distance_transform(&bg), tol2);
    let recall = matched_fraction(&bg, &squared_distance_transform(&bp), tol2);
    Ok(match (precision, recall) {
        (None, None) => 1.0,
        (None, _) | (_, None) => 0.0,
        (Some(p), Some(r)) if p + r == 0.0 => 0.0,
        (Some(p), Some(r)) => 2.0 * p * r / (p + r),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectScore {
    pub id: u8,
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "F")]
    pub f: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_object: Vec<ObjectScore>,
    #[serde(rename = "J")]
    pub j_mean: f64,
    #[serde(rename = "F")]
    pub f_mean: f64,
    #[serde(rename = "JF")]
    pub jf_mean: f64,
}

impl EvalReport {
    /// Averages per-object scores; `JF` is the mean of `J` and `F`.
    pub fn from_objects(per_object: Vec<ObjectScore>) -> Result<Self> {
        if per_object.is_empty() {
            return Err(Error::Input("no objects to evaluate".into()));
        }
        let n = per_object.len() as f64;
        let j_mean = per_object.iter().map(|o| o.j).sum::<f64>() / n;
        let f_mean = per_object.iter().map(|o| o.f).sum::<f64>() / n;
        Ok(EvalReport {
            per_object,
            j_mean,
            f_mean,
            jf_mean: (j_mean + f_mean) / 2.0,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}

/// Per-object `J` and `F` averaged over frames, then over objects. Objects
/// are the labels appearing anywhere in the ground truth.
pub fn evaluate_sequence(
    pred: &[LabelMask],
    gt: &[LabelMask],
    ignore_first_frame: bool,
) -> Result<EvalReport> {
    if pred.len() != gt.len() {
        return Err(Error::Input(format!(
            "{} predicted frames for {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    let skip = usize::from(ignore_first_frame);
    if gt.len() <= skip {
        return Err(Error::Input("no frames left to score".into()));
    }
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        if (p.height, p.width) != (g.height, g.width) {
            return Err(Error::Input(format!(
                "frame {i}: prediction {}×{} vs ground truth {}×{}",
                p.height, p.width, g.height, g.width
            )));
        }
    }
    let mut ids: Vec<u8> = gt.iter().flat_map(LabelMask::object_ids).collect();
    ids.sort_unstable();
    ids.dedup();
    let frames = (gt.len() - skip) as f64;
    let mut per_object = Vec::with_capacity(ids.len());
    for id in ids {
        let (mut js, mut fs) = (0.0, 0.0);
        for (p, g) in pred.iter().zip(gt).skip(skip) {
            let (pm, gm) = (
                BinaryMask::from_labels(p, id),
                BinaryMask::from_labels(g, id),
            );
            js += jaccard(&pm, &gm)?;
            fs += boundary_f(&pm, &gm, default_tolerance(g.height, g.width))?;
        }
        per_object.push(ObjectScore {
            id,
            j: js / frames,
            f: fs / frames,
        });
    }
    EvalReport::from_objects(per_object)
}
