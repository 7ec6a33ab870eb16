//! Deterministic moving-shapes sequences with exact ground truth.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::decoder::LabelMask;
use crate::error::{Error, Result};
use crate::pipeline::manifest::SequenceManifest;
use crate::pipeline::pnm::{write_pgm, write_ppm, RgbImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Motion {
    /// Slow straight-line drift, shapes kept apart.
    #[serde(alias = "easy-linear")]
    Linear,
    /// Faster motion reflecting off the frame border.
    Bounce,
    /// Two shapes cross; the first passes in front of the second.
    OccludingCross,
}

fn default_side() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_shapes: usize,
    pub motion: Motion,
    pub frames: usize,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_side")]
    pub width: usize,
    #[serde(default = "default_side")]
    pub height: usize,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.n_shapes) {
            return Err(Error::Config("n_shapes must be 1, 2 or 3".into()));
        }
        if self.motion == Motion::OccludingCross && self.n_shapes < 2 {
            return Err(Error::Config(
                "occluding-cross needs at least 2 shapes".into(),
            ));
        }
        if self.frames < 2 || self.width < 32 || self.height < 32 {
            return Err(Error::Config(
                "need at least 2 frames of at least 32×32".into(),
            ));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        Ok(())
    }

    pub fn name(&self) -> String {
        let m = match self.motion {
            Motion::Linear => "linear",
            Motion::Bounce => "bounce",
            Motion::OccludingCross => "occluding-cross",
        };
        format!("{m}-{}", self.seed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Rect,
    Triangle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    /// Half extent in pixels.
    pub size: f64,
    pub color: [u8; 3],
    /// Centre per frame.
    pub path: Vec<(f64, f64)>,
}

impl Shape {
    /// Membership of the pixel centre `(px + ½, py + ½)` at frame `t`.
    pub fn contains(&self, t: usize, px: usize, py: usize) -> bool {
        let (cx, cy) = self.path[t];
        let (dx, dy) = (px as f64 + 0.5 - cx, py as f64 + 0.5 - cy);
        let r = self.size;
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Rect => dx.abs() <= r && dy.abs() <= 0.75 * r,
            ShapeKind::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }
}

/// A rendered sequence held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSequence {
    pub spec: SyntheticSpec,
    pub frames: Vec<RgbImage>,
    pub masks: Vec<LabelMask>,
    /// Labels are shape index + 1; drawn in `z_order` (last on top).
    pub shapes: Vec<Shape>,
    pub z_order: Vec<usize>,
}

impl SyntheticSequence {
    /// Pixels shape `i` would cover at frame `t` with nothing in front.
    pub fn unoccluded_area(&self, i: usize, t: usize) -> usize {
        let s = &self.shapes[i];
        (0..self.spec.height)
            .flat_map(|y| (0..self.spec.width).map(move |x| (x, y)))
            .filter(|&(x, y)| s.contains(t, x, y))
            .count()
    }
}

const PALETTE: [[u8; 3]; 6] = [
    [225, 45, 40],
    [40, 200, 70],
    [45, 90, 235],
    [240, 205, 30],
    [205, 55, 210],
    [30, 210, 215],
];

fn linear_path(
    rng: &mut ChaCha8Rng,
    r: f64,
    w: f64,
    h: f64,
    frames: usize,
    speed: f64,
) -> Vec<(f64, f64)> {
    let lo = r + 1.0;
    let start = (rng.random_range(lo..w - lo), rng.random_range(lo..h - lo));
    let span = speed * (frames - 1) as f64;
    let mut end = start;
    for _ in 0..50 {
        let cand = (rng.random_range(lo..w - lo), rng.random_range(lo..h - lo));
        let d = ((cand.0 - start.0).powi(2) + (cand.1 - start.1).powi(2)).sqrt();
        if d <= span {
            end = cand;
            break;
        }
    }
    (0..frames)
        .map(|t| {
            let a = t as f64 / (frames - 1) as f64;
            (
                start.0 + a * (end.0 - start.0),
                start.1 + a * (end.1 - start.1),
            )
        })
        .collect()
}

fn bounce_path(rng: &mut ChaCha8Rng, r: f64, w: f64, h: f64, frames: usize) -> Vec<(f64, f64)> {
    let lo = r + 1.0;
    let (mut x, mut y) = (rng.random_range(lo..w - lo), rng.random_range(lo..h - lo));
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let speed = rng.random_range(2.0..3.5);
    let (mut vx, mut vy) = (speed * angle.cos(), speed * angle.sin());
    let mut path = Vec::with_capacity(frames);
    for _ in 0..frames {
        path.push((x, y));
        x += vx;
        y += vy;
        if x < lo || x > w - lo {
            vx = -vx;
            x = x.clamp(lo, w - lo);
        }
        if y < lo || y > h - lo {
            vy = -vy;
            y = y.clamp(lo, h - lo);
        }
    }
    path
}

fn min_gap(a: &Shape, b: &Shape) -> f64 {
    a.path
        .iter()
        .zip(&b.path)
        .map(|(p, q)| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt() - a.size - b.size)
        .fold(f64::INFINITY, f64::min)
}

fn plan_shapes(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> (Vec<Shape>, Vec<usize>) {
    let (w, h) = (spec.width as f64, spec.height as f64);
    let unit = w.min(h) / 64.0;
    let mut colors = PALETTE.to_vec();
    colors.shuffle(rng);
    let kinds = [ShapeKind::Circle, ShapeKind::Rect, ShapeKind::Triangle];
    let mut shapes: Vec<Shape> = Vec::with_capacity(spec.n_shapes);
    match spec.motion {
        Motion::Linear | Motion::Bounce => {
            for i in 0..spec.n_shapes {
                let kind = kinds[rng.random_range(0..3)];
                let size = rng.random_range(6.0..10.0) * unit;
                let mut best: Option<Shape> = None;
                for _ in 0..100 {
                    let path = if spec.motion == Motion::Linear {
                        linear_path(rng, size, w, h, spec.frames, 1.2 * unit)
                    } else {
                        bounce_path(rng, size, w, h, spec.frames)
                    };
                    let cand = Shape {
                        kind,
                        size,
                        color: colors[i],
                        path,
                    };
                    let gap = shapes
                        .iter()
                        .map(|s| min_gap(s, &cand))
                        .fold(f64::INFINITY, f64::min);
                    let better = best.as_ref().is_none_or(|b| {
                        gap > shapes
                            .iter()
                            .map(|s| min_gap(s, b))
                            .fold(f64::INFINITY, f64::min)
                    });
                    if better {
                        best = Some(cand);
                    }
                    if spec.motion == Motion::Bounce || gap >= 2.0 {
                        break;
                    }
                }
                shapes.push(best.expect("at least one candidate"));
            }
            let z = (0..spec.n_shapes).collect();
            (shapes, z)
        }
        Motion::OccludingCross => {
            let n = spec.frames as f64 - 1.0;
            let y = h / 2.0 + rng.random_range(-2.0..2.0) * unit;
            let (x0, x1) = (0.2 * w, 0.8 * w);
            let front = Shape {
                kind: ShapeKind::Rect,
                size: 12.0 * unit,
                color: colors[0],
                path: (0..spec.frames)
                    .map(|t| (x0 + (x1 - x0) * t as f64 / n, y))
                    .collect(),
            };
            let back = Shape {
                kind: ShapeKind::Circle,
                size: 6.5 * unit,
                color: colors[1],
                path: (0..spec.frames)
                    .map(|t| (x1 - (x1 - x0) * t as f64 / n, y))
                    .collect(),
            };
            shapes.push(front);
            shapes.push(back);
            if spec.n_shapes == 3 {
                let size = 5.0 * unit;
                let band = 0.15 * h;
                let a = (rng.random_range(size + 1.0..w - size - 1.0), band);
                let b = (rng.random_range(size + 1.0..w - size - 1.0), band);
                shapes.push(Shape {
                    kind: ShapeKind::Triangle,
                    size,
                    color: colors[2],
                    path: (0..spec.frames)
                        .map(|t| {
                            let s = t as f64 / n;
                            (a.0 + s * (b.0 - a.0), a.1)
                        })
                        .collect(),
                });
            }
            // the front shape is drawn last
            let mut z: Vec<usize> = (1..spec.n_shapes).collect();
            z.push(0);
            (shapes, z)
        }
    }
}

/// Renders `spec` in memory. Identical specs give identical bytes.
pub fn render(spec: &SyntheticSpec) -> Result<SyntheticSequence> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.width, spec.height);
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.35..0.6));
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.05..0.3),
                rng.random_range(0.05..0.3),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.03..0.08),
            )
        })
        .collect();
    let texture: Vec<f64> = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            waves
                .iter()
                .map(|&(fx, fy, ph, a)| a * (fx * x + fy * y + ph).sin())
                .sum()
        })
        .collect();
    let (shapes, z_order) = plan_shapes(spec, &mut rng);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut frames = Vec::with_capacity(spec.frames);
    let mut masks = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let mut labels = vec![0u8; w * h];
        let mut data = vec![0u8; 3 * w * h];
        for i in 0..w * h {
            let (x, y) = (i % w, i / w);
            let mut color: [f64; 3] =
                std::array::from_fn(|c| base[c] + texture[i] * (1.0 + 0.3 * c as f64));
            for &s in &z_order {
                if shapes[s].contains(t, x, y) {
                    labels[i] = s as u8 + 1;
                    color = shapes[s].color.map(|v| f64::from(v) / 255.0);
                }
            }
            for c in 0..3 {
                let n = if spec.noise_std > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                data[3 * i + c] = ((color[c] + n) * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        frames.push(RgbImage::new(w, h, data)?);
        masks.push(LabelMask::new(h, w, labels)?);
    }
    Ok(SyntheticSequence {
        spec: spec.clone(),
        frames,
        masks,
        shapes,
        z_order,
    })
}

/// Writes `frames/NNNNN.ppm`, `masks/NNNNN.pgm` and `manifest.json` into `dir`.
pub fn gen_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<SequenceManifest> {
    let seq = render(spec)?;
    write_sequence(&seq, dir)
}

pub fn write_sequence(seq: &SyntheticSequence, dir: &Path) -> Result<SequenceManifest> {
    for sub in ["frames", "masks"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut frames = Vec::new();
    let mut masks = Vec::new();
    for (t, (img, mask)) in seq.frames.iter().zip(&seq.masks).enumerate() {
        let f = format!("frames/{t:05}.ppm");
        let m = format!("masks/{t:05}.pgm");
        write_ppm(&dir.join(&f), img)?;
        write_pgm(&dir.join(&m), mask)?;
        frames.push(f);
        masks.push(m);
    }
    let manifest = SequenceManifest {
        name: seq.spec.name(),
        frames,
        first_frame_annotation: masks[0].clone(),
        gt_masks: Some(masks),
        width: seq.spec.width,
        height: seq.spec.height,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// `gen` input: one spec, or `count` specs with seeds `seed, seed+1, …`
/// written to `seq_NNN/` subdirectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenRequest {
    #[serde(flatten)]
    pub spec: SyntheticSpec,
    #[serde(default)]
    pub count: Option<usize>,
}

impl GenRequest {
    pub fn specs(&self) -> Vec<SyntheticSpec> {
        match self.count {
            None => vec![self.spec.clone()],
            Some(n) => (0..n as u64)
                .map(|i| SyntheticSpec {
                    seed: self.spec.seed + i,
                    ..self.spec.clone()
                })
                .collect(),
        }
    }

    pub fn run(&self, out: &Path) -> Result<Vec<SequenceManifest>> {
        match self.count {
            None => Ok(vec![gen_synthetic(&self.spec, out)?]),
            Some(_) => self
                .specs()
                .iter()
                .enumerate()
                .map(|(i, s)| gen_synthetic(s, &out.join(format!("seq_{i:03}"))))
                .collect(),
        }
    }
}
