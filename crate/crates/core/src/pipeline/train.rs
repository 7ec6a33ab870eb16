//! Point-supervised training on short clips with online memory.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::EngineConfig;
use crate::decoder::{LabelMask, AGG_EPS};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::pipeline::manifest::{find_manifests, load_sequence, Sequence};
use crate::pipeline::model::{
    frame_features, mask_to_stride4, object_logits, object_value, prepare_image, update_queries,
    working_size, Model,
};
use crate::queries::init_queries;

/// `k` pixels drawn uniformly from the frame, with their labels.
pub fn sample_points(mask: &LabelMask, k: usize, seed: u64) -> Vec<(usize, usize, u8)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|_| {
            let x = rng.random_range(0..mask.width);
            let y = rng.random_range(0..mask.height);
            (x, y, mask.get(x, y))
        })
        .collect()
}

/// One line of the JSONL loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// All sequences with ground truth under `dir`.
pub fn load_training_set(dir: &Path) -> Result<Vec<Sequence>> {
    let mut out = Vec::new();
    for m in find_manifests(dir)? {
        let seq = load_sequence(&m)?;
        if seq.gt.is_none() {
            return Err(Error::Input(format!(
                "{} has no ground truth masks",
                m.display()
            )));
        }
        out.push(seq);
    }
    Ok(out)
}

/// Working-resolution input and ground truth of a frame, prepared once.
struct Frame {
    image: Tensor,
    gt: LabelMask,
}

struct Clip<'a> {
    frames: Vec<&'a Frame>,
    /// Original ids of the trained targets; target `j` is label `j+1`.
    targets: Vec<u8>,
    point_seeds: Vec<u64>,
}

fn relabel(mask: &LabelMask, targets: &[u8]) -> LabelMask {
    let labels = mask
        .labels
        .iter()
        .map(|l| {
            targets
                .iter()
                .position(|t| t == l)
                .map_or(0, |j| j as u8 + 1)
        })
        .collect();
    LabelMask {
        height: mask.height,
        width: mask.width,
        labels,
    }
}

fn sample_clip<'a>(
    rng: &mut ChaCha8Rng,
    data: &'a [Vec<Frame>],
    cfg: &EngineConfig,
) -> Result<Clip<'a>> {
    let t = &cfg.train;
    let usable: Vec<usize> = (0..data.len())
        .filter(|&i| data[i].len() >= t.frames_per_clip)
        .collect();
    if usable.is_empty() {
        return Err(Error::Input(format!(
            "no training sequence has {} frames",
            t.frames_per_clip
        )));
    }
    for _ in 0..1000 {
        let seq = &data[usable[rng.random_range(0..usable.len())]];
        let start = rng.random_range(0..=seq.len() - t.frames_per_clip);
        let ids = seq[start].gt.object_ids();
        if ids.is_empty() {
            continue;
        }
        let mut picks = sample(rng, t.frames_per_clip - 1, t.train_frames).into_vec();
        picks.sort_unstable();
        let mut chosen = sample(rng, ids.len(), ids.len().min(t.max_targets)).into_vec();
        chosen.sort_unstable();
        let mut frames = vec![&seq[start]];
        frames.extend(picks.iter().map(|&p| &seq[start + 1 + p]));
        let point_seeds = (0..t.train_frames).map(|_| rng.random()).collect();
        return Ok(Clip {
            frames,
            targets: chosen.iter().map(|&c| ids[c]).collect(),
            point_seeds,
        });
    }
    Err(Error::Input(
        "could not find a clip whose first frame shows an object".into(),
    ))
}

fn one_hot(mask: &LabelMask, id: u8) -> Vec<f64> {
    mask.labels
        .iter()
        .map(|&l| f64::from(u8::from(l == id)))
        .collect()
}

/// Loss of one clip, left on the graph for backward.
fn clip_loss(g: &mut Graph, model: &Model, clip: &Clip, points_k: usize) -> Result<Var> {
    let mcfg = &model.cfg;
    let native = (clip.frames[0].gt.height, clip.frames[0].gt.width);
    let working = (clip.frames[0].image.dim(1), clip.frames[0].image.dim(2));
    let n = clip.targets.len();
    let reference = relabel(&clip.frames[0].gt, &clip.targets);
    let feats = frame_features(g, mcfg, &clip.frames[0].image)?;
    let mut keys: Vec<Vec<Var>> = Vec::with_capacity(n);
    let mut values: Vec<Vec<Var>> = Vec::with_capacity(n);
    let mut queries = Vec::with_capacity(n);
    let masks: Vec<Vec<f64>> = (1..=n as u8).map(|j| one_hot(&reference, j)).collect();
    for j in 0..n {
        let others: Vec<f64> = (0..masks[j].len())
            .map(|p| (0..n).filter(|&o| o != j).map(|o| masks[o][p]).sum())
            .collect();
        let m4 = mask_to_stride4(&masks[j], native, working, false);
        let o4 = mask_to_stride4(&others, native, working, false);
        keys.push(vec![feats.key]);
        values.push(vec![object_value(g, &feats, &m4, &o4)?]);
        queries.push(init_queries(g, feats.s4_rows, &m4)?);
    }
    let mut losses = Vec::new();
    for (frame, &seed) in clip.frames[1..].iter().zip(&clip.point_seeds) {
        let feats = frame_features(g, mcfg, &frame.image)?;
        let mut probs = Vec::with_capacity(n);
        for j in 0..n {
            let out = object_logits(g, &feats, &keys[j], &values[j], queries[j], native)?;
            probs.push(g.sigmoid(out.logits));
        }
        let agg = g.soft_aggregate(&probs, AGG_EPS)?;
        let gt = relabel(&frame.gt, &clip.targets);
        let targets = sample_points(&gt, points_k, seed)
            .into_iter()
            .map(|(x, y, l)| (l as usize, y * native.1 + x))
            .collect();
        losses.push(g.point_nll(agg, targets)?);

        // Online memory from the detached prediction.
        let dist = g.value(agg).data().to_vec();
        let plane = native.0 * native.1;
        for j in 0..n {
            let mine = dist[(j + 1) * plane..(j + 2) * plane].to_vec();
            let others: Vec<f64> = (0..plane)
                .map(|p| {
                    (1..=n)
                        .filter(|&o| o != j + 1)
                        .map(|o| dist[o * plane + p])
                        .sum()
                })
                .collect();
            let m4 = mask_to_stride4(&mine, native, working, false);
            let o4 = mask_to_stride4(&others, native, working, false);
            keys[j].push(feats.key);
            values[j].push(object_value(g, &feats, &m4, &o4)?);
            if let Some(q) = update_queries(g, &feats, queries[j], &m4, None)? {
                queries[j] = q;
            }
        }
    }
    let mut sum = losses[0];
    for &l in &losses[1..] {
        sum = g.add(sum, l)?;
    }
    Ok(g.scale(sum, 1.0 / losses.len() as f64))
}

/// Momentum SGD over random clips of `data`. Writes one [`StepLog`] line per
/// step to `log` and returns the losses.
pub fn train(
    model: &mut Model,
    cfg: &EngineConfig,
    data: &[Sequence],
    steps: usize,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if cfg.freeze_vit {
        model.freeze_vit();
    }
    let frames: Vec<Vec<Frame>> = data
        .iter()
        .map(|seq| {
            let gt = seq.gt.as_ref().ok_or_else(|| {
                Error::Input(format!("sequence {} has no ground truth", seq.name))
            })?;
            Ok(seq
                .frames
                .iter()
                .zip(gt)
                .map(|(img, gt)| {
                    let size = working_size(cfg.base_size, 1.0, img.height, img.width);
                    Frame {
                        image: prepare_image(&img.to_tensor(), size, false),
                        gt: gt.clone(),
                    }
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let t = &cfg.train;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let clip = sample_clip(&mut rng, &frames, cfg)?;
        let (loss, grads) = {
            let mut g = Graph::new(&model.params);
            let loss = clip_loss(&mut g, model, &clip, t.points_k)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Numerical(format!(
                    "training diverged at step {step}: loss {value}"
                )));
            }
            g.backward(loss)?;
            (value, g.param_grads())
        };
        let norm = grads.values().flatten().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Numerical(format!(
                "training diverged at step {step}: gradient norm {norm}"
            )));
        }
        let clip_scale = match t.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for (name, grad) in &grads {
            let v = velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let w = model.params.get_mut(name)?.data_mut();
            for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(grad) {
                *v = t.momentum * *v + g * clip_scale;
                *w -= t.lr * *v;
            }
        }
        if let Some(out) = log.as_deref_mut() {
            let line = serde_json::to_string(&StepLog {
                step,
                loss,
                grad_norm: norm,
                lr: t.lr,
            })?;
            writeln!(out, "{line}").map_err(|e| Error::io("loss log", e))?;
        }
        losses.push(loss);
    }
    Ok(losses)
}
