//! Sequence inference: per-frame multi-scale and flip variants, probability
//! fusion, and the memory/query update policy driven by the fused labels.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::EngineConfig;
use crate::decoder::{argmax_label, soft_aggregate, LabelMask};
use crate::error::{Error, Result};
use crate::memory::{entry_mass, should_store, MemoryBank};
use crate::metrics::{evaluate_sequence, EvalReport};
use crate::numerics::{kernels, Checkpoint, Graph, Tensor};
use crate::pipeline::manifest::{check_contiguous, Sequence};
use crate::pipeline::model::{
    frame_features, map_tensor_rows, mask_to_stride4, object_logits, object_value, prepare_image,
    rows_tensor, update_queries, working_size, FrameFeatures, Model,
};
use crate::pipeline::pnm::{read_pgm, write_pgm, RgbImage};
use crate::queries::{init_queries, TargetQuerySet};

/// Pixelwise mean of aligned `[(n+1)×H×W]` distributions, renormalized per
/// pixel. Values are summed in sorted order, so the result does not depend
/// on the order of `maps`.
pub fn fuse_scales(maps: &[Tensor]) -> Result<Tensor> {
    let first = maps.first().ok_or_else(|| Error::dim("nothing to fuse"))?;
    if first.rank() != 3 || maps.iter().any(|m| m.shape() != first.shape()) {
        return Err(Error::dim(
            "probability maps must share one (n+1)×H×W shape",
        ));
    }
    let k = maps.len() as f64;
    let mut buf = vec![0.0; maps.len()];
    let mut mean: Vec<f64> = (0..first.numel())
        .map(|i| {
            for (b, m) in buf.iter_mut().zip(maps) {
                *b = m.data()[i];
            }
            buf.sort_by(f64::total_cmp);
            buf.iter().sum::<f64>() / k
        })
        .collect();
    let labels = first.dim(0);
    let plane = first.dim(1) * first.dim(2);
    for p in 0..plane {
        let total: f64 = (0..labels).map(|l| mean[l * plane + p]).sum();
        if total > 0.0 {
            (0..labels).for_each(|l| mean[l * plane + p] /= total);
        }
    }
    Tensor::new(first.shape(), mean)
}

/// Memory and queries of one (scale, flip) variant, one entry per object.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantState {
    pub scale: f64,
    pub flip: bool,
    pub banks: Vec<MemoryBank>,
    pub queries: Vec<TargetQuerySet>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameResult {
    pub labels: LabelMask,
    /// Fused `[(n+1)×H×W]` distribution.
    pub probs: Tensor,
}

/// Frame-by-frame inference over one sequence.
pub struct SequenceRunner<'m> {
    model: &'m Model,
    cfg: EngineConfig,
    native: (usize, usize),
    objects: usize,
    next_frame: usize,
    variants: Vec<VariantState>,
}

#[derive(Serialize, Deserialize)]
struct RunnerMeta {
    native: (usize, usize),
    objects: usize,
    next_frame: usize,
    variants: Vec<VariantMeta>,
}

#[derive(Serialize, Deserialize)]
struct VariantMeta {
    scale: f64,
    flip: bool,
    banks: Vec<serde_json::Value>,
    last_update: Vec<usize>,
}

fn quantized(mut t: Tensor) -> Tensor {
    t.quantize_f32();
    t
}

fn one_hot(mask: &LabelMask, id: usize) -> (Vec<f64>, Vec<f64>) {
    let mine = mask
        .labels
        .iter()
        .map(|&l| f64::from(u8::from(l as usize == id)))
        .collect();
    let others = mask
        .labels
        .iter()
        .map(|&l| f64::from(u8::from(l != 0 && l as usize != id)))
        .collect();
    (mine, others)
}

fn soft_channels(probs: &Tensor, id: usize) -> (Vec<f64>, Vec<f64>) {
    let plane = probs.dim(1) * probs.dim(2);
    let d = probs.data();
    let mine = d[id * plane..(id + 1) * plane].to_vec();
    let others = (0..plane)
        .map(|p| {
            (1..probs.dim(0))
                .filter(|&l| l != id)
                .map(|l| d[l * plane + p])
                .sum()
        })
        .collect();
    (mine, others)
}

impl<'m> SequenceRunner<'m> {
    pub fn new(model: &'m Model, cfg: &EngineConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(SequenceRunner {
            model,
            cfg: cfg.clone(),
            native: (0, 0),
            objects: 0,
            next_frame: 0,
            variants: Vec::new(),
        })
    }

    pub fn next_frame(&self) -> usize {
        self.next_frame
    }

    pub fn variants(&self) -> &[VariantState] {
        &self.variants
    }

    fn variant_list(&self) -> Vec<(f64, bool)> {
        let mut v = Vec::new();
        for &s in &self.cfg.scales {
            v.push((s, false));
            if self.cfg.flip_fusion {
                v.push((s, true));
            }
        }
        v
    }

    fn working(&self, scale: f64) -> (usize, usize) {
        working_size(self.cfg.base_size, scale, self.native.0, self.native.1)
    }

    fn stored_entry(
        g: &mut Graph,
        feats: &FrameFeatures,
        mask4: &[f64],
        others4: &[f64],
    ) -> Result<(Tensor, Tensor)> {
        let (h4, w4) = feats.dims4;
        let value = object_value(g, feats, mask4, others4)?;
        let key = quantized(rows_tensor(g.value(feats.key), h4, w4));
        let value = quantized(rows_tensor(g.value(value), h4, w4));
        Ok((key, value))
    }

    /// Starts the sequence from frame 0 and its annotation, which is also
    /// the frame-0 output.
    pub fn init(&mut self, frame: &RgbImage, annotation: &LabelMask) -> Result<LabelMask> {
        let n = check_contiguous(annotation)?;
        if (frame.height, frame.width) != (annotation.height, annotation.width) {
            return Err(Error::Input(
                "annotation and first frame differ in size".into(),
            ));
        }
        self.native = (frame.height, frame.width);
        self.objects = n;
        self.variants.clear();
        let native = frame.to_tensor();
        let params = &self.model.params;
        for (scale, flip) in self.variant_list() {
            let working = self.working(scale);
            let mut g = Graph::inference(params);
            let img = prepare_image(&native, working, flip);
            let feats = frame_features(&mut g, &self.model.cfg, &img)?;
            let mut state = VariantState {
                scale,
                flip,
                banks: Vec::with_capacity(n),
                queries: Vec::with_capacity(n),
            };
            for id in 1..=n {
                let (mine, others) = one_hot(annotation, id);
                let m4 = mask_to_stride4(&mine, self.native, working, flip);
                let o4 = mask_to_stride4(&others, self.native, working, flip);
                let (key, value) = Self::stored_entry(&mut g, &feats, &m4, &o4)?;
                let mut bank = MemoryBank::new(self.cfg.memory_capacity, self.cfg.memory_interval)?;
                bank.store(key, value, 0)?;
                state.banks.push(bank);
                let q = init_queries(&mut g, feats.s4_rows, &m4)?;
                state.queries.push(TargetQuerySet {
                    object_id: id,
                    queries: quantized(g.value(q).clone()),
                    last_update_frame: 0,
                });
            }
            self.variants.push(state);
        }
        self.next_frame = 1;
        Ok(annotation.clone())
    }

    /// Segments the next frame and applies the store/update policy.
    pub fn step(&mut self, frame: &RgbImage) -> Result<FrameResult> {
        if self.variants.is_empty() {
            return Err(Error::State(
                "runner was not initialized with a first frame".into(),
            ));
        }
        if (frame.height, frame.width) != self.native {
            return Err(Error::Input(format!(
                "frame {} is {}×{}, sequence is {}×{}",
                self.next_frame, frame.height, frame.width, self.native.0, self.native.1
            )));
        }
        let t = self.next_frame;
        let native = frame.to_tensor();
        let params = &self.model.params;
        let mut live: Vec<(Graph<'m>, FrameFeatures, (usize, usize))> =
            Vec::with_capacity(self.variants.len());
        let mut dists = Vec::with_capacity(self.variants.len());
        for vi in 0..self.variants.len() {
            let (scale, flip) = (self.variants[vi].scale, self.variants[vi].flip);
            let working = self.working(scale);
            let mut g = Graph::inference(params);
            let img = prepare_image(&native, working, flip);
            let feats = frame_features(&mut g, &self.model.cfg, &img)?;
            let mut probs = Vec::with_capacity(self.objects);
            let state = &mut self.variants[vi];
            for (bank, qs) in state.banks.iter_mut().zip(&state.queries) {
                let keys: Vec<_> = bank
                    .entries()
                    .iter()
                    .map(|e| g.constant(map_tensor_rows(&e.key)))
                    .collect();
                let values: Vec<_> = bank
                    .entries()
                    .iter()
                    .map(|e| g.constant(map_tensor_rows(&e.value)))
                    .collect();
                let q = g.constant(qs.queries.clone());
                let out = object_logits(&mut g, &feats, &keys, &values, q, self.native)?;
                let mass = entry_mass(g.value(out.affinity), &bank.entry_sizes());
                bank.record_usage(&mass)?;
                let logits = g.value(out.logits);
                probs.push(Tensor::from_fn(logits.shape(), |i| {
                    kernels::sigmoid(logits.data()[i])
                }));
            }
            let mut agg = soft_aggregate(&probs)?;
            if flip {
                agg = Tensor::new(
                    agg.shape(),
                    kernels::flip_horizontal(agg.data(), self.native.1),
                )?;
            }
            dists.push(agg);
            live.push((g, feats, working));
        }
        let probs = fuse_scales(&dists)?;
        if !probs.is_finite() {
            return Err(Error::Numerical(format!(
                "frame {t}: non-finite probabilities"
            )));
        }
        let labels = argmax_label(&probs)?;
        for id in 1..=self.objects {
            let has_target = labels.count(id as u8) >= 1;
            if !should_store(t, has_target, self.cfg.memory_interval) {
                continue;
            }
            let (mine, others) = soft_channels(&probs, id);
            for (state, (g, feats, working)) in self.variants.iter_mut().zip(live.iter_mut()) {
                let m4 = mask_to_stride4(&mine, self.native, *working, state.flip);
                let o4 = mask_to_stride4(&others, self.native, *working, state.flip);
                let (key, value) = Self::stored_entry(g, feats, &m4, &o4)?;
                state.banks[id - 1].store(key, value, t)?;
                if self.cfg.query_update {
                    let qs = &mut state.queries[id - 1];
                    let q = g.constant(qs.queries.clone());
                    if let Some(updated) =
                        update_queries(g, feats, q, &m4, self.cfg.similarity_threshold)?
                    {
                        let updated = quantized(g.value(updated).clone());
                        if !updated.is_finite() {
                            return Err(Error::Numerical(format!(
                                "frame {t}: object {id} queries diverged"
                            )));
                        }
                        qs.queries = updated;
                        qs.last_update_frame = t;
                    }
                }
            }
        }
        self.next_frame += 1;
        Ok(FrameResult { labels, probs })
    }

    /// Memory banks, query sets and the frame counter.
    pub fn save_state(&self) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        let mut variants = Vec::with_capacity(self.variants.len());
        for (vi, v) in self.variants.iter().enumerate() {
            let mut banks = Vec::new();
            let mut last_update = Vec::new();
            for (oi, (bank, qs)) in v.banks.iter().zip(&v.queries).enumerate() {
                banks.push(bank.to_state(&format!("v{vi}.o{oi}.mem"), &mut tensors));
                tensors.insert(format!("v{vi}.o{oi}.queries"), qs.queries.clone());
                last_update.push(qs.last_update_frame);
            }
            variants.push(VariantMeta {
                scale: v.scale,
                flip: v.flip,
                banks,
                last_update,
            });
        }
        let meta = RunnerMeta {
            native: self.native,
            objects: self.objects,
            next_frame: self.next_frame,
            variants,
        };
        Checkpoint {
            tensors,
            meta: json!({ "runner": meta }),
        }
    }

    pub fn from_state(model: &'m Model, cfg: &EngineConfig, state: &Checkpoint) -> Result<Self> {
        let mut runner = SequenceRunner::new(model, cfg)?;
        let meta: RunnerMeta = serde_json::from_value(
            state
                .meta
                .get("runner")
                .cloned()
                .ok_or_else(|| Error::State("not a runner state".into()))?,
        )?;
        let expected = runner.variant_list();
        let found: Vec<(f64, bool)> = meta.variants.iter().map(|v| (v.scale, v.flip)).collect();
        if expected != found {
            return Err(Error::State(format!(
                "state holds variants {found:?}, configuration asks for {expected:?}"
            )));
        }
        for (vi, v) in meta.variants.into_iter().enumerate() {
            let mut banks = Vec::new();
            let mut queries = Vec::new();
            for (oi, (bank, last)) in v.banks.iter().zip(v.last_update).enumerate() {
                banks.push(MemoryBank::from_state(
                    &format!("v{vi}.o{oi}.mem"),
                    &state.tensors,
                    bank,
                )?);
                let q = state
                    .tensors
                    .get(&format!("v{vi}.o{oi}.queries"))
                    .cloned()
                    .ok_or_else(|| {
                        Error::State(format!("state lacks queries of object {}", oi + 1))
                    })?;
                queries.push(TargetQuerySet {
                    object_id: oi + 1,
                    queries: q,
                    last_update_frame: last,
                });
            }
            runner.variants.push(VariantState {
                scale: v.scale,
                flip: v.flip,
                banks,
                queries,
            });
        }
        runner.native = meta.native;
        runner.objects = meta.objects;
        runner.next_frame = meta.next_frame;
        Ok(runner)
    }
}

/// Per-frame masks of a sequence plus the report when ground truth exists.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub masks: Vec<LabelMask>,
    pub report: Option<EvalReport>,
}

pub fn run_sequence(model: &Model, cfg: &EngineConfig, seq: &Sequence) -> Result<RunOutput> {
    let mut runner = SequenceRunner::new(model, cfg)?;
    let mut masks = vec![runner.init(&seq.frames[0], &seq.annotation)?];
    for frame in &seq.frames[1..] {
        masks.push(runner.step(frame)?.labels);
    }
    let report = match &seq.gt {
        Some(gt) => Some(evaluate_sequence(&masks, gt, true)?),
        None => None,
    };
    Ok(RunOutput { masks, report })
}

pub fn write_predictions(dir: &Path, stems: &[String], masks: &[LabelMask]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (stem, m) in stems.iter().zip(masks) {
        write_pgm(&dir.join(format!("{stem}.pgm")), m)?;
    }
    Ok(())
}

fn pgm_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let e = e.map_err(|err| Error::io(dir, err))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if name.ends_with(".pgm") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Scores the `.pgm` files of `pred` against the same-named files of `gt`.
pub fn evaluate_dirs(pred: &Path, gt: &Path, include_first_frame: bool) -> Result<EvalReport> {
    let names = pgm_names(gt)?;
    if names.is_empty() {
        return Err(Error::Input(format!("no .pgm masks in {}", gt.display())));
    }
    let mut p = Vec::with_capacity(names.len());
    let mut g = Vec::with_capacity(names.len());
    for n in &names {
        let pp = pred.join(n);
        if !pp.is_file() {
            return Err(Error::Input(format!(
                "prediction {} is missing",
                pp.display()
            )));
        }
        p.push(read_pgm(&pp)?);
        g.push(read_pgm(&gt.join(n))?);
    }
    evaluate_sequence(&p, &g, !include_first_frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::pipeline::synth::{render, Motion, SyntheticSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dist(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        let raw: Vec<Tensor> = (0..n)
            .map(|_| Tensor::from_fn(&[4, 5], |_| rng.random_range(0.0..1.0)))
            .collect();
        soft_aggregate(&raw).unwrap()
    }

    #[test]
    fn fuse_scales_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_dist(&mut rng, 2);
        assert!(
            fuse_scales(std::slice::from_ref(&a))
                .unwrap()
                .max_abs_diff(&a)
                <= 1e-12
        );
        assert!(
            fuse_scales(&[a.clone(), a.clone(), a.clone()])
                .unwrap()
                .max_abs_diff(&a)
                <= 1e-12
        );
        let b = random_dist(&mut rng, 2);
        let c = random_dist(&mut rng, 2);
        let abc = fuse_scales(&[a.clone(), b.clone(), c.clone()]).unwrap();
        assert_eq!(
            abc,
            fuse_scales(&[c.clone(), a.clone(), b.clone()]).unwrap()
        );
        assert_eq!(abc, fuse_scales(&[b, c, a]).unwrap());
        assert!(fuse_scales(&[]).is_err());
    }

    fn tiny_setup() -> (Model, EngineConfig, Sequence) {
        let cfg = EngineConfig {
            base_size: 32,
            scales: vec![1.0],
            flip_fusion: false,
            model: Some(ModelConfig {
                patch: 8,
                pos_grid: 4,
                ..ModelConfig::tiny()
            }),
            ..EngineConfig::default()
        };
        let model = Model::new(cfg.model_config(), 1).unwrap();
        let syn = render(&SyntheticSpec {
            n_shapes: 2,
            motion: Motion::Bounce,
            frames: 8,
            noise_std: 0.01,
            seed: 4,
            width: 40,
            height: 36,
        })
        .unwrap();
        let seq = Sequence {
            name: "t".into(),
            frames: syn.frames.clone(),
            annotation: syn.masks[0].clone(),
            gt: Some(syn.masks.clone()),
            stems: (0..8).map(|i| format!("{i:05}")).collect(),
        };
        (model, cfg, seq)
    }

    #[test]
    fn runs_are_deterministic_and_resumable() {
        let (model, cfg, seq) = tiny_setup();
        let a = run_sequence(&model, &cfg, &seq).unwrap();
        let b = run_sequence(&model, &cfg, &seq).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.masks.len(), 8);
        assert_eq!(a.masks[0], seq.annotation);

        let mut r = SequenceRunner::new(&model, &cfg).unwrap();
        r.init(&seq.frames[0], &seq.annotation).unwrap();
        for f in &seq.frames[1..4] {
            r.step(f).unwrap();
        }
        let bytes = r.save_state().to_bytes();
        let ck = Checkpoint::from_bytes(&bytes, Path::new("state")).unwrap();
        let mut resumed = SequenceRunner::from_state(&model, &cfg, &ck).unwrap();
        assert_eq!(resumed.variants(), r.variants());
        for (t, f) in seq.frames.iter().enumerate().skip(4) {
            assert_eq!(resumed.step(f).unwrap().labels, a.masks[t], "frame {t}");
        }
    }

    #[test]
    fn duplicate_scales_match_single_scale() {
        let (model, cfg, seq) = tiny_setup();
        let dup = EngineConfig {
            scales: vec![1.0, 1.0],
            ..cfg.clone()
        };
        assert_eq!(
            run_sequence(&model, &cfg, &seq).unwrap(),
            run_sequence(&model, &dup, &seq).unwrap()
        );
    }

    #[test]
    fn memory_follows_store_policy() {
        let (model, cfg, seq) = tiny_setup();
        let mut r = SequenceRunner::new(&model, &cfg).unwrap();
        r.init(&seq.frames[0], &seq.annotation).unwrap();
        let mut expect: Vec<Vec<usize>> = vec![vec![0]; 2];
        for (t, f) in seq.frames.iter().enumerate().skip(1) {
            let out = r.step(f).unwrap();
            for id in 1..=2u8 {
                if should_store(t, out.labels.count(id) > 0, 3) {
                    expect[id as usize - 1].push(t);
                }
            }
        }
        for (bank, e) in r.variants()[0].banks.iter().zip(&expect) {
            assert_eq!(&bank.frame_indices(), e);
        }
    }

    #[test]
    fn uninitialized_runner_is_a_state_error() {
        let (model, cfg, seq) = tiny_setup();
        let mut r = SequenceRunner::new(&model, &cfg).unwrap();
        assert!(matches!(r.step(&seq.frames[1]), Err(Error::State(_))));
    }
}
