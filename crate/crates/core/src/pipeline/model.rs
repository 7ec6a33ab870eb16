//! The network as a whole: weight initialization, checkpoints and the
//! per-frame forward pieces shared by inference and training.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::ModelConfig;
use crate::encoder::{self, FeaturePyramid};
use crate::error::{Error, Result};
use crate::fusion::{self, map_to_rows, rows_to_map};
use crate::numerics::{kernels, Checkpoint, Graph, ParamStore, Tensor, Var};
use crate::{decoder, memory, queries};

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Fresh weights drawn from a generator seeded with `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        encoder::init_weights(&cfg, &mut params, &mut rng);
        fusion::init_weights(&cfg, &mut params, &mut rng);
        memory::init_weights(&cfg, &mut params, &mut rng);
        queries::init_weights(&cfg, &mut params, &mut rng);
        decoder::init_weights(&cfg, &mut params, &mut rng);
        Ok(Model { cfg, params })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn freeze_vit(&mut self) {
        self.params.freeze("encoder.vit.");
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.params.to_checkpoint();
        ck.meta = json!({ "model": self.cfg });
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_value(
            ck.meta
                .get("model")
                .cloned()
                .ok_or_else(|| Error::State("checkpoint has no model configuration".into()))?,
        )?;
        cfg.validate()?;
        let params = ParamStore::from_checkpoint(ck);
        let reference = Model::new(cfg.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::State(format!(
                    "checkpoint tensor {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Model { cfg, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Model::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Working resolution for `scale`: the long side becomes `base · scale`,
/// both sides rounded to a multiple of 16 (at least 16).
pub fn working_size(base: usize, scale: f64, height: usize, width: usize) -> (usize, usize) {
    let long = height.max(width) as f64;
    let f = base as f64 * scale / long;
    let round = |v: usize| ((v as f64 * f / 16.0).round() as usize).max(1) * 16;
    (round(height), round(width))
}

/// Native `[3×H×W]` frame in `[0,1]` to the centred working-resolution input.
pub fn prepare_image(native: &Tensor, size: (usize, usize), flip: bool) -> Tensor {
    let (h, w) = (native.dim(1), native.dim(2));
    let src = if flip {
        kernels::flip_horizontal(native.data(), w)
    } else {
        native.data().to_vec()
    };
    let mut out = kernels::resize_bilinear(&src, 3, h, w, size.0, size.1);
    out.iter_mut().for_each(|v| *v -= 0.5);
    Tensor::new(&[3, size.0, size.1], out).expect("sized")
}

/// Native-resolution `[H×W]` mask to stride-4 of a working size by bilinear
/// resampling to the working size and 4×4 averaging.
pub fn mask_to_stride4(
    mask: &[f64],
    native: (usize, usize),
    working: (usize, usize),
    flip: bool,
) -> Vec<f64> {
    let src = if flip {
        kernels::flip_horizontal(mask, native.1)
    } else {
        mask.to_vec()
    };
    let m = kernels::resize_bilinear(&src, 1, native.0, native.1, working.0, working.1);
    let (h4, w4) = (working.0 / 4, working.1 / 4);
    let mut out = vec![0.0; h4 * w4];
    for y in 0..h4 * 4 {
        for x in 0..w4 * 4 {
            out[(y / 4) * w4 + x / 4] += m[y * working.1 + x] / 16.0;
        }
    }
    out
}

/// Everything an object needs from one frame.
#[derive(Clone, Debug)]
pub struct FrameFeatures {
    pub fused: FeaturePyramid,
    /// Stride-4 fused features as `[HW₄×C]`.
    pub s4_rows: Var,
    /// Memory key `[HW₄×Ck]`.
    pub key: Var,
    pub dims4: (usize, usize),
    pub image: Var,
}

pub fn frame_features(g: &mut Graph, cfg: &ModelConfig, image: &Tensor) -> Result<FrameFeatures> {
    let (tokens, pyramid) = encoder::encode(g, cfg, image)?;
    let fused = fusion::fuse(g, cfg, &pyramid, &tokens)?;
    let dims4 = fused.dims(g)[0];
    let s4_rows = map_to_rows(g, fused.levels[0])?;
    let key = memory::encode_key(g, s4_rows)?;
    let image = g.constant(image.clone());
    Ok(FrameFeatures {
        fused,
        s4_rows,
        key,
        dims4,
        image,
    })
}

/// Memory value for an object from its stride-4 mask and the others'.
pub fn object_value(
    g: &mut Graph,
    feats: &FrameFeatures,
    mask4: &[f64],
    others4: &[f64],
) -> Result<Var> {
    let n = feats.dims4.0 * feats.dims4.1;
    let m = g.constant(Tensor::new(&[n, 1], mask4.to_vec())?);
    let o = g.constant(Tensor::new(&[n, 1], others4.to_vec())?);
    memory::encode_value(g, feats.s4_rows, m, o)
}

#[derive(Clone, Copy, Debug)]
pub struct ObjectOutput {
    /// `[H×W]` at the requested output size.
    pub logits: Var,
    /// `[HW₄ × Σ memory locations]`
    pub affinity: Var,
}

/// Memory readout, query readout and decoding for one object.
pub fn object_logits(
    g: &mut Graph,
    feats: &FrameFeatures,
    keys: &[Var],
    values: &[Var],
    queries: Var,
    out_size: (usize, usize),
) -> Result<ObjectOutput> {
    let (h4, w4) = feats.dims4;
    let (mem, affinity) = memory::readout_vars(g, feats.key, keys, values)?;
    let mem = rows_to_map(g, mem, h4, w4)?;
    let (_, readout, _) = queries::transformer_vars(g, queries, feats.s4_rows)?;
    let readout = rows_to_map(g, readout, h4, w4)?;
    let logits = decoder::decode(g, &feats.fused, readout, mem, feats.image, out_size)?;
    Ok(ObjectOutput { logits, affinity })
}

/// Stride-4 cells at or above this mask value count as the target region.
pub const TARGET_REGION: f64 = 0.5;

/// Discriminative update of `queries` from the stride-4 features inside the
/// object's region. `None` when the region is empty or every match was
/// rejected.
pub fn update_queries(
    g: &mut Graph,
    feats: &FrameFeatures,
    queries: Var,
    mask4: &[f64],
    threshold: Option<f64>,
) -> Result<Option<Var>> {
    let n = feats.dims4.0 * feats.dims4.1;
    if mask4.len() != n {
        return Err(Error::dim(format!(
            "mask of {} for {n} locations",
            mask4.len()
        )));
    }
    // Cosine similarity ignores scale, so soft weights cannot exclude
    // background; candidates are gathered instead.
    let idx: Vec<usize> = (0..n).filter(|&i| mask4[i] >= TARGET_REGION).collect();
    if idx.is_empty() {
        return Ok(None);
    }
    let candidates = g.gather_rows(feats.s4_rows, idx)?;
    match queries::select_salient(g, queries, candidates, threshold)? {
        Some(salient) => Ok(Some(queries::update_vars(g, queries, salient)?.0)),
        None => Ok(None),
    }
}

/// `[C×h×w]` map from `[hw×C]` rows held in a graph.
pub fn rows_tensor(t: &Tensor, h: usize, w: usize) -> Tensor {
    let c = t.dim(1);
    Tensor::new(&[c, h, w], kernels::transpose(t.data(), h * w, c)).expect("sized")
}

/// `[hw×C]` rows of a `[C×h×w]` map.
pub fn map_tensor_rows(t: &Tensor) -> Tensor {
    let (c, hw) = (t.dim(0), t.dim(1) * t.dim(2));
    Tensor::new(&[hw, c], kernels::transpose(t.data(), c, hw)).expect("sized")
}
