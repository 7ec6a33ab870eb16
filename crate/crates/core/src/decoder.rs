//! Mask decoder and multi-object aggregation.

use rand::Rng;

use crate::config::ModelConfig;
use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::numerics::soft_aggregate_forward;
use crate::numerics::{Graph, ParamStore, Tensor, Var};

/// Probability clamp used by [`soft_aggregate`].
pub const AGG_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct MaskProb {
    pub object_id: usize,
    /// `[H×W]` in `[0, 1]`
    pub prob: Tensor,
}

/// Per-pixel labels, 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::dim(format!(
                "{} labels for {height}×{width}",
                labels.len()
            )));
        }
        Ok(LabelMask {
            height,
            width,
            labels,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Binary mask of one label.
    pub fn object(&self, id: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == id).collect()
    }

    /// Sorted nonzero labels present.
    pub fn object_ids(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        self.labels.iter().for_each(|&l| seen[l as usize] = true);
        (1..=255u8).filter(|&l| seen[l as usize]).collect()
    }

    pub fn count(&self, id: u8) -> usize {
        self.labels.iter().filter(|&&l| l == id).count()
    }
}

pub fn init_weights<R: Rng>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) {
    let cin = 2 * cfg.channels + cfg.value_dim;
    let [d0, d1] = cfg.decoder_channels;
    let he = |fan: usize| (2.0 / (fan * 9) as f64).sqrt();
    store.init_conv("decoder.conv1", cin, d0, 3, he(cin), rng);
    store.init_conv("decoder.conv2", d0, d1, 3, he(d0), rng);
    store.init_conv("decoder.out", d1 + 3, 1, 3, 0.1 * he(d1 + 3), rng);
}

/// Object logits at `out_size`. Stride-4 fused features, query readout and
/// memory readout are concatenated, passed through two conv+GELU stages with
/// ×2 bilinear upsampling after each, joined with the working-resolution
/// `image[3×H×W]`, reduced to one channel and resized bilinearly to
/// `out_size`. Returns `[H_out×W_out]`.
pub fn decode(
    g: &mut Graph,
    fused: &FeaturePyramid,
    readout: Var,
    mem_readout: Var,
    image: Var,
    out_size: (usize, usize),
) -> Result<Var> {
    let s4 = fused.levels[0];
    let (h4, w4) = fused.dims(g)[0];
    for (name, v) in [("query readout", readout), ("memory readout", mem_readout)] {
        if g.shape(v)[1..] != [h4, w4] {
            return Err(Error::dim(format!(
                "{name} {:?} does not match stride-4 features {h4}×{w4}",
                g.shape(v)
            )));
        }
    }
    let img = g.shape(image).to_vec();
    if img.len() != 3 || img[0] != 3 {
        return Err(Error::dim(format!("image {img:?} is not 3×H×W")));
    }
    let (h, w) = (img[1], img[2]);
    let x = g.concat_rows(&[s4, readout, mem_readout])?;
    let x = g.conv_named(x, "decoder.conv1", 1, 1)?;
    let x = g.gelu(x);
    let x = g.resize(x, h4 * 2, w4 * 2)?;
    let x = g.conv_named(x, "decoder.conv2", 1, 1)?;
    let x = g.gelu(x);
    let x = g.resize(x, h, w)?;
    let x = g.concat_rows(&[x, image])?;
    let x = g.conv_named(x, "decoder.out", 1, 1)?;
    let x = g.resize(x, out_size.0, out_size.1)?;
    g.reshape(x, &[out_size.0, out_size.1])
}

/// Odds renormalization of per-object probabilities into a `[(n+1)×H×W]`
/// distribution; label 0 is the background `Π(1 − p_i)`.
pub fn soft_aggregate(probs: &[Tensor]) -> Result<Tensor> {
    let first = probs
        .first()
        .ok_or_else(|| Error::dim("no objects to aggregate"))?;
    if probs.iter().any(|p| p.shape() != first.shape()) {
        return Err(Error::dim("object probability maps differ in shape"));
    }
    let data: Vec<&[f64]> = probs.iter().map(Tensor::data).collect();
    let mut shape = vec![probs.len() + 1];
    shape.extend_from_slice(first.shape());
    Tensor::new(&shape, soft_aggregate_forward(&data, AGG_EPS))
}

/// Per-pixel argmax over `agg[(n+1)×H×W]`; ties go to the lower label.
pub fn argmax_label(agg: &Tensor) -> Result<LabelMask> {
    if agg.rank() != 3 || agg.dim(0) == 0 || agg.dim(0) > 256 {
        return Err(Error::dim(format!("cannot label {:?}", agg.shape())));
    }
    let (n, h, w) = (agg.dim(0), agg.dim(1), agg.dim(2));
    let plane = h * w;
    let d = agg.data();
    let labels = (0..plane)
        .map(|p| {
            let mut best = 0;
            for l in 1..n {
                if d[l * plane + p] > d[best * plane + p] {
                    best = l;
                }
            }
            best as u8
        })
        .collect();
    LabelMask::new(h, w, labels)
}
