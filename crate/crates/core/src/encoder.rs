//! Per-frame encoders: a small ViT producing CLS/GAP/patch tokens and a
//! strided CNN producing the stride-4/8/16 feature pyramid.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

pub const PYRAMID_STRIDES: [usize; 3] = [4, 8, 16];

/// Global and per-patch tokens for one frame.
#[derive(Clone, Copy, Debug)]
pub struct SemanticTokens {
    /// `[C]` final CLS state.
    pub cls: Var,
    /// `[C]` mean of the final patch states.
    pub gap: Var,
    /// `[N×C]`, row-major over the patch grid.
    pub patches: Var,
    /// `(rows, cols)` of the patch grid.
    pub grid: (usize, usize),
}

/// Multi-scale feature maps, each `[C_l × H_l × W_l]`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
    pub strides: [usize; 3],
}

impl FeaturePyramid {
    /// `(H_l, W_l)` of every level.
    pub fn dims(&self, g: &Graph) -> Vec<(usize, usize)> {
        self.levels
            .iter()
            .map(|&v| {
                let s = g.shape(v);
                (s[1], s[2])
            })
            .collect()
    }

    pub fn channels(&self, g: &Graph) -> Vec<usize> {
        self.levels.iter().map(|&v| g.shape(v)[0]).collect()
    }
}

/// ViT weights: `normal(0, 0.02)`, CLS token zero. CNN weights: He-normal.
pub fn init_weights<R: Rng>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) {
    let c = cfg.channels;
    let std = 0.02;
    let patch_dim = 3 * cfg.patch * cfg.patch;
    store.init_linear("encoder.vit.patch", patch_dim, c, std, rng);
    store.init_const("encoder.vit.cls", &[c], 0.0);
    store.init_normal("encoder.vit.pos_cls", &[c], std, rng);
    store.init_normal(
        "encoder.vit.pos",
        &[c, cfg.pos_grid, cfg.pos_grid],
        std,
        rng,
    );
    for i in 0..cfg.vit_depth {
        let p = format!("encoder.vit.blocks.{i}");
        store.init_layer_norm(&format!("{p}.ln1"), c);
        store.init_linear(&format!("{p}.attn.qkv"), c, 3 * c, std, rng);
        store.init_linear(&format!("{p}.attn.out"), c, c, std, rng);
        store.init_layer_norm(&format!("{p}.ln2"), c);
        store.init_linear(&format!("{p}.mlp.fc1"), c, cfg.mlp_ratio * c, std, rng);
        store.init_linear(&format!("{p}.mlp.fc2"), cfg.mlp_ratio * c, c, std, rng);
    }
    store.init_layer_norm("encoder.vit.ln_f", c);

    let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
    let [c1, c2, c3] = cfg.pyramid_channels;
    let stem = cfg.stem_channels;
    store.init_conv("encoder.cnn.stem", 3, stem, 3, he(27), rng);
    store.init_conv("encoder.cnn.s4", stem, c1, 3, he(stem * 9), rng);
    store.init_conv("encoder.cnn.s8", c1, c2, 3, he(c1 * 9), rng);
    store.init_conv("encoder.cnn.s16", c2, c3, 3, he(c2 * 9), rng);
}

/// Splits `image[3×H×W]` into non-overlapping `patch×patch` blocks and
/// projects each to `C` dims. Returns `[N×C]` tokens (row-major over the
/// grid) and the grid size.
pub fn patch_embed(g: &mut Graph, image: &Tensor, patch: usize) -> Result<(Var, (usize, usize))> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim(format!("expected a 3×H×W image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "image {h}×{w} is not divisible into {patch}-pixel patches"
        )));
    }
    let (hp, wp) = (h / patch, w / patch);
    let dim = 3 * patch * patch;
    let mut flat = Vec::with_capacity(hp * wp * dim);
    for py in 0..hp {
        for px in 0..wp {
            for c in 0..3 {
                for y in 0..patch {
                    let row = (c * h + py * patch + y) * w + px * patch;
                    flat.extend_from_slice(&image.data()[row..row + patch]);
                }
            }
        }
    }
    let patches = g.constant(Tensor::new(&[hp * wp, dim], flat)?);
    let tokens = g.linear(patches, "encoder.vit.patch")?;
    Ok((tokens, (hp, wp)))
}

/// Attention maps recorded by [`vit_forward_traced`], one `[(N+1)×(N+1)]`
/// matrix per head per block.
pub type AttentionTrace = Vec<Var>;

pub fn vit_forward(
    g: &mut Graph,
    cfg: &ModelConfig,
    tokens: Var,
    grid: (usize, usize),
) -> Result<SemanticTokens> {
    vit_forward_traced(g, cfg, tokens, grid).map(|(t, _)| t)
}

/// Pre-norm transformer over `[CLS; patches]` with learned 2-D positional
/// embeddings (bilinearly resized when the grid differs from the table).
pub fn vit_forward_traced(
    g: &mut Graph,
    cfg: &ModelConfig,
    tokens: Var,
    grid: (usize, usize),
) -> Result<(SemanticTokens, AttentionTrace)> {
    let c = cfg.channels;
    let n = grid.0 * grid.1;
    if g.shape(tokens) != [n, c] {
        return Err(Error::dim(format!(
            "tokens {:?} do not match grid {grid:?} × {c}",
            g.shape(tokens)
        )));
    }
    let pos = g.param("encoder.vit.pos")?;
    let pos = g.resize(pos, grid.0, grid.1)?;
    let pos = g.reshape(pos, &[c, n])?;
    let pos = g.transpose(pos);
    let x = g.add(tokens, pos)?;

    let cls = g.param("encoder.vit.cls")?;
    let pos_cls = g.param("encoder.vit.pos_cls")?;
    let cls = g.add(cls, pos_cls)?;
    let cls = g.reshape(cls, &[1, c])?;
    let mut x = g.concat_rows(&[cls, x])?;

    let heads = cfg.vit_heads;
    let dh = c / heads;
    let mut trace = Vec::new();
    for i in 0..cfg.vit_depth {
        let p = format!("encoder.vit.blocks.{i}");
        let h = g.layer_norm_named(x, &format!("{p}.ln1"))?;
        let qkv = g.linear(h, &format!("{p}.attn.qkv"))?;
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let q = g.slice_cols(qkv, hd * dh, dh)?;
            let k = g.slice_cols(qkv, c + hd * dh, dh)?;
            let v = g.slice_cols(qkv, 2 * c + hd * dh, dh)?;
            let (o, wts) = g.attention(q, k, v)?;
            trace.push(wts);
            outs.push(o);
        }
        let merged = g.concat_cols(&outs)?;
        let attn_out = g.linear(merged, &format!("{p}.attn.out"))?;
        x = g.add(x, attn_out)?;
        let h = g.layer_norm_named(x, &format!("{p}.ln2"))?;
        let h = g.linear(h, &format!("{p}.mlp.fc1"))?;
        let h = g.gelu(h);
        let h = g.linear(h, &format!("{p}.mlp.fc2"))?;
        x = g.add(x, h)?;
    }
    let x = g.layer_norm_named(x, "encoder.vit.ln_f")?;
    let cls = g.slice_rows(x, 0, 1)?;
    let cls = g.reshape(cls, &[c])?;
    let patches = g.slice_rows(x, 1, n)?;
    let gap = g.mean_rows(patches)?;
    Ok((
        SemanticTokens {
            cls,
            gap,
            patches,
            grid,
        },
        trace,
    ))
}

/// Three stride-2 stages after a stride-2 stem: stride-4, 8 and 16 maps.
pub fn cnn_pyramid(g: &mut Graph, image: Var) -> Result<FeaturePyramid> {
    let s = g.shape(image);
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim(format!("expected a 3×H×W image, got {s:?}")));
    }
    if s[1] < 16 || s[2] < 16 {
        return Err(Error::Config(format!(
            "image {}×{} is smaller than the 16-pixel minimum",
            s[1], s[2]
        )));
    }
    let x = g.conv_named(image, "encoder.cnn.stem", 2, 1)?;
    let x = g.gelu(x);
    let l4 = g.conv_named(x, "encoder.cnn.s4", 2, 1)?;
    let l4 = g.gelu(l4);
    let l8 = g.conv_named(l4, "encoder.cnn.s8", 2, 1)?;
    let l8 = g.gelu(l8);
    let l16 = g.conv_named(l8, "encoder.cnn.s16", 2, 1)?;
    let l16 = g.gelu(l16);
    Ok(FeaturePyramid {
        levels: vec![l4, l8, l16],
        strides: PYRAMID_STRIDES,
    })
}

/// Both encoders on one frame.
pub fn encode(
    g: &mut Graph,
    cfg: &ModelConfig,
    image: &Tensor,
) -> Result<(SemanticTokens, FeaturePyramid)> {
    let (tokens, grid) = patch_embed(g, image, cfg.patch)?;
    let sem = vit_forward(g, cfg, tokens, grid)?;
    let img = g.constant(image.clone());
    let pyr = cnn_pyramid(g, img)?;
    Ok((sem, pyr))
}
