//! Fusion block: semantic-prior cross-attention from the CLS/GAP tokens into
//! every pyramid texel, followed by multi-scale deformable cross-attention
//! over all levels jointly.

use rand::Rng;

use crate::config::ModelConfig;
use crate::encoder::{FeaturePyramid, SemanticTokens};
use crate::error::{Error, Result};
use crate::numerics::{DeformLayout, Graph, ParamStore, Var};

/// Deformable-attention shape plus the weight prefix holding
/// `value`, `offset`, `attn`, `out` projections and the output norm.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformParams {
    pub heads: usize,
    pub points: usize,
    pub levels: usize,
    pub prefix: String,
}

impl DeformParams {
    pub fn slots(&self) -> usize {
        self.heads * self.levels * self.points
    }
}

/// Anchor of a query texel in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferencePoint {
    pub x: f64,
    pub y: f64,
    pub level: usize,
}

/// Texel centres of every level, level-major then row-major.
pub fn reference_points(dims: &[(usize, usize)]) -> Vec<ReferencePoint> {
    let mut refs = Vec::new();
    for (level, &(h, w)) in dims.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                refs.push(ReferencePoint {
                    x: (x as f64 + 0.5) / w as f64,
                    y: (y as f64 + 0.5) / h as f64,
                    level,
                });
            }
        }
    }
    refs
}

fn block_prefix(depth: usize, sub: &str) -> String {
    if depth == 0 {
        format!("fusion.{sub}")
    } else {
        format!("fusion.{depth}.{sub}")
    }
}

pub fn deform_params(cfg: &ModelConfig, depth: usize) -> DeformParams {
    DeformParams {
        heads: cfg.deform_heads,
        points: cfg.deform_points,
        levels: 3,
        prefix: block_prefix(depth, "deform"),
    }
}

pub fn init_deform_weights<R: Rng>(
    store: &mut ParamStore,
    p: &DeformParams,
    c: usize,
    rng: &mut R,
) {
    let std = 1.0 / (c as f64).sqrt();
    let pre = &p.prefix;
    store.init_linear(&format!("{pre}.value"), c, c, std, rng);
    store.init_linear(&format!("{pre}.offset"), c, p.slots() * 2, 0.01, rng);
    // Offsets start on a fan of directions, one per head, growing with the point index.
    let mut bias = vec![0.0; p.slots() * 2];
    for h in 0..p.heads {
        let angle = 2.0 * std::f64::consts::PI * h as f64 / p.heads as f64;
        for l in 0..p.levels {
            for k in 0..p.points {
                let slot = (h * p.levels + l) * p.points + k;
                bias[slot * 2] = angle.cos() * (k + 1) as f64;
                bias[slot * 2 + 1] = angle.sin() * (k + 1) as f64;
            }
        }
    }
    store.insert(
        format!("{pre}.offset.b"),
        crate::numerics::Tensor::new(&[p.slots() * 2], bias).expect("sized"),
    );
    store.init_linear(&format!("{pre}.attn"), c, p.slots(), 0.01, rng);
    store.init_linear(&format!("{pre}.out"), c, c, 0.5 * std, rng);
    store.init_layer_norm(&format!("{pre}.ln"), c);
}

pub fn init_weights<R: Rng>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) {
    let c = cfg.channels;
    let std = 1.0 / (c as f64).sqrt();
    for (l, &cl) in cfg.pyramid_channels.iter().enumerate() {
        store.init_linear(
            &format!("fusion.proj.{l}"),
            cl,
            c,
            1.0 / (cl as f64).sqrt(),
            rng,
        );
    }
    for d in 0..cfg.fusion_depth {
        let sem = block_prefix(d, "semantic");
        for name in ["q", "k", "v"] {
            store.init_linear(&format!("{sem}.{name}"), c, c, std, rng);
        }
        store.init_linear(&format!("{sem}.o"), c, c, 0.5 * std, rng);
        store.init_layer_norm(&format!("{sem}.ln"), c);
        init_deform_weights(store, &deform_params(cfg, d), c, rng);
    }
}

/// `[C×H×W]` map to `[HW×C]` rows.
pub fn map_to_rows(g: &mut Graph, map: Var) -> Result<Var> {
    let s = g.shape(map).to_vec();
    if s.len() != 3 {
        return Err(Error::dim(format!("expected C×H×W, got {s:?}")));
    }
    let flat = g.reshape(map, &[s[0], s[1] * s[2]])?;
    Ok(g.transpose(flat))
}

/// `[HW×C]` rows back to a `[C×H×W]` map.
pub fn rows_to_map(g: &mut Graph, rows: Var, h: usize, w: usize) -> Result<Var> {
    let c = g.shape(rows)[1];
    let t = g.transpose(rows);
    g.reshape(t, &[c, h, w])
}

/// Semantic attention weights recorded per level, each `[HW×2]`.
pub type SemanticTrace = Vec<Var>;

fn semantic_block(
    g: &mut Graph,
    rows: &[Var],
    tokens: &SemanticTokens,
    prefix: &str,
) -> Result<(Vec<Var>, SemanticTrace)> {
    let c = g.shape(tokens.cls)[0];
    let cls = g.reshape(tokens.cls, &[1, c])?;
    let gap = g.reshape(tokens.gap, &[1, c])?;
    let kv_in = g.concat_rows(&[cls, gap])?;
    let k = g.linear(kv_in, &format!("{prefix}.k"))?;
    let v = g.linear(kv_in, &format!("{prefix}.v"))?;
    let mut out = Vec::with_capacity(rows.len());
    let mut trace = Vec::with_capacity(rows.len());
    for &x in rows {
        if g.shape(x)[1] != c {
            return Err(Error::Config(format!(
                "level width {} differs from token width {c}",
                g.shape(x)[1]
            )));
        }
        let q = g.linear(x, &format!("{prefix}.q"))?;
        let (att, wts) = g.attention(q, k, v)?;
        let upd = g.linear(att, &format!("{prefix}.o"))?;
        let sum = g.add(x, upd)?;
        out.push(g.layer_norm_named(sum, &format!("{prefix}.ln"))?);
        trace.push(wts);
    }
    Ok((out, trace))
}

fn project_levels(g: &mut Graph, pyramid: &FeaturePyramid) -> Result<Vec<Var>> {
    let mut rows = Vec::with_capacity(pyramid.levels.len());
    for (l, &map) in pyramid.levels.iter().enumerate() {
        let r = map_to_rows(g, map)?;
        let w = g.param(&format!("fusion.proj.{l}.w"))?;
        if g.shape(w)[0] != g.shape(r)[1] {
            return Err(Error::Config(format!(
                "level {l} has {} channels, projection expects {}",
                g.shape(r)[1],
                g.shape(w)[0]
            )));
        }
        rows.push(g.linear(r, &format!("fusion.proj.{l}"))?);
    }
    Ok(rows)
}

/// Projects every level to the shared width and lets each texel
/// cross-attend to `{CLS, GAP}`; residual then layer norm.
pub fn semantic_prior_fusion(
    g: &mut Graph,
    pyramid: &FeaturePyramid,
    tokens: &SemanticTokens,
) -> Result<(FeaturePyramid, SemanticTrace)> {
    let dims = pyramid.dims(g);
    let rows = project_levels(g, pyramid)?;
    let (fused, trace) = semantic_block(g, &rows, tokens, &block_prefix(0, "semantic"))?;
    let levels = fused
        .iter()
        .zip(&dims)
        .map(|(&r, &(h, w))| rows_to_map(g, r, h, w))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        FeaturePyramid {
            levels,
            strides: pyramid.strides,
        },
        trace,
    ))
}

/// Intermediate values of [`ms_deform_attn_traced`].
#[derive(Clone, Copy, Debug)]
pub struct DeformTrace {
    /// `[Q × C]` weighted samples before the output projection.
    pub sampled: Var,
    /// `[Q × heads·levels·points]`, normalized per head.
    pub attn: Var,
    pub offsets: Var,
}

pub fn ms_deform_attn(
    g: &mut Graph,
    queries: Var,
    refs: &[ReferencePoint],
    levels: &[Var],
    params: &DeformParams,
) -> Result<Var> {
    ms_deform_attn_traced(g, queries, refs, levels, params).map(|(o, _)| o)
}

/// Deformable cross-attention of `queries[Q×C]` over the `[C×H×W]` maps in
/// `levels`: per head and level, `points` offsets and weights are predicted
/// from the query, value-projected maps are sampled bilinearly at
/// `ref + offset`, and the weighted sum goes through the output projection,
/// residual and layer norm.
pub fn ms_deform_attn_traced(
    g: &mut Graph,
    queries: Var,
    refs: &[ReferencePoint],
    levels: &[Var],
    params: &DeformParams,
) -> Result<(Var, DeformTrace)> {
    if levels.len() != params.levels {
        return Err(Error::dim(format!(
            "{} levels given, parameters expect {}",
            levels.len(),
            params.levels
        )));
    }
    let q = g.shape(queries)[0];
    if refs.len() != q {
        return Err(Error::dim(format!(
            "{} reference points for {q} queries",
            refs.len()
        )));
    }
    let pre = &params.prefix;
    let mut dims = Vec::with_capacity(levels.len());
    let mut values = Vec::with_capacity(levels.len());
    for &map in levels {
        let s = g.shape(map).to_vec();
        dims.push((s[1], s[2]));
        let rows = map_to_rows(g, map)?;
        values.push(g.linear(rows, &format!("{pre}.value"))?);
    }
    let offsets = g.linear(queries, &format!("{pre}.offset"))?;
    let logits = g.linear(queries, &format!("{pre}.attn"))?;
    let per_head = params.levels * params.points;
    let logits = g.reshape(logits, &[q * params.heads, per_head])?;
    let attn = g.softmax(logits)?;
    let attn = g.reshape(attn, &[q, params.slots()])?;
    let layout = DeformLayout {
        level_dims: dims,
        heads: params.heads,
        points: params.points,
        refs: refs.iter().map(|r| (r.x, r.y)).collect(),
    };
    let sampled = g.deform_sample(&values, offsets, attn, layout)?;
    let upd = g.linear(sampled, &format!("{pre}.out"))?;
    let sum = g.add(queries, upd)?;
    let out = g.layer_norm_named(sum, &format!("{pre}.ln"))?;
    Ok((
        out,
        DeformTrace {
            sampled,
            attn,
            offsets,
        },
    ))
}

/// Semantic fusion then deformable fusion over all levels jointly; repeated
/// `fusion_depth` times. Output levels have the shared width `C`.
pub fn fuse(
    g: &mut Graph,
    cfg: &ModelConfig,
    pyramid: &FeaturePyramid,
    tokens: &SemanticTokens,
) -> Result<FeaturePyramid> {
    let dims = pyramid.dims(g);
    let refs = reference_points(&dims);
    let mut rows = project_levels(g, pyramid)?;
    for d in 0..cfg.fusion_depth {
        let (sem, _) = semantic_block(g, &rows, tokens, &block_prefix(d, "semantic"))?;
        let maps = sem
            .iter()
            .zip(&dims)
            .map(|(&r, &(h, w))| rows_to_map(g, r, h, w))
            .collect::<Result<Vec<_>>>()?;
        let queries = g.concat_rows(&sem)?;
        let out = ms_deform_attn(g, queries, &refs, &maps, &deform_params(cfg, d))?;
        rows.clear();
        let mut start = 0;
        for &(h, w) in &dims {
            rows.push(g.slice_rows(out, start, h * w)?);
            start += h * w;
        }
    }
    let levels = rows
        .iter()
        .zip(&dims)
        .map(|(&r, &(h, w))| rows_to_map(g, r, h, w))
        .collect::<Result<Vec<_>>>()?;
    Ok(FeaturePyramid {
        levels,
        strides: pyramid.strides,
    })
}
