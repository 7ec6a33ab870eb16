//! Per-object target queries: cosine correlation against the frame, picking
//! each query's most similar feature column, the additive cross-attention
//! update, and the query transformer that produces the per-pixel readout.

use rand::Rng;

use crate::config::ModelConfig;
use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::fusion::{map_to_rows, rows_to_map};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TargetQuerySet {
    pub object_id: usize,
    /// `[M×C]`
    pub queries: Tensor,
    pub last_update_frame: usize,
}

/// Cosine similarity of `query` with every row of `rows[n×c]`; a zero norm
/// on either side gives 0.
pub fn cosine_rows(query: &[f64], rows: &[f64]) -> Vec<f64> {
    let c = query.len();
    let qn = query.iter().map(|v| v * v).sum::<f64>().sqrt();
    rows.chunks_exact(c)
        .map(|r| {
            let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if qn == 0.0 || rn == 0.0 {
                return 0.0;
            }
            let dot: f64 = r.iter().zip(query).map(|(a, b)| a * b).sum();
            (dot / (qn * rn)).clamp(-1.0, 1.0)
        })
        .collect()
}

/// Index of the first maximum.
pub fn first_argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check_pair(query: &Tensor, feat: &Tensor) -> Result<()> {
    if feat.rank() != 3 || query.numel() != feat.dim(0) {
        return Err(Error::dim(format!(
            "query {:?} against features {:?}",
            query.shape(),
            feat.shape()
        )));
    }
    Ok(())
}

fn columns(feat: &Tensor) -> Vec<f64> {
    let (c, hw) = (feat.dim(0), feat.dim(1) * feat.dim(2));
    crate::numerics::kernels::transpose(feat.data(), c, hw)
}

/// `[H×W]` cosine similarity between `query[C]` and each column of `feat[C×H×W]`.
pub fn correlate(query: &Tensor, feat: &Tensor) -> Result<Tensor> {
    check_pair(query, feat)?;
    let sim = cosine_rows(query.data(), &columns(feat));
    Tensor::new(&[feat.dim(1), feat.dim(2)], sim)
}

/// Location `(x, y)` of the most similar feature column and that column.
/// Ties go to the lowest row-major index.
pub fn discriminative_select(query: &Tensor, feat: &Tensor) -> Result<((usize, usize), Tensor)> {
    check_pair(query, feat)?;
    let cols = columns(feat);
    let c = feat.dim(0);
    let i = first_argmax(&cosine_rows(query.data(), &cols));
    let w = feat.dim(2);
    Ok((
        (i % w, i / w),
        Tensor::new(&[c], cols[i * c..(i + 1) * c].to_vec())?,
    ))
}

/// For each query row picks the best candidate row and gathers it. Matches
/// below `threshold` are dropped; `None` when nothing survives.
pub fn select_salient(
    g: &mut Graph,
    queries: Var,
    candidates: Var,
    threshold: Option<f64>,
) -> Result<Option<Var>> {
    let c = g.shape(queries)[1];
    if g.shape(candidates)[1] != c {
        return Err(Error::dim("query and candidate widths differ"));
    }
    let cand = g.value(candidates).data().to_vec();
    let mut idx = Vec::new();
    for q in g.value(queries).data().chunks_exact(c) {
        let sim = cosine_rows(q, &cand);
        let i = first_argmax(&sim);
        if threshold.is_none_or(|t| sim[i] >= t) {
            idx.push(i);
        }
    }
    if idx.is_empty() {
        return Ok(None);
    }
    g.gather_rows(candidates, idx).map(Some)
}

pub fn init_weights<R: Rng>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) {
    let c = cfg.channels;
    let std = 1.0 / (c as f64).sqrt();
    store.init_normal("queries.init.slots", &[cfg.query_count, c], 1.0, rng);
    store.init_layer_norm("queries.init.ln", c);
    for block in ["queries.update", "queries.tf.cross", "queries.tf.self"] {
        for p in ["q", "k", "v"] {
            store.init_linear(&format!("{block}.{p}"), c, c, std, rng);
        }
        store.init_linear(&format!("{block}.o"), c, c, 0.5 * std, rng);
        store.init_layer_norm(&format!("{block}.ln"), c);
    }
    let hidden = c * cfg.mlp_ratio;
    store.init_linear("queries.tf.mlp.fc1", c, hidden, std, rng);
    store.init_linear(
        "queries.tf.mlp.fc2",
        hidden,
        c,
        0.5 / (hidden as f64).sqrt(),
        rng,
    );
    store.init_layer_norm("queries.tf.mlp.ln", c);
}

/// Masked average of the stride-4 rows `[HW×C]` under `mask[HW]`, tiled over
/// the learned slot embeddings and normalized. An empty mask averages
/// uniformly.
pub fn init_queries(g: &mut Graph, fused_rows: Var, mask: &[f64]) -> Result<Var> {
    let n = g.shape(fused_rows)[0];
    if mask.len() != n {
        return Err(Error::dim(format!(
            "mask of {} for {n} locations",
            mask.len()
        )));
    }
    let total: f64 = mask.iter().sum();
    let weights = if total > 0.0 {
        mask.iter().map(|m| m / total).collect()
    } else {
        vec![1.0 / n as f64; n]
    };
    let gap = g.weighted_row_sum(fused_rows, weights)?;
    let slots = g.param("queries.init.slots")?;
    let q = g.add_row(slots, gap)?;
    g.layer_norm_named(q, "queries.init.ln")
}

fn attend_block(g: &mut Graph, q: Var, kv: Var, block: &str) -> Result<(Var, Var, Var)> {
    let qq = g.linear(q, &format!("{block}.q"))?;
    let k = g.linear(kv, &format!("{block}.k"))?;
    let v = g.linear(kv, &format!("{block}.v"))?;
    let (att, weights) = g.attention(qq, k, v)?;
    let upd = g.linear(att, &format!("{block}.o"))?;
    let sum = g.add(q, upd)?;
    let out = g.layer_norm_named(sum, &format!("{block}.ln"))?;
    Ok((out, sum, weights))
}

/// `LN(q + out(attn(q, salient)))` with single-head attention over the `K`
/// salient rows. Also returns the pre-norm residual.
pub fn update_vars(g: &mut Graph, queries: Var, salient: Var) -> Result<(Var, Var)> {
    if g.shape(salient)[1] != g.shape(queries)[1] {
        return Err(Error::dim("salient features and queries differ in width"));
    }
    let (out, sum, _) = attend_block(g, queries, salient, "queries.update")?;
    Ok((out, sum))
}

impl TargetQuerySet {
    /// Additive update from `salient[K×C]`. `K = 0` leaves the set untouched.
    pub fn update(&self, params: &ParamStore, salient: &Tensor, frame_idx: usize) -> Result<Self> {
        if salient.numel() == 0 {
            return Ok(self.clone());
        }
        let mut g = Graph::inference(params);
        let q = g.constant(self.queries.clone());
        let s = g.constant(salient.clone());
        let (out, _) = update_vars(&mut g, q, s)?;
        let queries = g.value(out).clone();
        if !queries.is_finite() {
            return Err(Error::Numerical(format!(
                "object {} queries became non-finite",
                self.object_id
            )));
        }
        Ok(TargetQuerySet {
            object_id: self.object_id,
            queries,
            last_update_frame: frame_idx,
        })
    }
}

/// Attention weights recorded by [`transformer_vars`].
#[derive(Clone, Copy, Debug)]
pub struct TransformerTrace {
    pub cross: Var,
    pub self_attn: Var,
    /// `[HW×M]` per-pixel softmax over the queries.
    pub readout: Var,
}

/// One object: cross-attention over `feat_rows[HW×C]`, self-attention,
/// MLP (each with residual and norm), then the readout
/// `softmax_M(F·Qᵀ/√C)·Q` as `[HW×C]` rows.
pub fn transformer_vars(
    g: &mut Graph,
    queries: Var,
    feat_rows: Var,
) -> Result<(Var, Var, TransformerTrace)> {
    let c = g.shape(queries)[1];
    if g.shape(feat_rows)[1] != c {
        return Err(Error::dim("features and queries differ in width"));
    }
    let (q1, _, cross) = attend_block(g, queries, feat_rows, "queries.tf.cross")?;
    let (q2, _, self_attn) = attend_block(g, q1, q1, "queries.tf.self")?;
    let h = g.linear(q2, "queries.tf.mlp.fc1")?;
    let h = g.gelu(h);
    let h = g.linear(h, "queries.tf.mlp.fc2")?;
    let sum = g.add(q2, h)?;
    let q3 = g.layer_norm_named(sum, "queries.tf.mlp.ln")?;
    let (readout, weights) = g.attention(feat_rows, q3, q3)?;
    Ok((
        q3,
        readout,
        TransformerTrace {
            cross,
            self_attn,
            readout: weights,
        },
    ))
}

/// Runs every object's queries against the stride-4 level of `fused`.
/// Returns refined queries and `[C×H₄×W₄]` readout maps.
pub fn query_transformer(
    g: &mut Graph,
    qsets: &[Var],
    fused: &FeaturePyramid,
) -> Result<(Vec<Var>, Vec<Var>)> {
    if qsets.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let (h, w) = fused.dims(g)[0];
    let rows = map_to_rows(g, fused.levels[0])?;
    let mut refined = Vec::with_capacity(qsets.len());
    let mut maps = Vec::with_capacity(qsets.len());
    for &q in qsets {
        let (q3, readout, _) = transformer_vars(g, q, rows)?;
        refined.push(q3);
        maps.push(rows_to_map(g, readout, h, w)?);
    }
    Ok((refined, maps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, layer_norm};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(cfg: &ModelConfig, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        init_weights(cfg, &mut s, &mut ChaCha8Rng::seed_from_u64(seed));
        s
    }

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn normalized_rows(rng: &mut ChaCha8Rng, m: usize, c: usize) -> Tensor {
        let raw = rand_t(rng, &[m, c]);
        layer_norm(&raw, &Tensor::full(&[c], 1.0), &Tensor::zeros(&[c]), 1e-300).unwrap()
    }

    #[test]
    fn correlate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = rand_t(&mut rng, &[4]);
        let mut feat = rand_t(&mut rng, &[4, 3, 3]);
        for c in 0..4 {
            feat.set(&[c, 1, 2], q.data()[c]);
            feat.set(&[c, 0, 0], -q.data()[c]);
        }
        let sim = correlate(&q, &feat).unwrap();
        assert!((sim.at(&[1, 2]) - 1.0).abs() < 1e-15);
        assert!((sim.at(&[0, 0]) + 1.0).abs() < 1e-15);
        for y in 0..3 {
            for x in 0..3 {
                let col: Vec<f64> = (0..4).map(|c| feat.at(&[c, y, x])).collect();
                let dot: f64 = col.iter().zip(q.data()).map(|(a, b)| a * b).sum();
                let n = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
                assert!((sim.at(&[y, x]) - dot / (n(&col) * n(q.data()))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_norm_gives_zero_similarity() {
        let feat = Tensor::from_fn(&[2, 1, 2], |i| if i % 2 == 0 { 0.0 } else { 1.0 });
        let sim = correlate(&Tensor::new(&[2], vec![1.0, 0.0]).unwrap(), &feat).unwrap();
        assert_eq!(sim.data()[0], 0.0);
        let sim = correlate(&Tensor::zeros(&[2]), &feat).unwrap();
        assert!(sim.data().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn select_unique_and_tied() {
        let mut feat = Tensor::zeros(&[2, 3, 4]);
        feat.set(&[0, 1, 2], 1.0);
        for y in 0..3 {
            for x in 0..4 {
                if (x, y) != (2, 1) {
                    feat.set(&[1, y, x], 1.0);
                }
            }
        }
        let q = Tensor::new(&[2], vec![1.0, 0.0]).unwrap();
        let (loc, f) = discriminative_select(&q, &feat).unwrap();
        assert_eq!(loc, (2, 1));
        assert_eq!(f.data(), &[1.0, 0.0]);
        let (loc, _) = discriminative_select(&q, &Tensor::full(&[2, 3, 4], 0.5)).unwrap();
        assert_eq!(loc, (0, 0));
    }

    #[test]
    fn select_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let c = rng.random_range(1..6);
            let (h, w) = (rng.random_range(1..6), rng.random_range(1..6));
            // coarse values make exact ties common
            let feat = Tensor::from_fn(&[c, h, w], |_| rng.random_range(-2i32..=2) as f64);
            let q = Tensor::from_fn(&[c], |_| rng.random_range(-2i32..=2) as f64);
            let (loc, f) = discriminative_select(&q, &feat).unwrap();
            let mut best = (0usize, 0usize);
            let mut best_v = f64::NEG_INFINITY;
            for y in 0..h {
                for x in 0..w {
                    let col: Vec<f64> = (0..c).map(|k| feat.at(&[k, y, x])).collect();
                    let v = cosine_rows(q.data(), &col)[0];
                    if v > best_v {
                        best_v = v;
                        best = (x, y);
                    }
                }
            }
            assert_eq!(loc, best);
            let col: Vec<f64> = (0..c).map(|k| feat.at(&[k, best.1, best.0])).collect();
            assert_eq!(f.data(), col.as_slice());
        }
    }

    #[test]
    fn zero_update_projection_keeps_normalized_queries() {
        let cfg = ModelConfig::tiny();
        let mut s = store(&cfg, 3);
        let c = cfg.channels;
        s.insert("queries.update.o.w", Tensor::zeros(&[c, c]));
        s.insert("queries.update.o.b", Tensor::zeros(&[c]));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let qs = TargetQuerySet {
            object_id: 1,
            queries: normalized_rows(&mut rng, 3, c),
            last_update_frame: 0,
        };
        let out = qs.update(&s, &rand_t(&mut rng, &[3, c]), 3).unwrap();
        assert!(out.queries.max_abs_diff(&qs.queries) < 1e-5);
        assert_eq!(out.last_update_frame, 3);
    }

    #[test]
    fn empty_salient_skips_update() {
        let cfg = ModelConfig::tiny();
        let s = store(&cfg, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let qs = TargetQuerySet {
            object_id: 2,
            queries: rand_t(&mut rng, &[3, cfg.channels]),
            last_update_frame: 0,
        };
        assert_eq!(
            qs.update(&s, &Tensor::zeros(&[0, cfg.channels]), 9)
                .unwrap(),
            qs
        );
    }

    #[test]
    fn single_salient_closed_form() {
        let cfg = ModelConfig::tiny();
        let s = store(&cfg, 7);
        let c = cfg.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = rand_t(&mut rng, &[3, c]);
        let f = rand_t(&mut rng, &[1, c]);
        let mut g = Graph::inference(&s);
        let qv = g.constant(q.clone());
        let fv = g.constant(f.clone());
        let (_, sum) = update_vars(&mut g, qv, fv).unwrap();
        let v = g.linear(fv, "queries.update.v").unwrap();
        let o = g.linear(v, "queries.update.o").unwrap();
        let ov = g.value(o).clone();
        let expect = Tensor::from_fn(&[3, c], |i| q.data()[i] + ov.data()[i % c]);
        assert_eq!(g.value(sum), &expect);
    }

    #[test]
    fn update_gradients_match_finite_differences() {
        let cfg = ModelConfig::tiny();
        let s = store(&cfg, 9);
        let c = cfg.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let q0 = rand_t(&mut rng, &[3, c]);
        let sal = rand_t(&mut rng, &[3, c]);
        let proj: Vec<f64> = (0..3 * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        for name in [
            "queries.update.q.w",
            "queries.update.v.w",
            "queries.update.o.b",
            "queries.update.ln.g",
            "@queries",
            "@salient",
        ] {
            let x0 = match name {
                "@queries" => q0.clone(),
                "@salient" => sal.clone(),
                n => s.get(n).unwrap().clone(),
            };
            let r = finite_diff_check(
                |x, want| {
                    let mut st = s.clone();
                    let (mut qt, mut stt) = (q0.clone(), sal.clone());
                    match name {
                        "@queries" => qt = x.clone(),
                        "@salient" => stt = x.clone(),
                        n => st.insert(n, x.clone()),
                    }
                    let mut g = Graph::new(&st);
                    let qv = g.leaf(qt.with_requires_grad(true));
                    let sv = g.leaf(stt.with_requires_grad(true));
                    let (out, _) = update_vars(&mut g, qv, sv)?;
                    let loss = g.dot_const(out, proj.clone())?;
                    let value = g.value(loss).data()[0];
                    if !want {
                        return Ok((value, None));
                    }
                    g.backward(loss)?;
                    let grad = match name {
                        "@queries" => g.grad(qv).map(<[f64]>::to_vec),
                        "@salient" => g.grad(sv).map(<[f64]>::to_vec),
                        n => g.param_grads().get(n).cloned(),
                    };
                    Ok((value, grad))
                },
                &x0,
                1e-5,
            )
            .unwrap();
            assert!(r.max_rel_error <= 1e-6, "{name}: {r:?}");
        }
    }

    #[test]
    fn argmax_is_continuous_in_update_scale() {
        let cfg = ModelConfig::tiny();
        let c = cfg.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let mut s = store(&cfg, rng.random());
            let feat = rand_t(&mut rng, &[c, 4, 4]);
            let q = normalized_rows(&mut rng, 3, c);
            let mut sal = Vec::new();
            let mut before = Vec::new();
            for m in 0..3 {
                let row = Tensor::new(&[c], q.data()[m * c..(m + 1) * c].to_vec()).unwrap();
                let (loc, f) = discriminative_select(&row, &feat).unwrap();
                before.push(loc);
                sal.extend_from_slice(f.data());
            }
            let sal = Tensor::new(&[3, c], sal).unwrap();
            for alpha in [0.0, 1e-6] {
                let w = s.get("queries.update.o.w").unwrap().clone();
                let b = s.get("queries.update.o.b").unwrap().clone();
                s.insert(
                    "queries.update.o.w",
                    Tensor::from_fn(w.shape(), |i| alpha * w.data()[i]),
                );
                s.insert(
                    "queries.update.o.b",
                    Tensor::from_fn(b.shape(), |i| alpha * b.data()[i]),
                );
                let qs = TargetQuerySet {
                    object_id: 1,
                    queries: q.clone(),
                    last_update_frame: 0,
                };
                let out = qs.update(&s, &sal, 3).unwrap();
                for m in 0..3 {
                    let row =
                        Tensor::new(&[c], out.queries.data()[m * c..(m + 1) * c].to_vec()).unwrap();
                    assert_eq!(discriminative_select(&row, &feat).unwrap().0, before[m]);
                }
                s.insert("queries.update.o.w", w);
                s.insert("queries.update.o.b", b);
            }
        }
    }

    #[test]
    fn norms_stay_bounded_over_a_long_sequence() {
        let cfg = ModelConfig::tiny();
        let s = store(&cfg, 12);
        let c = cfg.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut g = Graph::inference(&s);
        let feat0 = g.constant(rand_t(&mut rng, &[16, c]));
        let q0 = init_queries(&mut g, feat0, &[1.0; 16]).unwrap();
        let mut qs = TargetQuerySet {
            object_id: 1,
            queries: g.value(q0).clone(),
            last_update_frame: 0,
        };
        let norms = |t: &Tensor| -> Vec<f64> {
            t.data()
                .chunks_exact(c)
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect()
        };
        let init = norms(&qs.queries);
        for frame in 1..=100 {
            let scale = 1.0 + frame as f64;
            let mut g = Graph::inference(&s);
            let feat = g.constant(Tensor::from_fn(&[16, c], |_| {
                scale * rng.random_range(-1.0..1.0)
            }));
            let q = g.constant(qs.queries.clone());
            let sal = select_salient(&mut g, q, feat, None).unwrap().unwrap();
            let sal = g.value(sal).clone();
            qs = qs.update(&s, &sal, frame).unwrap();
            for (n, n0) in norms(&qs.queries).iter().zip(&init) {
                assert!(*n <= 10.0 * n0, "frame {frame}: {n} vs {n0}");
            }
        }
    }

    #[test]
    fn threshold_drops_weak_matches() {
        let cfg = ModelConfig::tiny();
        let s = store(&cfg, 14);
        let mut g = Graph::inference(&s);
        let q = g.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let cand = g.constant(Tensor::new(&[2, 2], vec![1.0, 0.1, -1.0, -0.2]).unwrap());
        let all = select_salient(&mut g, q, cand, None).unwrap().unwrap();
        assert_eq!(g.shape(all), &[2, 2]);
        let strong = select_salient(&mut g, q, cand, Some(0.9)).unwrap().unwrap();
        assert_eq!(g.value(strong).data(), &[1.0, 0.1]);
        assert!(select_salient(&mut g, q, cand, Some(1.5))
            .unwrap()
            .is_none());
    }

    #[test]
    fn update_order_across_objects_is_irrelevant() {
        let cfg = ModelConfig::tiny();
        let s = store(&cfg, 15);
        let c = cfg.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let sets: Vec<TargetQuerySet> = (0..3)
            .map(|o| TargetQuerySet {
                object_id: o + 1,
                queries: rand_t(&mut rng, &[3, c]),
                last_update_frame: 0,
            })
            .collect();
        let sal: Vec<Tensor> = (0..3).map(|_| rand_t(&mut rng, &[3, c])).collect();
        let forward: Vec<_> = sets
            .iter()
            .zip(&sal)
            .map(|(q, f)| q.update(&s, f, 3).unwrap())
            .collect();
        let mut backward: Vec<_> = sets
            .iter()
            .zip(&sal)
            .rev()
            .map(|(q, f)| q.update(&s, f, 3).unwrap())
            .collect();
        backward.reverse();
        assert_eq!(forward, backward);
    }

    #[test]
    fn transformer_shapes_purity_and_normalization() {
        let cfg = ModelConfig::tiny();
        let s = store(&cfg, 17);
        let c = cfg.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut g = Graph::inference(&s);
        let levels = vec![
            g.constant(rand_t(&mut rng, &[c, 5, 6])),
            g.constant(rand_t(&mut rng, &[c, 3, 3])),
            g.constant(rand_t(&mut rng, &[c, 2, 2])),
        ];
        let fused = FeaturePyramid {
            levels,
            strides: crate::encoder::PYRAMID_STRIDES,
        };
        let q = g.constant(rand_t(&mut rng, &[3, c]));
        let (refined, maps) = query_transformer(&mut g, &[q, q], &fused).unwrap();
        assert_eq!(g.shape(maps[0]), &[c, 5, 6]);
        assert_eq!(g.value(maps[0]), g.value(maps[1]));
        assert_eq!(g.value(refined[0]), g.value(refined[1]));
        let (none, _) = query_transformer(&mut g, &[], &fused).unwrap();
        assert!(none.is_empty());

        let rows = map_to_rows(&mut g, fused.levels[0]).unwrap();
        let (_, _, trace) = transformer_vars(&mut g, q, rows).unwrap();
        for (v, width) in [(trace.cross, 30), (trace.self_attn, 3), (trace.readout, 3)] {
            for row in g.value(v).data().chunks_exact(width) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn transformer_gradients_match_finite_differences() {
        let cfg = ModelConfig::tiny();
        let s = store(&cfg, 19);
        let c = cfg.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let q0 = rand_t(&mut rng, &[3, c]);
        let f0 = rand_t(&mut rng, &[10, c]);
        let proj: Vec<f64> = (0..10 * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        for name in [
            "queries.tf.cross.k.w",
            "queries.tf.self.q.w",
            "queries.tf.mlp.fc1.w",
            "queries.init.slots",
        ] {
            let r = finite_diff_check(
                |x, want| {
                    let mut st = s.clone();
                    st.insert(name, x.clone());
                    let mut g = Graph::new(&st);
                    let f = g.constant(f0.clone());
                    let q = if name == "queries.init.slots" {
                        init_queries(&mut g, f, &[0.5; 10])?
                    } else {
                        g.constant(q0.clone())
                    };
                    let (_, readout, _) = transformer_vars(&mut g, q, f)?;
                    let loss = g.dot_const(readout, proj.clone())?;
                    let value = g.value(loss).data()[0];
                    if !want {
                        return Ok((value, None));
                    }
                    g.backward(loss)?;
                    Ok((value, g.param_grads().get(name).cloned()))
                },
                s.get(name).unwrap(),
                1e-5,
            )
            .unwrap();
            assert!(r.max_rel_error <= 1e-6, "{name}: {r:?}");
        }
    }
}
