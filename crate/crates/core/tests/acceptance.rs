//! Acceptance criteria, one PASS/FAIL line each. Every oracle here is written
//! independently of the library code it checks.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semvos::config::{ModelConfig, TrainConfig};
use semvos::decoder::{self, AGG_EPS};
use semvos::encoder::{self, FeaturePyramid, SemanticTokens, PYRAMID_STRIDES};
use semvos::fusion::{self, init_deform_weights, ms_deform_attn, reference_points, DeformParams};
use semvos::memory::{should_store, MemoryBank};
use semvos::metrics::{boundary_f, default_tolerance, jaccard, BinaryMask};
use semvos::numerics::{finite_diff_check, Graph, ParamStore, Tensor, Var};
use semvos::pipeline::synth::{render, Motion, SyntheticSpec};
use semvos::pipeline::{fuse_scales, run_sequence, train, write_predictions, Model, Sequence};
use semvos::queries::{self, discriminative_select};
use semvos::EngineConfig;

const METRIC_TOL: f64 = 1e-9;
const METRIC_BUDGET_S: f64 = 10.0;
const DEFORM_TOL: f64 = 1e-9;
const DEFORM_BUDGET_S: f64 = 5.0;
const GRAD_EPS: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-6;
const GRAD_INSTANCES: u64 = 20;
const GRAD_BUDGET_S: f64 = 60.0;
const MEMORY_STREAMS: usize = 1000;
const STREAM_LEN: usize = 100;
const SELECTION_CASES: usize = 1000;
const TRAIN_SEQUENCES: u64 = 32;
const HELDOUT_SEQUENCES: u64 = 8;
const TRAIN_STEPS: usize = 2000;
const MAX_PARAMS: usize = 1_000_000;
const LOSS_RATIO: f64 = 0.15;
const MIN_HELDOUT_JF: f64 = 0.80;
const E2E_BUDGET_S: f64 = 1800.0;
const ABLATION_SEQUENCES: u64 = 16;
const FUSE_TOL: f64 = 1e-12;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(name: &'static str, r: semvos::Result<(bool, String)>) -> Outcome {
    let (pass, detail) = r.unwrap_or_else(|e| (false, format!("error: {e}")));
    let o = Outcome { name, pass, detail };
    println!(
        "{} {}: {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.name,
        o.detail
    );
    o
}

// ---------------------------------------------------------------- metrics

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let mut m = BinaryMask::empty(h, w);
    match rng.random_range(0..10) {
        0 => {}
        1 => m.data.iter_mut().for_each(|v| *v = rng.random_bool(0.3)),
        _ => {
            for _ in 0..rng.random_range(1..5) {
                let (cx, cy) = (
                    rng.random_range(0.0..w as f64),
                    rng.random_range(0.0..h as f64),
                );
                let (rx, ry) = (rng.random_range(2.0..20.0), rng.random_range(2.0..20.0));
                for y in 0..h {
                    for x in 0..w {
                        let d = ((x as f64 - cx) / rx).powi(2) + ((y as f64 - cy) / ry).powi(2);
                        if d <= 1.0 {
                            m.data[y * w + x] = true;
                        }
                    }
                }
            }
            for _ in 0..rng.random_range(0..30) {
                let i = rng.random_range(0..h * w);
                m.data[i] = !m.data[i];
            }
        }
    }
    m
}

fn edge_pixels(m: &BinaryMask) -> Vec<bool> {
    let (h, w) = (m.height as i64, m.width as i64);
    let on = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h && m.data[(y * w + x) as usize];
    (0..h * w)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            on(x, y) && !(on(x - 1, y) && on(x + 1, y) && on(x, y - 1) && on(x, y + 1))
        })
        .collect()
}

/// Fraction of `a`'s edge pixels with an edge pixel of `b` within `tol`,
/// by scanning the full window around each pixel.
fn matched_fraction(a: &[bool], b: &[bool], h: usize, w: usize, tol: f64) -> Option<f64> {
    let r = tol.floor() as i64;
    let t2 = tol * tol;
    let mut total = 0usize;
    let mut hit = 0usize;
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if !a[(y * w as i64 + x) as usize] {
                continue;
            }
            total += 1;
            'search: for dy in -r..=r {
                for dx in -r..=r {
                    let (u, v) = (x + dx, y + dy);
                    if u >= 0
                        && v >= 0
                        && u < w as i64
                        && v < h as i64
                        && b[(v * w as i64 + u) as usize]
                        && ((dx * dx + dy * dy) as f64) <= t2
                    {
                        hit += 1;
                        break 'search;
                    }
                }
            }
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

fn oracle_f(p: &BinaryMask, g: &BinaryMask, tol: f64) -> f64 {
    let (ep, eg) = (edge_pixels(p), edge_pixels(g));
    match (
        matched_fraction(&ep, &eg, p.height, p.width, tol),
        matched_fraction(&eg, &ep, p.height, p.width, tol),
    ) {
        (None, None) => 1.0,
        (None, _) | (_, None) => 0.0,
        (Some(prec), Some(rec)) if prec + rec > 0.0 => 2.0 * prec * rec / (prec + rec),
        _ => 0.0,
    }
}

fn metric_oracles() -> semvos::Result<(bool, String)> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut j_mismatch, mut f_err) = (0usize, 0.0f64);
    for _ in 0..200 {
        let (a, b) = (random_mask(&mut rng, 64, 64), random_mask(&mut rng, 64, 64));
        let inter = a
            .data
            .iter()
            .zip(&b.data)
            .filter(|(x, y)| **x && **y)
            .count();
        let union = a
            .data
            .iter()
            .zip(&b.data)
            .filter(|(x, y)| **x || **y)
            .count();
        let j = if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        };
        if jaccard(&a, &b)? != j {
            j_mismatch += 1;
        }
        let diag_tol = (0.008 * (64.0f64 * 64.0 * 2.0).sqrt()).ceil();
        assert_eq!(default_tolerance(64, 64), diag_tol);
        for tol in [diag_tol, 2.0, 3.5] {
            f_err = f_err.max((boundary_f(&a, &b, tol)? - oracle_f(&a, &b, tol)).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        j_mismatch == 0 && f_err <= METRIC_TOL && secs < METRIC_BUDGET_S,
        format!("200 pairs, J mismatches {j_mismatch}, max F error {f_err:.1e} (tol {METRIC_TOL:e}), {secs:.2}s (< {METRIC_BUDGET_S}s)"),
    ))
}

// ---------------------------------------------------------------- deformable attention

/// Full deformable block (sampling, projection, residual, layer norm) with
/// every bilinear weight materialized as a tent product over all texels.
fn dense_deform(s: &ParamStore, p: &DeformParams, q: &Tensor, maps: &[Tensor]) -> Vec<f64> {
    let (n, c) = (q.dim(0), q.dim(1));
    let get = |name: &str| {
        s.get(&format!("{}.{name}", p.prefix))
            .unwrap()
            .data()
            .to_vec()
    };
    let lin = |x: &[f64], name: &str, i: usize, o: usize| -> Vec<f64> {
        let (w, b) = (get(&format!("{name}.w")), get(&format!("{name}.b")));
        let rows = x.len() / i;
        let mut y = vec![0.0; rows * o];
        for r in 0..rows {
            for j in 0..o {
                y[r * o + j] = b[j] + (0..i).map(|k| x[r * i + k] * w[k * o + j]).sum::<f64>();
            }
        }
        y
    };
    let slots = p.heads * p.levels * p.points;
    let values: Vec<Vec<f64>> = maps
        .iter()
        .map(|m| {
            let hw = m.dim(1) * m.dim(2);
            let mut rows = vec![0.0; hw * c];
            for ch in 0..c {
                for t in 0..hw {
                    rows[t * c + ch] = m.data()[ch * hw + t];
                }
            }
            lin(&rows, "value", c, c)
        })
        .collect();
    let off = lin(q.data(), "offset", c, slots * 2);
    let logit = lin(q.data(), "attn", c, slots);
    let mut refs = Vec::new();
    for m in maps {
        let (h, w) = (m.dim(1), m.dim(2));
        for y in 0..h {
            for x in 0..w {
                refs.push(((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64));
            }
        }
    }
    let per = p.levels * p.points;
    let dh = c / p.heads;
    let mut sampled = vec![0.0; n * c];
    for qi in 0..n {
        for h in 0..p.heads {
            let ls = &logit[qi * slots + h * per..qi * slots + (h + 1) * per];
            let mx = ls.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = ls.iter().map(|v| (v - mx).exp()).sum();
            for l in 0..p.levels {
                let (lh, lw) = (maps[l].dim(1), maps[l].dim(2));
                for k in 0..p.points {
                    let s_ = (h * p.levels + l) * p.points + k;
                    let a = (logit[qi * slots + s_] - mx).exp() / z;
                    let sx = (refs[qi].0 * lw as f64 - 0.5 + off[qi * 2 * slots + 2 * s_])
                        .clamp(0.0, lw as f64 - 1.0);
                    let sy = (refs[qi].1 * lh as f64 - 0.5 + off[qi * 2 * slots + 2 * s_ + 1])
                        .clamp(0.0, lh as f64 - 1.0);
                    for ty in 0..lh {
                        for tx in 0..lw {
                            let wt = (1.0 - (sx - tx as f64).abs()).max(0.0)
                                * (1.0 - (sy - ty as f64).abs()).max(0.0);
                            for ch in h * dh..(h + 1) * dh {
                                sampled[qi * c + ch] += a * wt * values[l][(ty * lw + tx) * c + ch];
                            }
                        }
                    }
                }
            }
        }
    }
    let upd = lin(&sampled, "out", c, c);
    let (gam, bet) = (get("ln.g"), get("ln.b"));
    let mut out = vec![0.0; n * c];
    for r in 0..n {
        let row: Vec<f64> = (0..c)
            .map(|j| q.data()[r * c + j] + upd[r * c + j])
            .collect();
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        for j in 0..c {
            out[r * c + j] = (row[j] - mean) / (var + 1e-5).sqrt() * gam[j] + bet[j];
        }
    }
    out
}

fn deform_oracle() -> semvos::Result<(bool, String)> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let c = 4;
    let (mut cases, mut err) = (0usize, 0.0f64);
    for heads in [1, 2] {
        for points in [1, 2, 4] {
            for levels in [1, 3] {
                for h in 1..=8usize {
                    for w in 1..=8usize {
                        let p = DeformParams {
                            heads,
                            points,
                            levels,
                            prefix: "d".into(),
                        };
                        let mut s = ParamStore::new();
                        init_deform_weights(&mut s, &p, c, &mut rng);
                        let slots = heads * levels * points;
                        s.init_normal("d.offset.w", &[c, slots * 2], 1.5, &mut rng);
                        s.init_normal("d.attn.w", &[c, slots], 1.0, &mut rng);
                        s.init_normal("d.ln.g", &[c], 1.0, &mut rng);
                        s.init_normal("d.ln.b", &[c], 1.0, &mut rng);
                        let dims: Vec<(usize, usize)> = (0..levels)
                            .map(|l| (h.div_ceil(1 << l), w.div_ceil(1 << l)))
                            .collect();
                        let maps: Vec<Tensor> = dims
                            .iter()
                            .map(|&(lh, lw)| {
                                Tensor::from_fn(&[c, lh, lw], |_| rng.random_range(-1.0..1.0))
                            })
                            .collect();
                        let nq: usize = dims.iter().map(|(a, b)| a * b).sum();
                        let q = Tensor::from_fn(&[nq, c], |_| rng.random_range(-1.0..1.0));
                        let mut g = Graph::inference(&s);
                        let vars: Vec<Var> = maps.iter().map(|m| g.constant(m.clone())).collect();
                        let qv = g.constant(q.clone());
                        let out = ms_deform_attn(&mut g, qv, &reference_points(&dims), &vars, &p)?;
                        let expect = dense_deform(&s, &p, &q, &maps);
                        for (a, b) in g.value(out).data().iter().zip(&expect) {
                            err = err.max((a - b).abs());
                        }
                        cases += 1;
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        err <= DEFORM_TOL && secs < DEFORM_BUDGET_S,
        format!("{cases} configurations, max error {err:.1e} (tol {DEFORM_TOL:e}), {secs:.2}s (< {DEFORM_BUDGET_S}s)"),
    ))
}

// ---------------------------------------------------------------- gradients

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Fixed random projection of several outputs to one scalar.
fn project(g: &mut Graph, outs: &[Var], seed: u64) -> semvos::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = None;
    for &o in outs {
        let n = g.value(o).numel();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = g.dot_const(o, w)?;
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    Ok(total.expect("at least one output"))
}

type Forward<'a> = dyn Fn(&mut Graph, Var) -> semvos::Result<Var> + 'a;

/// Relative error at `coords` of either the named parameter or `input`.
fn grad_error(
    store: &ParamStore,
    param: Option<&str>,
    input: &Tensor,
    coords: &[usize],
    fwd: &Forward,
) -> semvos::Result<f64> {
    let base = match param {
        Some(n) => store.get(n)?.clone(),
        None => input.clone(),
    };
    let x0 = Tensor::new(
        &[coords.len()],
        coords.iter().map(|&i| base.data()[i]).collect(),
    )?;
    let r = finite_diff_check(
        |x, want| {
            let mut t = base.clone();
            for (k, &i) in coords.iter().enumerate() {
                t.data_mut()[i] = x.data()[k];
            }
            let mut local;
            let (st, inp) = match param {
                Some(n) => {
                    local = store.clone();
                    local.insert(n, t);
                    (&local, input.clone())
                }
                None => (store, t),
            };
            let mut g = Graph::new(st);
            let leaf = g.leaf(inp.with_requires_grad(param.is_none()));
            let loss = fwd(&mut g, leaf)?;
            let v = g.value(loss).data()[0];
            if !want {
                return Ok((v, None));
            }
            g.backward(loss)?;
            let full = match param {
                Some(n) => g.param_grads().remove(n),
                None => g.grad(leaf).map(<[f64]>::to_vec),
            }
            .unwrap_or_else(|| vec![0.0; base.numel()]);
            Ok((v, Some(coords.iter().map(|&i| full[i]).collect())))
        },
        &x0,
        GRAD_EPS,
    )?;
    Ok(r.max_rel_error)
}

fn pick_coords(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut c: Vec<usize> = (0..k.min(n)).map(|_| rng.random_range(0..n)).collect();
    c.sort_unstable();
    c.dedup();
    c
}

fn tiny_store(cfg: &ModelConfig, seed: u64) -> ParamStore {
    Model::new(cfg.clone(), seed).expect("tiny model").params
}

fn fake_pyramid(
    g: &mut Graph,
    rng: &mut ChaCha8Rng,
    chans: [usize; 3],
    dims: &[(usize, usize)],
) -> FeaturePyramid {
    FeaturePyramid {
        levels: dims
            .iter()
            .zip(chans)
            .map(|(&(h, w), c)| g.constant(rand_t(rng, &[c, h, w], 1.0)))
            .collect(),
        strides: PYRAMID_STRIDES,
    }
}

fn fake_tokens(g: &mut Graph, rng: &mut ChaCha8Rng, c: usize) -> SemanticTokens {
    SemanticTokens {
        cls: g.constant(rand_t(rng, &[c], 1.0)),
        gap: g.constant(rand_t(rng, &[c], 1.0)),
        patches: g.constant(rand_t(rng, &[4, c], 1.0)),
        grid: (2, 2),
    }
}

/// Worst error over instances of one family: a parameter check and, when the
/// family takes a differentiable input, an input check per instance.
fn family(
    prefix: &[&str],
    input_shape: Option<&[usize]>,
    build: &dyn Fn(&ModelConfig, u64) -> Box<Forward<'static>>,
) -> semvos::Result<(usize, f64)> {
    let cfg = ModelConfig::tiny();
    let mut worst = 0.0f64;
    let mut checks = 0;
    for inst in 0..GRAD_INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + inst);
        let store = tiny_store(&cfg, inst);
        let fwd = build(&cfg, inst);
        let names: Vec<String> = store
            .iter()
            .map(|(n, _)| n.clone())
            .filter(|n| prefix.iter().any(|p| n.starts_with(p)))
            .collect();
        let placeholder = Tensor::zeros(&[1]);
        let input = input_shape.map_or(placeholder, |s| rand_t(&mut rng, s, 1.0));
        if !names.is_empty() {
            let name = &names[inst as usize % names.len()];
            let coords = pick_coords(&mut rng, store.get(name)?.numel(), 6);
            worst = worst.max(grad_error(&store, Some(name), &input, &coords, &*fwd)?);
            checks += 1;
        }
        if input_shape.is_some() {
            let coords = pick_coords(&mut rng, input.numel(), 6);
            worst = worst.max(grad_error(&store, None, &input, &coords, &*fwd)?);
            checks += 1;
        }
    }
    Ok((checks, worst))
}

#[allow(clippy::type_complexity)]
fn gradient_checks() -> semvos::Result<(bool, String)> {
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut pass = true;
    let families: Vec<(
        &str,
        Vec<&str>,
        Option<Vec<usize>>,
        Box<dyn Fn(&ModelConfig, u64) -> Box<Forward<'static>>>,
    )> = vec![
        (
            "encoder",
            vec!["encoder."],
            None,
            Box::new(|cfg: &ModelConfig, seed| {
                let cfg = cfg.clone();
                let image = rand_t(&mut ChaCha8Rng::seed_from_u64(seed), &[3, 16, 16], 0.5);
                Box::new(move |g: &mut Graph, _| {
                    let (t, p) = encoder::encode(g, &cfg, &image)?;
                    let mut outs = vec![t.cls, t.gap, t.patches];
                    outs.extend(&p.levels);
                    project(g, &outs, 1)
                })
            }),
        ),
        (
            "semantic fusion",
            vec!["fusion.semantic.", "fusion.proj."],
            Some(vec![4, 4, 4]),
            Box::new(|cfg: &ModelConfig, seed| {
                let cfg = cfg.clone();
                Box::new(move |g: &mut Graph, x| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let mut pyr =
                        fake_pyramid(g, &mut rng, cfg.pyramid_channels, &[(4, 4), (2, 2), (1, 1)]);
                    pyr.levels[0] = x;
                    let tok = fake_tokens(g, &mut rng, cfg.channels);
                    let (out, _) = fusion::semantic_prior_fusion(g, &pyr, &tok)?;
                    project(g, &out.levels, 2)
                })
            }),
        ),
        (
            "deformable fusion",
            vec!["fusion.deform."],
            Some(vec![21, 8]),
            Box::new(|cfg: &ModelConfig, seed| {
                let cfg = cfg.clone();
                Box::new(move |g: &mut Graph, q| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let dims = [(4, 4), (2, 2), (1, 1)];
                    let maps: Vec<Var> = dims
                        .iter()
                        .map(|&(h, w)| g.constant(rand_t(&mut rng, &[cfg.channels, h, w], 1.0)))
                        .collect();
                    let out = ms_deform_attn(
                        g,
                        q,
                        &reference_points(&dims),
                        &maps,
                        &fusion::deform_params(&cfg, 0),
                    )?;
                    project(g, &[out], 3)
                })
            }),
        ),
        (
            "query update",
            vec!["queries.update."],
            Some(vec![3, 8]),
            Box::new(|_: &ModelConfig, seed| {
                Box::new(move |g: &mut Graph, q| {
                    let sal =
                        g.constant(rand_t(&mut ChaCha8Rng::seed_from_u64(seed), &[3, 8], 1.0));
                    let (out, _) = queries::update_vars(g, q, sal)?;
                    project(g, &[out], 4)
                })
            }),
        ),
        (
            "query transformer",
            vec!["queries.tf."],
            Some(vec![3, 8]),
            Box::new(|_: &ModelConfig, seed| {
                Box::new(move |g: &mut Graph, q| {
                    let feat =
                        g.constant(rand_t(&mut ChaCha8Rng::seed_from_u64(seed), &[16, 8], 1.0));
                    let (q3, readout, _) = queries::transformer_vars(g, q, feat)?;
                    project(g, &[q3, readout], 5)
                })
            }),
        ),
        (
            "decoder",
            vec!["decoder."],
            Some(vec![8, 4, 4]),
            Box::new(|cfg: &ModelConfig, seed| {
                let cfg = cfg.clone();
                Box::new(move |g: &mut Graph, readout| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let c = cfg.channels;
                    let fused = fake_pyramid(g, &mut rng, [c, c, c], &[(4, 4), (2, 2), (1, 1)]);
                    let mem = g.constant(rand_t(&mut rng, &[cfg.value_dim, 4, 4], 1.0));
                    let image = g.constant(rand_t(&mut rng, &[3, 16, 16], 0.5));
                    let out = decoder::decode(g, &fused, readout, mem, image, (16, 16))?;
                    project(g, &[out], 6)
                })
            }),
        ),
        (
            "loss",
            vec![],
            Some(vec![2, 64]),
            Box::new(|_: &ModelConfig, seed| {
                Box::new(move |g: &mut Graph, logits| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let mut probs = Vec::new();
                    for o in 0..2 {
                        let row = g.slice_rows(logits, o, 1)?;
                        let row = g.reshape(row, &[64])?;
                        probs.push(g.sigmoid(row));
                    }
                    let agg = g.soft_aggregate(&probs, AGG_EPS)?;
                    let pts = (0..32)
                        .map(|_| (rng.random_range(0..3), rng.random_range(0..64)))
                        .collect();
                    g.point_nll(agg, pts)
                })
            }),
        ),
    ];
    for (name, prefix, shape, build) in &families {
        let (checks, worst) = family(prefix, shape.as_deref(), &**build)?;
        pass &= worst <= GRAD_TOL && checks >= GRAD_INSTANCES as usize;
        rows.push(format!("{name} {worst:.1e}/{checks}"));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < GRAD_BUDGET_S;
    Ok((
        pass,
        format!(
            "max rel error per family over {GRAD_INSTANCES} instances [{}] (tol {GRAD_TOL:e}, eps {GRAD_EPS:e}), {secs:.1}s (< {GRAD_BUDGET_S}s)",
            rows.join(", ")
        ),
    ))
}

// ---------------------------------------------------------------- memory policy

/// Reference bank: `(frame, usage)` pairs, evicting the oldest among the
/// lowest usage-per-frame-of-age entries that are neither frame 0 nor new.
struct RefBank {
    cap: usize,
    entries: Vec<(usize, f64)>,
}

impl RefBank {
    fn store(&mut self, now: usize) {
        self.entries.push((now, 0.0));
        while self.entries.iter().filter(|e| e.0 != 0).count() > self.cap {
            let mut victim: Option<(usize, f64, usize)> = None;
            for (i, &(f, u)) in self.entries.iter().enumerate() {
                if f == 0 || f == now {
                    continue;
                }
                let r = u / (now - f) as f64;
                let better = match victim {
                    None => true,
                    Some((_, br, bf)) => r < br || (r == br && f < bf),
                };
                if better {
                    victim = Some((i, r, f));
                }
            }
            self.entries.remove(victim.expect("an evictable entry").0);
        }
    }
}

fn memory_policy() -> semvos::Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(5150);
    let mut mismatches = 0usize;
    let mut lost_zero = 0usize;
    let mut over = 0usize;
    let mut observations = 0usize;
    for stream in 0..MEMORY_STREAMS {
        let cap = rng.random_range(1..=8);
        let interval = rng.random_range(1..=5);
        let p_target = rng.random_range(0.0..1.0);
        let mut bank = MemoryBank::new(cap, interval)?;
        let mut reference = RefBank {
            cap,
            entries: Vec::new(),
        };
        let via_readout = stream % 2 == 0;
        let mut keys: BTreeMap<usize, Tensor> = BTreeMap::new();
        for now in 0..STREAM_LEN {
            let has = rng.random_bool(p_target);
            let stored = now == 0 || (now % interval == 0 && has);
            assert_eq!(should_store(now, has, interval), stored);
            if stored {
                let k = rand_t(&mut rng, &[2, 2, 2], 1.5);
                keys.insert(now, k.clone());
                bank.store(k, Tensor::zeros(&[1, 2, 2]), now)?;
                reference.store(now);
            }
            if via_readout {
                // Affinity of each query location over every memory location.
                let q = rand_t(&mut rng, &[2, 2, 2], 1.5);
                bank.readout(&q)?;
                for ql in 0..4 {
                    let mut scores = Vec::new();
                    for &(f, _) in &reference.entries {
                        let k = &keys[&f];
                        for ml in 0..4 {
                            let d: f64 = (0..2)
                                .map(|ch| (q.data()[ch * 4 + ql] - k.data()[ch * 4 + ml]).powi(2))
                                .sum();
                            scores.push((f, -d));
                        }
                    }
                    let mx = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scores.iter().map(|s| (s.1 - mx).exp()).sum();
                    for e in reference.entries.iter_mut() {
                        e.1 += scores
                            .iter()
                            .filter(|s| s.0 == e.0)
                            .map(|s| (s.1 - mx).exp() / z)
                            .sum::<f64>();
                    }
                }
            } else {
                // Quarter-step masses make exact ratio ties common.
                let mass: Vec<f64> = (0..bank.len())
                    .map(|_| f64::from(rng.random_range(0..3u8)) * 0.25)
                    .collect();
                bank.record_usage(&mass)?;
                for (e, m) in reference.entries.iter_mut().zip(&mass) {
                    e.1 += m;
                }
            }
            observations += 1;
            let frames: Vec<usize> = reference.entries.iter().map(|e| e.0).collect();
            if bank.frame_indices() != frames {
                mismatches += 1;
            }
            if bank.entries().first().map(|e| e.frame_idx) != Some(0) {
                lost_zero += 1;
            }
            if bank.len() > cap + 1 {
                over += 1;
            }
        }
    }
    Ok((
        mismatches == 0 && lost_zero == 0 && over == 0,
        format!(
            "{MEMORY_STREAMS} streams x {STREAM_LEN} frames, {observations} observations: {mismatches} set mismatches, {lost_zero} without frame 0, {over} over capacity+1"
        ),
    ))
}

// ---------------------------------------------------------------- selection

fn selection() -> semvos::Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut wrong = 0usize;
    let mut ties = 0usize;
    for case in 0..SELECTION_CASES {
        let (c, h, w) = (
            rng.random_range(1..=6),
            rng.random_range(1..=6),
            rng.random_range(1..=6),
        );
        let integer = case % 2 == 0;
        let draw = |rng: &mut ChaCha8Rng| {
            if integer {
                f64::from(rng.random_range(-1..=1i8))
            } else {
                rng.random_range(-1.0..1.0)
            }
        };
        let feat = Tensor::from_fn(&[c, h, w], |_| draw(&mut rng));
        let mut q = Tensor::from_fn(&[c], |_| draw(&mut rng));
        if case % 10 == 3 {
            q = Tensor::new(&[c], (0..c).map(|k| feat.at(&[k, h - 1, w - 1])).collect())?;
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let qn = norm(q.data());
        let mut sims = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let col: Vec<f64> = (0..c).map(|k| feat.at(&[k, y, x])).collect();
                let d = norm(&col) * qn;
                let s = if d == 0.0 {
                    0.0
                } else {
                    col.iter().zip(q.data()).map(|(a, b)| a * b).sum::<f64>() / d
                };
                sims.push(((x, y), s, col));
            }
        }
        let best = sims.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
        let winners: Vec<_> = sims.iter().filter(|s| s.1 == best).collect();
        if winners.len() > 1 {
            ties += 1;
        }
        let (loc, f) = discriminative_select(&q, &feat)?;
        if loc != winners[0].0 || f.data() != winners[0].2.as_slice() {
            wrong += 1;
        }
    }
    Ok((
        wrong == 0,
        format!("{SELECTION_CASES} instances ({ties} with tied maxima), {wrong} disagreements with the exhaustive scan"),
    ))
}

// ---------------------------------------------------------------- end to end

fn synthetic(motion: Motion, seed: u64) -> Sequence {
    let s = render(&SyntheticSpec {
        n_shapes: 2,
        motion,
        frames: 16,
        noise_std: 0.02,
        seed,
        width: 64,
        height: 64,
    })
    .expect("valid spec");
    Sequence {
        name: format!("seq-{seed}"),
        frames: s.frames.clone(),
        annotation: s.masks[0].clone(),
        gt: Some(s.masks.clone()),
        stems: (0..s.frames.len()).map(|i| format!("{i:05}")).collect(),
    }
}

fn engine_config() -> EngineConfig {
    EngineConfig {
        base_size: 64,
        model: Some(ModelConfig {
            channels: 16,
            vit_depth: 1,
            pos_grid: 8,
            pyramid_channels: [8, 16, 16],
            stem_channels: 8,
            decoder_channels: [8, 8],
            key_dim: 8,
            value_dim: 8,
            ..ModelConfig::default()
        }),
        train: TrainConfig {
            lr: 0.02,
            points_k: 256,
            ..TrainConfig::default()
        },
        ..EngineConfig::default()
    }
}

fn mean_jf(model: &Model, cfg: &EngineConfig, seqs: &[Sequence]) -> semvos::Result<f64> {
    let mut total = 0.0;
    for s in seqs {
        let out = run_sequence(model, cfg, s)?;
        total += out.report.expect("ground truth given").jf_mean;
    }
    Ok(total / seqs.len() as f64)
}

fn end_to_end(model_out: &mut Option<Model>) -> semvos::Result<(bool, String)> {
    let start = Instant::now();
    let cfg = engine_config();
    let data: Vec<Sequence> = (0..TRAIN_SEQUENCES)
        .map(|s| synthetic(Motion::Linear, s))
        .collect();
    let heldout: Vec<Sequence> = (0..HELDOUT_SEQUENCES)
        .map(|s| synthetic(Motion::Linear, 1000 + s))
        .collect();
    let mut model = Model::new(cfg.model_config(), cfg.seed)?;
    let params = model.num_parameters();
    let losses = train(&mut model, &cfg, &data, TRAIN_STEPS, None)?;
    let initial = losses[..10].iter().sum::<f64>() / 10.0;
    let final_ = losses[losses.len() - 100..].iter().sum::<f64>() / 100.0;
    let jf = mean_jf(&model, &cfg, &heldout)?;
    let secs = start.elapsed().as_secs_f64();
    *model_out = Some(model);
    Ok((
        params <= MAX_PARAMS && final_ < LOSS_RATIO * initial && jf >= MIN_HELDOUT_JF && secs < E2E_BUDGET_S,
        format!(
            "{params} params, {TRAIN_STEPS} steps: loss {initial:.4} (first 10) -> {final_:.4} (last 100), ratio {:.4} (< {LOSS_RATIO}); held-out J&F {jf:.4} (>= {MIN_HELDOUT_JF}); {secs:.0}s (< {E2E_BUDGET_S}s)",
            final_ / initial
        ),
    ))
}

fn ablation(model: Option<&Model>) -> semvos::Result<(bool, String)> {
    let model = model.ok_or_else(|| semvos::Error::State("no trained model".into()))?;
    let seqs: Vec<Sequence> = (0..ABLATION_SEQUENCES)
        .map(|s| synthetic(Motion::OccludingCross, 2000 + s))
        .collect();
    let with = engine_config();
    let without = EngineConfig {
        query_update: false,
        ..engine_config()
    };
    let (a, b) = (
        mean_jf(model, &with, &seqs)?,
        mean_jf(model, &without, &seqs)?,
    );
    Ok((
        a >= b,
        format!("{ABLATION_SEQUENCES} occluding-cross sequences: J&F with query updates {a:.4}, without {b:.4}, difference {:+.4}", a - b),
    ))
}

fn files_of(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .expect("directory")
        .map(|e| {
            let p = e.expect("entry").path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).expect("file"),
            )
        })
        .collect()
}

fn determinism() -> semvos::Result<(bool, String)> {
    let cfg = engine_config();
    let data: Vec<Sequence> = (0..4).map(|s| synthetic(Motion::Linear, s)).collect();
    let probe = synthetic(Motion::Bounce, 77);
    let tmp = tempfile::tempdir().map_err(|e| semvos::Error::State(e.to_string()))?;
    let mut outputs = Vec::new();
    for run in 0..2 {
        let mut model = Model::new(cfg.model_config(), cfg.seed)?;
        let losses = train(&mut model, &cfg, &data, 20, None)?;
        let dir = tmp.path().join(format!("run{run}"));
        let out = run_sequence(&model, &cfg, &probe)?;
        write_predictions(&dir, &probe.stems, &out.masks)?;
        let report = out.report.expect("ground truth").to_json();
        outputs.push((
            model.to_checkpoint().to_bytes(),
            losses,
            files_of(&dir),
            report,
        ));
    }
    let same = outputs[0] == outputs[1];
    Ok((
        same,
        format!(
            "two train+run passes: checkpoints, losses, {} mask files and reports {}",
            outputs[0].2.len(),
            if same { "bit-identical" } else { "differ" }
        ),
    ))
}

fn fusion_identities(model: Option<&Model>) -> semvos::Result<(bool, String)> {
    let model = model.ok_or_else(|| semvos::Error::State("no trained model".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    for k in 1..=5 {
        let raw: Vec<Tensor> = (0..3)
            .map(|_| Tensor::from_fn(&[9, 7], |_| rng.random_range(0.0..1.0)))
            .collect();
        let map = decoder::soft_aggregate(&raw)?.reshape(&[4, 9, 7])?;
        let fused = fuse_scales(&vec![map.clone(); k])?;
        worst = worst.max(fused.max_abs_diff(&map));
    }
    let seq = synthetic(Motion::Bounce, 99);
    let single = EngineConfig {
        scales: vec![1.0],
        flip_fusion: false,
        ..engine_config()
    };
    let dup = EngineConfig {
        scales: vec![1.0, 1.0],
        ..single.clone()
    };
    let equal = run_sequence(model, &single, &seq)? == run_sequence(model, &dup, &seq)?;
    Ok((
        worst <= FUSE_TOL && equal,
        format!(
            "k identical maps deviate by {worst:.1e} (tol {FUSE_TOL:e}); scales [1,1] vs [1] {}",
            if equal { "bit-identical" } else { "differ" }
        ),
    ))
}

fn main() -> ExitCode {
    let mut results = vec![
        outcome("metric oracle equivalence", metric_oracles()),
        outcome("deformable attention oracle", deform_oracle()),
        outcome("gradient verification", gradient_checks()),
        outcome("memory policy", memory_policy()),
        outcome("discriminative selection", selection()),
    ];
    let mut model = None;
    results.push(outcome("end-to-end learning", end_to_end(&mut model)));
    results.push(outcome("query update ablation", ablation(model.as_ref())));
    results.push(outcome("determinism", determinism()));
    results.push(outcome(
        "fusion identities",
        fusion_identities(model.as_ref()),
    ));
    let failed: Vec<&str> = results.iter().filter(|o| !o.pass).map(|o| o.name).collect();
    println!(
        "{} of {} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
