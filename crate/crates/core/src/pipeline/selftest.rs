//! Built-in oracle suites: every check compares the engine against a slow,
//! independent reimplementation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::decoder::AGG_EPS;
use crate::error::Result;
use crate::fusion::{
    init_deform_weights, map_to_rows, ms_deform_attn_traced, reference_points, DeformParams,
};
use crate::memory::MemoryBank;
use crate::metrics::{boundary_f, default_tolerance, jaccard, BinaryMask};
use crate::numerics::{finite_diff_check, Graph, ParamStore, Tensor};
use crate::pipeline::model::{frame_features, object_logits, object_value, update_queries, Model};
use crate::queries::{discriminative_select, init_queries};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    /// Worst deviation from the oracle; 0 for exact-match suites that pass.
    pub max_error: f64,
    pub tolerance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelftestReport {
    pub passed: bool,
    pub suites: Vec<SuiteResult>,
}

struct Tally {
    cases: usize,
    max_error: f64,
    failure: Option<String>,
}

impl Tally {
    fn new() -> Self {
        Tally {
            cases: 0,
            max_error: 0.0,
            failure: None,
        }
    }

    fn record(&mut self, err: f64, tol: f64, what: impl FnOnce() -> String) {
        self.cases += 1;
        if err > self.max_error || err.is_nan() {
            self.max_error = err;
        }
        if !(err <= tol) && self.failure.is_none() {
            self.failure = Some(what());
        }
    }

    fn fail(&mut self, what: String) {
        self.cases += 1;
        self.failure.get_or_insert(what);
    }

    fn finish(self, name: &str, tolerance: f64) -> SuiteResult {
        SuiteResult {
            name: name.into(),
            passed: self.failure.is_none(),
            cases: self.cases,
            max_error: self.max_error,
            tolerance,
            failure: self.failure,
        }
    }
}

fn suite(name: &str, tol: f64, body: impl FnOnce(&mut Tally) -> Result<()>) -> SuiteResult {
    let mut t = Tally::new();
    if let Err(e) = body(&mut t) {
        t.fail(format!("error: {e}"));
    }
    t.finish(name, tol)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Sampled features of deformable attention, by direct enumeration of
/// bilinear tent weights over every texel.
fn dense_deform(
    store: &ParamStore,
    p: &DeformParams,
    q: &Tensor,
    maps: &[Tensor],
) -> Result<Vec<f64>> {
    let c = q.dim(1);
    let lin = |x: &[f64], rows: usize, name: &str| -> Result<Vec<f64>> {
        let w = store.get(&format!("{}.{name}.w", p.prefix))?;
        let b = store.get(&format!("{}.{name}.b", p.prefix))?;
        let (i, o) = (w.dim(0), w.dim(1));
        Ok((0..rows * o)
            .map(|k| {
                let (r, j) = (k / o, k % o);
                b.data()[j]
                    + (0..i)
                        .map(|t| x[r * i + t] * w.data()[t * o + j])
                        .sum::<f64>()
            })
            .collect())
    };
    let dims: Vec<(usize, usize)> = maps.iter().map(|m| (m.dim(1), m.dim(2))).collect();
    let refs = reference_points(&dims);
    let values = maps
        .iter()
        .map(|m| {
            let hw = m.dim(1) * m.dim(2);
            let rows: Vec<f64> = (0..hw * c)
                .map(|k| m.data()[(k % c) * hw + k / c])
                .collect();
            lin(&rows, hw, "value")
        })
        .collect::<Result<Vec<_>>>()?;
    let n = q.dim(0);
    let offsets = lin(q.data(), n, "offset")?;
    let logits = lin(q.data(), n, "attn")?;
    let per = p.levels * p.points;
    let dh = c / p.heads;
    let tent = |d: f64| (1.0 - d.abs()).max(0.0);
    let mut out = vec![0.0; n * c];
    for qi in 0..n {
        for h in 0..p.heads {
            let row = &logits[qi * p.slots() + h * per..qi * p.slots() + (h + 1) * per];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|l| (l - m).exp()).sum();
            for l in 0..p.levels {
                let (lh, lw) = dims[l];
                for k in 0..p.points {
                    let slot = (h * p.levels + l) * p.points + k;
                    let a = (logits[qi * p.slots() + slot] - m).exp() / z;
                    let x = (refs[qi].x * lw as f64 - 0.5 + offsets[qi * 2 * p.slots() + 2 * slot])
                        .clamp(0.0, (lw - 1) as f64);
                    let y = (refs[qi].y * lh as f64 - 0.5
                        + offsets[qi * 2 * p.slots() + 2 * slot + 1])
                        .clamp(0.0, (lh - 1) as f64);
                    for ty in 0..lh {
                        for tx in 0..lw {
                            let wt = a * tent(x - tx as f64) * tent(y - ty as f64);
                            for j in h * dh..(h + 1) * dh {
                                out[qi * c + j] += wt * values[l][(ty * lw + tx) * c + j];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn deform_suite(t: &mut Tally) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let c = 4;
    for heads in [1, 2] {
        for points in [1, 2, 4] {
            for levels in [1, 3] {
                let p = DeformParams {
                    heads,
                    points,
                    levels,
                    prefix: "d".into(),
                };
                let mut store = ParamStore::new();
                init_deform_weights(&mut store, &p, c, &mut rng);
                store.init_normal("d.offset.w", &[c, p.slots() * 2], 1.0, &mut rng);
                store.init_normal("d.attn.w", &[c, p.slots()], 1.0, &mut rng);
                let maps: Vec<Tensor> = (0..levels)
                    .map(|_| {
                        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
                        uniform(&mut rng, &[c, h, w], 1.0)
                    })
                    .collect();
                let dims: Vec<_> = maps.iter().map(|m| (m.dim(1), m.dim(2))).collect();
                let mut g = Graph::inference(&store);
                let vars: Vec<_> = maps.iter().map(|m| g.constant(m.clone())).collect();
                let rows = vars
                    .iter()
                    .map(|&v| map_to_rows(&mut g, v))
                    .collect::<Result<Vec<_>>>()?;
                let q = g.concat_rows(&rows)?;
                let (_, trace) =
                    ms_deform_attn_traced(&mut g, q, &reference_points(&dims), &vars, &p)?;
                let expect = dense_deform(&store, &p, g.value(q), &maps)?;
                let err = g
                    .value(trace.sampled)
                    .data()
                    .iter()
                    .zip(&expect)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                t.record(err, 1e-9, || {
                    format!("heads {heads}, points {points}, levels {levels}: {err:e}")
                });
            }
        }
    }
    Ok(())
}

/// Stored frames after a stream, by a plain list simulation of the policy.
fn policy_reference(
    cap: usize,
    interval: usize,
    targets: &[bool],
    usage: &[Vec<f64>],
) -> Vec<usize> {
    let mut bank: Vec<(usize, f64)> = Vec::new();
    for (now, &has) in targets.iter().enumerate() {
        if now == 0 || (now % interval == 0 && has) {
            bank.push((now, 0.0));
            if bank.len() - 1 > cap {
                let mut worst: Option<(usize, f64)> = None;
                for (i, &(f, u)) in bank.iter().enumerate().skip(1) {
                    if f == now {
                        continue;
                    }
                    let score = u / (now - f) as f64;
                    if worst.is_none_or(|(_, s)| score < s) {
                        worst = Some((i, score));
                    }
                }
                if let Some((i, _)) = worst {
                    bank.remove(i);
                }
            }
        }
        for (e, m) in bank.iter_mut().zip(&usage[now]) {
            e.1 += m;
        }
    }
    bank.iter().map(|e| e.0).collect()
}

fn memory_suite(t: &mut Tally) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let unit = || Tensor::zeros(&[1, 1, 1]);
    for stream in 0..200 {
        let cap = rng.random_range(1..=8);
        let interval = rng.random_range(1..=4);
        let p = rng.random_range(0.1..1.0);
        let targets: Vec<bool> = (0..100).map(|_| rng.random_bool(p)).collect();
        let mut bank = MemoryBank::new(cap, interval)?;
        let mut usage = Vec::with_capacity(100);
        let mut ok = true;
        for (now, &has) in targets.iter().enumerate() {
            if crate::memory::should_store(now, has, interval) {
                bank.store(unit(), unit(), now)?;
            }
            // coarse masses make exact usage ties common
            let mass: Vec<f64> = (0..bank.len())
                .map(|_| f64::from(rng.random_range(0..4u8)) * 0.25)
                .collect();
            bank.record_usage(&mass)?;
            usage.push(mass);
            ok &= bank.len() <= cap + 1
                && bank.entries()[0].frame_idx == 0
                && bank.entries()[0].permanent;
        }
        let expect = policy_reference(cap, interval, &targets, &usage);
        if !ok || bank.frame_indices() != expect {
            t.fail(format!(
                "stream {stream}: {:?} vs reference {expect:?}",
                bank.frame_indices()
            ));
        } else {
            t.record(0.0, 0.0, String::new);
        }
    }
    Ok(())
}

fn random_blobs(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let mut m = BinaryMask::empty(h, w);
    for _ in 0..rng.random_range(0..4) {
        let (x0, y0) = (rng.random_range(0..w), rng.random_range(0..h));
        let (x1, y1) = (rng.random_range(x0..w) + 1, rng.random_range(y0..h) + 1);
        for y in y0..y1 {
            for x in x0..x1 {
                m.data[y * w + x] = rng.random_bool(0.95);
            }
        }
    }
    m
}

fn brute_boundary_f(a: &BinaryMask, b: &BinaryMask, tol: f64) -> f64 {
    let edge = |m: &BinaryMask| -> Vec<(i64, i64)> {
        let (h, w) = (m.height as i64, m.width as i64);
        let on =
            |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h && m.data[(y * w + x) as usize];
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if on(x, y) && !(on(x - 1, y) && on(x + 1, y) && on(x, y - 1) && on(x, y + 1)) {
                    out.push((x, y));
                }
            }
        }
        out
    };
    let (pa, pb) = (edge(a), edge(b));
    match (pa.is_empty(), pb.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let t2 = tol * tol;
    let frac = |s: &[(i64, i64)], d: &[(i64, i64)]| {
        s.iter()
            .filter(|&&(x, y)| {
                d.iter()
                    .any(|&(u, v)| (((x - u).pow(2) + (y - v).pow(2)) as f64) <= t2)
            })
            .count() as f64
            / s.len() as f64
    };
    let (p, r) = (frac(&pa, &pb), frac(&pb, &pa));
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn metrics_suite(t: &mut Tally) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for case in 0..60 {
        let (h, w) = (rng.random_range(8..=32), rng.random_range(8..=32));
        let a = random_blobs(&mut rng, h, w);
        let b = random_blobs(&mut rng, h, w);
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
        let tol = default_tolerance(h, w);
        let jerr = (jaccard(&a, &b)? - j).abs();
        let ferr = (boundary_f(&a, &b, tol)? - brute_boundary_f(&a, &b, tol)).abs();
        let err = jerr.max(ferr);
        t.record(err, 1e-9, || {
            format!("pair {case}: J error {jerr:e}, F error {ferr:e}")
        });
    }
    Ok(())
}

fn selection_suite(t: &mut Tally) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for case in 0..300 {
        let (c, h, w) = (
            rng.random_range(1..=4),
            rng.random_range(1..=5),
            rng.random_range(1..=5),
        );
        // small integer features make exact ties frequent
        let feat = Tensor::from_fn(&[c, h, w], |_| f64::from(rng.random_range(-2..=2i8)));
        let q = Tensor::from_fn(&[c], |_| f64::from(rng.random_range(-2..=2i8)));
        let (pos, _) = discriminative_select(&q, &feat)?;
        let qn = q.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut best = (0, 0);
        let mut best_s = f64::NEG_INFINITY;
        for y in 0..h {
            for x in 0..w {
                let col: Vec<f64> = (0..c).map(|k| feat.at(&[k, y, x])).collect();
                let dot: f64 = col.iter().zip(q.data()).map(|(a, b)| a * b).sum();
                let n = col.iter().map(|v| v * v).sum::<f64>().sqrt() * qn;
                let s = if n == 0.0 { 0.0 } else { dot / n };
                if s > best_s {
                    best_s = s;
                    best = (x, y);
                }
            }
        }
        if pos != best {
            t.fail(format!("case {case}: selected {pos:?}, oracle {best:?}"));
        } else {
            t.record(0.0, 0.0, String::new);
        }
    }
    Ok(())
}

/// Gradient families, each identified by a parameter-name prefix on the
/// tiny model. `None` checks the loss head against its logits.
const GRAD_FAMILIES: [(&str, Option<&str>); 7] = [
    ("encoder", Some("encoder.")),
    ("semantic fusion", Some("fusion.semantic.")),
    ("deformable fusion", Some("fusion.deform.")),
    ("query update", Some("queries.update.")),
    ("query transformer", Some("queries.tf.")),
    ("decoder", Some("decoder.")),
    ("loss", None),
];

fn smallest_param(store: &ParamStore, prefix: &str) -> Option<String> {
    store
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .min_by_key(|(_, t)| t.numel())
        .map(|(n, _)| n.clone())
}

/// Two-frame forward of one object from frame 0 into a point loss on frame 1.
fn two_frame_loss(
    g: &mut Graph,
    model: &Model,
    frames: &[Tensor; 2],
    mask4: &[f64],
    points: &[(usize, usize)],
) -> Result<crate::numerics::Var> {
    let f0 = frame_features(g, &model.cfg, &frames[0])?;
    let zeros = vec![0.0; mask4.len()];
    let value = object_value(g, &f0, mask4, &zeros)?;
    let q = init_queries(g, f0.s4_rows, mask4)?;
    let q = update_queries(g, &f0, q, mask4, None)?.unwrap_or(q);
    let f1 = frame_features(g, &model.cfg, &frames[1])?;
    let size = (frames[1].dim(1), frames[1].dim(2));
    let out = object_logits(g, &f1, &[f0.key], &[value], q, size)?;
    let p = g.sigmoid(out.logits);
    let agg = g.soft_aggregate(&[p], AGG_EPS)?;
    g.point_nll(agg, points.to_vec())
}

fn gradient_suite(t: &mut Tally, instances: usize) -> Result<()> {
    let tol = 1e-6;
    for (family, prefix) in GRAD_FAMILIES {
        for seed in 0..instances as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let cfg = ModelConfig::tiny();
            let model = Model::new(cfg, seed)?;
            let side = 16;
            let plane = side * side;
            let points: Vec<(usize, usize)> = (0..24)
                .map(|_| (rng.random_range(0..2), rng.random_range(0..plane)))
                .collect();
            let r = match prefix {
                Some(prefix) => {
                    let frames = [
                        uniform(&mut rng, &[3, side, side], 0.5),
                        uniform(&mut rng, &[3, side, side], 0.5),
                    ];
                    let mask4: Vec<f64> = (0..(side / 4) * (side / 4))
                        .map(|_| rng.random_range(0.0..1.0))
                        .collect();
                    let name = smallest_param(&model.params, prefix).ok_or_else(|| {
                        crate::error::Error::Config(format!("no parameters under {prefix}"))
                    })?;
                    finite_diff_check(
                        |x, want| {
                            let mut store = model.params.clone();
                            store.insert(name.clone(), x.clone());
                            let probe = Model {
                                cfg: model.cfg.clone(),
                                params: store,
                            };
                            let mut g = Graph::new(&probe.params);
                            let loss = two_frame_loss(&mut g, &probe, &frames, &mask4, &points)?;
                            let v = g.value(loss).data()[0];
                            if !want {
                                return Ok((v, None));
                            }
                            g.backward(loss)?;
                            Ok((v, g.param_grads().remove(&name)))
                        },
                        model.params.get(&name)?,
                        1e-5,
                    )?
                }
                None => {
                    let x = uniform(&mut rng, &[2, plane], 3.0);
                    finite_diff_check(
                        |x, want| {
                            let mut g = Graph::new(&model.params);
                            let leaf = g.leaf(x.clone().with_requires_grad(true));
                            let mut probs = Vec::new();
                            for o in 0..2 {
                                let row = g.slice_rows(leaf, o, 1)?;
                                let row = g.reshape(row, &[plane])?;
                                probs.push(g.sigmoid(row));
                            }
                            let agg = g.soft_aggregate(&probs, AGG_EPS)?;
                            let targets = points.iter().map(|&(l, p)| (l.min(2), p)).collect();
                            let loss = g.point_nll(agg, targets)?;
                            let v = g.value(loss).data()[0];
                            if !want {
                                return Ok((v, None));
                            }
                            g.backward(loss)?;
                            Ok((v, g.grad(leaf).map(<[f64]>::to_vec)))
                        },
                        &x,
                        1e-5,
                    )?
                }
            };
            let err = r.max_rel_error;
            t.record(err, tol, || {
                format!(
                    "{family} (instance {seed}): relative error {err:e} at coordinate {}",
                    r.worst_index
                )
            });
        }
    }
    Ok(())
}

/// Runs every suite. `grad_instances` seeds are checked per gradient family.
pub fn run_selftest(grad_instances: usize) -> SelftestReport {
    let suites = vec![
        suite("deformable attention oracle", 1e-9, deform_suite),
        suite("memory policy simulation", 0.0, memory_suite),
        suite("metric oracles", 1e-9, metrics_suite),
        suite("discriminative selection", 0.0, selection_suite),
        suite("gradient checks", 1e-6, |t| {
            gradient_suite(t, grad_instances)
        }),
    ];
    SelftestReport {
        passed: suites.iter().all(|s| s.passed),
        suites,
    }
}
