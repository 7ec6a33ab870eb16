//! Reverse-mode tape over the fixed kernel set.
//!
//! Model code records operations on a [`Tape`] and gets [`Var`] handles
//! back. Each operation owns a hand-written backward rule; there is no
//! generic closure taping.

use std::cell::Cell;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

thread_local! {
    static BACKWARD_FAULT: Cell<bool> = const { Cell::new(false) };
}

/// Mutation-test hook: when enabled, the matmul backward rule flips the sign
/// of its left-operand gradient. Gradient checks must catch this. The flag
/// is per thread.
pub fn set_backward_fault(enabled: bool) {
    BACKWARD_FAULT.with(|f| f.set(enabled));
}

pub fn backward_fault_enabled() -> bool {
    BACKWARD_FAULT.with(Cell::get)
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sampling layout for [`Tape::deform_sample`].
#[derive(Clone, Debug)]
pub struct DeformLayout {
    /// `(height, width)` of each value level.
    pub level_dims: Vec<(usize, usize)>,
    pub heads: usize,
    pub points: usize,
    /// Normalized `(x, y)` anchor of each query.
    pub refs: Vec<(f64, f64)>,
}

impl DeformLayout {
    fn slots(&self) -> usize {
        self.heads * self.level_dims.len() * self.points
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow {
        x: Var,
        row: Var,
    },
    MulCol {
        x: Var,
        col: Var,
    },
    Transpose {
        a: Var,
        rows: usize,
        cols: usize,
    },
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols {
        parts: Vec<Var>,
        widths: Vec<usize>,
    },
    SliceRows {
        a: Var,
        start: usize,
    },
    SliceCols {
        a: Var,
        start: usize,
        cols: usize,
    },
    Softmax {
        a: Var,
        cols: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Resize {
        x: Var,
        c: usize,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    },
    MeanRows {
        a: Var,
        rows: usize,
    },
    WeightedRowSum {
        a: Var,
        weights: Vec<f64>,
    },
    GatherRows {
        a: Var,
        idx: Vec<usize>,
    },
    NegSqDist {
        q: Var,
        m: Var,
        nq: usize,
        nm: usize,
        c: usize,
    },
    DeformSample {
        values: Vec<Var>,
        offsets: Var,
        attn: Var,
        layout: DeformLayout,
    },
    SoftAggregate {
        probs: Vec<Var>,
        eps: f64,
    },
    PointNll {
        agg: Var,
        targets: Vec<(usize, usize)>,
        plane: usize,
    },
    Dot {
        a: Var,
        weights: Vec<f64>,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only computation record.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::dim(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn add_into(dst: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match dst {
        Some(d) => d.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *dst = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. It receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let s = self.shape(v);
        match s.len() {
            0 => (1, 1),
            1 => (1, s[0]),
            _ => (s[0], s[1..].iter().product()),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a), out)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a), out)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out: Vec<f64> = self.data(a).iter().map(|x| x * s).collect();
        let t = Tensor::new(self.shape(a), out).expect("same shape");
        self.push(t, Op::Scale(a, s), &[a])
    }

    /// `x[m×n] + row[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.rows_cols(x);
        if self.value(row).numel() != n {
            return Err(shape_err("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.data(row);
        let mut out = self.data(x).to_vec();
        for chunk in out.chunks_exact_mut(n) {
            chunk.iter_mut().zip(r).for_each(|(a, b)| *a += b);
        }
        debug_assert_eq!(out.len(), m * n);
        let t = Tensor::new(self.shape(x), out)?;
        Ok(self.push(t, Op::AddRow { x, row }, &[x, row]))
    }

    /// `x[m×n] ⊙ col[m]` broadcast over columns.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (m, n) = self.rows_cols(x);
        if self.value(col).numel() != m {
            return Err(shape_err("mul_col", self.shape(x), self.shape(col)));
        }
        let c = self.data(col);
        let mut out = self.data(x).to_vec();
        for (chunk, &s) in out.chunks_exact_mut(n).zip(c) {
            chunk.iter_mut().for_each(|a| *a *= s);
        }
        let t = Tensor::new(self.shape(x), out)?;
        Ok(self.push(t, Op::MulCol { x, col }, &[x, col]))
    }

    /// Transpose of `a` viewed as `[dim0, rest]`.
    pub fn transpose(&mut self, a: Var) -> Var {
        let (rows, cols) = self.rows_cols(a);
        let out = kernels::transpose(self.data(a), rows, cols);
        let t = Tensor::new(&[cols, rows], out).expect("same numel");
        self.push(t, Op::Transpose { a, rows, cols }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self
            .value(a)
            .clone()
            .with_requires_grad(false)
            .reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Concatenation along the first dimension; trailing dims must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat of nothing"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(shape_err("concat_rows", self.shape(*first), s));
            }
            rows += s[0];
            out.extend_from_slice(self.data(p));
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Concatenation of 2-D tensors along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat of nothing"))?;
        let rows = self.rows_cols(*first).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if r != rows {
                return Err(shape_err("concat_cols", self.shape(*first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let d = self.data(p);
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&d[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let t = Tensor::new(&[rows, total], out)?;
        Ok(self.push(
            t,
            Op::ConcatCols {
                parts: parts.to_vec(),
                widths,
            },
            parts,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a).slice_rows(start, len)?;
        Ok(self.push(t, Op::SliceRows { a, start }, &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.rows_cols(a);
        if start + len > cols {
            return Err(Error::dim(format!(
                "columns {start}..{} of {cols}",
                start + len
            )));
        }
        let d = self.data(a);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&d[r * cols + start..r * cols + start + len]);
        }
        let t = Tensor::new(&[rows, len], out)?;
        Ok(self.push(t, Op::SliceCols { a, start, cols }, &[a]))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let cols = *self
            .shape(a)
            .last()
            .ok_or_else(|| Error::dim("softmax of a scalar"))?;
        if cols == 0 {
            return Err(Error::dim("softmax over an empty axis"));
        }
        let mut out = self.data(a).to_vec();
        kernels::softmax_rows(&mut out, cols);
        let t = Tensor::new(self.shape(a), out)?;
        Ok(self.push(t, Op::Softmax { a, cols }, &[a]))
    }

    /// Layer norm over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = *self
            .shape(x)
            .last()
            .ok_or_else(|| Error::dim("layer_norm of a scalar"))?;
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let (out, xhat, inv_std) =
            kernels::layer_norm_rows(self.data(x), self.data(gamma), self.data(beta), eps);
        let t = Tensor::new(self.shape(x), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.data(a).iter().map(|&v| kernels::gelu(v)).collect();
        let t = Tensor::new(self.shape(a), out).expect("same shape");
        self.push(t, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.data(a).iter().map(|&v| kernels::sigmoid(v)).collect();
        let t = Tensor::new(self.shape(a), out).expect("same shape");
        self.push(t, Op::Sigmoid(a), &[a])
    }

    /// 2-D convolution of `x[cin×h×w]` with `w[cout×cin×k×k]` and bias `b[cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] {
            return Err(shape_err("conv2d", sx, sw));
        }
        if self.value(b).numel() != sw[0] {
            return Err(shape_err("conv2d bias", sw, self.shape(b)));
        }
        let geom = ConvGeom {
            cin: sx[0],
            h: sx[1],
            w: sx[2],
            cout: sw[0],
            k: sw[2],
            stride,
            pad,
        };
        if geom.h + 2 * pad < geom.k || geom.w + 2 * pad < geom.k {
            return Err(shape_err("conv2d (input smaller than kernel)", sx, sw));
        }
        let out = kernels::conv2d(self.data(x), self.data(w), self.data(b), &geom);
        let t = Tensor::new(&[geom.cout, geom.out_h(), geom.out_w()], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, &[x, w, b]))
    }

    /// Bilinear resize of `x[c×h×w]` to spatial size `(oh, ow)`.
    pub fn resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::dim(format!("resize expects c×h×w, got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let out = kernels::resize_bilinear(self.data(x), c, h, w, oh, ow);
        let t = Tensor::new(&[c, oh, ow], out)?;
        Ok(self.push(t, Op::Resize { x, c, h, w, oh, ow }, &[x]))
    }

    /// Per-column mean of `a[rows×cols]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.rows_cols(a);
        if rows == 0 || self.shape(a).len() != 2 {
            return Err(Error::dim("mean over zero rows"));
        }
        let mut out = vec![0.0; cols];
        for r in self.data(a).chunks_exact(cols) {
            out.iter_mut().zip(r).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        let t = Tensor::new(&[cols], out)?;
        Ok(self.push(t, Op::MeanRows { a, rows }, &[a]))
    }

    /// `Σ_r weights[r] · a[r, :]` with constant weights.
    pub fn weighted_row_sum(&mut self, a: Var, weights: Vec<f64>) -> Result<Var> {
        let (rows, cols) = self.rows_cols(a);
        if weights.len() != rows {
            return Err(Error::dim(format!(
                "{} weights for {rows} rows",
                weights.len()
            )));
        }
        let mut out = vec![0.0; cols];
        for (r, &wt) in self.data(a).chunks_exact(cols).zip(&weights) {
            out.iter_mut().zip(r).for_each(|(o, v)| *o += wt * v);
        }
        let t = Tensor::new(&[cols], out)?;
        Ok(self.push(t, Op::WeightedRowSum { a, weights }, &[a]))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let (rows, cols) = self.rows_cols(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::dim(format!("row {bad} out of {rows}")));
        }
        let d = self.data(a);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in &idx {
            out.extend_from_slice(&d[i * cols..(i + 1) * cols]);
        }
        let t = Tensor::new(&[idx.len(), cols], out)?;
        Ok(self.push(t, Op::GatherRows { a, idx }, &[a]))
    }

    /// `out[i][j] = −‖q_i − m_j‖²` for `q[nq×c]`, `m[nm×c]`.
    pub fn neg_sq_dist(&mut self, q: Var, m: Var) -> Result<Var> {
        let (nq, c) = self.rows_cols(q);
        let (nm, c2) = self.rows_cols(m);
        if c != c2 {
            return Err(shape_err("neg_sq_dist", self.shape(q), self.shape(m)));
        }
        let qd = self.data(q);
        let md = self.data(m);
        let mut out = kernels::matmul_a_bt(qd, md, nq, c, nm);
        let qn: Vec<f64> = qd
            .chunks_exact(c)
            .map(|r| r.iter().map(|v| v * v).sum())
            .collect();
        let mn: Vec<f64> = md
            .chunks_exact(c)
            .map(|r| r.iter().map(|v| v * v).sum())
            .collect();
        for i in 0..nq {
            for j in 0..nm {
                let v = 2.0 * out[i * nm + j] - qn[i] - mn[j];
                out[i * nm + j] = v.min(0.0);
            }
        }
        let t = Tensor::new(&[nq, nm], out)?;
        Ok(self.push(t, Op::NegSqDist { q, m, nq, nm, c }, &[q, m]))
    }

    /// Multi-scale deformable sampling.
    ///
    /// `values[l]` is `[h_l·w_l × c]`, `offsets` is `[q × heads·levels·points·2]`
    /// in level pixels, `attn` is `[q × heads·levels·points]` (already
    /// normalized). Query `i` samples level `l` at
    /// `(ref_x·w_l − 0.5 + dx, ref_y·h_l − 0.5 + dy)`; head `h` reads channels
    /// `h·c/heads .. (h+1)·c/heads`. Output is `[q × c]`.
    pub fn deform_sample(
        &mut self,
        values: &[Var],
        offsets: Var,
        attn: Var,
        layout: DeformLayout,
    ) -> Result<Var> {
        let levels = layout.level_dims.len();
        if values.len() != levels || levels == 0 {
            return Err(Error::dim("one value map per level required"));
        }
        let c = self.rows_cols(values[0]).1;
        if layout.heads == 0 || !c.is_multiple_of(layout.heads) {
            return Err(Error::dim(format!(
                "{c} channels over {} heads",
                layout.heads
            )));
        }
        for (l, &v) in values.iter().enumerate() {
            let (h, w) = layout.level_dims[l];
            if self.rows_cols(v) != (h * w, c) {
                return Err(Error::dim(format!(
                    "level {l} values {:?} do not match {h}×{w}×{c}",
                    self.shape(v)
                )));
            }
        }
        let q = layout.refs.len();
        let slots = layout.slots();
        if self.rows_cols(offsets) != (q, slots * 2) || self.rows_cols(attn) != (q, slots) {
            return Err(Error::dim(format!(
                "offsets {:?} / attention {:?} do not match {q} queries × {slots} slots",
                self.shape(offsets),
                self.shape(attn)
            )));
        }
        let vals: Vec<&[f64]> = values.iter().map(|&v| self.data(v)).collect();
        let out = deform_forward(&vals, self.data(offsets), self.data(attn), &layout, c);
        let t = Tensor::new(&[q, c], out)?;
        let mut parents = values.to_vec();
        parents.extend([offsets, attn]);
        Ok(self.push(
            t,
            Op::DeformSample {
                values: values.to_vec(),
                offsets,
                attn,
                layout,
            },
            &parents,
        ))
    }

    /// Odds-renormalized multi-object aggregation; output `[(n+1) × plane...]`
    /// with the background at label 0.
    pub fn soft_aggregate(&mut self, probs: &[Var], eps: f64) -> Result<Var> {
        let first = *probs
            .first()
            .ok_or_else(|| Error::dim("no objects to aggregate"))?;
        let shape = self.shape(first).to_vec();
        if probs.iter().any(|&p| self.shape(p) != shape.as_slice()) {
            return Err(Error::dim("object probability maps differ in shape"));
        }
        let pd: Vec<&[f64]> = probs.iter().map(|&p| self.data(p)).collect();
        let out = soft_aggregate_forward(&pd, eps);
        let mut out_shape = vec![probs.len() + 1];
        out_shape.extend_from_slice(&shape);
        let t = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            t,
            Op::SoftAggregate {
                probs: probs.to_vec(),
                eps,
            },
            probs,
        ))
    }

    /// Mean negative log-likelihood of `(label, pixel)` targets in an
    /// aggregated distribution `[(n+1) × plane]`.
    pub fn point_nll(&mut self, agg: Var, targets: Vec<(usize, usize)>) -> Result<Var> {
        let s = self.shape(agg);
        let labels = s[0];
        let plane: usize = s[1..].iter().product();
        if targets.is_empty() {
            return Err(Error::dim("no supervision points"));
        }
        if let Some(t) = targets.iter().find(|(l, p)| *l >= labels || *p >= plane) {
            return Err(Error::dim(format!("target {t:?} outside {s:?}")));
        }
        let d = self.data(agg);
        let k = targets.len() as f64;
        let loss = -targets
            .iter()
            .map(|&(l, p)| d[l * plane + p].ln())
            .sum::<f64>()
            / k;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::PointNll {
                agg,
                targets,
                plane,
            },
            &[agg],
        ))
    }

    /// `Σ a ⊙ weights` with constant weights.
    pub fn dot_const(&mut self, a: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.value(a).numel() {
            return Err(Error::dim("dot_const weight length"));
        }
        let s = self.data(a).iter().zip(&weights).map(|(x, w)| x * w).sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot { a, weights }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Gradient of the last backward pass at `v`, if it received one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Clears gradients so that [`Tape::backward`] may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    /// Back-propagates from the scalar `loss`, accumulating into every
    /// gradient-requiring leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward called twice without zero_grad".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let fault = backward_fault_enabled();
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads, fault);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(&grads) {
            if let (Op::Leaf, Some(g)) = (&node.op, g) {
                if node.value.requires_grad() {
                    node.value.accumulate_grad(g)?;
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>], fault: bool) {
        let node = &self.nodes[i];
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        let send = |grads: &mut [Option<Vec<f64>>], v: Var, gv: Vec<f64>| {
            if self.nodes[v.0].needs_grad {
                add_into(&mut grads[v.0], gv);
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if ng(a) {
                    let mut da = kernels::matmul_a_bt(g, self.data(b), m, n, k);
                    if fault {
                        da.iter_mut().for_each(|v| *v = -*v);
                    }
                    send(grads, a, da);
                }
                if ng(b) {
                    send(grads, b, kernels::matmul_at_b(self.data(a), g, m, k, n));
                }
            }
            &Op::Add(a, b) => {
                send(grads, a, g.to_vec());
                send(grads, b, g.to_vec());
            }
            &Op::Mul(a, b) => {
                if ng(a) {
                    send(
                        grads,
                        a,
                        g.iter().zip(self.data(b)).map(|(x, y)| x * y).collect(),
                    );
                }
                if ng(b) {
                    send(
                        grads,
                        b,
                        g.iter().zip(self.data(a)).map(|(x, y)| x * y).collect(),
                    );
                }
            }
            &Op::Scale(a, s) => send(grads, a, g.iter().map(|v| v * s).collect()),
            &Op::AddRow { x, row } => {
                send(grads, x, g.to_vec());
                if ng(row) {
                    let n = self.value(row).numel();
                    let mut dr = vec![0.0; n];
                    for chunk in g.chunks_exact(n) {
                        dr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                    send(grads, row, dr);
                }
            }
            &Op::MulCol { x, col } => {
                let m = self.value(col).numel();
                let n = g.len() / m;
                if ng(x) {
                    let mut dx = g.to_vec();
                    for (chunk, &s) in dx.chunks_exact_mut(n).zip(self.data(col)) {
                        chunk.iter_mut().for_each(|a| *a *= s);
                    }
                    send(grads, x, dx);
                }
                if ng(col) {
                    let dc = g
                        .chunks_exact(n)
                        .zip(self.data(x).chunks_exact(n))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    send(grads, col, dc);
                }
            }
            &Op::Transpose { a, rows, cols } => {
                send(grads, a, kernels::transpose(g, cols, rows));
            }
            &Op::Reshape(a) => send(grads, a, g.to_vec()),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    send(grads, p, g[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::ConcatCols { parts, widths } => {
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if ng(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        send(grads, p, d);
                    }
                    off += w;
                }
            }
            &Op::SliceRows { a, start } => {
                let src = self.value(a);
                let width = src.numel() / src.dim(0).max(1);
                let mut d = vec![0.0; src.numel()];
                d[start * width..start * width + g.len()].copy_from_slice(g);
                send(grads, a, d);
            }
            &Op::SliceCols { a, start, cols } => {
                let len = node.value.dim(1);
                let rows = node.value.dim(0);
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                send(grads, a, d);
            }
            &Op::Softmax { a, cols } => {
                send(
                    grads,
                    a,
                    kernels::softmax_rows_backward(node.value.data(), g, cols),
                );
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (dx, dg, db) =
                    kernels::layer_norm_rows_backward(g, xhat, inv_std, self.data(*gamma));
                send(grads, *x, dx);
                send(grads, *gamma, dg);
                send(grads, *beta, db);
            }
            &Op::Gelu(a) => send(
                grads,
                a,
                g.iter()
                    .zip(self.data(a))
                    .map(|(gv, &x)| gv * kernels::gelu_grad(x))
                    .collect(),
            ),
            &Op::Sigmoid(a) => send(
                grads,
                a,
                g.iter()
                    .zip(node.value.data())
                    .map(|(gv, &y)| gv * y * (1.0 - y))
                    .collect(),
            ),
            &Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(self.data(x), self.data(w), g, &geom);
                send(grads, x, dx);
                send(grads, w, dw);
                send(grads, b, db);
            }
            &Op::Resize { x, c, h, w, oh, ow } => {
                send(
                    grads,
                    x,
                    kernels::resize_bilinear_backward(g, c, h, w, oh, ow),
                );
            }
            &Op::MeanRows { a, rows } => {
                let inv = 1.0 / rows as f64;
                let mut d = Vec::with_capacity(rows * g.len());
                for _ in 0..rows {
                    d.extend(g.iter().map(|v| v * inv));
                }
                send(grads, a, d);
            }
            Op::WeightedRowSum { a, weights } => {
                let mut d = Vec::with_capacity(weights.len() * g.len());
                for &wt in weights {
                    d.extend(g.iter().map(|v| v * wt));
                }
                send(grads, *a, d);
            }
            Op::GatherRows { a, idx } => {
                let cols = node.value.dim(1);
                let mut d = vec![0.0; self.value(*a).numel()];
                for (k, &r) in idx.iter().enumerate() {
                    d[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(&g[k * cols..(k + 1) * cols])
                        .for_each(|(a, b)| *a += b);
                }
                send(grads, *a, d);
            }
            &Op::NegSqDist { q, m, nq, nm, c } => {
                // d/dq_i = -2 (rowsum_i q_i - Σ_j g_ij m_j), symmetric for m.
                let qd = self.data(q);
                let md = self.data(m);
                if ng(q) {
                    let gm = kernels::matmul(g, md, nq, nm, c);
                    let mut dq = vec![0.0; nq * c];
                    for i in 0..nq {
                        let rs: f64 = g[i * nm..(i + 1) * nm].iter().sum();
                        for t in 0..c {
                            dq[i * c + t] = -2.0 * (rs * qd[i * c + t] - gm[i * c + t]);
                        }
                    }
                    send(grads, q, dq);
                }
                if ng(m) {
                    let gq = kernels::matmul_at_b(g, qd, nq, nm, c);
                    let mut cs = vec![0.0; nm];
                    for row in g.chunks_exact(nm) {
                        cs.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    let mut dm = vec![0.0; nm * c];
                    for j in 0..nm {
                        for t in 0..c {
                            dm[j * c + t] = -2.0 * (cs[j] * md[j * c + t] - gq[j * c + t]);
                        }
                    }
                    send(grads, m, dm);
                }
            }
            Op::DeformSample {
                values,
                offsets,
                attn,
                layout,
            } => {
                let vals: Vec<&[f64]> = values.iter().map(|&v| self.data(v)).collect();
                let c = node.value.dim(1);
                let (dv, doff, da) =
                    deform_backward(&vals, self.data(*offsets), self.data(*attn), layout, c, g);
                for (&v, d) in values.iter().zip(dv) {
                    send(grads, v, d);
                }
                send(grads, *offsets, doff);
                send(grads, *attn, da);
            }
            Op::SoftAggregate { probs, eps } => {
                let pd: Vec<&[f64]> = probs.iter().map(|&p| self.data(p)).collect();
                let dps = soft_aggregate_backward(&pd, node.value.data(), g, *eps);
                for (&p, d) in probs.iter().zip(dps) {
                    send(grads, p, d);
                }
            }
            Op::PointNll {
                agg,
                targets,
                plane,
            } => {
                let d = self.data(*agg);
                let k = targets.len() as f64;
                let mut da = vec![0.0; d.len()];
                for &(l, p) in targets {
                    let idx = l * plane + p;
                    da[idx] -= g[0] / (k * d[idx]);
                }
                send(grads, *agg, da);
            }
            Op::Dot { a, weights } => send(grads, *a, weights.iter().map(|w| w * g[0]).collect()),
            &Op::Sum(a) => send(grads, a, vec![g[0]; self.value(a).numel()]),
        }
    }
}

/// Pixel-space sampling coordinate for query `qi`, slot `(h, l, p)`.
#[inline]
fn deform_coord(
    layout: &DeformLayout,
    offsets: &[f64],
    qi: usize,
    slot: usize,
    l: usize,
) -> (f64, f64) {
    let (h, w) = layout.level_dims[l];
    let (rx, ry) = layout.refs[qi];
    let base = (qi * layout.slots() + slot) * 2;
    (
        rx * w as f64 - 0.5 + offsets[base],
        ry * h as f64 - 0.5 + offsets[base + 1],
    )
}

fn deform_forward(
    vals: &[&[f64]],
    offsets: &[f64],
    attn: &[f64],
    layout: &DeformLayout,
    c: usize,
) -> Vec<f64> {
    let levels = layout.level_dims.len();
    let dh = c / layout.heads;
    let slots = layout.slots();
    let q = layout.refs.len();
    let mut out = vec![0.0; q * c];
    for qi in 0..q {
        for h in 0..layout.heads {
            let orow = &mut out[qi * c + h * dh..qi * c + (h + 1) * dh];
            for l in 0..levels {
                let (lh, lw) = layout.level_dims[l];
                for p in 0..layout.points {
                    let slot = (h * levels + l) * layout.points + p;
                    let a = attn[qi * slots + slot];
                    let (x, y) = deform_coord(layout, offsets, qi, slot, l);
                    let taps = kernels::bilinear_taps(x, y, lw, lh);
                    for t in 0..4 {
                        let wt = a * taps.weight[t];
                        let vrow =
                            &vals[l][taps.index[t] * c + h * dh..taps.index[t] * c + (h + 1) * dh];
                        orow.iter_mut().zip(vrow).for_each(|(o, v)| *o += wt * v);
                    }
                }
            }
        }
    }
    out
}

type DeformGrads = (Vec<Vec<f64>>, Vec<f64>, Vec<f64>);

fn deform_backward(
    vals: &[&[f64]],
    offsets: &[f64],
    attn: &[f64],
    layout: &DeformLayout,
    c: usize,
    g: &[f64],
) -> DeformGrads {
    let levels = layout.level_dims.len();
    let dh = c / layout.heads;
    let slots = layout.slots();
    let q = layout.refs.len();
    let mut dv: Vec<Vec<f64>> = vals.iter().map(|v| vec![0.0; v.len()]).collect();
    let mut doff = vec![0.0; offsets.len()];
    let mut da = vec![0.0; attn.len()];
    for qi in 0..q {
        for h in 0..layout.heads {
            let grow = &g[qi * c + h * dh..qi * c + (h + 1) * dh];
            for l in 0..levels {
                let (lh, lw) = layout.level_dims[l];
                for p in 0..layout.points {
                    let slot = (h * levels + l) * layout.points + p;
                    let a = attn[qi * slots + slot];
                    let (x, y) = deform_coord(layout, offsets, qi, slot, l);
                    let taps = kernels::bilinear_taps(x, y, lw, lh);
                    let mut s = [0.0; 4];
                    for t in 0..4 {
                        let lo = taps.index[t] * c + h * dh;
                        let vrow = &vals[l][lo..lo + dh];
                        s[t] = vrow.iter().zip(grow).map(|(v, gv)| v * gv).sum();
                        let wt = a * taps.weight[t];
                        dv[l][lo..lo + dh]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(d, gv)| *d += wt * gv);
                    }
                    let mut d_a = 0.0;
                    let mut dx = 0.0;
                    let mut dy = 0.0;
                    for t in 0..4 {
                        d_a += taps.weight[t] * s[t];
                        dx += taps.dweight_dx[t] * s[t];
                        dy += taps.dweight_dy[t] * s[t];
                    }
                    da[qi * slots + slot] += d_a;
                    let base = (qi * slots + slot) * 2;
                    doff[base] += a * dx;
                    doff[base + 1] += a * dy;
                }
            }
        }
    }
    (dv, doff, da)
}

fn clamp_with_mask(p: f64, eps: f64) -> (f64, bool) {
    if p < eps {
        (eps, false)
    } else if p > 1.0 - eps {
        (1.0 - eps, false)
    } else {
        (p, true)
    }
}

/// Forward of the odds-renormalized aggregation, shared with the eager path.
pub(crate) fn soft_aggregate_forward(probs: &[&[f64]], eps: f64) -> Vec<f64> {
    let n = probs.len();
    let plane = probs[0].len();
    let mut out = vec![0.0; (n + 1) * plane];
    let mut odds = vec![0.0; n + 1];
    for px in 0..plane {
        let mut bg = 1.0;
        for (i, p) in probs.iter().enumerate() {
            let (pc, _) = clamp_with_mask(p[px], eps);
            bg *= 1.0 - pc;
            odds[i + 1] = pc / (1.0 - pc);
        }
        let (bgc, _) = clamp_with_mask(bg, eps);
        odds[0] = bgc / (1.0 - bgc);
        let total: f64 = odds.iter().sum();
        for (j, o) in odds.iter().enumerate() {
            out[j * plane + px] = o / total;
        }
    }
    out
}

fn soft_aggregate_backward(probs: &[&[f64]], out: &[f64], g: &[f64], eps: f64) -> Vec<Vec<f64>> {
    let n = probs.len();
    let plane = probs[0].len();
    let mut dps = vec![vec![0.0; plane]; n];
    let mut pc = vec![0.0; n];
    let mut live = vec![false; n];
    let mut odds = vec![0.0; n + 1];
    for px in 0..plane {
        let mut bg = 1.0;
        for (i, p) in probs.iter().enumerate() {
            let (c, l) = clamp_with_mask(p[px], eps);
            pc[i] = c;
            live[i] = l;
            bg *= 1.0 - c;
            odds[i + 1] = c / (1.0 - c);
        }
        let (bgc, bg_live) = clamp_with_mask(bg, eps);
        odds[0] = bgc / (1.0 - bgc);
        let total: f64 = odds.iter().sum();
        // dL/do_k = (g_k - Σ_j g_j out_j) / total
        let mix: f64 = (0..=n)
            .map(|j| g[j * plane + px] * out[j * plane + px])
            .sum();
        let d_odds = |k: usize| (g[k * plane + px] - mix) / total;
        let d_bg = if bg_live {
            d_odds(0) / ((1.0 - bgc) * (1.0 - bgc))
        } else {
            0.0
        };
        for i in 0..n {
            if !live[i] {
                continue;
            }
            let others: f64 = (0..n).filter(|&j| j != i).map(|j| 1.0 - pc[j]).product();
            let direct = d_odds(i + 1) / ((1.0 - pc[i]) * (1.0 - pc[i]));
            dps[i][px] = direct - d_bg * others;
        }
    }
    dps
}
