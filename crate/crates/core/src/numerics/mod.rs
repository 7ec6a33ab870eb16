//! Dense tensor kernels, a reverse-mode tape with hand-written backward
//! rules, a central-difference gradient checker, and the binary tensor
//! format.

mod format;
mod gradcheck;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use format::{read_tensor, write_tensor, Checkpoint, TENSOR_MAGIC, TENSOR_VERSION};
pub use gradcheck::{finite_diff_check, GradCheck, GRAD_FLOOR};
pub use params::{Graph, ParamStore};
pub(crate) use tape::soft_aggregate_forward;
pub use tape::{backward_fault_enabled, set_backward_fault, DeformLayout, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::dim(format!(
            "matmul: inner dimensions disagree for {sa:?} × {sb:?}"
        )));
    }
    Tensor::new(
        &[sa[0], sb[1]],
        kernels::matmul(a.data(), b.data(), sa[0], sa[1], sb[1]),
    )
}

/// Max-shifted softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::dim(format!("axis {axis} for shape {shape:?}")));
    }
    let n = shape[axis];
    if n == 0 {
        return Err(Error::dim("softmax over an empty axis"));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = x.data().to_vec();
    let mut buf = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = out[at(j)];
            }
            kernels::softmax_rows(&mut buf, n);
            for (j, &b) in buf.iter().enumerate() {
                out[at(j)] = b;
            }
        }
    }
    Tensor::new(shape, out)
}

/// `gamma ⊙ (x − mean) / sqrt(var + eps) + beta` over the last axis.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let n = *x
        .shape()
        .last()
        .ok_or_else(|| Error::dim("layer_norm of a scalar"))?;
    if n == 0 || gamma.numel() != n || beta.numel() != n {
        return Err(Error::dim(format!(
            "layer_norm: x {:?}, gamma {:?}, beta {:?}",
            x.shape(),
            gamma.shape(),
            beta.shape()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::Config("layer_norm eps must be positive".into()));
    }
    let (out, _, _) = kernels::layer_norm_rows(x.data(), gamma.data(), beta.data(), eps);
    Tensor::new(x.shape(), out)
}

/// Per-channel bilinear lookup in `map[C×H×W]` at continuous pixel
/// coordinates, clamped to the map's extent.
pub fn bilinear_sample(map: &Tensor, x: f64, y: f64) -> Result<Tensor> {
    let s = map.shape();
    if s.len() != 3 || s.contains(&0) {
        return Err(Error::dim(format!(
            "bilinear_sample expects nonempty C×H×W, got {s:?}"
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let taps = kernels::bilinear_taps(x, y, w, h);
    let out = (0..c)
        .map(|ch| {
            let plane = &map.data()[ch * h * w..(ch + 1) * h * w];
            (0..4).map(|t| taps.weight[t] * plane[taps.index[t]]).sum()
        })
        .collect();
    Tensor::new(&[c], out)
}

/// Per-channel mean over the rows of `tokens[N×C]`.
pub fn global_avg_pool(tokens: &Tensor) -> Result<Tensor> {
    let s = tokens.shape();
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::dim(format!(
            "global_avg_pool needs N≥1 tokens, got {s:?}"
        )));
    }
    let (n, c) = (s[0], s[1]);
    let mut out = vec![0.0; c];
    for row in tokens.data().chunks_exact(c) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    out.iter_mut().for_each(|o| *o /= n as f64);
    Tensor::new(&[c], out)
}
