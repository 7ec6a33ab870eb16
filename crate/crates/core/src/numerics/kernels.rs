//! Slice-level kernels shared by the eager functions and the tape.
//!
//! Everything here works on plain row-major `f64` slices with explicit sizes.
//! Shape validation happens one level up.

/// `c[m×n] = a[m×k] · b[k×n]`.
///
/// Every output element accumulates its `k` products in index order starting
/// from zero, so results are bit-identical to the textbook triple loop.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    const MR: usize = 4;
    const NR: usize = 8;
    let mut c = vec![0.0; m * n];
    let full_cols = n - n % NR;
    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j < full_cols {
            let mut acc = [[0.0f64; NR]; MR];
            for t in 0..k {
                let brow: &[f64; NR] = b[t * n + j..t * n + j + NR].try_into().unwrap();
                for (r, acc_r) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + t];
                    for q in 0..NR {
                        acc_r[q] += av * brow[q];
                    }
                }
            }
            for (r, acc_r) in acc.iter().enumerate() {
                c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(acc_r);
            }
            j += NR;
        }
        for r in i..i + MR {
            for jj in full_cols..n {
                c[r * n + jj] = dot_strided(&a[r * k..(r + 1) * k], b, jj, n);
            }
        }
        i += MR;
    }
    for r in i..m {
        let arow = &a[r * k..(r + 1) * k];
        let crow = &mut c[r * n..(r + 1) * n];
        for jj in 0..n {
            crow[jj] = dot_strided(arow, b, jj, n);
        }
    }
    c
}

#[inline]
fn dot_strided(arow: &[f64], b: &[f64], col: usize, n: usize) -> f64 {
    let mut s = 0.0;
    for (t, &av) in arow.iter().enumerate() {
        s += av * b[t * n + col];
    }
    s
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    const B: usize = 16;
    for i0 in (0..rows).step_by(B) {
        for j0 in (0..cols).step_by(B) {
            for i in i0..(i0 + B).min(rows) {
                for j in j0..(j0 + B).min(cols) {
                    out[j * rows + i] = a[i * cols + j];
                }
            }
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    matmul(a, &transpose(b, n, k), m, k, n)
}

/// `a[m×k]ᵀ · b[m×n]`.
pub fn matmul_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    matmul(&transpose(a, m, k), b, k, m, n)
}

/// In-place max-shifted softmax over rows of width `cols`.
pub fn softmax_rows(x: &mut [f64], cols: usize) {
    for row in x.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Softmax backward given the forward output `y` and upstream `dy`.
pub fn softmax_rows_backward(y: &[f64], dy: &[f64], cols: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for ((yr, dyr), dxr) in y
        .chunks_exact(cols)
        .zip(dy.chunks_exact(cols))
        .zip(dx.chunks_exact_mut(cols))
    {
        let s: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = yv * (g - s);
        }
    }
    dx
}

/// Row-wise layer normalization. Returns the output plus the normalized
/// activations and per-row inverse standard deviations needed for backward.
pub fn layer_norm_rows(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = gamma.len();
    let rows = x.len() / n;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * n..(r + 1) * n];
        let mean = xr.iter().sum::<f64>() / n as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..n {
            let h = (xr[j] - mean) * is;
            xhat[r * n + j] = h;
            out[r * n + j] = gamma[j] * h + beta[j];
        }
    }
    (out, xhat, inv_std)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_rows_backward(
    dy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = gamma.len();
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; n];
    let mut dbeta = vec![0.0; n];
    for (r, &is) in inv_std.iter().enumerate() {
        let dyr = &dy[r * n..(r + 1) * n];
        let hr = &xhat[r * n..(r + 1) * n];
        let mut mean_dh = 0.0;
        let mut mean_dh_h = 0.0;
        for j in 0..n {
            dgamma[j] += dyr[j] * hr[j];
            dbeta[j] += dyr[j];
            let dh = dyr[j] * gamma[j];
            mean_dh += dh;
            mean_dh_h += dh * hr[j];
        }
        mean_dh /= n as f64;
        mean_dh_h /= n as f64;
        for j in 0..n {
            let dh = dyr[j] * gamma[j];
            dx[r * n + j] = is * (dh - mean_dh - hr[j] * mean_dh_h);
        }
    }
    (dx, dgamma, dbeta)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One axis of a clamped bilinear lookup: the two lattice indices, the
/// fractional weight of the upper index, and `d(frac)/d(coord)` (zero when
/// the coordinate was clamped).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisTap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
    pub dfrac: f64,
}

pub fn axis_tap(coord: f64, len: usize) -> AxisTap {
    let max = (len - 1) as f64;
    let (c, dfrac) = if coord <= 0.0 {
        (0.0, 0.0)
    } else if coord >= max {
        (max, 0.0)
    } else {
        (coord, 1.0)
    };
    let lo = (c.floor() as usize).min(len - 1);
    let hi = (lo + 1).min(len - 1);
    AxisTap {
        lo,
        hi,
        frac: c - lo as f64,
        dfrac,
    }
}

/// Four-texel bilinear footprint at continuous pixel coordinates `(x, y)`.
#[derive(Clone, Copy, Debug)]
pub struct Taps {
    pub index: [usize; 4],
    pub weight: [f64; 4],
    pub dweight_dx: [f64; 4],
    pub dweight_dy: [f64; 4],
}

pub fn bilinear_taps(x: f64, y: f64, width: usize, height: usize) -> Taps {
    let tx = axis_tap(x, width);
    let ty = axis_tap(y, height);
    let (fx, fy) = (tx.frac, ty.frac);
    Taps {
        index: [
            ty.lo * width + tx.lo,
            ty.lo * width + tx.hi,
            ty.hi * width + tx.lo,
            ty.hi * width + tx.hi,
        ],
        weight: [
            (1.0 - fy) * (1.0 - fx),
            (1.0 - fy) * fx,
            fy * (1.0 - fx),
            fy * fx,
        ],
        dweight_dx: [
            -(1.0 - fy) * tx.dfrac,
            (1.0 - fy) * tx.dfrac,
            -fy * tx.dfrac,
            fy * tx.dfrac,
        ],
        dweight_dy: [
            -(1.0 - fx) * ty.dfrac,
            -fx * ty.dfrac,
            (1.0 - fx) * ty.dfrac,
            fx * ty.dfrac,
        ],
    }
}

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }
}

/// Unfolds `x[cin×h×w]` into `[(cin·k·k) × (oh·ow)]`.
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let cols = oh * ow;
    let mut out = vec![0.0; g.patch_len() * cols];
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`].
pub fn col2im(cols_data: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let cols = oh * ow;
    let mut x = vec![0.0; g.cin * g.h * g.w];
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols_data[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            x[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `y = w · im2col(x) + b` with `w[cout × cin·k·k]`.
pub fn conv2d(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = im2col(x, g);
    let n = g.out_h() * g.out_w();
    let mut y = matmul(w, &cols, g.cout, g.patch_len(), n);
    for (o, row) in y.chunks_exact_mut(n).enumerate() {
        for v in row {
            *v += b[o];
        }
    }
    y
}

/// Returns `(dx, dw, db)`.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cols = im2col(x, g);
    let n = g.out_h() * g.out_w();
    let p = g.patch_len();
    let dw = matmul_a_bt(dy, &cols, g.cout, n, p);
    let dcols = matmul_at_b(w, dy, g.cout, p, n);
    let dx = col2im(&dcols, g);
    let db = dy.chunks_exact(n).map(|r| r.iter().sum()).collect();
    (dx, dw, db)
}

/// Half-pixel-centred resampling taps for one axis of a resize from `src` to `dst` samples.
pub fn resize_taps(src: usize, dst: usize) -> Vec<AxisTap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| axis_tap((o as f64 + 0.5) * scale - 0.5, src))
        .collect()
}

/// Bilinear resize of `x[c×h×w]` to `[c×oh×ow]` (half-pixel centres, edge clamp).
pub fn resize_bilinear(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    if h == oh && w == ow {
        return x.to_vec();
    }
    let ty = resize_taps(h, oh);
    let tx = resize_taps(w, ow);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, a) in ty.iter().enumerate() {
            let r0 = &src[a.lo * w..(a.lo + 1) * w];
            let r1 = &src[a.hi * w..(a.hi + 1) * w];
            for (ox, b) in tx.iter().enumerate() {
                let top = r0[b.lo] * (1.0 - b.frac) + r0[b.hi] * b.frac;
                let bot = r1[b.lo] * (1.0 - b.frac) + r1[b.hi] * b.frac;
                dst[oy * ow + ox] = top * (1.0 - a.frac) + bot * a.frac;
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`].
pub fn resize_bilinear_backward(
    dy: &[f64],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    if h == oh && w == ow {
        return dy.to_vec();
    }
    let ty = resize_taps(h, oh);
    let tx = resize_taps(w, ow);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        let g = &dy[ch * oh * ow..(ch + 1) * oh * ow];
        let d = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                let top = v * (1.0 - a.frac);
                let bot = v * a.frac;
                d[a.lo * w + b.lo] += top * (1.0 - b.frac);
                d[a.lo * w + b.hi] += top * b.frac;
                d[a.hi * w + b.lo] += bot * (1.0 - b.frac);
                d[a.hi * w + b.hi] += bot * b.frac;
            }
        }
    }
    dx
}

/// Mirrors each row of `x[c×h×w]` left to right.
pub fn flip_horizontal(x: &[f64], w: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for row in out.chunks_exact_mut(w) {
        row.reverse();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_matches_direct_loop() {
        let g = ConvGeom {
            cin: 2,
            h: 5,
            w: 6,
            cout: 3,
            k: 3,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f64> = (0..60).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..54).map(|i| (i as f64 * 0.11).cos()).collect();
        let b = vec![0.1, -0.2, 0.3];
        let y = conv2d(&x, &w, &b, &g);
        let (oh, ow) = (g.out_h(), g.out_w());
        assert_eq!((oh, ow), (3, 3));
        for o in 0..3 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b[o];
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..6).contains(&ix) {
                                    s += w[((o * 2 + c) * 3 + ky) * 3 + kx]
                                        * x[(c * 5 + iy as usize) * 6 + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((s - y[(o * oh + oy) * ow + ox]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn resize_same_size_is_identity() {
        let x: Vec<f64> = (0..12).map(|i| i as f64).collect();
        assert_eq!(resize_bilinear(&x, 1, 3, 4, 3, 4), x);
        // the tap path on equal sizes must also be exact
        let t = resize_taps(7, 7);
        assert!(t
            .iter()
            .enumerate()
            .all(|(i, a)| a.lo == i && a.frac == 0.0));
    }

    #[test]
    fn resize_adjoint_identity() {
        // <resize(x), y> == <x, resize^T(y)>
        let (c, h, w, oh, ow) = (2, 3, 5, 7, 4);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..c * oh * ow).map(|i| (i as f64 * 0.3).cos()).collect();
        let rx = resize_bilinear(&x, c, h, w, oh, ow);
        let ry = resize_bilinear_backward(&y, c, h, w, oh, ow);
        let lhs: f64 = rx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&ry).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn clamped_axis_has_no_slope() {
        let t = axis_tap(-3.0, 4);
        assert_eq!((t.lo, t.hi, t.frac, t.dfrac), (0, 1, 0.0, 0.0));
        let t = axis_tap(9.0, 4);
        assert_eq!((t.lo, t.hi, t.frac, t.dfrac), (3, 3, 0.0, 0.0));
    }
}
