//! Slice-level forward and backward kernels behind the tape ops.
//!
//! All kernels are sequential and reduce in ascending index order, so a
//! given input always produces bit-identical output.

use crate::error::{Result, TensorError};
use crate::real::Real;

/// `c = a * b (+ c if accumulate)` for row-major `a: m×k`, `b: k×n`.
/// `trans_a` / `trans_b` read the stored matrix as its transpose, i.e. `a` is
/// stored `k×m` and `b` is stored `n×k` respectively.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: extents and strides describe dense row-major buffers whose
    // lengths were asserted above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn transpose<T: Real>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    out[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
    out
}

fn check_ids(op: &'static str, ids: &[usize], bound: usize) -> Result<()> {
    match ids.iter().find(|&&s| s >= bound) {
        Some(&index) => Err(TensorError::Index { op, index, bound }),
        None => Ok(()),
    }
}

/// Sum rows of `values` (`n×f`) that share a segment id into an `m×f` output.
/// Segments with no members stay zero.
pub fn scatter_sum<T: Real>(
    values: &[T],
    features: usize,
    segment_of: &[usize],
    num_segments: usize,
) -> Result<Vec<T>> {
    if values.len() != segment_of.len() * features {
        return Err(TensorError::Shape {
            op: "scatter_sum",
            lhs: vec![values.len() / features.max(1), features],
            rhs: vec![segment_of.len()],
        });
    }
    check_ids("scatter_sum", segment_of, num_segments)?;
    let mut out = vec![T::zero(); num_segments * features];
    for (row, &s) in values.chunks_exact(features.max(1)).zip(segment_of) {
        if features == 0 {
            break;
        }
        let dst = &mut out[s * features..(s + 1) * features];
        for (d, &v) in dst.iter_mut().zip(row) {
            *d += v;
        }
    }
    Ok(out)
}

/// Copy row `index[i]` of `src` (`m×f`) into row `i` of the output.
pub fn gather_rows<T: Real>(src: &[T], features: usize, index: &[usize]) -> Result<Vec<T>> {
    let rows = src.len().checked_div(features).unwrap_or(0);
    if features > 0 {
        check_ids("gather_rows", index, rows)?;
    }
    let mut out = Vec::with_capacity(index.len() * features);
    for &r in index {
        out.extend_from_slice(&src[r * features..(r + 1) * features]);
    }
    Ok(out)
}

/// Softmax of each column of `scores` (`n×cols`) restricted to the rows of
/// each segment. Max-subtracted for stability.
pub fn segmented_softmax<T: Real>(scores: &[T], cols: usize, segment_of: &[usize]) -> Vec<T> {
    let n = segment_of.len();
    if n == 0 || cols == 0 {
        return Vec::new();
    }
    let segs = segment_of.iter().copied().max().unwrap_or(0) + 1;
    let mut max = vec![T::neg_infinity(); segs * cols];
    for (i, &s) in segment_of.iter().enumerate() {
        for c in 0..cols {
            let v = scores[i * cols + c];
            let m = &mut max[s * cols + c];
            if v > *m {
                *m = v;
            }
        }
    }
    let mut out = vec![T::zero(); n * cols];
    let mut denom = vec![T::zero(); segs * cols];
    for (i, &s) in segment_of.iter().enumerate() {
        for c in 0..cols {
            let e = (scores[i * cols + c] - max[s * cols + c]).exp();
            out[i * cols + c] = e;
            denom[s * cols + c] += e;
        }
    }
    for (i, &s) in segment_of.iter().enumerate() {
        for c in 0..cols {
            out[i * cols + c] = out[i * cols + c] / denom[s * cols + c];
        }
    }
    out
}

/// Backward of [`segmented_softmax`] given its output `y` and upstream `g`.
pub fn segmented_softmax_backward<T: Real>(y: &[T], g: &[T], cols: usize, segment_of: &[usize]) -> Vec<T> {
    let n = segment_of.len();
    if n == 0 || cols == 0 {
        return Vec::new();
    }
    let segs = segment_of.iter().copied().max().unwrap_or(0) + 1;
    let mut dot = vec![T::zero(); segs * cols];
    for (i, &s) in segment_of.iter().enumerate() {
        for c in 0..cols {
            dot[s * cols + c] += y[i * cols + c] * g[i * cols + c];
        }
    }
    let mut dx = vec![T::zero(); n * cols];
    for (i, &s) in segment_of.iter().enumerate() {
        for c in 0..cols {
            let j = i * cols + c;
            dx[j] = y[j] * (g[j] - dot[s * cols + c]);
        }
    }
    dx
}

/// Per-channel 2D correlation with zero padding `(kh-1)/2`, `(kw-1)/2`.
pub fn depthwise_conv2d<T: Real>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    kernel: &[T],
    (kh, kw): (usize, usize),
) -> Vec<T> {
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let xs = &x[ch * h * w..(ch + 1) * h * w];
        let ks = &kernel[ch * kh * kw..(ch + 1) * kh * kw];
        let os = &mut out[ch * h * w..(ch + 1) * h * w];
        for dy in 0..kh {
            for dx in 0..kw {
                let kv = ks[dy * kw + dx];
                // output (y, x) reads input (y + dy - ph, x + dx - pw)
                let y0 = ph.saturating_sub(dy);
                let y1 = (h + ph).saturating_sub(dy).min(h);
                let x0 = pw.saturating_sub(dx);
                let x1 = (w + pw).saturating_sub(dx).min(w);
                for y in y0..y1 {
                    let iy = y + dy - ph;
                    let orow = &mut os[y * w..(y + 1) * w];
                    let irow = &xs[iy * w..(iy + 1) * w];
                    for xo in x0..x1 {
                        orow[xo] += kv * irow[xo + dx - pw];
                    }
                }
            }
        }
    }
    out
}

/// Gradients `(dx, dkernel)` of [`depthwise_conv2d`].
pub fn depthwise_conv2d_backward<T: Real>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    kernel: &[T],
    (kh, kw): (usize, usize),
    g: &[T],
) -> (Vec<T>, Vec<T>) {
    let (ph, pw) = (kh / 2, kw / 2);
    let mut dx_out = vec![T::zero(); c * h * w];
    let mut dk = vec![T::zero(); c * kh * kw];
    for ch in 0..c {
        let xs = &x[ch * h * w..(ch + 1) * h * w];
        let gs = &g[ch * h * w..(ch + 1) * h * w];
        let ks = &kernel[ch * kh * kw..(ch + 1) * kh * kw];
        let dxs = &mut dx_out[ch * h * w..(ch + 1) * h * w];
        for dy in 0..kh {
            for dx in 0..kw {
                let kv = ks[dy * kw + dx];
                let mut acc = T::zero();
                let y0 = ph.saturating_sub(dy);
                let y1 = (h + ph).saturating_sub(dy).min(h);
                let x0 = pw.saturating_sub(dx);
                let x1 = (w + pw).saturating_sub(dx).min(w);
                for y in y0..y1 {
                    let iy = y + dy - ph;
                    for xo in x0..x1 {
                        let ix = xo + dx - pw;
                        let gv = gs[y * w + xo];
                        acc += gv * xs[iy * w + ix];
                        dxs[iy * w + ix] += gv * kv;
                    }
                }
                dk[ch * kh * kw + dy * kw + dx] = acc;
            }
        }
    }
    (dx_out, dk)
}

/// Geometry of a dense 2D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.kh) / self.stride + 1,
            (self.w + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let mut col = vec![T::zero(); g.col_rows() * p];
    for c in 0..g.c_in {
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = (c * g.kh + dy) * g.kw + dx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + dy) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + dx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Real>(col: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let mut x = vec![T::zero(); g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = (c * g.kh + dy) * g.kw + dx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + dy) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + dx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Dense convolution `weight: c_out×c_in×kh×kw` over `x: c_in×h×w`.
pub fn conv2d<T: Real>(x: &[T], weight: &[T], bias: Option<&[T]>, c_out: usize, g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let k = g.col_rows();
    let mut out = vec![T::zero(); c_out * p];
    if g.is_pointwise() {
        gemm(c_out, k, p, weight, false, x, false, &mut out, false);
    } else {
        let col = im2col(x, g);
        gemm(c_out, k, p, weight, false, &col, false, &mut out, false);
    }
    if let Some(b) = bias {
        for (o, &bv) in out.chunks_exact_mut(p.max(1)).zip(b) {
            o.iter_mut().for_each(|v| *v += bv);
        }
    }
    out
}

/// Gradients `(dx, dweight, dbias)` of [`conv2d`].
pub fn conv2d_backward<T: Real>(
    x: &[T],
    weight: &[T],
    c_out: usize,
    g: &ConvGeom,
    grad: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let k = g.col_rows();
    let mut dw = vec![T::zero(); c_out * k];
    let mut db = vec![T::zero(); c_out];
    for (d, row) in db.iter_mut().zip(grad.chunks_exact(p.max(1))) {
        *d = row.iter().copied().sum();
    }
    let dx = if g.is_pointwise() {
        gemm(c_out, p, k, grad, false, x, true, &mut dw, false);
        let mut dx = vec![T::zero(); k * p];
        gemm(k, c_out, p, weight, true, grad, false, &mut dx, false);
        dx
    } else {
        let col = im2col(x, g);
        gemm(c_out, p, k, grad, false, &col, true, &mut dw, false);
        let mut dcol = vec![T::zero(); k * p];
        gemm(k, c_out, p, weight, true, grad, false, &mut dcol, false);
        col2im(&dcol, g)
    };
    (dx, dw, db)
}

/// GELU, tanh approximation.
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
