//! Forward and backward kernels for the differentiable primitives.
//!
//! These operate on plain tensors; [`crate::tape`] wires them into the
//! reverse-mode graph. Every backward kernel takes the upstream gradient
//! and whatever the forward pass saved, and returns input gradients.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::linalg::{MatRef, Real};
use crate::tensor::Tensor;

/// Upper bound on the im2col scratch buffer, in elements.
const COLS_BUDGET: usize = 1 << 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Valid,
    /// Zero padding so that the output extent is `ceil(input / stride)`.
    /// An odd amount of padding puts the extra row/column at the bottom/right.
    Same,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
}

/// Sliding-window geometry shared by convolution and pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn new(in_h: usize, in_w: usize, kh: usize, kw: usize, stride: usize, padding: Padding) -> Result<Self> {
        if stride == 0 {
            return Err(invalid("stride must be positive"));
        }
        if kh == 0 || kw == 0 {
            return Err(invalid("window extents must be positive"));
        }
        let (out_h, pad_top) = Self::axis(in_h, kh, stride, padding)?;
        let (out_w, pad_left) = Self::axis(in_w, kw, stride, padding)?;
        Ok(Self {
            in_h,
            in_w,
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    fn axis(input: usize, k: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
        match padding {
            Padding::Valid => {
                if k > input {
                    return Err(shape_err(format!(
                        "window extent {k} exceeds input extent {input} with valid padding"
                    )));
                }
                Ok(((input - k) / stride + 1, 0))
            }
            Padding::Same => {
                let out = input.div_ceil(stride);
                let needed = ((out - 1) * stride + k).saturating_sub(input);
                if k > input + needed {
                    return Err(shape_err(format!(
                        "window extent {k} exceeds padded extent {}",
                        input + needed
                    )));
                }
                Ok((out, needed / 2))
            }
        }
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_plane(&self) -> usize {
        self.in_h * self.in_w
    }

    /// Input row for output row `oy` and kernel row `ky`, if inside the image.
    #[inline]
    fn src_y(&self, oy: usize, ky: usize) -> Option<usize> {
        (oy * self.stride + ky)
            .checked_sub(self.pad_top)
            .filter(|&y| y < self.in_h)
    }

    #[inline]
    fn src_x(&self, ox: usize, kx: usize) -> Option<usize> {
        (ox * self.stride + kx)
            .checked_sub(self.pad_left)
            .filter(|&x| x < self.in_w)
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }
}

fn samples_per_chunk(rows: usize, plane: usize) -> usize {
    (COLS_BUDGET / (rows * plane).max(1)).max(1)
}

/// Output columns `lo..hi` whose kernel column `kx` lands inside the image.
fn valid_cols(win: &Window, kx: usize) -> (usize, usize) {
    let (s, pad) = (win.stride, win.pad_left);
    let lo = pad.saturating_sub(kx).div_ceil(s).min(win.out_w);
    let hi = (win.in_w + pad).saturating_sub(kx).div_ceil(s).min(win.out_w);
    (lo, hi.max(lo))
}

/// Unfolds samples `first..first+count` into a `(cin·kh·kw) × (count·out_plane)` matrix.
fn im2col<T: Real>(x: &[T], cin: usize, win: &Window, first: usize, count: usize, cols: &mut [T]) {
    let in_plane = win.in_plane();
    let out_plane = win.out_plane();
    let width = count * out_plane;
    let s = win.stride;
    for ci in 0..cin {
        for ky in 0..win.kh {
            for kx in 0..win.kw {
                let row = (ci * win.kh + ky) * win.kw + kx;
                let dst_row = &mut cols[row * width..(row + 1) * width];
                let (lo, hi) = valid_cols(win, kx);
                for bl in 0..count {
                    let src = &x[((first + bl) * cin + ci) * in_plane..][..in_plane];
                    for oy in 0..win.out_h {
                        let dst = &mut dst_row[bl * out_plane + oy * win.out_w..][..win.out_w];
                        let Some(iy) = win.src_y(oy, ky) else {
                            dst.fill(T::zero());
                            continue;
                        };
                        dst[..lo].fill(T::zero());
                        dst[hi..].fill(T::zero());
                        if lo < hi {
                            let x0 = lo * s + kx - win.pad_left;
                            let src_row = &src[iy * win.in_w..(iy + 1) * win.in_w];
                            if s == 1 {
                                dst[lo..hi].copy_from_slice(&src_row[x0..x0 + hi - lo]);
                            } else {
                                for (j, d) in dst[lo..hi].iter_mut().enumerate() {
                                    *d = src_row[x0 + j * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatters a column matrix back onto the input gradient (adjoint of [`im2col`]).
fn col2im<T: Real>(cols: &[T], cin: usize, win: &Window, first: usize, count: usize, dx: &mut [T]) {
    let in_plane = win.in_plane();
    let out_plane = win.out_plane();
    let width = count * out_plane;
    let s = win.stride;
    for ci in 0..cin {
        for ky in 0..win.kh {
            for kx in 0..win.kw {
                let row = (ci * win.kh + ky) * win.kw + kx;
                let src_row = &cols[row * width..(row + 1) * width];
                let (lo, hi) = valid_cols(win, kx);
                if lo >= hi {
                    continue;
                }
                let x0 = lo * s + kx - win.pad_left;
                for bl in 0..count {
                    let dst = &mut dx[((first + bl) * cin + ci) * in_plane..][..in_plane];
                    for oy in 0..win.out_h {
                        let Some(iy) = win.src_y(oy, ky) else { continue };
                        let src = &src_row[bl * out_plane + oy * win.out_w..][lo..hi];
                        let dst_row = &mut dst[iy * win.in_w..(iy + 1) * win.in_w];
                        for (j, &g) in src.iter().enumerate() {
                            dst_row[x0 + j * s] += g;
                        }
                    }
                }
            }
        }
    }
}

/// Validated shapes of a convolution call.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeometry {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub window: Window,
}

impl ConvGeometry {
    pub fn infer<T: Real>(
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let (batch, cin, h, w) = input.dims4()?;
        let (cout, kcin, kh, kw) = kernel.dims4().map_err(|_| {
            shape_err(format!(
                "conv kernel must be (out, in, kh, kw), got {:?}",
                kernel.shape()
            ))
        })?;
        if kcin != cin {
            return Err(shape_err(format!(
                "conv input has {cin} channels but kernel expects {kcin}"
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(shape_err(format!(
                    "conv bias shape {:?} does not match {cout} output channels",
                    b.shape()
                )));
            }
        }
        let window = Window::new(h, w, kh, kw, stride, padding)?;
        Ok(Self {
            batch,
            cin,
            cout,
            window,
        })
    }

    fn patch(&self) -> usize {
        self.cin * self.window.kh * self.window.kw
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.cout, self.window.out_h, self.window.out_w]
    }
}

/// 2-D cross-correlation (no kernel flip).
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::infer(input, kernel, bias, stride, padding)?;
    conv2d_with(&g, input.data(), kernel.data(), bias.map(|b| b.data()))
}

fn conv2d_with<T: Real>(g: &ConvGeometry, x: &[T], w: &[T], bias: Option<&[T]>) -> Result<Tensor<T>> {
    let win = &g.window;
    let out_plane = win.out_plane();
    let mut y = vec![T::zero(); g.batch * g.cout * out_plane];
    let wmat = MatRef::row_major(w, g.cout, g.patch());

    if win.is_pointwise() {
        for n in 0..g.batch {
            let xb = &x[n * g.cin * out_plane..(n + 1) * g.cin * out_plane];
            let yb = &mut y[n * g.cout * out_plane..(n + 1) * g.cout * out_plane];
            T::gemm(wmat, MatRef::row_major(xb, g.cin, out_plane), yb, out_plane, false);
        }
    } else {
        let patch = g.patch();
        let per_chunk = samples_per_chunk(patch, out_plane);
        let mut cols = Vec::new();
        let mut tmp = Vec::new();
        let mut first = 0;
        while first < g.batch {
            let count = per_chunk.min(g.batch - first);
            let width = count * out_plane;
            cols.resize(patch * width, T::zero());
            tmp.resize(g.cout * width, T::zero());
            im2col(x, g.cin, win, first, count, &mut cols);
            T::gemm(wmat, MatRef::row_major(&cols, patch, width), &mut tmp, width, false);
            for bl in 0..count {
                for co in 0..g.cout {
                    let src = &tmp[co * width + bl * out_plane..][..out_plane];
                    let dst = &mut y[((first + bl) * g.cout + co) * out_plane..][..out_plane];
                    dst.copy_from_slice(src);
                }
            }
            first += count;
        }
    }

    if let Some(b) = bias {
        for plane in y.chunks_exact_mut(out_plane).enumerate() {
            let bv = b[plane.0 % g.cout];
            plane.1.iter_mut().for_each(|v| *v += bv);
        }
    }
    Tensor::new(g.output_shape(), y)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward<T: Real>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    dy: &[T],
    want_input_grad: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let win = &g.window;
    let out_plane = win.out_plane();
    let in_plane = win.in_plane();
    let patch = g.patch();
    let mut dw = vec![T::zero(); g.cout * patch];
    let mut dx = want_input_grad.then(|| vec![T::zero(); g.batch * g.cin * in_plane]);

    let mut db = vec![T::zero(); g.cout];
    for (i, plane) in dy.chunks_exact(out_plane).enumerate() {
        db[i % g.cout] += plane.iter().fold(T::zero(), |a, &v| a + v);
    }

    let wmat = MatRef::row_major(w, g.cout, patch);
    if win.is_pointwise() {
        for n in 0..g.batch {
            let xb = &x[n * g.cin * in_plane..(n + 1) * g.cin * in_plane];
            let dyb = &dy[n * g.cout * out_plane..(n + 1) * g.cout * out_plane];
            let dymat = MatRef::row_major(dyb, g.cout, out_plane);
            T::gemm(dymat, MatRef::row_major(xb, g.cin, in_plane).t(), &mut dw, patch, true);
            if let Some(dx) = dx.as_mut() {
                let dxb = &mut dx[n * g.cin * in_plane..(n + 1) * g.cin * in_plane];
                T::gemm(wmat.t(), dymat, dxb, in_plane, false);
            }
        }
    } else {
        let per_chunk = samples_per_chunk(patch, out_plane);
        let mut cols = Vec::new();
        let mut dyc = Vec::new();
        let mut first = 0;
        while first < g.batch {
            let count = per_chunk.min(g.batch - first);
            let width = count * out_plane;
            cols.resize(patch * width, T::zero());
            dyc.resize(g.cout * width, T::zero());
            im2col(x, g.cin, win, first, count, &mut cols);
            for bl in 0..count {
                for co in 0..g.cout {
                    let src = &dy[((first + bl) * g.cout + co) * out_plane..][..out_plane];
                    dyc[co * width + bl * out_plane..][..out_plane].copy_from_slice(src);
                }
            }
            let dymat = MatRef::row_major(&dyc, g.cout, width);
            T::gemm(dymat, MatRef::row_major(&cols, patch, width).t(), &mut dw, patch, true);
            if let Some(dx) = dx.as_mut() {
                // reuse the column buffer for the column-space gradient
                T::gemm(wmat.t(), dymat, &mut cols, width, false);
                col2im(&cols, g.cin, win, first, count, dx);
            }
            first += count;
        }
    }
    (dx, dw, db)
}

/// Validated shapes of a pooling call.
#[derive(Clone, Copy, Debug)]
pub struct PoolGeometry {
    pub batch: usize,
    pub channels: usize,
    pub window: Window,
    pub kind: PoolKind,
}

/// Max or average pooling. Average pooling divides by the number of
/// in-image elements in each window, so padding never dilutes the mean.
///
/// For max pooling the returned index vector holds, per output cell, the
/// flat input offset of the winning element (first maximum in scan order).
pub fn pool2d<T: Real>(
    input: &Tensor<T>,
    kind: PoolKind,
    size: usize,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor<T>, PoolGeometry, Vec<usize>)> {
    if size == 0 || stride == 0 {
        return Err(invalid(format!(
            "pool size and stride must be positive (size {size}, stride {stride})"
        )));
    }
    let (batch, channels, h, w) = input.dims4()?;
    let window = Window::new(h, w, size, size, stride, padding)?;
    let geom = PoolGeometry {
        batch,
        channels,
        window,
        kind,
    };
    let x = input.data();
    let in_plane = window.in_plane();
    let out_plane = window.out_plane();
    let mut y = Vec::with_capacity(batch * channels * out_plane);
    let mut argmax = Vec::new();
    if kind == PoolKind::Max {
        argmax.reserve(batch * channels * out_plane);
    }
    for plane in 0..batch * channels {
        let base = plane * in_plane;
        for oy in 0..window.out_h {
            for ox in 0..window.out_w {
                let mut best: Option<(T, usize)> = None;
                let mut sum = T::zero();
                let mut count = 0usize;
                for ky in 0..size {
                    let Some(iy) = window.src_y(oy, ky) else { continue };
                    for kx in 0..size {
                        let Some(ix) = window.src_x(ox, kx) else { continue };
                        let idx = base + iy * w + ix;
                        let v = x[idx];
                        match kind {
                            PoolKind::Max => {
                                if best.is_none_or(|(b, _)| v > b) {
                                    best = Some((v, idx));
                                }
                            }
                            PoolKind::Avg => {
                                sum += v;
                                count += 1;
                            }
                        }
                    }
                }
                match kind {
                    PoolKind::Max => {
                        let (v, idx) = best.ok_or_else(|| shape_err("empty pooling window"))?;
                        y.push(v);
                        argmax.push(idx);
                    }
                    PoolKind::Avg => {
                        if count == 0 {
                            return Err(shape_err("empty pooling window"));
                        }
                        y.push(sum / T::of(count as f64));
                    }
                }
            }
        }
    }
    let out = Tensor::new([batch, channels, window.out_h, window.out_w], y)?;
    Ok((out, geom, argmax))
}

pub fn pool2d_backward<T: Real>(g: &PoolGeometry, argmax: &[usize], dy: &[T]) -> Vec<T> {
    let win = &g.window;
    let in_plane = win.in_plane();
    let mut dx = vec![T::zero(); g.batch * g.channels * in_plane];
    match g.kind {
        PoolKind::Max => {
            for (&idx, &gv) in argmax.iter().zip(dy) {
                dx[idx] += gv;
            }
        }
        PoolKind::Avg => {
            let out_plane = win.out_plane();
            for plane in 0..g.batch * g.channels {
                let base = plane * in_plane;
                for oy in 0..win.out_h {
                    for ox in 0..win.out_w {
                        let gv = dy[plane * out_plane + oy * win.out_w + ox];
                        let mut cells = Vec::with_capacity(win.kh * win.kw);
                        for ky in 0..win.kh {
                            let Some(iy) = win.src_y(oy, ky) else { continue };
                            for kx in 0..win.kw {
                                if let Some(ix) = win.src_x(ox, kx) {
                                    cells.push(base + iy * win.in_w + ix);
                                }
                            }
                        }
                        let share = gv / T::of(cells.len() as f64);
                        for c in cells {
                            dx[c] += share;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `a · w` for `a: [B, M]`, `w: [M, N]`.
pub fn matmul<T: Real>(a: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, m) = a.dims2()?;
    let (m2, n) = w.dims2()?;
    if m != m2 {
        return Err(shape_err(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape(),
            w.shape()
        )));
    }
    let mut out = vec![T::zero(); b * n];
    T::gemm(
        MatRef::row_major(a.data(), b, m),
        MatRef::row_major(w.data(), m, n),
        &mut out,
        n,
        false,
    );
    Tensor::new([b, n], out)
}

/// Gradients of `a · w`: `(da, dw)`.
pub fn matmul_backward<T: Real>(a: &Tensor<T>, w: &Tensor<T>, dy: &[T]) -> (Vec<T>, Vec<T>) {
    let (b, m) = (a.shape()[0], a.shape()[1]);
    let n = w.shape()[1];
    let dymat = MatRef::row_major(dy, b, n);
    let mut da = vec![T::zero(); b * m];
    T::gemm(dymat, MatRef::row_major(w.data(), m, n).t(), &mut da, m, false);
    let mut dw = vec![T::zero(); m * n];
    T::gemm(MatRef::row_major(a.data(), b, m).t(), dymat, &mut dw, n, false);
    (da, dw)
}

/// Stacks rank-4 tensors along the channel axis, in argument order.
pub fn concat_channels<T: Real>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| invalid("concat_channels needs at least one input"))?;
    let (b, _, h, w) = first.dims4()?;
    let mut total = 0;
    for t in inputs {
        let (tb, tc, th, tw) = t.dims4()?;
        if (tb, th, tw) != (b, h, w) {
            return Err(shape_err(format!(
                "concat_channels: {:?} does not match batch/spatial extents of {:?}",
                t.shape(),
                first.shape()
            )));
        }
        total += tc;
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(b * total * plane);
    for n in 0..b {
        for t in inputs {
            let c = t.shape()[1];
            data.extend_from_slice(&t.data()[n * c * plane..(n + 1) * c * plane]);
        }
    }
    Tensor::new([b, total, h, w], data)
}

/// Splits a channel-concatenated gradient back into per-input pieces.
pub fn split_channels<T: Real>(dy: &[T], batch: usize, channels: &[usize], plane: usize) -> Vec<Vec<T>> {
    let total: usize = channels.iter().sum();
    let mut parts: Vec<Vec<T>> = channels
        .iter()
        .map(|&c| Vec::with_capacity(batch * c * plane))
        .collect();
    for n in 0..batch {
        let mut offset = n * total * plane;
        for (part, &c) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&dy[offset..offset + c * plane]);
            offset += c * plane;
        }
    }
    parts
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "elementwise_add")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape(), data)
}

pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "elementwise_mul")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape(), data)
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Row-wise softmax of a `[B, K]` tensor, stabilised by subtracting the row maximum.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = logits.dims2()?;
    if !logits.all_finite() {
        return Err(Error::NonFinite("softmax received non-finite logits".into()));
    }
    let mut out = logits.data().to_vec();
    for row in out.chunks_exact_mut(k) {
        softmax_row(row);
    }
    Tensor::new(logits.shape(), out)
}

fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_backward<T: Real>(probs: &[T], dy: &[T], k: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); probs.len()];
    for ((p, g), d) in probs
        .chunks_exact(k)
        .zip(dy.chunks_exact(k))
        .zip(dx.chunks_exact_mut(k))
    {
        let dot = p.iter().zip(g).fold(T::zero(), |a, (&pi, &gi)| a + pi * gi);
        for i in 0..k {
            d[i] = p[i] * (g[i] - dot);
        }
    }
    dx
}

/// Mean softmax cross-entropy over the batch, computed from logits via
/// log-sum-exp. Returns `(loss, probabilities)`.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Vec<T>)> {
    let (b, k) = logits.dims2()?;
    if labels.len() != b {
        return Err(shape_err(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(invalid(format!("label {bad} out of range for {k} classes")));
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite("cross-entropy received non-finite logits".into()));
    }
    let mut probs = logits.data().to_vec();
    let mut total = 0.0f64;
    for (row, (&label, logit_row)) in probs
        .chunks_exact_mut(k)
        .zip(labels.iter().zip(logits.data().chunks_exact(k)))
    {
        let max = logit_row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = logit_row.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln() + max;
        total += (lse - logit_row[label]).to_f64_lossy();
        softmax_row(row);
    }
    Ok((T::of(total / b as f64), probs))
}

/// Per-channel mean over `(batch, H, W)` for a rank-4 tensor, or over the
/// batch for a rank-2 tensor. Returns `(channels, plane)`.
pub(crate) fn channel_layout<T: Real>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [b, c, h, w] => Ok((b, c, h * w)),
        [b, c] => Ok((b, c, 1)),
        _ => Err(shape_err(format!(
            "batch-norm expects rank 2 or 4 input, got {:?}",
            x.shape()
        ))),
    }
}

/// Output of a training-mode batch-norm forward pass.
pub struct BatchNormTrain<T> {
    pub output: Vec<T>,
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Batch normalization with batch statistics: per channel,
/// `mean = Σz/m`, `var = Σ(z−mean)²/m`, `ẑ = (z−mean)/√(var+ε)`, `out = γẑ + β`.
pub fn batch_norm_train<T: Real>(x: &Tensor<T>, gamma: &[T], beta: &[T], eps: f64) -> Result<BatchNormTrain<T>> {
    let (b, c, plane) = channel_layout(x)?;
    let m = b * plane;
    let data = x.data();
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ch in 0..c {
        // shifted by the channel's first value: a constant channel gives
        // exactly that value as its mean and zero variance
        let pivot = data[ch * plane].to_f64_lossy();
        let (mut a1, mut a2) = ([0.0f64; 8], [0.0f64; 8]);
        for n in 0..b {
            let row = &data[(n * c + ch) * plane..][..plane];
            let mut chunks = row.chunks_exact(8);
            for chunk in &mut chunks {
                for j in 0..8 {
                    let d = chunk[j].to_f64_lossy() - pivot;
                    a1[j] += d;
                    a2[j] += d * d;
                }
            }
            for (j, &v) in chunks.remainder().iter().enumerate() {
                let d = v.to_f64_lossy() - pivot;
                a1[j] += d;
                a2[j] += d * d;
            }
        }
        let (s1, s2) = (a1.iter().sum::<f64>(), a2.iter().sum::<f64>());
        let mf = m as f64;
        mean[ch] = pivot + s1 / mf;
        var[ch] = ((s2 - s1 * s1 / mf) / mf).max(0.0);
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::of(1.0 / (v + eps).sqrt())).collect();
    let mut normalized = vec![T::zero(); data.len()];
    let mut output = vec![T::zero(); data.len()];
    let rows = data
        .chunks_exact(plane)
        .zip(normalized.chunks_exact_mut(plane))
        .zip(output.chunks_exact_mut(plane));
    for (i, ((src, nrm), out)) in rows.enumerate() {
        let ch = i % c;
        let (mu, is, g, bt) = (T::of(mean[ch]), inv_std[ch], gamma[ch], beta[ch]);
        for ((&v, n), o) in src.iter().zip(nrm.iter_mut()).zip(out.iter_mut()) {
            let xh = (v - mu) * is;
            *n = xh;
            *o = g * xh + bt;
        }
    }
    Ok(BatchNormTrain {
        output,
        normalized,
        inv_std,
        mean,
        var,
    })
}

/// Gradients `(dx, dγ, dβ)` of training-mode batch norm, including the
/// dependence of the batch mean and variance on every input.
pub fn batch_norm_train_backward<T: Real>(
    shape: (usize, usize, usize),
    normalized: &[T],
    inv_std: &[T],
    gamma: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (b, c, plane) = shape;
    let m = T::of((b * plane) as f64);
    let (dgamma, dbeta) = affine_param_grads(shape, normalized, dy);
    let mut dx = vec![T::zero(); dy.len()];
    let rows = dy
        .chunks_exact(plane)
        .zip(normalized.chunks_exact(plane))
        .zip(dx.chunks_exact_mut(plane));
    for (i, ((g, xh), d)) in rows.enumerate() {
        let ch = i % c;
        let scale = gamma[ch] * inv_std[ch] / m;
        let (db, dg) = (dbeta[ch], dgamma[ch]);
        for ((&g, &xh), d) in g.iter().zip(xh).zip(d.iter_mut()) {
            *d = scale * (m * g - db - xh * dg);
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) fn affine_param_grads<T: Real>(
    shape: (usize, usize, usize),
    normalized: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>) {
    let (_, c, plane) = shape;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (i, (g, xh)) in dy.chunks_exact(plane).zip(normalized.chunks_exact(plane)).enumerate() {
        let ch = i % c;
        dgamma[ch] += g.iter().zip(xh).fold(T::zero(), |a, (&g, &xh)| a + g * xh);
        dbeta[ch] += g.iter().fold(T::zero(), |a, &g| a + g);
    }
    (dgamma, dbeta)
}

/// Per-channel spatial mean: `[B, C, H, W] -> [B, C]`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let plane = h * w;
    let denom = T::of(plane as f64);
    let data = x
        .data()
        .chunks_exact(plane)
        .map(|p| p.iter().fold(T::zero(), |a, &v| a + v) / denom)
        .collect();
    Tensor::new([b, c], data)
}
