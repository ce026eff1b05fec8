//! Brute-force loop references for convolution and pooling, written
//! independently of the im2col/gemm implementation.

#![allow(dead_code)]

use glyphnet::{Padding, PoolKind, Tensor};

/// Output extent and leading pad along one axis.
pub fn axis(input: usize, k: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => ((input - k) / stride + 1, 0),
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            (out, total / 2)
        }
    }
}

fn at(x: &Tensor<f64>, n: usize, c: usize, y: isize, xx: isize) -> Option<f64> {
    let s = x.shape();
    if y < 0 || xx < 0 || y as usize >= s[2] || xx as usize >= s[3] {
        return None;
    }
    Some(x.data()[((n * s[1] + c) * s[2] + y as usize) * s[3] + xx as usize])
}

/// Zero-padded cross-correlation; each output is summed over input
/// channel, then kernel row, then kernel column, and the bias added last.
pub fn conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
    padding: Padding,
) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    let (oh, pt) = axis(h, kh, stride, padding);
    let (ow, pl) = axis(wd, kw, stride, padding);
    let mut out = Vec::with_capacity(n * cout * oh * ow);
    for b in 0..n {
        for o in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for c in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oy * stride + ky) as isize - pt as isize;
                                let xx = (ox * stride + kx) as isize - pl as isize;
                                if let Some(v) = at(x, b, c, y, xx) {
                                    acc += v * w.data()[((o * cin + c) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                    if let Some(bias) = bias {
                        acc += bias.data()[o];
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::new([n, cout, oh, ow], out).unwrap()
}

/// Pooling over the in-image part of each window. Max keeps the first
/// maximum in row-major window order; average divides by the number of
/// in-image cells.
pub fn pool2d(x: &Tensor<f64>, kind: PoolKind, size: usize, stride: usize, padding: Padding) -> Tensor<f64> {
    let xs = x.shape();
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (oh, pt) = axis(h, size, stride, padding);
    let (ow, pl) = axis(wd, size, stride, padding);
    let mut out = Vec::new();
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut cells = Vec::new();
                    for ky in 0..size {
                        for kx in 0..size {
                            let y = (oy * stride + ky) as isize - pt as isize;
                            let xx = (ox * stride + kx) as isize - pl as isize;
                            cells.extend(at(x, b, ch, y, xx));
                        }
                    }
                    let v = match kind {
                        PoolKind::Max => {
                            let mut best = cells[0];
                            for &v in &cells[1..] {
                                if v > best {
                                    best = v;
                                }
                            }
                            best
                        }
                        PoolKind::Avg => {
                            let mut s = 0.0;
                            for &v in &cells {
                                s += v;
                            }
                            s / cells.len() as f64
                        }
                    };
                    out.push(v);
                }
            }
        }
    }
    Tensor::new([n, c, oh, ow], out).unwrap()
}

/// Bitwise equality of two tensors, with the first differing index on failure.
pub fn bit_equal(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<(), String> {
    if a.shape() != b.shape() {
        return Err(format!("shapes {:?} and {:?}", a.shape(), b.shape()));
    }
    match a
        .data()
        .iter()
        .zip(b.data())
        .position(|(x, y)| x.to_bits() != y.to_bits())
    {
        None => Ok(()),
        Some(i) => Err(format!("index {i}: {} vs {}", a.data()[i], b.data()[i])),
    }
}
