//! Scalar abstraction and the matrix-product kernels behind conv and dense.
//!
//! `f32` is the training precision and goes through `matrixmultiply`.
//! `f64` is the verification precision: its kernel accumulates every
//! output element as a plain left-to-right sum over the inner index,
//! starting from zero, so results match a naive triple loop bit-for-bit.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// A strided, read-only matrix view over a slice.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Contiguous row-major view.
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn last_index(&self) -> usize {
        (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// Floating-point element type usable in tensors.
pub trait Real:
    Float + Default + Debug + Display + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + DivAssign + 'static
{
    const NAME: &'static str;

    fn of(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    /// `c = a·b` (or `c += a·b` when `accumulate`), `c` row-major with
    /// leading dimension `ldc`.
    fn gemm(a: MatRef<'_, Self>, b: MatRef<'_, Self>, c: &mut [Self], ldc: usize, accumulate: bool);
}

fn check_gemm<T>(a: &MatRef<'_, T>, b: &MatRef<'_, T>, c_len: usize, ldc: usize) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions differ");
    assert!(a.rows > 0 && a.cols > 0 && b.cols > 0, "gemm on empty matrix");
    assert!(a.last_index() < a.data.len(), "gemm lhs view out of bounds");
    assert!(b.last_index() < b.data.len(), "gemm rhs view out of bounds");
    assert!(ldc >= b.cols, "gemm output leading dimension too small");
    assert!((a.rows - 1) * ldc + b.cols <= c_len, "gemm output out of bounds");
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }

    fn gemm(a: MatRef<'_, f32>, b: MatRef<'_, f32>, c: &mut [f32], ldc: usize, accumulate: bool) {
        check_gemm(&a, &b, c.len(), ldc);
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: every index the kernel touches is bounded by the checks above.
        unsafe {
            matrixmultiply::sgemm(
                a.rows,
                a.cols,
                b.cols,
                1.0,
                a.data.as_ptr(),
                a.row_stride as isize,
                a.col_stride as isize,
                b.data.as_ptr(),
                b.row_stride as isize,
                b.col_stride as isize,
                beta,
                c.as_mut_ptr(),
                ldc as isize,
                1,
            );
        }
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }

    fn gemm(a: MatRef<'_, f64>, b: MatRef<'_, f64>, c: &mut [f64], ldc: usize, accumulate: bool) {
        check_gemm(&a, &b, c.len(), ldc);
        let n = b.cols;
        let mut acc = vec![0.0f64; n];
        for i in 0..a.rows {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for p in 0..a.cols {
                let aip = a.data[i * a.row_stride + p * a.col_stride];
                let row = p * b.row_stride;
                if b.col_stride == 1 {
                    let brow = &b.data[row..row + n];
                    for (s, &bv) in acc.iter_mut().zip(brow) {
                        *s += aip * bv;
                    }
                } else {
                    for (j, s) in acc.iter_mut().enumerate() {
                        *s += aip * b.data[row + j * b.col_stride];
                    }
                }
            }
            let out = &mut c[i * ldc..i * ldc + n];
            if accumulate {
                for (o, &s) in out.iter_mut().zip(&acc) {
                    *o += s;
                }
            } else {
                out.copy_from_slice(&acc);
            }
        }
    }
}
