//! Slice-level compute kernels shared by the tape and by tape-free callers.
//!
//! Everything here is single-threaded and has a fixed reduction order, so
//! results are bitwise reproducible.

use super::Scalar;

/// Strided read-only view of a matrix inside a flat buffer.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Dense row-major `rows x cols` matrix.
    pub fn dense(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef { data, offset: 0, rows, cols, row_stride: cols, col_stride: 1 }
    }

    /// Column block `[col0, col0 + cols)` of a row-major matrix of width `width`.
    pub fn block(data: &'a [T], row0: usize, rows: usize, col0: usize, cols: usize, width: usize) -> Self {
        MatRef { data, offset: row0 * width + col0, rows, cols, row_stride: width, col_stride: 1 }
    }

    pub fn t(self) -> Self {
        MatRef {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }

    fn in_bounds(&self) -> bool {
        self.rows == 0
            || self.cols == 0
            || self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
                < self.data.len()
    }
}

/// Strided mutable view, same addressing as [`MatRef`].
#[derive(Debug)]
pub struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatMut<'a, T> {
    pub fn dense(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        MatMut { data, offset: 0, rows, cols, row_stride: cols, col_stride: 1 }
    }

    pub fn block(data: &'a mut [T], row0: usize, rows: usize, col0: usize, cols: usize, width: usize) -> Self {
        MatMut { data, offset: row0 * width + col0, rows, cols, row_stride: width, col_stride: 1 }
    }

    fn in_bounds(&self) -> bool {
        self.rows == 0
            || self.cols == 0
            || self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
                < self.data.len()
    }
}

/// `c = alpha * a * b + beta * c`. Panics on non-conforming views; callers
/// validate user-facing shapes before reaching this point.
pub fn gemm<T: Scalar>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: MatMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    assert!(a.in_bounds() && b.in_bounds() && c.in_bounds(), "gemm view out of bounds");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    // SAFETY: all three views were bounds-checked above and `c` is a unique borrow.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.row_stride as isize,
            c.col_stride as isize,
        );
    }
}

/// Dense `[m,k] x [k,n]` product into a fresh buffer.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm(T::one(), MatRef::dense(a, m, k), MatRef::dense(b, k, n), T::zero(), MatMut::dense(&mut out, m, n));
    out
}

pub fn transpose<T: Copy>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(a.len());
    for c in 0..cols {
        out.extend((0..rows).map(|r| a[r * cols + c]));
    }
    out
}

/// Numerically stable softmax of every row, in place.
pub fn softmax_rows<T: Scalar>(x: &mut [T], cols: usize) {
    for row in x.chunks_exact_mut(cols) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Softmax backward for one row block: `dx = y * (dy - sum(dy * y))`.
pub fn softmax_rows_backward<T: Scalar>(y: &[T], dy: &[T], cols: usize) -> Vec<T> {
    let mut dx = Vec::with_capacity(y.len());
    for (yr, gr) in y.chunks_exact(cols).zip(dy.chunks_exact(cols)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        dx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
    }
    dx
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Standardizes each row over its last axis. Returns `(xhat, rstd)`.
pub fn layer_norm_rows<T: Scalar>(x: &[T], cols: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let n = T::from_usize(cols).unwrap();
    let mut xhat = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(x.len() / cols);
    for row in x.chunks_exact(cols) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let r = T::one() / (var + eps).sqrt();
        rstd.push(r);
        xhat.extend(row.iter().map(|&v| (v - mean) * r));
    }
    (xhat, rstd)
}

pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Derivative of exact-erf GELU: `Phi(x) + x * phi(x)`.
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// Column sums of a row-major `[rows, cols]` buffer.
pub fn col_sums<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for row in x.chunks_exact(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// Split a row-major buffer into consecutive mutable row blocks.
pub fn split_rows_mut<'a, T>(mut buf: &'a mut [T], lens: &[usize], width: usize) -> Vec<&'a mut [T]> {
    let mut out = Vec::with_capacity(lens.len());
    for &len in lens {
        let (head, tail) = std::mem::take(&mut buf).split_at_mut(len * width);
        out.push(head);
        buf = tail;
    }
    out
}

pub fn split_rows<'a, T>(mut buf: &'a [T], lens: &[usize], width: usize) -> Vec<&'a [T]> {
    let mut out = Vec::with_capacity(lens.len());
    for &len in lens {
        let (head, tail) = buf.split_at(len * width);
        out.push(head);
        buf = tail;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strided_gemm_matches_naive() {
        let a: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 2.0).collect(); // 3x4
        let b: Vec<f64> = (0..8).map(|v| (v as f64).sin()).collect(); // 4x2
        let c = matmul(&a, &b, 3, 4, 2);
        for i in 0..3 {
            for j in 0..2 {
                let naive: f64 = (0..4).map(|p| a[i * 4 + p] * b[p * 2 + j]).sum();
                assert!((c[i * 2 + j] - naive).abs() < 1e-12);
            }
        }
        // a^T b^T through views: (4x3)(2x4)^T is not conforming; use a^T * a = 4x4
        let mut ata = vec![0.0; 16];
        let av = MatRef::dense(&a, 3, 4);
        gemm(1.0, av.t(), av, 0.0, MatMut::dense(&mut ata, 4, 4));
        for i in 0..4 {
            for j in 0..4 {
                let naive: f64 = (0..3).map(|p| a[p * 4 + i] * a[p * 4 + j]).sum();
                assert!((ata[i * 4 + j] - naive).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_survives_large_inputs() {
        let mut x = vec![1000.0f32, 1001.0, -1000.0, 999.0];
        softmax_rows(&mut x, 4);
        assert!(x.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!((x.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gelu_at_zero() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu_grad(0.0f64) - 0.5).abs() < 1e-15);
    }
}
