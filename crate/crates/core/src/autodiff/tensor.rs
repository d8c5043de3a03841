use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

/// Scalar type the engine runs on. Training uses `f32`; gradient checks use
/// `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + Sum + 'static
{
    const NAME: &'static str;

    /// Raw strided `C = alpha * A * B + beta * C`.
    ///
    /// # Safety
    /// Pointers and strides must address valid `m x k`, `k x n` and `m x n`
    /// matrices, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    /// In-place `exp` over a buffer.
    fn exp_in_place(buf: &mut [Self]) {
        for v in buf {
            *v = v.exp();
        }
    }

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every Real")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn exp_in_place(buf: &mut [f32]) {
        for v in buf {
            *v = exp_f32(*v);
        }
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Branch-free `exp` for `f32` (Cody-Waite reduction plus a degree-6
/// polynomial, ~2 ulp). Written so the softmax loop auto-vectorises.
#[inline(always)]
fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    const ROUND: f32 = 12_582_912.0; // 1.5 * 2^23
    let x = x.clamp(-87.0, 88.0);
    let t = x * LOG2E + ROUND;
    let n = t - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.666_666_7e-1
                    + r * (4.166_666_8e-2 + r * (8.333_452e-3 + r * 1.388_925_5e-3)))));
    // The low mantissa bits of `t` hold n as an integer; no float->int cast.
    let bits = (t.to_bits().wrapping_sub(ROUND.to_bits()).wrapping_add(127)) << 23;
    p * f32::from_bits(bits)
}

/// Row-major dense matrix; the only tensor shape the engine needs.
#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Debug> Debug for Matrix<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Matrix[{}x{}]", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length does not match {rows}x{cols}");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![T::zero(); rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        Self::new(rows, cols, vec![v; rows * cols])
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Self {
        Self::new(rows, cols, data.iter().map(|&v| T::of(v)).collect())
    }

    /// `[n, 3]` matrix of a cloud's coordinates.
    pub fn from_cloud(cloud: &PointCloud) -> Self {
        Self::from_f64(cloud.len(), 3, &cloud.to_flat())
    }

    /// Interprets an `[n, 3]` matrix as a point cloud.
    pub fn to_cloud(&self) -> Result<PointCloud> {
        if self.cols != 3 {
            return Err(Error::invalid(format!("expected [n, 3] points, got {}x{}", self.rows, self.cols)));
        }
        PointCloud::from_flat(&self.to_f64())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn reshaped(mut self, rows: usize, cols: usize) -> Self {
        assert_eq!(rows * cols, self.data.len(), "reshape changes element count");
        self.rows = rows;
        self.cols = cols;
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::new(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Matrix<T>) {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in add");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale_in_place(&mut self, s: T) {
        for v in &mut self.data {
            *v = *v * s;
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }

    /// `op(self) * op(other)` where `op` optionally transposes.
    pub fn matmul_t(&self, ta: bool, other: &Matrix<T>, tb: bool) -> Matrix<T> {
        let (m, k) = if ta { (self.cols, self.rows) } else { (self.rows, self.cols) };
        let (k2, n) = if tb { (other.cols, other.rows) } else { (other.rows, other.cols) };
        assert_eq!(k, k2, "inner dimensions differ in matmul");
        let mut out = Matrix::zeros(m, n);
        gemm(ta, tb, m, n, k, T::one(), &self.data, self.cols, &other.data, other.cols, T::zero(), &mut out.data, n);
        out
    }

    pub fn matmul(&self, other: &Matrix<T>) -> Matrix<T> {
        self.matmul_t(false, other, false)
    }

    /// Column sums as a `1 x cols` matrix.
    pub fn col_sums(&self) -> Matrix<T> {
        let mut out = vec![T::zero(); self.cols];
        for r in self.data.chunks_exact(self.cols.max(1)) {
            for (o, &v) in out.iter_mut().zip(r) {
                *o = *o + v;
            }
        }
        Matrix::new(1, self.cols, out)
    }
}

/// BLAS-style `C = alpha * op(A) * op(B) + beta * C` on row-major buffers with
/// leading dimensions, so column blocks (attention heads) can be addressed in
/// place. `op(A)` is `m x k`, `op(B)` is `k x n`. When `beta` is zero `C` is
/// not read.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    ta: bool,
    tb: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: T,
    a: &[T],
    lda: usize,
    b: &[T],
    ldb: usize,
    beta: T,
    c: &mut [T],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for v in &mut c[i * ldc..i * ldc + n] {
                *v = if beta == T::zero() { T::zero() } else { *v * beta };
            }
        }
        return;
    }
    let (a_need, rsa, csa) = if ta {
        ((k - 1) * lda + m, 1, lda as isize)
    } else {
        ((m - 1) * lda + k, lda as isize, 1)
    };
    let (b_need, rsb, csb) = if tb {
        ((n - 1) * ldb + k, 1, ldb as isize)
    } else {
        ((k - 1) * ldb + n, ldb as isize, 1)
    };
    assert!(a.len() >= a_need, "gemm: A buffer too short");
    assert!(b.len() >= b_need, "gemm: B buffer too short");
    assert!(c.len() >= (m - 1) * ldc + n, "gemm: C buffer too short");
    // SAFETY: extents checked above; `c` is a unique borrow so it cannot
    // alias the shared `a`/`b` borrows.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|p| a.get(i, p) * b.get(p, j)).sum())
    }

    fn transpose(a: &Matrix<f64>) -> Matrix<f64> {
        Matrix::from_fn(a.cols(), a.rows(), |i, j| a.get(j, i))
    }

    #[test]
    fn matmul_transposes_match_naive() {
        let a = Matrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64 * 0.5 - 1.0);
        let b = Matrix::from_fn(3, 5, |i, j| (i as f64 - j as f64) * 0.25);
        let want = naive(&a, &b);
        assert_eq!(a.matmul(&b), want);
        assert_eq!(transpose(&a).matmul_t(true, &b, false), want);
        assert_eq!(a.matmul_t(false, &transpose(&b), true), want);
        assert_eq!(transpose(&a).matmul_t(true, &transpose(&b), true), want);
    }

    #[test]
    fn fast_exp_is_accurate() {
        let mut worst = 0.0f64;
        let mut x = -80.0f32;
        while x < 80.0 {
            let got = exp_f32(x) as f64;
            let want = (x as f64).exp();
            worst = worst.max(((got - want) / want).abs());
            x += 0.0137;
        }
        assert!(worst < 1e-6, "relative error {worst}");
        assert_eq!(exp_f32(0.0), 1.0);
        assert!(exp_f32(-1000.0) < 1e-37);
    }
}
