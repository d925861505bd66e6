//! Scalar abstraction and strided matrix products.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type of model tensors.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + 'static
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
    const DTYPE: &'static str;

    /// `c = alpha * a * b + beta * c` for an `m x k` by `k x n` product with
    /// explicit row/column strides.
    ///
    /// # Safety
    /// Every addressed element must lie inside its slice; callers go through
    /// [`gemm`], which checks the extents.
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

    fn to_le_bytes_into(self, out: &mut Vec<u8>);
    fn from_le_slice(bytes: &[u8]) -> Self;
    fn width() -> usize;
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";

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

    fn to_le_bytes_into(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }

    fn width() -> usize {
        8
    }
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";

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

    fn to_le_bytes_into(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }

    fn width() -> usize {
        4
    }
}

#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("representable constant")
}

/// A strided view description: `(offset, row_stride, col_stride)`.
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    /// Row-major `rows x cols` matrix at `offset`.
    pub fn rm(offset: usize, cols: usize) -> Self {
        Self { offset, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn tr(offset: usize, cols: usize) -> Self {
        Self { offset, rs: 1, cs: cols }
    }

    /// Strided view with the given leading dimension, used for head slices.
    pub fn strided(offset: usize, ld: usize) -> Self {
        Self { offset, rs: ld, cs: 1 }
    }

    pub fn strided_t(offset: usize, ld: usize) -> Self {
        Self { offset, rs: 1, cs: ld }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            self.offset
        } else {
            self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
        }
    }
}

/// `c[m x n] = alpha * a[m x k] * b[k x n] + beta * c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    la: Layout,
    b: &[T],
    lb: Layout,
    beta: T,
    c: &mut [T],
    lc: Layout,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(la.last(m, k) < a.len(), "gemm: a out of bounds");
        assert!(lb.last(k, n) < b.len(), "gemm: b out of bounds");
    }
    assert!(lc.last(m, n) < c.len(), "gemm: c out of bounds");
    // SAFETY: extents checked above; a/b and c are distinct borrows.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(la.offset),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr().add(lb.offset),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr().add(lc.offset),
            lc.rs as isize,
            lc.cs as isize,
        );
    }
}

/// `out[rows x n] (+)= x[rows x k] * w[k x n]`, all row-major.
pub fn matmul<T: Real>(x: &[T], w: &[T], out: &mut [T], rows: usize, k: usize, n: usize, acc: bool) {
    let beta = if acc { T::one() } else { T::zero() };
    gemm(rows, k, n, T::one(), x, Layout::rm(0, k), w, Layout::rm(0, n), beta, out, Layout::rm(0, n));
}

/// `dw[k x n] += x^T[k x rows] * dy[rows x n]`.
pub fn matmul_tn_acc<T: Real>(x: &[T], dy: &[T], dw: &mut [T], rows: usize, k: usize, n: usize) {
    gemm(k, rows, n, T::one(), x, Layout::tr(0, k), dy, Layout::rm(0, n), T::one(), dw, Layout::rm(0, n));
}

/// `dx[rows x k] (+)= dy[rows x n] * w^T[n x k]`.
pub fn matmul_nt<T: Real>(dy: &[T], w: &[T], dx: &mut [T], rows: usize, k: usize, n: usize, acc: bool) {
    let beta = if acc { T::one() } else { T::zero() };
    gemm(rows, n, k, T::one(), dy, Layout::rm(0, n), w, Layout::tr(0, n), beta, dx, Layout::rm(0, k));
}
