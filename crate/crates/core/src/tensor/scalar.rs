//! Scalar element types and the dense matrix-multiply kernel behind them.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

/// Row/column strides of a 2-D operand, in elements.
#[derive(Debug, Clone, Copy)]
pub struct Strides {
    pub row: usize,
    pub col: usize,
}

impl Strides {
    pub const fn row_major(cols: usize) -> Self {
        Self { row: cols, col: 1 }
    }

    /// View of a row-major `rows × cols` buffer as its transpose.
    pub const fn transposed(cols: usize) -> Self {
        Self { row: 1, col: cols }
    }

    fn extent(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.row + (cols - 1) * self.col + 1
        }
    }
}

pub trait Float:
    num_traits::Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + PartialOrd
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    /// Converts an `f64` literal into this type.
    fn lit(x: f64) -> Self;

    /// `c ← alpha·(a·b) + beta·c` over strided operands.
    ///
    /// # Safety
    /// Every index reachable through the given shapes and strides must be in
    /// bounds of the corresponding pointer allocation.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        sa: Strides,
        b: *const Self,
        sb: Strides,
        beta: Self,
        c: *mut Self,
        sc: Strides,
    );
}

/// Bounds-checked strided matrix product: `c ← alpha·(a·b) + beta·c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    sa: Strides,
    b: &[T],
    sb: Strides,
    beta: T,
    c: &mut [T],
    sc: Strides,
) {
    assert!(sa.extent(m, k) <= a.len(), "gemm: lhs out of bounds");
    assert!(sb.extent(k, n) <= b.len(), "gemm: rhs out of bounds");
    assert!(sc.extent(m, n) <= c.len(), "gemm: output out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * sc.row + j * sc.col] *= beta;
            }
        }
        return;
    }
    // SAFETY: extents were checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            sa,
            b.as_ptr(),
            sb,
            beta,
            c.as_mut_ptr(),
            sc,
        )
    }
}

impl Float for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        sa: Strides,
        b: *const f32,
        sb: Strides,
        beta: f32,
        c: *mut f32,
        sc: Strides,
    ) {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a,
            sa.row as isize,
            sa.col as isize,
            b,
            sb.row as isize,
            sb.col as isize,
            beta,
            c,
            sc.row as isize,
            sc.col as isize,
        )
    }
}

impl Float for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        sa: Strides,
        b: *const f64,
        sb: Strides,
        beta: f64,
        c: *mut f64,
        sc: Strides,
    ) {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a,
            sa.row as isize,
            sa.col as isize,
            b,
            sb.row as isize,
            sb.col as isize,
            beta,
            c,
            sc.row as isize,
            sc.col as isize,
        )
    }
}
