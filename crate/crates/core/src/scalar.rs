//! Floating-point scalar abstraction shared by volumes, tensors and optimisers.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point: `f32` or `f64`.
///
/// Simulation and metrics run in `f64`; network tensors default to `f32`
/// and switch to `f64` for finite-difference gradient checks.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` for row-major slices with explicit strides.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );
}

impl Scalar for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        (rsa, csa): (isize, isize),
        b: &[Self],
        (rsb, csb): (isize, isize),
        beta: Self,
        c: &mut [Self],
        (rsc, csc): (isize, isize),
    ) {
        check_extent(m, k, a.len(), rsa, csa);
        check_extent(k, n, b.len(), rsb, csb);
        check_extent(m, n, c.len(), rsc, csc);
        // SAFETY: extents checked above; slices do not alias (c is &mut).
        unsafe {
            matrixmultiply::sgemm(
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
                rsc,
                csc,
            );
        }
    }
}

impl Scalar for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        (rsa, csa): (isize, isize),
        b: &[Self],
        (rsb, csb): (isize, isize),
        beta: Self,
        c: &mut [Self],
        (rsc, csc): (isize, isize),
    ) {
        check_extent(m, k, a.len(), rsa, csa);
        check_extent(k, n, b.len(), rsb, csb);
        check_extent(m, n, c.len(), rsc, csc);
        // SAFETY: extents checked above; slices do not alias (c is &mut).
        unsafe {
            matrixmultiply::dgemm(
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
                rsc,
                csc,
            );
        }
    }
}

fn check_extent(rows: usize, cols: usize, len: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    let last = (rows - 1) * rs as usize + (cols - 1) * cs as usize;
    assert!(last < len, "gemm operand out of bounds: last index {last}, len {len}");
}
