//! Minimal dense-network toolkit with hand-written backward passes.
//!
//! Activations are row-major `rows x features` buffers. Every layer exposes
//! a forward function returning whatever its backward needs, and a backward
//! function that accumulates parameter gradients into a [`Grads`] and
//! returns the input gradient. Everything is generic over [`Scalar`] so the
//! same code runs in `f32` for training and `f64` for gradient checks.

mod adam;
mod layers;
mod params;

pub use adam::{Adam, AdamConfig};
pub use layers::{
    attention_backward, attention_forward, gelu_backward, gelu_forward, layer_norm_backward, layer_norm_forward,
    silu_backward, silu_forward, AttentionCache, LayerNormCache, Linear,
};
pub use params::{Grads, ParamId, ParamStore, Tensor};

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating point element type with a GEMM kernel.
pub trait Scalar:
    Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + DivAssign + 'static
{
    /// `C = alpha * A B + beta * C` on strided views.
    ///
    /// # Safety
    /// Every strided index touched must lie inside the respective buffer.
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

    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite conversion")
    }

    fn to_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    /// Hyperbolic tangent; may be a close approximation.
    fn fast_tanh(self) -> Self {
        self.tanh()
    }
}

impl Scalar for f32 {
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    /// Rational minimax approximation, accurate to a few ulp.
    fn fast_tanh(self) -> f32 {
        let x = self.clamp(-7.905_31, 7.905_31);
        if x.abs() < 4e-4 {
            return x;
        }
        let x2 = x * x;
        let p = x
            * (4.893_524_6e-3
                + x2 * (6.372_619_3e-4
                    + x2 * (1.485_722_4e-5
                        + x2 * (5.122_297e-8 + x2 * (-8.604_672e-11 + x2 * (2.000_188e-13 + x2 * -2.760_768_5e-16))))));
        let q = 4.893_525e-3 + x2 * (2.268_434_6e-3 + x2 * (1.185_347_1e-4 + x2 * 1.198_258_4e-6));
        p / q
    }
}

impl Scalar for f64 {
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Read-only strided matrix view.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    data: &'a [T],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T: Scalar> MatRef<'a, T> {
    /// Dense row-major view.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self::strided(data, 0, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a [T], offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        let m = Self { data, offset, rows, cols, rs, cs };
        assert!(m.fits(data.len()), "matrix view exceeds buffer");
        m
    }

    pub fn t(self) -> Self {
        Self { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
    }

    fn fits(&self, len: usize) -> bool {
        self.rows == 0 || self.cols == 0 || self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < len
    }
}

/// Mutable strided matrix view.
pub struct MatMut<'a, T> {
    data: &'a mut [T],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T: Scalar> MatMut<'a, T> {
    pub fn new(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        Self::strided(data, 0, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a mut [T], offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        let fits = rows == 0 || cols == 0 || offset + (rows - 1) * rs + (cols - 1) * cs < data.len();
        assert!(fits, "matrix view exceeds buffer");
        Self { data, offset, rows, cols, rs, cs }
    }
}

/// `C = alpha * A B + beta * C`.
pub fn gemm<T: Scalar>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: MatMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "output shape differs");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if a.cols == 0 {
        // Empty inner product: scale C by beta.
        for i in 0..c.rows {
            for j in 0..c.cols {
                let idx = c.offset + i * c.rs + j * c.cs;
                c.data[idx] = if beta == T::zero() { T::zero() } else { beta * c.data[idx] };
            }
        }
        return;
    }
    // SAFETY: the constructors check that every strided index is in bounds,
    // and `c` is uniquely borrowed.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Dense `rows x inner` times `inner x cols`, both row-major.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], rows: usize, inner: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    gemm(
        T::one(),
        MatRef::new(a, rows, inner),
        MatRef::new(b, inner, cols),
        T::zero(),
        MatMut::new(&mut out, rows, cols),
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_tanh_close_to_libm() {
        for i in -2000..=2000 {
            let x = i as f32 * 0.01;
            assert!((x.fast_tanh() - x.tanh()).abs() < 2e-6, "{x}");
        }
        assert_eq!(20.0f32.fast_tanh(), 1.0f32.min(20.0f32.fast_tanh()));
    }

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_including_transposes() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.31).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.17).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        assert_eq!(matmul(&a, &b, m, k, n).iter().zip(&want).filter(|(x, y)| (*x - *y).abs() > 1e-12).count(), 0);

        // (B^T)^T A^T^T: compute C^T = B^T A^T via transposed views.
        let mut ct = vec![0.0; n * m];
        gemm(1.0, MatRef::new(&b, k, n).t(), MatRef::new(&a, m, k).t(), 0.0, MatMut::new(&mut ct, n, m));
        for i in 0..m {
            for j in 0..n {
                assert!((ct[j * m + i] - want[i * n + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    #[should_panic(expected = "exceeds buffer")]
    fn out_of_bounds_view_panics() {
        let d = vec![0.0f32; 10];
        let _ = MatRef::new(&d, 3, 4);
    }
}
