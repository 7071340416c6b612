//! A small CPU neural-network engine: dense, 2-D convolution, batch
//! normalization, ReLU, max-pooling and additive skips, with explicit
//! backward passes and Adam.
//!
//! Tensors are batch-first (`[B, C, H, W]` or `[B, F]`). The engine is
//! generic over the float type so training can run in `f32` while gradient
//! checks run in `f64`.

mod layers;
mod network;
mod optim;
mod tensor;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub use layers::{BatchNorm, Conv2d, Dense, Layer, LayerSpec, MaxPool2d};
pub use network::{Mode, Network};
pub use optim::{Adam, AdamConfig};
pub use tensor::Tensor;

/// Floating-point element type of the engine.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + 'static
{
    /// `C = alpha * A B + beta * C` with arbitrary row/column strides.
    ///
    /// # Safety
    /// Every strided index touched by an `m x k`, `k x n` and `m x n` view
    /// must lie inside the corresponding slice.
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

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }
}

impl Real for f32 {
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
}

impl Real for f64 {
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

/// Strided matrix view: `(slice, row stride, column stride)`.
pub(crate) type View<'a, T> = (&'a [T], usize, usize);

fn max_index(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs
    }
}

/// Safe wrapper around [`Real::gemm_raw`]: `C = alpha * A B + beta * C`,
/// with `A` `m x k`, `B` `k x n` and `C` `m x n` (row-major strides given).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: View<'_, T>,
    b: View<'_, T>,
    beta: T,
    c: &mut [T],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || max_index(m, k, a.1, a.2) < a.0.len(), "gemm: A view out of bounds");
    assert!(k == 0 || max_index(k, n, b.1, b.2) < b.0.len(), "gemm: B view out of bounds");
    assert!(max_index(m, n, rsc, csc) < c.len(), "gemm: C view out of bounds");
    // SAFETY: all views were bounds-checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        )
    }
}

/// Mean squared error over a `[B, 1]` prediction, with its gradient.
pub fn mse_loss<T: Real>(pred: &Tensor<T>, target: &[T]) -> (T, Tensor<T>) {
    assert_eq!(pred.len(), target.len(), "prediction/target length");
    let n = T::of(target.len() as f64);
    let mut grad = pred.clone();
    let mut loss = T::zero();
    for (g, &t) in grad.data_mut().iter_mut().zip(target) {
        let d = *g - t;
        loss += d * d;
        *g = T::of(2.0) * d / n;
    }
    (loss / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_strided() {
        // A = [[1,2],[3,4]], B = A^T via strides
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let mut c = [0.0f64; 4];
        gemm(2, 2, 2, 1.0, (&a, 2, 1), (&a, 1, 2), 0.0, &mut c, 2, 1);
        assert_eq!(c, [5.0, 11.0, 11.0, 25.0]);
    }

    #[test]
    fn mse_simple() {
        let p = Tensor::new(vec![2, 1], vec![1.0f64, 3.0]);
        let (l, g) = mse_loss(&p, &[0.0, 1.0]);
        assert_eq!(l, 2.5);
        assert_eq!(g.data(), &[1.0, 2.0]);
    }
}
