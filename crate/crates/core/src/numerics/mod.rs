//! Dense numeric substrate: row-major matrices, softmax variants, RMS
//! normalization, cross-entropy and the hand-written backward rules used by
//! the training graph.
//!
//! Everything here is generic over [`Scalar`] so the same kernels run in
//! `f32` for training/inference and in `f64` for gradient verification.

mod matrix;
mod ops;

pub use matrix::{matmul, matmul_acc, matmul_backward, matmul_nt, matmul_tn_acc, Matrix};
pub use ops::{
    cross_entropy, cross_entropy_backward, log_sum_exp, rmsnorm_backward, rmsnorm_forward, silu,
    silu_grad, softmax, softmax1, softmax1_in_place, softmax_backward_in_place, softmax_in_place,
    RMS_EPS,
};

use num_traits::Float;
use std::fmt::Debug;

/// Floating-point element type for all kernels.
pub trait Scalar: Float + Default + Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dot product with eight interleaved partial sums, so the loop vectorizes
/// instead of waiting on a single accumulator.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let mut tail = T::zero();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail = tail + *x * *y;
    }
    let mut acc = [T::zero(); 8];
    for (x, y) in ca.zip(cb) {
        let (x, y): (&[T; 8], &[T; 8]) = (x.try_into().expect("chunk of 8"), y.try_into().expect("chunk of 8"));
        for k in 0..8 {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    let half = [acc[0] + acc[4], acc[1] + acc[5], acc[2] + acc[6], acc[3] + acc[7]];
    (half[0] + half[2]) + (half[1] + half[3]) + tail
}

/// `dst += alpha * src`.
#[inline]
pub fn axpy<T: Scalar>(dst: &mut [T], alpha: T, src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + alpha * *s;
    }
}

pub fn l2_norm<T: Scalar>(v: &[T]) -> T {
    dot(v, v).sqrt()
}
