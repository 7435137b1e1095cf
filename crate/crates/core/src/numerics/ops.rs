use super::Scalar;
use crate::error::{Error, Result};

pub const RMS_EPS: f64 = 1e-5;

fn check_finite<T: Scalar>(x: &[T]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite)
    }
}

fn max_of<T: Scalar>(x: &[T]) -> T {
    x.iter().copied().fold(T::neg_infinity(), T::max)
}

/// Max-stabilized softmax, in place. `x` must be non-empty.
pub fn softmax_in_place<T: Scalar>(x: &mut [T]) {
    let m = max_of(x);
    let mut sum = T::zero();
    for v in x.iter_mut() {
        *v = (*v - m).exp();
        sum = sum + *v;
    }
    let inv = T::one() / sum;
    x.iter_mut().for_each(|v| *v = *v * inv);
}

/// Softmax with an implicit extra logit fixed at zero ("off by one"), in place.
///
/// Stabilized with `m = max(0, max x)` so the implicit term becomes `e^{-m}`.
pub fn softmax1_in_place<T: Scalar>(x: &mut [T]) {
    let m = max_of(x).max(T::zero());
    let mut sum = (-m).exp();
    for v in x.iter_mut() {
        *v = (*v - m).exp();
        sum = sum + *v;
    }
    let inv = T::one() / sum;
    x.iter_mut().for_each(|v| *v = *v * inv);
}

pub fn softmax<T: Scalar>(x: &[T]) -> Result<Vec<T>> {
    if x.is_empty() {
        return Err(Error::EmptyInput);
    }
    check_finite(x)?;
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Softmax whose outputs may sum to less than one; an empty input yields an
/// empty output (the implicit zero logit takes all the mass).
pub fn softmax1<T: Scalar>(x: &[T]) -> Result<Vec<T>> {
    check_finite(x)?;
    let mut out = x.to_vec();
    softmax1_in_place(&mut out);
    Ok(out)
}

pub fn log_sum_exp<T: Scalar>(x: &[T]) -> T {
    let m = max_of(x);
    let s = x.iter().fold(T::zero(), |acc, &v| acc + (v - m).exp());
    m + s.ln()
}

/// Negative log-likelihood of `target` under `softmax(logits)`.
pub fn cross_entropy<T: Scalar>(logits: &[T], target: usize) -> Result<T> {
    if target >= logits.len() {
        return Err(Error::Index {
            index: target,
            len: logits.len(),
        });
    }
    check_finite(logits)?;
    Ok((log_sum_exp(logits) - logits[target]).max(T::zero()))
}

/// Writes `scale * (softmax(logits) - onehot(target))` into `grad`.
pub fn cross_entropy_backward<T: Scalar>(logits: &[T], target: usize, scale: T, grad: &mut [T]) {
    grad.copy_from_slice(logits);
    softmax_in_place(grad);
    grad[target] = grad[target] - T::one();
    grad.iter_mut().for_each(|g| *g = *g * scale);
}

/// Backward through a (possibly off-by-one) softmax row: on entry `grad`
/// holds dL/dp, on exit dL/dx. The Jacobian `diag(p) - p pᵀ` is the same
/// for both variants.
pub fn softmax_backward_in_place<T: Scalar>(p: &[T], grad: &mut [T]) {
    let inner = p
        .iter()
        .zip(grad.iter())
        .fold(T::zero(), |acc, (&pi, &gi)| acc + pi * gi);
    for (g, &pi) in grad.iter_mut().zip(p) {
        *g = pi * (*g - inner);
    }
}

/// `out = x * gain / rms(x)`; returns `1 / rms(x)` for the backward pass.
pub fn rmsnorm_forward<T: Scalar>(x: &[T], gain: &[T], out: &mut [T]) -> T {
    let n = T::from_f64(x.len() as f64);
    let ms = x.iter().fold(T::zero(), |acc, &v| acc + v * v) / n;
    let inv = T::one() / (ms + T::from_f64(RMS_EPS)).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
    inv
}

/// Accumulates input and gain gradients of [`rmsnorm_forward`].
pub fn rmsnorm_backward<T: Scalar>(
    x: &[T],
    gain: &[T],
    inv_rms: T,
    dy: &[T],
    dx: &mut [T],
    dgain: &mut [T],
) {
    let n = T::from_f64(x.len() as f64);
    let mut proj = T::zero();
    for i in 0..x.len() {
        proj = proj + dy[i] * gain[i] * x[i];
        dgain[i] = dgain[i] + dy[i] * x[i] * inv_rms;
    }
    let coef = inv_rms * inv_rms * inv_rms * proj / n;
    for i in 0..x.len() {
        dx[i] = dx[i] + inv_rms * gain[i] * dy[i] - coef * x[i];
    }
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}
