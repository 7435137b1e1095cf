//! Rotary position encoding over adjacent pairs `(v[2i], v[2i+1])`.

use crate::error::{Error, Result};
use crate::numerics::Scalar;

/// Positions precomputed by default; larger positions fall back to direct evaluation.
pub const DEFAULT_TABLE_POSITIONS: usize = 8192;

#[inline]
fn angle(pos: usize, pair: usize, d_head: usize, base: f64) -> (f64, f64) {
    let inv_freq = base.powf(-2.0 * pair as f64 / d_head as f64);
    (pos as f64 * inv_freq).sin_cos()
}

#[inline]
fn rotate_pair<T: Scalar>(v: &mut [T], pair: usize, cos: T, sin: T) {
    let (a, b) = (v[2 * pair], v[2 * pair + 1]);
    v[2 * pair] = a * cos - b * sin;
    v[2 * pair + 1] = a * sin + b * cos;
}

/// Cached cos/sin values for one head width.
#[derive(Clone, Debug)]
pub struct RopeTable<T = f32> {
    d_head: usize,
    base: f64,
    positions: usize,
    cos: Vec<T>,
    sin: Vec<T>,
    // Per-element layout for whole rows: `(c, c)` and `(-s, s)` per pair.
    cos2: Vec<T>,
    sin2: Vec<T>,
}

impl<T: Scalar> RopeTable<T> {
    pub fn new(d_head: usize, base: f64, positions: usize) -> Result<Self> {
        if d_head % 2 != 0 {
            return Err(Error::Config(format!("RoPE needs an even head width, got {d_head}")));
        }
        let half = d_head / 2;
        let mut cos = Vec::with_capacity(positions * half);
        let mut sin = Vec::with_capacity(positions * half);
        for pos in 0..positions {
            for pair in 0..half {
                let (s, c) = angle(pos, pair, d_head, base);
                cos.push(T::from_f64(c));
                sin.push(T::from_f64(s));
            }
        }
        let cos2 = cos.iter().flat_map(|&c| [c, c]).collect();
        let sin2 = sin.iter().flat_map(|&s| [-s, s]).collect();
        Ok(Self {
            d_head,
            base,
            positions,
            cos,
            sin,
            cos2,
            sin2,
        })
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    /// Rotates one head vector in place to `pos`.
    pub fn rotate(&self, v: &mut [T], pos: usize) {
        self.apply(v, pos, false)
    }

    /// Applies the transpose rotation (used by the backward pass).
    pub fn rotate_inverse(&self, v: &mut [T], pos: usize) {
        self.apply(v, pos, true)
    }

    /// Rotates every head of a concatenated `n_heads * d_head` row to `pos`.
    pub fn rotate_heads(&self, row: &mut [T], pos: usize) {
        debug_assert_eq!(row.len() % self.d_head, 0);
        let d = self.d_head;
        if pos >= self.positions || d % 8 != 0 {
            row.chunks_exact_mut(d).for_each(|h| self.apply(h, pos, false));
            return;
        }
        let (c, s) = (&self.cos2[pos * d..(pos + 1) * d], &self.sin2[pos * d..(pos + 1) * d]);
        for head in row.chunks_exact_mut(d) {
            // With each pair swapped the rotation is two elementwise products;
            // fixed 8-wide blocks let the compiler keep it in vector registers.
            for ((v, c), s) in head.chunks_exact_mut(8).zip(c.chunks_exact(8)).zip(s.chunks_exact(8)) {
                let v: &mut [T; 8] = v.try_into().expect("chunk of 8");
                let (c, s): (&[T; 8], &[T; 8]) = (c.try_into().expect("chunk of 8"), s.try_into().expect("chunk of 8"));
                let w = [v[1], v[0], v[3], v[2], v[5], v[4], v[7], v[6]];
                for k in 0..8 {
                    v[k] = v[k] * c[k] + w[k] * s[k];
                }
            }
        }
    }

    fn apply(&self, v: &mut [T], pos: usize, inverse: bool) {
        debug_assert_eq!(v.len(), self.d_head);
        let half = self.d_head / 2;
        if pos < self.positions {
            let (c, s) = (
                &self.cos[pos * half..(pos + 1) * half],
                &self.sin[pos * half..(pos + 1) * half],
            );
            for pair in 0..half {
                let sin = if inverse { -s[pair] } else { s[pair] };
                rotate_pair(v, pair, c[pair], sin);
            }
        } else {
            for pair in 0..half {
                let (s, c) = angle(pos, pair, self.d_head, self.base);
                let s = if inverse { -s } else { s };
                rotate_pair(v, pair, T::from_f64(c), T::from_f64(s));
            }
        }
    }
}

/// Rotates `v` to `position` with the given base.
pub fn apply_rope(v: &[f32], position: usize, base: f64) -> Result<Vec<f32>> {
    if v.len() % 2 != 0 {
        return Err(Error::Config(format!("RoPE needs an even head width, got {}", v.len())));
    }
    let mut out = v.to_vec();
    for pair in 0..v.len() / 2 {
        let (s, c) = angle(position, pair, v.len(), base);
        rotate_pair(&mut out, pair, c as f32, s as f32);
    }
    Ok(out)
}
