use super::alibi::alibi_bias;
use super::config::{AttnVariant, ModelConfig, PosKind};
use super::rope::apply_rope;
use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, softmax1_in_place, softmax_in_place, Scalar};

/// Single-query attention over `n` already-rotated keys. `probs` is left
/// holding the attention weights.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend<'a, T: Scalar>(
    q: &[T],
    n: usize,
    key: impl Fn(usize) -> &'a [T],
    value: impl Fn(usize) -> &'a [T],
    bias: impl Fn(usize) -> T,
    scale: T,
    variant: AttnVariant,
    probs: &mut Vec<T>,
    out: &mut [T],
) {
    probs.clear();
    probs.extend((0..n).map(|i| dot(q, key(i)) * scale + bias(i)));
    out.iter_mut().for_each(|o| *o = T::zero());
    if n == 0 {
        return;
    }
    match variant {
        AttnVariant::Softmax => softmax_in_place(probs),
        AttnVariant::Softmax1 => softmax1_in_place(probs),
    }
    for (i, &p) in probs.iter().enumerate() {
        axpy(out, p, value(i));
    }
}

/// One attention head for one query.
///
/// `q` and `keys` are unrotated; under RoPE each is rotated to its position
/// here. Under ALiBi the bias uses the given (cache) positions.
pub fn attention_head_forward(
    q: &[f32],
    keys: &[&[f32]],
    values: &[&[f32]],
    positions: &[usize],
    query_pos: usize,
    head: usize,
    cfg: &ModelConfig,
) -> Result<Vec<f32>> {
    let dh = cfg.d_head;
    if keys.len() != values.len() || keys.len() != positions.len() {
        return Err(Error::Shape(format!(
            "{} keys, {} values, {} positions",
            keys.len(),
            values.len(),
            positions.len()
        )));
    }
    if q.len() != dh || keys.iter().chain(values).any(|v| v.len() != dh) {
        return Err(Error::Shape(format!("head vectors must have length {dh}")));
    }
    if positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Shape("positions must be strictly increasing".into()));
    }
    if let Some(&last) = positions.last() {
        if last > query_pos {
            return Err(Error::Causality {
                query: query_pos,
                key: last,
            });
        }
    }
    if keys.is_empty() && cfg.attn_variant == AttnVariant::Softmax {
        return Err(Error::EmptyInput);
    }
    let (q_rot, k_rot): (Vec<f32>, Vec<Vec<f32>>) = match cfg.pos_kind {
        PosKind::Rope => (
            apply_rope(q, query_pos, cfg.rope_base)?,
            keys.iter()
                .zip(positions)
                .map(|(k, &p)| apply_rope(k, p, cfg.rope_base))
                .collect::<Result<_>>()?,
        ),
        PosKind::Alibi => (q.to_vec(), keys.iter().map(|k| k.to_vec()).collect()),
    };
    let biases: Vec<f32> = match cfg.pos_kind {
        PosKind::Rope => vec![0.0; keys.len()],
        PosKind::Alibi => positions
            .iter()
            .map(|&p| alibi_bias(head, query_pos, p, cfg.n_heads))
            .collect::<Result<_>>()?,
    };
    let scale = 1.0 / (dh as f32).sqrt();
    let mut probs = Vec::with_capacity(keys.len());
    let mut out = vec![0.0; dh];
    attend(
        &q_rot,
        keys.len(),
        |i| &k_rot[i],
        |i| values[i],
        |i| biases[i],
        scale,
        cfg.attn_variant,
        &mut probs,
        &mut out,
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(variant: AttnVariant, pos: PosKind) -> ModelConfig {
        ModelConfig {
            attn_variant: variant,
            pos_kind: pos,
            ..Default::default()
        }
    }

    fn rand_vecs(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f32>> {
        (0..n)
            .map(|_| (0..16).map(|_| rng.random_range(-1.5..1.5)).collect())
            .collect()
    }

    #[test]
    fn singleton_returns_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = rand_vecs(&mut rng, 3);
        let c = cfg(AttnVariant::Softmax, PosKind::Rope);
        let out = attention_head_forward(&v[0], &[&v[1]], &[&v[2]], &[4], 4, 0, &c).unwrap();
        assert_eq!(out, v[2]);
    }

    #[test]
    fn length_mismatch_is_shape_error() {
        let c = cfg(AttnVariant::Softmax, PosKind::Rope);
        let k = vec![0.0f32; 16];
        let r = attention_head_forward(&k, &[&k, &k], &[&k], &[0, 1], 2, 0, &c);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn softmax1_with_no_keys_is_zero() {
        let c = cfg(AttnVariant::Softmax1, PosKind::Rope);
        let q = vec![1.0f32; 16];
        let out = attention_head_forward(&q, &[], &[], &[], 0, 0, &c).unwrap();
        assert!(out.iter().all(|&x| x == 0.0));
    }

    /// f64 evaluation straight from the definition.
    fn reference(q: &[f32], ks: &[Vec<f32>], vs: &[Vec<f32>], pos: &[usize], qp: usize) -> Vec<f64> {
        let rot = |v: &[f32], p: usize| -> Vec<f64> {
            let mut o: Vec<f64> = v.iter().map(|&x| x as f64).collect();
            for i in 0..8 {
                let th = p as f64 * 10_000f64.powf(-2.0 * i as f64 / 16.0);
                let (a, b) = (o[2 * i], o[2 * i + 1]);
                o[2 * i] = a * th.cos() - b * th.sin();
                o[2 * i + 1] = a * th.sin() + b * th.cos();
            }
            o
        };
        let qr = rot(q, qp);
        let logits: Vec<f64> = ks
            .iter()
            .zip(pos)
            .map(|(k, &p)| rot(k, p).iter().zip(&qr).map(|(a, b)| a * b).sum::<f64>() / 4.0)
            .collect();
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let mut out = vec![0.0; 16];
        for (w, v) in e.iter().zip(vs) {
            for (o, x) in out.iter_mut().zip(v) {
                *o += w / s * *x as f64;
            }
        }
        out
    }

    #[test]
    fn matches_f64_reference_on_eight_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = rand_vecs(&mut rng, 1).remove(0);
        let ks = rand_vecs(&mut rng, 8);
        let vs = rand_vecs(&mut rng, 8);
        let pos: Vec<usize> = (0..8).collect();
        let c = cfg(AttnVariant::Softmax, PosKind::Rope);
        let kr: Vec<&[f32]> = ks.iter().map(|v| v.as_slice()).collect();
        let vr: Vec<&[f32]> = vs.iter().map(|v| v.as_slice()).collect();
        let got = attention_head_forward(&q, &kr, &vr, &pos, 8, 0, &c).unwrap();
        let want = reference(&q, &ks, &vs, &pos, 8);
        for (a, b) in got.iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax1_equals_prepended_zero_kv() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let q = rand_vecs(&mut rng, 1).remove(0);
        let ks = rand_vecs(&mut rng, 6);
        let vs = rand_vecs(&mut rng, 6);
        let zero = vec![0.0f32; 16];
        let s1 = cfg(AttnVariant::Softmax1, PosKind::Rope);
        let s = cfg(AttnVariant::Softmax, PosKind::Rope);
        let kr: Vec<&[f32]> = ks.iter().map(|v| v.as_slice()).collect();
        let vr: Vec<&[f32]> = vs.iter().map(|v| v.as_slice()).collect();
        let a = attention_head_forward(&q, &kr, &vr, &[1, 2, 3, 4, 5, 6], 6, 0, &s1).unwrap();
        let kz: Vec<&[f32]> = std::iter::once(zero.as_slice()).chain(kr).collect();
        let vz: Vec<&[f32]> = std::iter::once(zero.as_slice()).chain(vr).collect();
        let b = attention_head_forward(&q, &kz, &vz, &[0, 1, 2, 3, 4, 5, 6], 6, 0, &s).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-6));
    }
}
