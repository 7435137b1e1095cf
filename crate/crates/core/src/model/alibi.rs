//! Linear attention biases with the geometric slope schedule `2^{-8(h+1)/H}`.

use crate::error::{Error, Result};

pub fn alibi_slope(head: usize, n_heads: usize) -> f64 {
    2f64.powf(-8.0 * (head + 1) as f64 / n_heads as f64)
}

/// Bias for a query at `query_pos` attending to `key_pos`. Positions are
/// cache positions, so the bias is contiguous even after eviction.
pub fn alibi_bias(head: usize, query_pos: usize, key_pos: usize, n_heads: usize) -> Result<f32> {
    if key_pos > query_pos {
        return Err(Error::Causality {
            query: query_pos,
            key: key_pos,
        });
    }
    Ok((-alibi_slope(head, n_heads) * (query_pos - key_pos) as f64) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_at_equal_positions() {
        for h in 0..8 {
            assert_eq!(alibi_bias(h, 12, 12, 8).unwrap(), 0.0);
        }
    }

    #[test]
    fn slope_schedule_matches_reference_table() {
        // Eight heads: 1/2, 1/4, …, 1/256.
        let table: Vec<f64> = (1..=8).map(|i| 1.0 / f64::powi(2.0, i)).collect();
        for (h, want) in table.iter().enumerate() {
            assert_eq!(alibi_slope(h, 8), *want);
        }
        assert_eq!(alibi_bias(0, 10, 6, 8).unwrap(), -2.0);
    }

    #[test]
    fn decreases_with_distance() {
        let biases: Vec<f32> = (0..=20).map(|k| alibi_bias(1, 20, k, 4).unwrap()).collect();
        assert!(biases.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn rejects_future_keys() {
        assert!(matches!(
            alibi_bias(0, 3, 4, 8),
            Err(Error::Causality { query: 3, key: 4 })
        ));
    }

    #[test]
    fn translation_invariant() {
        for s in [1, 5, 1000] {
            for (q, k) in [(9, 2), (4, 4), (100, 0)] {
                assert_eq!(
                    alibi_bias(2, q + s, k + s, 8).unwrap(),
                    alibi_bias(2, q, k, 8).unwrap()
                );
            }
        }
    }
}
