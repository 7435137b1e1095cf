use proptest::prelude::*;
use sinkcache::kvcache::{CachePolicy, KvCache};

const W: usize = 4;

fn policy() -> impl Strategy<Value = CachePolicy> {
    prop_oneof![
        Just(CachePolicy::Dense),
        (1usize..20).prop_map(|recent| CachePolicy::Window { recent }),
        (1usize..20).prop_map(|window| CachePolicy::SlidingRecompute { window }),
        (0usize..6, 1usize..20).prop_map(|(sinks, recent)| CachePolicy::SinkStreaming { sinks, recent }),
    ]
}

/// Strictly increasing original indices with random gaps.
fn indices() -> impl Strategy<Value = Vec<u64>> {
    prop::collection::vec(1u64..4, 0..80).prop_map(|gaps| {
        gaps.iter()
            .scan(0u64, |acc, g| {
                let i = *acc;
                *acc += g;
                Some(i)
            })
            .collect()
    })
}

fn fill(policy: CachePolicy, idx: &[u64]) -> KvCache {
    let mut c = KvCache::new(policy, 2, 2, W / 2).unwrap();
    for &i in idx {
        let k = [i as f32, 1.0, 2.0, 3.0];
        let v = [-(i as f32), 0.5, 0.25, 0.0];
        for l in 0..2 {
            c.insert(l, &k, &v, i).unwrap();
        }
    }
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn capacity_sinks_and_positions(p in policy(), idx in indices()) {
        let c = fill(p, &idx);
        let kept = c.original_indices(0);
        prop_assert_eq!(&kept, &c.original_indices(1));
        if let Some(cap) = p.capacity() {
            prop_assert!(kept.len() <= cap);
            prop_assert_eq!(kept.len(), idx.len().min(cap));
        } else {
            prop_assert_eq!(&kept, &idx);
        }
        // The first x tokens ever inserted are never evicted.
        let x = p.sinks().min(idx.len());
        prop_assert_eq!(&kept[..x], &idx[..x]);
        // Everything after the sinks is the most recent suffix, in order.
        let rest = &kept[x..];
        prop_assert_eq!(rest, &idx[idx.len() - rest.len()..]);
        // Contiguous positions regardless of gaps in original indices.
        prop_assert_eq!(c.cache_positions(0), (0..kept.len()).collect::<Vec<_>>());
        prop_assert_eq!(c.query_position(0), kept.len());
        // Stored keys and values follow their indices.
        for (i, &orig) in kept.iter().enumerate() {
            prop_assert_eq!(c.key(1, i)[0], orig as f32);
            prop_assert_eq!(c.value(1, i)[0], -(orig as f32));
        }
        prop_assert_eq!(c.memory_footprint(), 2 * kept.len() * W * 2 * 4);
    }

    #[test]
    fn zero_sinks_equals_window(y in 1usize..20, idx in indices()) {
        let a = fill(CachePolicy::SinkStreaming { sinks: 0, recent: y }, &idx);
        let b = fill(CachePolicy::Window { recent: y }, &idx);
        for l in 0..2 {
            prop_assert_eq!(a.original_indices(l), b.original_indices(l));
            prop_assert_eq!(a.cache_positions(l), b.cache_positions(l));
            for i in 0..a.len(l) {
                prop_assert_eq!(a.key(l, i), b.key(l, i));
                prop_assert_eq!(a.value(l, i), b.value(l, i));
            }
        }
    }
}

#[test]
fn out_of_order_and_bad_layer_are_errors() {
    let mut c = KvCache::new(CachePolicy::Dense, 1, 1, 2).unwrap();
    c.insert(0, &[0.0; 2], &[0.0; 2], 5).unwrap();
    assert!(c.insert(0, &[0.0; 2], &[0.0; 2], 5).is_err());
    assert!(c.insert(0, &[0.0; 2], &[0.0; 2], 4).is_err());
    assert!(c.insert(3, &[0.0; 2], &[0.0; 2], 9).is_err());
    assert!(KvCache::new(CachePolicy::Window { recent: 0 }, 1, 1, 2).is_err());
}
