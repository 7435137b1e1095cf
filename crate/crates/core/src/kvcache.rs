//! Policy-driven per-layer key/value storage.
//!
//! Entries are kept in two regions: a fixed sink region holding the first
//! `x` tokens ever inserted, and a rolling region of the `y` most recent
//! tokens (a ring buffer). Storage order is sinks first, then recent tokens
//! oldest to newest, and each entry's position is simply its index in that
//! order. Keys are stored before any rotary transform.

use std::fmt::{self, Write as _};
use std::ops::RangeInclusive;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of attention-sink tokens kept by sink streaming.
pub const DEFAULT_SINKS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CachePolicy {
    /// Keep everything.
    Dense,
    /// Keep the `recent` most recent tokens.
    Window { recent: usize },
    /// Re-encode the last `window` tokens from scratch for every token. As a
    /// store it behaves like `Window { recent: window }`.
    SlidingRecompute { window: usize },
    /// Keep the first `sinks` tokens plus the `recent` most recent ones.
    SinkStreaming { sinks: usize, recent: usize },
}

impl CachePolicy {
    pub fn sink_streaming(recent: usize) -> Self {
        Self::SinkStreaming {
            sinks: DEFAULT_SINKS,
            recent,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Window { recent: 0 }
            | Self::SlidingRecompute { window: 0 }
            | Self::SinkStreaming { recent: 0, .. } => Err(Error::Policy(self.to_string())),
            _ => Ok(()),
        }
    }

    /// Total retained entries (`x + y`), `None` for dense.
    pub fn capacity(&self) -> Option<usize> {
        match *self {
            Self::Dense => None,
            Self::Window { recent } => Some(recent),
            Self::SlidingRecompute { window } => Some(window),
            Self::SinkStreaming { sinks, recent } => Some(sinks + recent),
        }
    }

    pub fn sinks(&self) -> usize {
        match *self {
            Self::SinkStreaming { sinks, .. } => sinks,
            _ => 0,
        }
    }

    fn recent(&self) -> Option<usize> {
        match *self {
            Self::Dense => None,
            Self::Window { recent } | Self::SinkStreaming { recent, .. } => Some(recent),
            Self::SlidingRecompute { window } => Some(window),
        }
    }
}

impl fmt::Display for CachePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Dense => write!(f, "dense"),
            Self::Window { recent } => write!(f, "window:{recent}"),
            Self::SlidingRecompute { window } => write!(f, "recompute:{window}"),
            Self::SinkStreaming { sinks, recent } => write!(f, "sink:{sinks}+{recent}"),
        }
    }
}

impl FromStr for CachePolicy {
    type Err = Error;

    /// `dense` | `window:y` | `recompute:L` | `sink:x+y`
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Policy(s.to_string());
        let num = |v: &str| v.trim().parse::<usize>().map_err(|_| bad());
        let policy = match s.trim().split_once(':') {
            None if s.trim() == "dense" => Self::Dense,
            Some(("window", y)) => Self::Window { recent: num(y)? },
            Some(("recompute", l)) => Self::SlidingRecompute { window: num(l)? },
            Some(("sink", xy)) => {
                let (x, y) = xy.split_once('+').ok_or_else(bad)?;
                Self::SinkStreaming {
                    sinks: num(x)?,
                    recent: num(y)?,
                }
            }
            _ => return Err(bad()),
        };
        policy.validate().map_err(|_| bad())?;
        Ok(policy)
    }
}

/// Token range to re-encode at step `t` under sliding-window recomputation:
/// `[max(0, t - L + 1), t]`.
pub fn plan_recompute(window: usize, t: usize) -> RangeInclusive<usize> {
    (t + 1).saturating_sub(window)..=t
}

#[derive(Clone, Debug, Default)]
struct Region {
    indices: Vec<u64>,
    keys: Vec<f32>,
    values: Vec<f32>,
}

impl Region {
    fn push(&mut self, index: u64, key: &[f32], value: &[f32]) {
        self.indices.push(index);
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
    }
}

#[derive(Clone, Debug, Default)]
struct LayerStore {
    sinks: Region,
    /// Physical ring storage; logical order starts at `head`.
    recent: Region,
    head: usize,
    last: Option<u64>,
}

/// Key/value cache for one decoding session.
#[derive(Clone, Debug)]
pub struct KvCache {
    policy: CachePolicy,
    n_heads: usize,
    d_head: usize,
    layers: Vec<LayerStore>,
    tokens_seen: u64,
    /// Rotated-key and gathered-value workspaces for the decoder; not
    /// counted as stored state.
    pub(crate) scratch: Vec<f32>,
    pub(crate) scratch_values: Vec<f32>,
}

impl KvCache {
    pub fn new(policy: CachePolicy, n_layers: usize, n_heads: usize, d_head: usize) -> Result<Self> {
        policy.validate()?;
        Ok(Self {
            policy,
            n_heads,
            d_head,
            layers: vec![LayerStore::default(); n_layers],
            tokens_seen: 0,
            scratch: Vec::new(),
            scratch_values: Vec::new(),
        })
    }

    pub fn policy(&self) -> CachePolicy {
        self.policy
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Floats per key (all heads).
    pub fn width(&self) -> usize {
        self.n_heads * self.d_head
    }

    /// Original stream index the next token will receive.
    pub fn tokens_seen(&self) -> u64 {
        self.tokens_seen
    }

    pub(crate) fn advance(&mut self, n: u64) {
        self.tokens_seen += n;
    }

    /// Entries currently held by `layer`.
    pub fn len(&self, layer: usize) -> usize {
        let l = &self.layers[layer];
        l.sinks.indices.len() + l.recent.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(|l| l.sinks.indices.is_empty() && l.recent.indices.is_empty())
    }

    /// Appends one entry to `layer`, evicting the oldest non-sink entry when
    /// the policy's capacity is exceeded.
    pub fn insert(&mut self, layer: usize, key: &[f32], value: &[f32], original_index: u64) -> Result<()> {
        let width = self.width();
        if key.len() != width || value.len() != width {
            return Err(Error::Shape(format!(
                "cache entries are {width} wide, got key {} value {}",
                key.len(),
                value.len()
            )));
        }
        let n_layers = self.layers.len();
        let store = self.layers.get_mut(layer).ok_or(Error::Index {
            index: layer,
            len: n_layers,
        })?;
        if let Some(last) = store.last {
            if original_index <= last {
                return Err(Error::Order {
                    index: original_index,
                    last,
                });
            }
        }
        store.last = Some(original_index);
        if store.sinks.indices.len() < self.policy.sinks() {
            store.sinks.push(original_index, key, value);
            return Ok(());
        }
        match self.policy.recent() {
            Some(cap) if store.recent.indices.len() == cap => {
                let slot = store.head;
                store.recent.indices[slot] = original_index;
                store.recent.keys[slot * width..(slot + 1) * width].copy_from_slice(key);
                store.recent.values[slot * width..(slot + 1) * width].copy_from_slice(value);
                store.head = (slot + 1) % cap;
            }
            _ => store.recent.push(original_index, key, value),
        }
        Ok(())
    }

    #[inline]
    fn physical(&self, layer: usize, i: usize) -> (&Region, usize) {
        let l = &self.layers[layer];
        let n_sinks = l.sinks.indices.len();
        if i < n_sinks {
            (&l.sinks, i)
        } else {
            // Ring offset without a division; this sits on the decode hot path.
            let n = l.recent.indices.len();
            let mut p = l.head + i - n_sinks;
            if p >= n {
                p -= n;
            }
            (&l.recent, p)
        }
    }

    /// Unrotated key (all heads) of the `i`-th entry in storage order.
    #[inline]
    pub fn key(&self, layer: usize, i: usize) -> &[f32] {
        let w = self.width();
        let (r, p) = self.physical(layer, i);
        &r.keys[p * w..(p + 1) * w]
    }

    #[inline]
    pub fn value(&self, layer: usize, i: usize) -> &[f32] {
        let w = self.width();
        let (r, p) = self.physical(layer, i);
        &r.values[p * w..(p + 1) * w]
    }

    pub fn original_indices(&self, layer: usize) -> Vec<u64> {
        (0..self.len(layer))
            .map(|i| {
                let (r, p) = self.physical(layer, i);
                r.indices[p]
            })
            .collect()
    }

    /// Positions used for encoding: always `0..n` in storage order.
    pub fn cache_positions(&self, layer: usize) -> Vec<usize> {
        (0..self.len(layer)).collect()
    }

    /// Position assigned to the next decoded token.
    pub fn query_position(&self, layer: usize) -> usize {
        self.len(layer)
    }

    /// Bytes of stored key and value floats across all layers.
    pub fn memory_footprint(&self) -> usize {
        (0..self.layers.len()).map(|l| self.len(l)).sum::<usize>()
            * self.width()
            * 2
            * std::mem::size_of::<f32>()
    }

    /// Structured text dump of the retained original indices per layer.
    pub fn dump(&self) -> String {
        let mut out = format!("policy = \"{}\"\ntokens_seen = {}\n", self.policy, self.tokens_seen);
        for l in 0..self.layers.len() {
            let idx: Vec<String> = self.original_indices(l).iter().map(u64::to_string).collect();
            let _ = writeln!(out, "layer.{l} = [{}]", idx.join(", "));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filled(policy: CachePolicy, n: u64) -> KvCache {
        let mut c = KvCache::new(policy, 1, 1, 2).unwrap();
        for i in 0..n {
            let v = [i as f32, -(i as f32)];
            c.insert(0, &v, &v, i).unwrap();
        }
        c
    }

    #[test]
    fn sink_streaming_keeps_sinks_and_recent() {
        let c = filled(CachePolicy::SinkStreaming { sinks: 4, recent: 3 }, 10);
        assert_eq!(c.original_indices(0), vec![0, 1, 2, 3, 7, 8, 9]);
        assert_eq!(c.key(0, 4), &[7.0, -7.0]);
        assert_eq!(c.value(0, 6), &[9.0, -9.0]);
    }

    #[test]
    fn window_is_fifo_and_dense_keeps_all() {
        assert_eq!(filled(CachePolicy::Window { recent: 4 }, 10).original_indices(0), vec![6, 7, 8, 9]);
        assert_eq!(
            filled(CachePolicy::Dense, 10).original_indices(0),
            (0..10).collect::<Vec<_>>()
        );
    }

    #[test]
    fn non_monotone_insert_is_rejected() {
        let mut c = filled(CachePolicy::Dense, 3);
        let v = [0.0, 0.0];
        assert!(matches!(c.insert(0, &v, &v, 2), Err(Error::Order { index: 2, last: 2 })));
        assert!(matches!(c.insert(0, &[0.0], &v, 5), Err(Error::Shape(_))));
    }

    #[test]
    fn positions_are_contiguous_after_gaps() {
        // Holding [0,1,2,3,6,7,8] while decoding token 9.
        let mut c = KvCache::new(CachePolicy::SinkStreaming { sinks: 4, recent: 3 }, 1, 1, 2).unwrap();
        for i in [0u64, 1, 2, 3, 6, 7, 8] {
            c.insert(0, &[0.0; 2], &[0.0; 2], i).unwrap();
        }
        assert_eq!(c.original_indices(0), vec![0, 1, 2, 3, 6, 7, 8]);
        assert_eq!(c.cache_positions(0), (0..7).collect::<Vec<_>>());
        assert_eq!(c.query_position(0), 7);

        let empty = KvCache::new(CachePolicy::Dense, 1, 1, 2).unwrap();
        assert!(empty.cache_positions(0).is_empty());
        assert_eq!(empty.query_position(0), 0);
    }

    #[test]
    fn recompute_plan() {
        assert_eq!(plan_recompute(8, 3), 0..=3);
        assert_eq!(plan_recompute(8, 100), 93..=100);
        assert_eq!(plan_recompute(8, 0), 0..=0);
    }

    #[test]
    fn footprint() {
        let mut c = KvCache::new(CachePolicy::Dense, 2, 2, 4).unwrap();
        assert_eq!(c.memory_footprint(), 0);
        for l in 0..2 {
            c.insert(l, &[0.0; 8], &[0.0; 8], 0).unwrap();
        }
        assert_eq!(c.memory_footprint(), 128);
    }

    #[test]
    fn policy_grammar() {
        assert_eq!("sink:4+60".parse::<CachePolicy>().unwrap(), CachePolicy::SinkStreaming { sinks: 4, recent: 60 });
        assert_eq!("window:64".parse::<CachePolicy>().unwrap(), CachePolicy::Window { recent: 64 });
        assert_eq!("recompute:64".parse::<CachePolicy>().unwrap(), CachePolicy::SlidingRecompute { window: 64 });
        assert_eq!("dense".parse::<CachePolicy>().unwrap(), CachePolicy::Dense);
        for bad in ["sink:4", "window:0", "sink:4+0", "lru:3", "", "window:-1"] {
            assert!(bad.parse::<CachePolicy>().is_err(), "{bad}");
        }
        for p in ["dense", "window:7", "recompute:9", "sink:2+5"] {
            assert_eq!(p.parse::<CachePolicy>().unwrap().to_string(), p);
        }
    }

    #[test]
    fn dump_lists_indices() {
        let c = filled(CachePolicy::SinkStreaming { sinks: 1, recent: 2 }, 5);
        assert!(c.dump().contains("layer.0 = [0, 3, 4]"));
    }
}
