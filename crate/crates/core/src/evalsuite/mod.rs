//! Measurements: streaming perplexity per cache policy, sink-count and
//! cache-size sweeps, StreamEval, attention-sink statistics and decode cost.

pub mod streameval;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvcache::{plan_recompute, CachePolicy, KvCache};
use crate::model::{prepend_sink_tokens, Model};
use crate::numerics::log_sum_exp;

/// Per-token negative log-likelihoods of one streamed pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamReport {
    pub policy: CachePolicy,
    /// Stream index of the first scored token; `nll[i]` scores token `first + i`.
    pub first: usize,
    pub nll: Vec<f64>,
    pub perplexity: f64,
    pub n_scored: usize,
}

impl StreamReport {
    fn new(policy: CachePolicy, first: usize, nll: Vec<f64>) -> Self {
        let perplexity = perplexity_of(&nll);
        Self {
            policy,
            first,
            n_scored: nll.len(),
            nll,
            perplexity,
        }
    }

    /// `exp(mean NLL)` over tokens with stream index `>= from`.
    pub fn perplexity_from(&self, from: usize) -> f64 {
        perplexity_of(&self.nll[from.saturating_sub(self.first).min(self.nll.len())..])
    }

    /// `position,nll` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("position,nll\n");
        for (i, v) in self.nll.iter().enumerate() {
            writeln!(out, "{},{v}", self.first + i).expect("writing to a String");
        }
        out
    }
}

/// `exp(mean)`; NaN for an empty list.
pub fn perplexity_of(nll: &[f64]) -> f64 {
    (nll.iter().sum::<f64>() / nll.len() as f64).exp()
}

fn nll_of(logits: &[f32], target: u32) -> f64 {
    let l64: Vec<f64> = logits.iter().map(|&x| f64::from(x)).collect();
    log_sum_exp(&l64) - l64[target as usize]
}

/// Streams `stream` through the model under `policy`, scoring every token
/// with index `>= max(skip, 1)`. The model's sink tokens, if any, are fed
/// before the stream. `SlidingRecompute` re-encodes the last window from
/// scratch for every prediction; every other policy decodes incrementally.
pub fn stream_perplexity(model: &Model, policy: CachePolicy, stream: &[u32], skip: usize) -> Result<StreamReport> {
    if stream.is_empty() {
        return Err(Error::EmptyInput);
    }
    policy.validate()?;
    let first = skip.max(1);
    if stream.len() <= first {
        return Err(Error::Config(format!(
            "stream of {} tokens leaves nothing to score after skipping {first}",
            stream.len()
        )));
    }
    let cfg = model.cfg();
    if let Some(&t) = stream.iter().find(|&&t| cfg.is_sink_id(t)) {
        return Err(Error::Index {
            index: t as usize,
            len: cfg.data_vocab(),
        });
    }
    let mut nll = Vec::with_capacity(stream.len() - first);
    match policy {
        CachePolicy::SlidingRecompute { window } => {
            let data_window = window.saturating_sub(cfg.n_sink_tokens).max(1);
            for t in first - 1..stream.len() - 1 {
                let ctx = prepend_sink_tokens(&stream[plan_recompute(data_window, t)], cfg);
                let mut cache = model.new_cache(CachePolicy::Dense)?;
                let logits = model.prefill(&mut cache, &ctx, ctx.len())?;
                nll.push(nll_of(&logits, stream[t + 1]));
            }
        }
        _ => {
            let mut cache = model.new_cache(policy)?;
            for i in 0..cfg.n_sink_tokens {
                model.decode_step(&mut cache, cfg.sink_id(i))?;
            }
            for t in 0..stream.len() - 1 {
                let logits = model.decode_step(&mut cache, stream[t])?;
                if t + 1 >= first {
                    nll.push(nll_of(&logits, stream[t + 1]));
                }
            }
        }
    }
    Ok(StreamReport::new(policy, first, nll))
}

/// Attention mass from the final position of a sentence onto its first token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSinkFraction {
    /// Mean over heads (and sentences) of the mass on stream position 0.
    pub first_mean: f64,
    /// Standard deviation of the per-head means.
    pub first_std: f64,
    /// Mass on the prepended sink tokens, for models trained with them.
    pub sink_mean: Option<f64>,
    pub sink_std: Option<f64>,
    /// Mass on every other position.
    pub rest_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkFractionProfile {
    pub sentence_len: usize,
    pub n_sentences: usize,
    pub layers: Vec<LayerSinkFraction>,
}

impl SinkFractionProfile {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,first_mean,first_std,sink_mean,sink_std,rest_mean\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for (l, f) in self.layers.iter().enumerate() {
            writeln!(
                out,
                "{l},{},{},{},{},{}",
                f.first_mean,
                f.first_std,
                opt(f.sink_mean),
                opt(f.sink_std),
                f.rest_mean
            )
            .expect("writing to a String");
        }
        out
    }
}

/// Minimum number of sentences averaged by [`sink_fraction`].
pub const MIN_SINK_SENTENCES: usize = 256;

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Averages the final position's post-softmax attention onto stream
/// position 0 (and onto the sink tokens, if the model has them) over
/// `n_sentences` seeded windows of `sentence_len` corpus tokens.
pub fn sink_fraction(
    model: &Model,
    corpus: &[u32],
    sentence_len: usize,
    n_sentences: usize,
    seed: u64,
) -> Result<SinkFractionProfile> {
    use rand::{Rng, SeedableRng};

    let cfg = model.cfg();
    let k = cfg.n_sink_tokens;
    if sentence_len < 2 {
        return Err(Error::Config(format!("sentence length {sentence_len} is below 2")));
    }
    if sentence_len + k > cfg.train_window {
        return Err(Error::Config(format!(
            "{k} sink tokens plus sentences of {sentence_len} exceed the train window {}",
            cfg.train_window
        )));
    }
    if corpus.len() < sentence_len {
        return Err(Error::EmptyInput);
    }
    let n_sentences = n_sentences.max(MIN_SINK_SENTENCES);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let t = sentence_len + k;
    let mut tokens = Vec::with_capacity(n_sentences * t);
    for _ in 0..n_sentences {
        let start = rng.random_range(0..=corpus.len() - sentence_len);
        tokens.extend(prepend_sink_tokens(&corpus[start..start + sentence_len], cfg));
    }
    let batch = crate::model::Batch::new(n_sentences, t, tokens, vec![None; n_sentences * t])?;
    let mut graph = crate::model::TrainGraph::new(cfg, model.weights())?;
    graph.forward(&batch)?;
    let tape = graph.into_tape().expect("forward records a tape");

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let mut first = vec![0.0; cfg.n_heads];
        let mut sink = vec![0.0; cfg.n_heads];
        let mut rest = 0.0;
        for s in 0..n_sentences {
            for h in 0..cfg.n_heads {
                let probs = tape.attention_probs(l, s, h, cfg.n_heads);
                let row = &probs[(t - 1) * t..t * t];
                let on_sinks: f64 = row[..k].iter().map(|&p| f64::from(p)).sum();
                let on_first = f64::from(row[k]);
                let total: f64 = row.iter().map(|&p| f64::from(p)).sum();
                sink[h] += on_sinks;
                first[h] += on_first;
                rest += total - on_sinks - on_first;
            }
        }
        let norm = n_sentences as f64;
        first.iter_mut().for_each(|v| *v /= norm);
        sink.iter_mut().for_each(|v| *v /= norm);
        let (first_mean, first_std) = mean_std(&first);
        let (sink_mean, sink_std) = mean_std(&sink);
        layers.push(LayerSinkFraction {
            first_mean,
            first_std,
            sink_mean: (k > 0).then_some(sink_mean),
            sink_std: (k > 0).then_some(sink_std),
            rest_mean: rest / (norm * cfg.n_heads as f64),
        });
    }
    Ok(SinkFractionProfile {
        sentence_len,
        n_sentences,
        layers,
    })
}

/// One `(x, y)` cell of a sink-count or cache-size sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub x: usize,
    pub y: usize,
    pub ppl: f64,
}

/// `x,y,ppl` rows.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("x,y,ppl\n");
    for r in rows {
        writeln!(out, "{},{},{}", r.x, r.y, r.ppl).expect("writing to a String");
    }
    out
}

/// Sink counts swept by default.
pub const ABLATION_SINKS: [usize; 5] = [0, 1, 2, 4, 8];

fn run_cells(model: &Model, cells: &[(usize, usize)], stream: &[u32], skip: usize) -> Result<Vec<SweepRow>> {
    use rayon::prelude::*;
    cells
        .par_iter()
        .map(|&(x, y)| {
            let policy = CachePolicy::SinkStreaming { sinks: x, recent: y };
            let r = stream_perplexity(model, policy, stream, skip)?;
            Ok(SweepRow { x, y, ppl: r.perplexity })
        })
        .collect()
}

/// Perplexity of `SinkStreaming(x, capacity - x)` for each `x`, at a fixed
/// total cache size. Runs in parallel on the current rayon pool; results
/// are independent of the worker count.
pub fn sink_ablation(model: &Model, xs: &[usize], capacity: usize, stream: &[u32], skip: usize) -> Result<Vec<SweepRow>> {
    if let Some(&x) = xs.iter().find(|&&x| x >= capacity) {
        return Err(Error::Config(format!("{x} sinks leave no room in a cache of {capacity}")));
    }
    let cells: Vec<_> = xs.iter().map(|&x| (x, capacity - x)).collect();
    run_cells(model, &cells, stream, skip)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheSweep {
    pub rows: Vec<SweepRow>,
    /// Indices `i` where growing the cache from `rows[i-1]` to `rows[i]`
    /// made perplexity worse. Reported, not treated as an error.
    pub non_monotone: Vec<usize>,
}

/// Perplexity of `SinkStreaming(x, y)` for each `y`, in the given order.
pub fn cache_size_sweep(model: &Model, x: usize, ys: &[usize], stream: &[u32], skip: usize) -> Result<CacheSweep> {
    let cells: Vec<_> = ys.iter().map(|&y| (x, y)).collect();
    let rows = run_cells(model, &cells, stream, skip)?;
    let non_monotone = (1..rows.len())
        .filter(|&i| rows[i].y > rows[i - 1].y && rows[i].ppl > rows[i - 1].ppl)
        .collect();
    Ok(CacheSweep { rows, non_monotone })
}

/// A policy shape whose size is chosen per benchmark point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyFamily {
    Window,
    Recompute,
    /// Sink streaming with this many sinks; the rest of the size is recent.
    Sink(usize),
}

impl PolicyFamily {
    pub fn at(&self, size: usize) -> Result<CachePolicy> {
        let p = match *self {
            Self::Window => CachePolicy::Window { recent: size },
            Self::Recompute => CachePolicy::SlidingRecompute { window: size },
            Self::Sink(x) => CachePolicy::SinkStreaming {
                sinks: x,
                recent: size.checked_sub(x).ok_or_else(|| Error::Config(format!("size {size} below {x} sinks")))?,
            },
        };
        p.validate()?;
        Ok(p)
    }
}

impl std::str::FromStr for PolicyFamily {
    type Err = Error;

    /// `window` | `recompute` | `sink` | `sink:x`
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "window" => Ok(Self::Window),
            "recompute" => Ok(Self::Recompute),
            "sink" => Ok(Self::Sink(crate::kvcache::DEFAULT_SINKS)),
            other => other
                .strip_prefix("sink:")
                .and_then(|x| x.parse().ok())
                .map(Self::Sink)
                .ok_or_else(|| Error::Policy(s.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub cache_size: usize,
    pub latency_us_median: f64,
    pub mem_bytes: usize,
}

/// `cache_size,latency_us_median,mem_bytes` rows.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("cache_size,latency_us_median,mem_bytes\n");
    for r in rows {
        writeln!(out, "{},{},{}", r.cache_size, r.latency_us_median, r.mem_bytes).expect("writing to a String");
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    /// Tokens decoded before timing; must be at least ten times the cache size.
    pub warmup_factor: usize,
    /// Tokens timed per repetition for incremental policies.
    pub timed_tokens: usize,
    /// Re-encodings timed per repetition for sliding recomputation.
    pub recompute_steps: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            warmup_factor: 10,
            timed_tokens: 256,
            recompute_steps: 3,
            reps: 3,
            seed: 0,
        }
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Steady-state per-token decode latency and cache footprint at each size.
///
/// Incremental policies decode `warmup_factor * size` untimed tokens first,
/// so every timed step runs against a full cache. Sliding recomputation
/// keeps no state between tokens: each timed step re-encodes a full window
/// of `size` tokens from scratch, which is already its steady state.
/// Repetitions are interleaved across sizes and summarised by their median.
pub fn bench_decode(model: &Model, family: PolicyFamily, sizes: &[usize], opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    use rand::{Rng, SeedableRng};
    use std::time::Instant;

    if opts.warmup_factor < 10 || opts.reps < 3 || opts.timed_tokens == 0 || opts.recompute_steps == 0 {
        return Err(Error::Config(
            "benchmark needs warmup_factor >= 10, reps >= 3 and nonzero timed steps".into(),
        ));
    }
    enum Bench {
        Recompute { ctx: Vec<u32>, window: usize, footprint: usize },
        Stream(KvCache),
    }
    let cfg = model.cfg();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
    let mut token = || rng.random_range(0..cfg.data_vocab() as u32);
    let mut benches = Vec::with_capacity(sizes.len());
    for &size in sizes {
        benches.push(match family.at(size)? {
            CachePolicy::SlidingRecompute { window } => Bench::Recompute {
                ctx: (0..window).map(|_| token()).collect(),
                window,
                footprint: 0,
            },
            policy => {
                let mut cache = model.new_cache(policy)?;
                for _ in 0..opts.warmup_factor * size {
                    model.decode_step(&mut cache, token())?;
                }
                Bench::Stream(cache)
            }
        });
    }
    // Repetitions visit every size in turn, so slow phases of a shared
    // machine land on all sizes alike instead of skewing one of them.
    let mut per_rep = vec![Vec::with_capacity(opts.reps); sizes.len()];
    for _ in 0..opts.reps {
        for (bench, times) in benches.iter_mut().zip(&mut per_rep) {
            match bench {
                Bench::Recompute { ctx, window, footprint } => {
                    let start = Instant::now();
                    for _ in 0..opts.recompute_steps {
                        let mut cache = model.new_cache(CachePolicy::Dense)?;
                        std::hint::black_box(model.prefill(&mut cache, ctx, *window)?);
                        *footprint = cache.memory_footprint();
                    }
                    times.push(start.elapsed().as_secs_f64() * 1e6 / opts.recompute_steps as f64);
                }
                Bench::Stream(cache) => {
                    let toks: Vec<u32> = (0..opts.timed_tokens).map(|_| token()).collect();
                    let start = Instant::now();
                    for &t in &toks {
                        std::hint::black_box(model.decode_step(cache, t)?);
                    }
                    times.push(start.elapsed().as_secs_f64() * 1e6 / opts.timed_tokens as f64);
                }
            }
        }
    }
    let rows = sizes
        .iter()
        .zip(&benches)
        .zip(&mut per_rep)
        .map(|((&size, bench), times)| BenchRow {
            cache_size: size,
            latency_us_median: median(times),
            mem_bytes: match bench {
                Bench::Recompute { footprint, .. } => *footprint,
                Bench::Stream(cache) => cache.memory_footprint(),
            },
        })
        .collect();
    Ok(rows)
}
