//! Desk-scale pretraining: windowed next-token batches from a token stream,
//! AdamW with warmup + cosine decay, and finite-difference gradient checks.

pub mod corpus;
pub mod optim;

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{prepend_sink_tokens, Batch, ModelConfig, TrainGraph, Weights};
use crate::numerics::Matrix;

pub use corpus::{make_corpus, read_corpus, unigram_entropy, write_corpus, CorpusKind, MarkovTable};
pub use optim::{clip_grad_norm, AdamW, DecayKind, LrSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Sequence length per sample, including any prepended sink tokens.
    pub seq_len: usize,
    pub lr_peak: f64,
    pub warmup: usize,
    pub decay: DecayKind,
    /// Final learning rate as a fraction of the peak.
    pub min_lr_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; zero disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Worker count recorded for provenance; training itself is single-threaded.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 8,
            seq_len: 64,
            lr_peak: 3e-4,
            warmup: 100,
            decay: DecayKind::Cosine,
            min_lr_ratio: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: 1.0,
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch == 0 || self.seq_len == 0 {
            return fail("batch and seq_len must be positive".into());
        }
        if self.seq_len > model.train_window {
            return fail(format!(
                "seq_len {} exceeds the model's train window {}",
                self.seq_len, model.train_window
            ));
        }
        if self.seq_len <= model.n_sink_tokens {
            return fail("seq_len must exceed the sink-token count".into());
        }
        let rates = [self.lr_peak, self.beta1, self.beta2, self.eps];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) || self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return fail("learning rate, betas and eps must be positive (betas below one)".into());
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip >= 0.0 && (0.0..=1.0).contains(&self.min_lr_ratio)) {
            return fail("weight decay, clip and min lr ratio out of range".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak: self.lr_peak,
            warmup: self.warmup,
            total: self.steps,
            decay: self.decay,
            min_ratio: self.min_lr_ratio,
        }
    }
}

/// Training loss recorded before each optimizer step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub points: Vec<(usize, f64)>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (step, loss) in &self.points {
            writeln!(out, "{step},{loss}").expect("writing to a String");
        }
        out
    }

    /// Mean loss over steps `[from, to)`.
    pub fn mean(&self, from: usize, to: usize) -> Option<f64> {
        let pts: Vec<f64> = self
            .points
            .iter()
            .filter(|(s, _)| (from..to).contains(s))
            .map(|p| p.1)
            .collect();
        (!pts.is_empty()).then(|| pts.iter().sum::<f64>() / pts.len() as f64)
    }

    pub fn last(&self) -> Option<f64> {
        self.points.last().map(|p| p.1)
    }
}

/// Draws `batch` training windows. Each sample is the model's sink tokens
/// followed by a contiguous corpus slice starting at a random offset, so in
/// the vanilla model position zero holds an arbitrary token.
pub fn sample_batch(model: &ModelConfig, seq_len: usize, batch: usize, corpus: &[u32], rng: &mut ChaCha8Rng) -> Result<Batch> {
    let data_len = seq_len + 1 - model.n_sink_tokens;
    if corpus.len() < data_len {
        return Err(Error::Config(format!(
            "corpus of {} tokens is shorter than one window of {data_len}",
            corpus.len()
        )));
    }
    let windows: Vec<Vec<u32>> = (0..batch)
        .map(|_| {
            let start = rng.random_range(0..=corpus.len() - data_len);
            prepend_sink_tokens(&corpus[start..start + data_len], model)
        })
        .collect();
    Batch::from_windows(model, &windows)
}

/// Trains a freshly initialized model. Deterministic given the configs.
pub fn train(model: &ModelConfig, cfg: &TrainConfig, corpus: &[u32]) -> Result<(Checkpoint, LossCurve)> {
    model.validate()?;
    cfg.validate(model)?;
    if corpus.len() < cfg.batch * cfg.seq_len {
        return Err(Error::Config(format!(
            "corpus of {} tokens is shorter than batch x seq_len = {}",
            corpus.len(),
            cfg.batch * cfg.seq_len
        )));
    }
    if let Some(&t) = corpus.iter().find(|&&t| t as usize >= model.data_vocab()) {
        return Err(Error::Index {
            index: t as usize,
            len: model.data_vocab(),
        });
    }
    let mut weights = Weights::<f32>::init(model)?;
    let mut opt = AdamW::new(&weights, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
    let schedule = cfg.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = LossCurve::default();
    for step in 0..cfg.steps {
        let batch = sample_batch(model, cfg.seq_len, cfg.batch, corpus, &mut rng)?;
        let mut graph = TrainGraph::new(model, &weights)?;
        let loss = graph.forward(&batch)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step });
        }
        let mut grads = graph.backward()?;
        drop(graph);
        clip_grad_norm(&mut grads, cfg.grad_clip);
        opt.step(&mut weights, &grads, schedule.at(step));
        curve.points.push((step, f64::from(loss)));
    }
    if !weights.is_finite() {
        return Err(Error::TrainingDiverged { step: cfg.steps });
    }
    Ok((Checkpoint::new(model.clone(), Some(cfg.clone()), weights), curve))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub n_checked: usize,
    /// Name and element index of the worst entry.
    pub worst: (String, usize),
}

/// Finite-difference step for [`grad_check`].
pub const FD_STEP: f64 = 1e-4;
/// Denominator floor that keeps the relative error meaningful for
/// near-zero gradients.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares analytic gradients with 64-bit central differences on a seeded
/// sample of `frac` of all parameters. At least one entry of every tensor is
/// checked and sink-token embeddings are always checked in full.
pub fn grad_check(model: &ModelConfig, weights: &Weights<f32>, batch: &Batch, frac: f64, seed: u64) -> Result<GradCheckReport> {
    if batch.n_scored() == 0 {
        return Err(Error::EmptyInput);
    }
    let mut w64: Weights<f64> = weights.cast();
    let analytic = {
        let mut g = TrainGraph::new(model, &w64)?;
        g.forward(batch)?;
        g.backward()?
    };
    let names: Vec<String> = analytic.tensors().into_iter().map(|(n, _)| n).collect();
    let grads: Vec<Matrix<f64>> = analytic.tensors().into_iter().map(|(_, m)| m.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<(usize, usize)> = Vec::new();
    for (ti, g) in grads.iter().enumerate() {
        let n = g.data().len();
        if n == 0 {
            continue;
        }
        if names[ti] == "sink_emb" {
            picks.extend((0..n).map(|e| (ti, e)));
            continue;
        }
        picks.push((ti, rng.random_range(0..n)));
        for e in 0..n {
            if rng.random::<f64>() < frac {
                picks.push((ti, e));
            }
        }
    }
    picks.sort_unstable();
    picks.dedup();

    let loss_at = |w: &Weights<f64>| -> Result<f64> { TrainGraph::new(model, w)?.forward(batch) };
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        n_checked: picks.len(),
        worst: (String::new(), 0),
    };
    for (ti, e) in picks {
        let orig = w64.tensors_mut()[ti].data()[e];
        w64.tensors_mut()[ti].data_mut()[e] = orig + FD_STEP;
        let up = loss_at(&w64)?;
        w64.tensors_mut()[ti].data_mut()[e] = orig - FD_STEP;
        let down = loss_at(&w64)?;
        w64.tensors_mut()[ti].data_mut()[e] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = grads[ti].data()[e];
        let rel = relative_error(a, numeric);
        report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
        if rel > report.max_rel_err || report.worst.0.is_empty() {
            report.max_rel_err = rel.max(report.max_rel_err);
            report.worst = (names[ti].clone(), e);
        }
    }
    Ok(report)
}
