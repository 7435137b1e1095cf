//! Deterministic synthetic token streams and the binary corpus file format.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalsuite::streameval::{gen_streameval, StreamEvalParams};

pub const CORPUS_MAGIC: &[u8; 8] = b"SINKTOKS";
pub const CORPUS_VERSION: u32 = 1;

/// Symbols used by the markov and copy corpora (token ids `0..ALPHABET`).
pub const ALPHABET: usize = 32;
const MARKOV_FANOUT_PROBS: [f64; 4] = [0.55, 0.25, 0.12, 0.08];
const MARKOV_TABLE_SEED: u64 = 0x5eed_7ab1e;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum CorpusKind {
    Markov,
    Copy,
    Needle,
}

/// Fixed order-2 transition table over [`ALPHABET`] symbols.
#[derive(Clone, Debug)]
pub struct MarkovTable {
    alphabet: usize,
    /// `probs[(a * alphabet + b) * alphabet + c] = P(c | a, b)`.
    probs: Vec<f64>,
}

impl MarkovTable {
    pub fn standard() -> Self {
        let n = ALPHABET;
        let mut rng = ChaCha8Rng::seed_from_u64(MARKOV_TABLE_SEED);
        let mut probs = vec![0.0; n * n * n];
        for ctx in 0..n * n {
            let mut chosen: Vec<usize> = Vec::with_capacity(MARKOV_FANOUT_PROBS.len());
            while chosen.len() < MARKOV_FANOUT_PROBS.len() {
                let c = rng.random_range(0..n);
                if !chosen.contains(&c) {
                    chosen.push(c);
                }
            }
            for (c, p) in chosen.into_iter().zip(MARKOV_FANOUT_PROBS) {
                probs[ctx * n + c] = p;
            }
        }
        Self { alphabet: n, probs }
    }

    pub fn alphabet(&self) -> usize {
        self.alphabet
    }

    pub fn prob(&self, a: usize, b: usize, c: usize) -> f64 {
        self.probs[(a * self.alphabet + b) * self.alphabet + c]
    }

    fn sample(&self, a: usize, b: usize, rng: &mut ChaCha8Rng) -> usize {
        let row = &self.probs[(a * self.alphabet + b) * self.alphabet..][..self.alphabet];
        let mut u: f64 = rng.random();
        for (c, &p) in row.iter().enumerate() {
            if u < p {
                return c;
            }
            u -= p;
        }
        row.iter().rposition(|&p| p > 0.0).expect("row has support")
    }
}

/// Deterministic synthetic stream of `size` tokens.
pub fn make_corpus(kind: CorpusKind, size: usize, seed: u64) -> Result<Vec<u32>> {
    if size == 0 {
        return Err(Error::EmptyInput);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(size);
    match kind {
        CorpusKind::Markov => {
            let table = MarkovTable::standard();
            let (mut a, mut b) = (rng.random_range(0..ALPHABET), rng.random_range(0..ALPHABET));
            out.extend([a as u32, b as u32]);
            while out.len() < size {
                let c = table.sample(a, b, &mut rng);
                out.push(c as u32);
                (a, b) = (b, c);
            }
        }
        CorpusKind::Copy => {
            while out.len() < size {
                let len = rng.random_range(8..=24);
                let seg: Vec<u32> = (0..len).map(|_| rng.random_range(0..ALPHABET) as u32).collect();
                out.extend_from_slice(&seg);
                out.extend_from_slice(&seg);
            }
        }
        CorpusKind::Needle => {
            let params = StreamEvalParams::training();
            let mut sample_seed = seed;
            while out.len() < size {
                let sample = gen_streameval(&params, sample_seed)?;
                out.extend(sample.render_with_answers().bytes().map(u32::from));
                sample_seed = sample_seed.wrapping_add(1);
            }
        }
    }
    out.truncate(size);
    Ok(out)
}

/// Entropy (nats) of the empirical unigram distribution.
pub fn unigram_entropy(tokens: &[u32]) -> f64 {
    let mut counts = std::collections::HashMap::<u32, usize>::new();
    for &t in tokens {
        *counts.entry(t).or_default() += 1;
    }
    let n = tokens.len() as f64;
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

pub fn write_corpus(path: &Path, tokens: &[u32], vocab_size: usize) -> Result<()> {
    let bytes = encode_corpus(tokens, vocab_size)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn encode_corpus(tokens: &[u32], vocab_size: usize) -> Result<Vec<u8>> {
    if vocab_size > 1 << 16 {
        return Err(Error::Format(format!("vocab_size {vocab_size} exceeds 16-bit storage")));
    }
    let mut out = Vec::with_capacity(24 + 2 * tokens.len());
    out.extend_from_slice(CORPUS_MAGIC);
    out.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
    out.extend_from_slice(&(vocab_size as u32).to_le_bytes());
    out.extend_from_slice(&(tokens.len() as u64).to_le_bytes());
    for &t in tokens {
        if t as usize >= vocab_size {
            return Err(Error::Index {
                index: t as usize,
                len: vocab_size,
            });
        }
        out.extend_from_slice(&(t as u16).to_le_bytes());
    }
    Ok(out)
}

/// Returns `(vocab_size, tokens)`.
pub fn read_corpus(path: &Path) -> Result<(usize, Vec<u32>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_corpus(&bytes)
}

pub fn decode_corpus(bytes: &[u8]) -> Result<(usize, Vec<u32>)> {
    let bad = |m: &str| Error::Format(format!("corpus: {m}"));
    if bytes.len() < 24 || &bytes[..8] != CORPUS_MAGIC {
        return Err(bad("missing SINKTOKS header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CORPUS_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let vocab = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let body = &bytes[24..];
    if body.len() != count.checked_mul(2).ok_or_else(|| bad("count overflow"))? {
        return Err(bad(&format!("expected {count} tokens, found {} bytes", body.len())));
    }
    let tokens: Vec<u32> = body
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as u32)
        .collect();
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(bad(&format!("token {t} outside vocabulary of {vocab}")));
    }
    Ok((vocab, tokens))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        for kind in [CorpusKind::Markov, CorpusKind::Copy, CorpusKind::Needle] {
            let a = make_corpus(kind, 5000, 7).unwrap();
            assert_eq!(a, make_corpus(kind, 5000, 7).unwrap());
            assert_eq!(a.len(), 5000);
            assert_ne!(a, make_corpus(kind, 5000, 8).unwrap());
        }
        assert!(matches!(make_corpus(CorpusKind::Markov, 0, 1), Err(Error::EmptyInput)));
    }

    #[test]
    fn table_rows_are_distributions() {
        let t = MarkovTable::standard();
        for a in 0..ALPHABET {
            for b in 0..ALPHABET {
                let s: f64 = (0..ALPHABET).map(|c| t.prob(a, b, c)).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn copy_corpus_repeats_segments() {
        let c = make_corpus(CorpusKind::Copy, 10_000, 3).unwrap();
        // Every position in the second half of a segment pair copies a token
        // exactly `len` back, so repeats at lags 8..=24 dominate.
        let hits = (24..c.len()).filter(|&i| (8..=24).any(|lag| c[i] == c[i - lag])).count();
        assert!(hits as f64 / c.len() as f64 > 0.5);
    }

    #[test]
    fn corpus_file_rejects_bad_input() {
        assert!(encode_corpus(&[300], 258).is_err());
        let mut bytes = encode_corpus(&[1, 2, 3], 258).unwrap();
        assert_eq!(decode_corpus(&bytes).unwrap(), (258, vec![1, 2, 3]));
        bytes[0] = b'X';
        assert!(decode_corpus(&bytes).is_err());
        let short = encode_corpus(&[1, 2, 3], 258).unwrap();
        assert!(decode_corpus(&short[..short.len() - 1]).is_err());
    }
}
