use super::alibi::alibi_bias;
use super::attention::attend;
use super::config::{ModelConfig, PosKind};
use super::rope::{RopeTable, DEFAULT_TABLE_POSITIONS};
use super::weights::Weights;
use crate::error::{Error, Result};
use crate::kvcache::{CachePolicy, KvCache};
use crate::numerics::{matmul, matmul_acc, rmsnorm_forward, silu, Matrix};

/// Read-only inference model; share it freely across decoding sessions.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    weights: Weights<f32>,
    rope: Option<RopeTable<f32>>,
}

fn rmsnorm_rows(x: &Matrix<f32>, gain: &Matrix<f32>) -> Matrix<f32> {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        rmsnorm_forward(x.row(r), gain.row(0), out.row_mut(r));
    }
    out
}

impl Model {
    pub fn new(cfg: ModelConfig, weights: Weights<f32>) -> Result<Self> {
        cfg.validate()?;
        weights.check_shapes(&cfg)?;
        let rope = match cfg.pos_kind {
            PosKind::Rope => Some(RopeTable::new(cfg.d_head, cfg.rope_base, DEFAULT_TABLE_POSITIONS)?),
            PosKind::Alibi => None,
        };
        Ok(Self { cfg, weights, rope })
    }

    /// Freshly initialized model for `cfg`.
    pub fn init(cfg: ModelConfig) -> Result<Self> {
        let w = Weights::init(&cfg)?;
        Self::new(cfg, w)
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &Weights<f32> {
        &self.weights
    }

    pub fn new_cache(&self, policy: CachePolicy) -> Result<KvCache> {
        KvCache::new(policy, self.cfg.n_layers, self.cfg.n_heads, self.cfg.d_head)
    }

    /// One decode step: attends over everything cached plus the new token,
    /// inserts the token's (unrotated key, value) into every layer and
    /// returns next-token logits.
    pub fn decode_step(&self, cache: &mut KvCache, token: u32) -> Result<Vec<f32>> {
        Ok(self.forward_chunk(cache, &[token], true)?.expect("logits requested"))
    }

    /// Feeds `tokens` in chunks of at most `chunk` tokens, with eviction
    /// applied between chunks. Returns the logits after the last token.
    pub fn prefill(&self, cache: &mut KvCache, tokens: &[u32], chunk: usize) -> Result<Vec<f32>> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput);
        }
        let chunk = chunk.max(1);
        let n_chunks = tokens.len().div_ceil(chunk);
        let mut logits = None;
        for (i, c) in tokens.chunks(chunk).enumerate() {
            logits = self.forward_chunk(cache, c, i + 1 == n_chunks)?;
        }
        Ok(logits.expect("last chunk produces logits"))
    }

    fn forward_chunk(&self, cache: &mut KvCache, tokens: &[u32], want_logits: bool) -> Result<Option<Vec<f32>>> {
        let cfg = &self.cfg;
        let w = &self.weights;
        if cache.n_layers() != cfg.n_layers || cache.width() != cfg.d_model {
            return Err(Error::Shape(format!(
                "cache has {} layers of width {}, model needs {} of {}",
                cache.n_layers(),
                cache.width(),
                cfg.n_layers,
                cfg.d_model
            )));
        }
        let (m, d, dh) = (tokens.len(), cfg.d_model, cfg.d_head);
        let mut x = Matrix::zeros(m, d);
        for (r, &tok) in tokens.iter().enumerate() {
            if tok as usize >= cfg.vocab_size {
                return Err(Error::Index {
                    index: tok as usize,
                    len: cfg.vocab_size,
                });
            }
            x.row_mut(r).copy_from_slice(w.embedding(cfg, tok)?);
        }
        let first_index = cache.tokens_seen();
        let scale = 1.0 / (dh as f32).sqrt();
        let mut scratch = std::mem::take(&mut cache.scratch);
        let mut values = std::mem::take(&mut cache.scratch_values);
        let mut probs = Vec::new();
        let mut head_out = vec![0.0f32; dh];

        for (l, lw) in w.layers.iter().enumerate() {
            let h = rmsnorm_rows(&x, &lw.attn_norm);
            let mut q = matmul(&h, &lw.wq)?;
            let k = matmul(&h, &lw.wk)?;
            let v = matmul(&h, &lw.wv)?;
            let n = cache.len(l);

            // Keys rotated to their cache positions: cached entries, then this chunk.
            // Each row is rotated right after it is copied, while it is still hot.
            // Values are gathered once so the per-head loops read contiguous rows.
            scratch.clear();
            values.clear();
            for pos in 0..n + m {
                let start = scratch.len();
                if pos < n {
                    scratch.extend_from_slice(cache.key(l, pos));
                    values.extend_from_slice(cache.value(l, pos));
                } else {
                    scratch.extend_from_slice(k.row(pos - n));
                    values.extend_from_slice(v.row(pos - n));
                }
                if let Some(rope) = &self.rope {
                    rope.rotate_heads(&mut scratch[start..], pos);
                }
            }
            if let Some(rope) = &self.rope {
                for r in 0..m {
                    for head in q.row_mut(r).chunks_exact_mut(dh) {
                        rope.rotate(head, n + r);
                    }
                }
            }

            let mut attn = Matrix::zeros(m, d);
            for r in 0..m {
                let query_pos = n + r;
                for hd in 0..cfg.n_heads {
                    let cols = hd * dh..(hd + 1) * dh;
                    let keys = &scratch;
                    let vals = &values;
                    let pos_kind = cfg.pos_kind;
                    attend(
                        &q.row(r)[cols.clone()],
                        query_pos + 1,
                        |i| &keys[i * d + hd * dh..i * d + (hd + 1) * dh],
                        |i| &vals[i * d + hd * dh..i * d + (hd + 1) * dh],
                        |i| match pos_kind {
                            PosKind::Rope => 0.0,
                            PosKind::Alibi => {
                                alibi_bias(hd, query_pos, i, cfg.n_heads).expect("keys precede the query")
                            }
                        },
                        scale,
                        cfg.attn_variant,
                        &mut probs,
                        &mut head_out,
                    );
                    attn.row_mut(r)[cols].copy_from_slice(&head_out);
                }
            }
            for r in 0..m {
                cache.insert(l, k.row(r), v.row(r), first_index + r as u64)?;
            }

            matmul_acc(&mut x, &attn, &lw.wo)?;
            let h2 = rmsnorm_rows(&x, &lw.mlp_norm);
            let mut up = matmul(&h2, &lw.w_up)?;
            up.data_mut().iter_mut().for_each(|u| *u = silu(*u));
            matmul_acc(&mut x, &up, &lw.w_down)?;
        }
        cache.scratch = scratch;
        cache.scratch_values = values;
        cache.advance(m as u64);

        if !want_logits {
            return Ok(None);
        }
        let last = Matrix::new(1, d, x.row(m - 1).to_vec())?;
        let hf = rmsnorm_rows(&last, &w.final_norm);
        Ok(Some(matmul(&hf, &w.w_out)?.into_data()))
    }
}
