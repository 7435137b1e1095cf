//! Full-sequence forward pass that records activations, and the matching
//! hand-written backward pass. Used for training, gradient checks, attention
//! statistics and as the reference against incremental decoding.

use super::alibi::alibi_slope;
use super::attention::attend;
use super::config::{ModelConfig, PosKind};
use super::rope::RopeTable;
use super::weights::Weights;
use crate::error::{Error, Result};
use crate::numerics::{
    cross_entropy, cross_entropy_backward, matmul, matmul_acc, matmul_nt, matmul_tn_acc,
    rmsnorm_backward, rmsnorm_forward, silu, silu_grad, softmax_backward_in_place, Matrix, Scalar,
};

/// A batch of equal-length token sequences with optional next-token targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub n_seq: usize,
    pub seq_len: usize,
    /// `n_seq * seq_len` input ids, row-major by sequence.
    pub tokens: Vec<u32>,
    /// Target for each input position; `None` is not scored.
    pub targets: Vec<Option<u32>>,
}

impl Batch {
    pub fn new(n_seq: usize, seq_len: usize, tokens: Vec<u32>, targets: Vec<Option<u32>>) -> Result<Self> {
        if n_seq == 0 || seq_len == 0 {
            return Err(Error::EmptyInput);
        }
        if tokens.len() != n_seq * seq_len || targets.len() != tokens.len() {
            return Err(Error::Shape(format!(
                "batch {n_seq}x{seq_len} with {} tokens and {} targets",
                tokens.len(),
                targets.len()
            )));
        }
        Ok(Self {
            n_seq,
            seq_len,
            tokens,
            targets,
        })
    }

    /// A single unscored sequence.
    pub fn single(tokens: &[u32]) -> Result<Self> {
        Self::new(1, tokens.len(), tokens.to_vec(), vec![None; tokens.len()])
    }

    /// Next-token batch from windows of `seq_len + 1` tokens each. Targets
    /// that are sink ids are masked out.
    pub fn from_windows(cfg: &ModelConfig, windows: &[Vec<u32>]) -> Result<Self> {
        let n_seq = windows.len();
        let seq_len = windows.first().map_or(0, |w| w.len().saturating_sub(1));
        let mut tokens = Vec::with_capacity(n_seq * seq_len);
        let mut targets = Vec::with_capacity(n_seq * seq_len);
        for w in windows {
            if w.len() != seq_len + 1 {
                return Err(Error::Shape("windows must share one length".into()));
            }
            tokens.extend_from_slice(&w[..seq_len]);
            targets.extend(w[1..].iter().map(|&t| (!cfg.is_sink_id(t)).then_some(t)));
        }
        Self::new(n_seq, seq_len, tokens, targets)
    }

    pub fn n_scored(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

struct LayerTape<T> {
    x_in: Matrix<T>,
    inv_attn: Vec<T>,
    h_attn: Matrix<T>,
    /// Rotated under RoPE.
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    /// `[seq][head][query][key]`, dense, zero above the diagonal.
    probs: Vec<T>,
    attn: Matrix<T>,
    x_mid: Matrix<T>,
    inv_mlp: Vec<T>,
    h_mlp: Matrix<T>,
    up: Matrix<T>,
    act: Matrix<T>,
}

/// Activations recorded by [`TrainGraph::forward`].
pub struct Tape<T> {
    batch: Batch,
    layers: Vec<LayerTape<T>>,
    x_final: Matrix<T>,
    inv_final: Vec<T>,
    h_final: Matrix<T>,
    logits: Matrix<T>,
    loss: T,
    n_scored: usize,
}

impl<T: Scalar> Tape<T> {
    pub fn loss(&self) -> T {
        self.loss
    }

    pub fn n_scored(&self) -> usize {
        self.n_scored
    }

    /// `(n_seq * seq_len) x vocab_size` logits.
    pub fn logits(&self) -> &Matrix<T> {
        &self.logits
    }

    /// Attention weights of one head as a `seq_len x seq_len` row-major block.
    pub fn attention_probs(&self, layer: usize, seq: usize, head: usize, n_heads: usize) -> &[T] {
        let t = self.batch.seq_len;
        let off = ((seq * n_heads) + head) * t * t;
        &self.layers[layer].probs[off..off + t * t]
    }
}

/// Forward/backward driver over borrowed weights.
pub struct TrainGraph<'a, T: Scalar> {
    cfg: &'a ModelConfig,
    weights: &'a Weights<T>,
    rope: Option<RopeTable<T>>,
    tape: Option<Tape<T>>,
}

fn rmsnorm_rows<T: Scalar>(x: &Matrix<T>, gain: &Matrix<T>) -> (Matrix<T>, Vec<T>) {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let inv = (0..x.rows())
        .map(|r| rmsnorm_forward(x.row(r), gain.row(0), out.row_mut(r)))
        .collect();
    (out, inv)
}

fn rmsnorm_rows_backward<T: Scalar>(
    x: &Matrix<T>,
    gain: &Matrix<T>,
    inv: &[T],
    dy: &Matrix<T>,
    dx: &mut Matrix<T>,
    dgain: &mut Matrix<T>,
) {
    for r in 0..x.rows() {
        rmsnorm_backward(x.row(r), gain.row(0), inv[r], dy.row(r), dx.row_mut(r), dgain.row_mut(0));
    }
}

impl<'a, T: Scalar> TrainGraph<'a, T> {
    pub fn new(cfg: &'a ModelConfig, weights: &'a Weights<T>) -> Result<Self> {
        cfg.validate()?;
        let rope = match cfg.pos_kind {
            PosKind::Rope => Some(RopeTable::new(cfg.d_head, cfg.rope_base, cfg.train_window + 1)?),
            PosKind::Alibi => None,
        };
        Ok(Self {
            cfg,
            weights,
            rope,
            tape: None,
        })
    }

    pub fn tape(&self) -> Option<&Tape<T>> {
        self.tape.as_ref()
    }

    pub fn into_tape(self) -> Option<Tape<T>> {
        self.tape
    }

    fn rotate_rows(&self, m: &mut Matrix<T>, seq_len: usize, inverse: bool) {
        let Some(rope) = &self.rope else { return };
        let dh = self.cfg.d_head;
        for r in 0..m.rows() {
            let pos = r % seq_len;
            for chunk in m.row_mut(r).chunks_exact_mut(dh) {
                if inverse {
                    rope.rotate_inverse(chunk, pos);
                } else {
                    rope.rotate(chunk, pos);
                }
            }
        }
    }

    /// Runs the forward pass, records the tape and returns the mean NLL over
    /// scored targets (zero when nothing is scored).
    pub fn forward(&mut self, batch: &Batch) -> Result<T> {
        let cfg = self.cfg;
        let w = self.weights;
        let (n_seq, t_len) = (batch.n_seq, batch.seq_len);
        let rows = n_seq * t_len;
        let (d, h_n, dh) = (cfg.d_model, cfg.n_heads, cfg.d_head);
        for t in batch.targets.iter().flatten() {
            if *t as usize >= cfg.vocab_size {
                return Err(Error::Index {
                    index: *t as usize,
                    len: cfg.vocab_size,
                });
            }
        }

        let mut x = Matrix::zeros(rows, d);
        for (r, &tok) in batch.tokens.iter().enumerate() {
            x.row_mut(r).copy_from_slice(w.embedding(cfg, tok)?);
        }

        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut layers = Vec::with_capacity(cfg.n_layers);
        let mut probs_buf = Vec::with_capacity(t_len);
        let mut out = vec![T::zero(); dh];
        for lw in &w.layers {
            let (h_attn, inv_attn) = rmsnorm_rows(&x, &lw.attn_norm);
            let mut q = matmul(&h_attn, &lw.wq)?;
            let mut k = matmul(&h_attn, &lw.wk)?;
            let v = matmul(&h_attn, &lw.wv)?;
            self.rotate_rows(&mut q, t_len, false);
            self.rotate_rows(&mut k, t_len, false);

            let mut probs = vec![T::zero(); n_seq * h_n * t_len * t_len];
            let mut attn = Matrix::zeros(rows, d);
            for s in 0..n_seq {
                for hd in 0..h_n {
                    let cols = hd * dh..(hd + 1) * dh;
                    let slope = match cfg.pos_kind {
                        PosKind::Alibi => alibi_slope(hd, h_n),
                        PosKind::Rope => 0.0,
                    };
                    let block = ((s * h_n) + hd) * t_len * t_len;
                    for i in 0..t_len {
                        let r = s * t_len + i;
                        attend(
                            &q.row(r)[cols.clone()],
                            i + 1,
                            |j| &k.row(s * t_len + j)[cols.clone()],
                            |j| &v.row(s * t_len + j)[cols.clone()],
                            |j| T::from_f64(-slope * (i - j) as f64),
                            scale,
                            cfg.attn_variant,
                            &mut probs_buf,
                            &mut out,
                        );
                        probs[block + i * t_len..block + i * t_len + i + 1].copy_from_slice(&probs_buf);
                        attn.row_mut(r)[cols.clone()].copy_from_slice(&out);
                    }
                }
            }

            let mut x_mid = x.clone();
            matmul_acc(&mut x_mid, &attn, &lw.wo)?;
            let (h_mlp, inv_mlp) = rmsnorm_rows(&x_mid, &lw.mlp_norm);
            let up = matmul(&h_mlp, &lw.w_up)?;
            let mut act = up.clone();
            act.data_mut().iter_mut().for_each(|a| *a = silu(*a));
            let mut x_out = x_mid.clone();
            matmul_acc(&mut x_out, &act, &lw.w_down)?;

            layers.push(LayerTape {
                x_in: std::mem::replace(&mut x, x_out),
                inv_attn,
                h_attn,
                q,
                k,
                v,
                probs,
                attn,
                x_mid,
                inv_mlp,
                h_mlp,
                up,
                act,
            });
        }

        let (h_final, inv_final) = rmsnorm_rows(&x, &w.final_norm);
        let logits = matmul(&h_final, &w.w_out)?;
        let n_scored = batch.n_scored();
        let mut total = T::zero();
        for (r, t) in batch.targets.iter().enumerate() {
            if let Some(t) = t {
                total = total + cross_entropy(logits.row(r), *t as usize)?;
            }
        }
        let loss = if n_scored > 0 {
            total / T::from_f64(n_scored as f64)
        } else {
            T::zero()
        };
        self.tape = Some(Tape {
            batch: batch.clone(),
            layers,
            x_final: x,
            inv_final,
            h_final,
            logits,
            loss,
            n_scored,
        });
        Ok(loss)
    }

    /// Gradients of the last forward loss with respect to every weight tensor.
    /// Consumes the tape; a second call without a new forward is an error.
    pub fn backward(&mut self) -> Result<Weights<T>> {
        let tape = self
            .tape
            .take()
            .ok_or_else(|| Error::State("backward called without a recorded forward pass".into()))?;
        let cfg = self.cfg;
        let w = self.weights;
        let mut g = w.zeros_like();
        let batch = &tape.batch;
        let (n_seq, t_len) = (batch.n_seq, batch.seq_len);
        let rows = n_seq * t_len;
        let (d, h_n, dh) = (cfg.d_model, cfg.n_heads, cfg.d_head);
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());

        let mut dlogits = Matrix::zeros(rows, cfg.vocab_size);
        if tape.n_scored > 0 {
            let inv_n = T::from_f64(1.0 / tape.n_scored as f64);
            for (r, t) in batch.targets.iter().enumerate() {
                if let Some(t) = t {
                    cross_entropy_backward(tape.logits.row(r), *t as usize, inv_n, dlogits.row_mut(r));
                }
            }
        }
        matmul_tn_acc(&mut g.w_out, &tape.h_final, &dlogits)?;
        let dh_final = matmul_nt(&dlogits, &w.w_out)?;
        let mut dx = Matrix::zeros(rows, d);
        rmsnorm_rows_backward(
            &tape.x_final,
            &w.final_norm,
            &tape.inv_final,
            &dh_final,
            &mut dx,
            &mut g.final_norm,
        );

        for (li, lt) in tape.layers.iter().enumerate().rev() {
            let lw = &w.layers[li];
            let lg = &mut g.layers[li];

            // x_out = x_mid + silu(h_mlp W_up) W_down
            matmul_tn_acc(&mut lg.w_down, &lt.act, &dx)?;
            let mut dup = matmul_nt(&dx, &lw.w_down)?;
            for (du, &u) in dup.data_mut().iter_mut().zip(lt.up.data()) {
                *du = *du * silu_grad(u);
            }
            matmul_tn_acc(&mut lg.w_up, &lt.h_mlp, &dup)?;
            let dh_mlp = matmul_nt(&dup, &lw.w_up)?;
            let mut dx_mid = dx;
            rmsnorm_rows_backward(&lt.x_mid, &lw.mlp_norm, &lt.inv_mlp, &dh_mlp, &mut dx_mid, &mut lg.mlp_norm);

            // x_mid = x_in + attn W_o
            matmul_tn_acc(&mut lg.wo, &lt.attn, &dx_mid)?;
            let dattn = matmul_nt(&dx_mid, &lw.wo)?;
            let mut dq = Matrix::zeros(rows, d);
            let mut dk = Matrix::zeros(rows, d);
            let mut dv = Matrix::zeros(rows, d);
            let mut dp = Vec::with_capacity(t_len);
            for s in 0..n_seq {
                for hd in 0..h_n {
                    let c0 = hd * dh;
                    let block = ((s * h_n) + hd) * t_len * t_len;
                    for i in 0..t_len {
                        let ri = s * t_len + i;
                        let p = &lt.probs[block + i * t_len..block + i * t_len + i + 1];
                        let d_out = &dattn.row(ri)[c0..c0 + dh];
                        dp.clear();
                        for (j, &pj) in p.iter().enumerate() {
                            let rj = s * t_len + j;
                            let vj = &lt.v.row(rj)[c0..c0 + dh];
                            dp.push(crate::numerics::dot(d_out, vj));
                            let dvj = &mut dv.row_mut(rj)[c0..c0 + dh];
                            crate::numerics::axpy(dvj, pj, d_out);
                        }
                        softmax_backward_in_place(p, &mut dp);
                        for (j, &ds) in dp.iter().enumerate() {
                            let rj = s * t_len + j;
                            let ds = ds * scale;
                            let kj = &lt.k.row(rj)[c0..c0 + dh];
                            crate::numerics::axpy(&mut dq.row_mut(ri)[c0..c0 + dh], ds, kj);
                            let qi = &lt.q.row(ri)[c0..c0 + dh];
                            crate::numerics::axpy(&mut dk.row_mut(rj)[c0..c0 + dh], ds, qi);
                        }
                    }
                }
            }
            self.rotate_rows(&mut dq, t_len, true);
            self.rotate_rows(&mut dk, t_len, true);
            matmul_tn_acc(&mut lg.wq, &lt.h_attn, &dq)?;
            matmul_tn_acc(&mut lg.wk, &lt.h_attn, &dk)?;
            matmul_tn_acc(&mut lg.wv, &lt.h_attn, &dv)?;
            let mut dh_attn = matmul_nt(&dq, &lw.wq)?;
            dh_attn.add_assign(&matmul_nt(&dk, &lw.wk)?);
            dh_attn.add_assign(&matmul_nt(&dv, &lw.wv)?);
            let mut dx_in = dx_mid;
            rmsnorm_rows_backward(&lt.x_in, &lw.attn_norm, &lt.inv_attn, &dh_attn, &mut dx_in, &mut lg.attn_norm);
            dx = dx_in;
        }

        let dv = cfg.data_vocab();
        for (r, &tok) in batch.tokens.iter().enumerate() {
            let t = tok as usize;
            let dst = if t < dv {
                g.tok_emb.row_mut(t)
            } else {
                g.sink_emb.row_mut(t - dv)
            };
            for (a, &b) in dst.iter_mut().zip(dx.row(r)) {
                *a = *a + b;
            }
        }
        Ok(g)
    }
}

/// Logits for every position of one sequence (positions `0..len`).
pub fn forward_sequence<T: Scalar>(cfg: &ModelConfig, weights: &Weights<T>, tokens: &[u32]) -> Result<Matrix<T>> {
    let mut graph = TrainGraph::new(cfg, weights)?;
    graph.forward(&Batch::single(tokens)?)?;
    Ok(graph.into_tape().expect("forward records a tape").logits)
}
