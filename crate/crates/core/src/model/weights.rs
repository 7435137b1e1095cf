use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Scalar};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T = f32> {
    pub attn_norm: Matrix<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub mlp_norm: Matrix<T>,
    pub w_up: Matrix<T>,
    pub w_down: Matrix<T>,
}

/// All trainable tensors. Norm gains are stored as `1 x d_model` matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T = f32> {
    pub tok_emb: Matrix<T>,
    pub sink_emb: Matrix<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Matrix<T>,
    pub w_out: Matrix<T>,
}

impl<T: Scalar> Weights<T> {
    /// Seeded initialization: N(0, 0.02) for projections and embeddings,
    /// residual output projections scaled by `1/sqrt(2 n_layers)`, unit gains.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let resid_scale = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        let mut draw = |rows: usize, cols: usize, scale: f64| {
            Matrix::from_fn(rows, cols, |_, _| T::from_f64(normal.sample(&mut rng) * scale))
        };
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let ones = |n: usize| Matrix::from_fn(1, n, |_, _| T::one());
        let tok_emb = draw(cfg.data_vocab(), d, 1.0);
        let sink_emb = draw(cfg.n_sink_tokens, d, 1.0);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerWeights {
                attn_norm: ones(d),
                wq: draw(d, d, 1.0),
                wk: draw(d, d, 1.0),
                wv: draw(d, d, 1.0),
                wo: draw(d, d, resid_scale),
                mlp_norm: ones(d),
                w_up: draw(d, f, 1.0),
                w_down: draw(f, d, resid_scale),
            })
            .collect();
        let w_out = draw(d, cfg.vocab_size, 1.0);
        Ok(Self {
            tok_emb,
            sink_emb,
            layers,
            final_norm: ones(d),
            w_out,
        })
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix<T>| Matrix::zeros(m.rows(), m.cols());
        Self {
            tok_emb: z(&self.tok_emb),
            sink_emb: z(&self.sink_emb),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_norm: z(&l.attn_norm),
                    wq: z(&l.wq),
                    wk: z(&l.wk),
                    wv: z(&l.wv),
                    wo: z(&l.wo),
                    mlp_norm: z(&l.mlp_norm),
                    w_up: z(&l.w_up),
                    w_down: z(&l.w_down),
                })
                .collect(),
            final_norm: z(&self.final_norm),
            w_out: z(&self.w_out),
        }
    }

    /// Tensors in canonical (checkpoint) order.
    pub fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("sink_emb".to_string(), &self.sink_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend([
                (format!("layers.{i}.attn_norm"), &l.attn_norm),
                (format!("layers.{i}.wq"), &l.wq),
                (format!("layers.{i}.wk"), &l.wk),
                (format!("layers.{i}.wv"), &l.wv),
                (format!("layers.{i}.wo"), &l.wo),
                (format!("layers.{i}.mlp_norm"), &l.mlp_norm),
                (format!("layers.{i}.w_up"), &l.w_up),
                (format!("layers.{i}.w_down"), &l.w_down),
            ]);
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("w_out".to_string(), &self.w_out));
        out
    }

    /// Mutable tensors in the same order as [`Weights::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out = vec![&mut self.tok_emb, &mut self.sink_emb];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.mlp_norm,
                &mut l.w_up,
                &mut l.w_down,
            ]);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.w_out);
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.data().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Weights<U> {
        Weights {
            tok_emb: self.tok_emb.cast(),
            sink_emb: self.sink_emb.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_norm: l.attn_norm.cast(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    mlp_norm: l.mlp_norm.cast(),
                    w_up: l.w_up.cast(),
                    w_down: l.w_down.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            w_out: self.w_out.cast(),
        }
    }

    /// Rebuilds weights from named tensors, checking names and shapes against `cfg`.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<(String, Matrix<T>)>) -> Result<Self> {
        let mut w = Self::init_shapes(cfg)?;
        let expected: Vec<(String, (usize, usize))> = w
            .tensors()
            .into_iter()
            .map(|(n, m)| (n, m.shape()))
            .collect();
        if expected.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((slot, (name, shape)), (got_name, got)) in
            w.tensors_mut().into_iter().zip(expected).zip(tensors)
        {
            if name != got_name || shape != got.shape() {
                return Err(Error::Shape(format!(
                    "tensor {got_name} {:?} where {name} {shape:?} was expected",
                    got.shape()
                )));
            }
            *slot = got;
        }
        Ok(w)
    }

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let want = Self::init_shapes(cfg)?;
        for ((name, a), (_, b)) in self.tensors().into_iter().zip(want.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!(
                    "tensor {name} is {:?}, config implies {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        if self.layers.len() != cfg.n_layers {
            return Err(Error::Shape(format!(
                "{} layers, config has {}",
                self.layers.len(),
                cfg.n_layers
            )));
        }
        Ok(())
    }

    fn init_shapes(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let z = Matrix::zeros;
        Ok(Self {
            tok_emb: z(cfg.data_vocab(), d),
            sink_emb: z(cfg.n_sink_tokens, d),
            layers: (0..cfg.n_layers)
                .map(|_| LayerWeights {
                    attn_norm: z(1, d),
                    wq: z(d, d),
                    wk: z(d, d),
                    wv: z(d, d),
                    wo: z(d, d),
                    mlp_norm: z(1, d),
                    w_up: z(d, f),
                    w_down: z(f, d),
                })
                .collect(),
            final_norm: z(1, d),
            w_out: z(d, cfg.vocab_size),
        })
    }

    /// Embedding row for `token`: data ids index `tok_emb`, reserved ids `sink_emb`.
    pub fn embedding(&self, cfg: &ModelConfig, token: u32) -> Result<&[T]> {
        let t = token as usize;
        if t < cfg.data_vocab() {
            Ok(self.tok_emb.row(t))
        } else if t - cfg.data_vocab() < cfg.n_sink_tokens {
            Ok(self.sink_emb.row(t - cfg.data_vocab()))
        } else {
            Err(Error::Index {
                index: t,
                len: cfg.data_vocab() + cfg.n_sink_tokens,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_shaped() {
        let cfg = ModelConfig {
            n_sink_tokens: 1,
            ..Default::default()
        };
        let a = Weights::<f32>::init(&cfg).unwrap();
        let b = Weights::<f32>::init(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tok_emb.shape(), (256, 64));
        assert_eq!(a.sink_emb.shape(), (1, 64));
        assert_eq!(a.w_out.shape(), (64, 258));
        let other = Weights::<f32>::init(&ModelConfig { seed: 1, ..cfg.clone() }).unwrap();
        assert_ne!(a, other);
        assert!(a.embedding(&cfg, 256).is_ok());
        assert!(matches!(a.embedding(&cfg, 257), Err(Error::Index { .. })));
    }

    #[test]
    fn from_tensors_round_trip() {
        let cfg = ModelConfig::default();
        let w = Weights::<f32>::init(&cfg).unwrap();
        let named = w
            .tensors()
            .into_iter()
            .map(|(n, m)| (n, m.clone()))
            .collect();
        assert_eq!(Weights::from_tensors(&cfg, named).unwrap(), w);
    }
}
