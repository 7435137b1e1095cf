//! Self-describing binary checkpoints: `SINKCKPT` magic, format version, a
//! JSON header, named little-endian f32 tensors and a trailing FNV-1a
//! checksum over the tensor bytes.

use std::fmt::Write as _;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Weights};
use crate::numerics::Matrix;
use crate::train::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SINKCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    /// Training run that produced the weights, if any.
    pub train: Option<TrainConfig>,
    pub seed: u64,
    pub threads: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub weights: Weights<f32>,
}

impl Checkpoint {
    pub fn new(model: ModelConfig, train: Option<TrainConfig>, weights: Weights<f32>) -> Self {
        let (seed, threads) = train.as_ref().map_or((model.seed, 1), |t| (t.seed, t.threads));
        Self {
            header: CheckpointHeader {
                model,
                train,
                seed,
                threads,
            },
            weights,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.header.model
    }

    pub fn model(&self) -> Result<Model> {
        Model::new(self.header.model.clone(), self.weights.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.weights.check_shapes(&self.header.model)?;
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(64 + header.len() + 4 * self.weights.n_params());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let tensors = self.weights.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        let mut hash = FnvHasher::default();
        for (name, m) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.data() {
                let b = v.to_le_bytes();
                hash.write(&b);
                out.extend_from_slice(&b);
            }
        }
        out.extend_from_slice(&hash.finish().to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(corrupt("missing SINKCKPT magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(&format!("unsupported format version {version}")));
        }
        let header_len = r.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| corrupt(&format!("header: {e}")))?;
        let n = r.u32()? as usize;
        let mut hash = FnvHasher::default();
        let mut tensors = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| corrupt("tensor name is not UTF-8"))?
                .to_owned();
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let len = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| corrupt("tensor size overflow"))?;
            let raw = r.take(len)?;
            hash.write(raw);
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Matrix::new(rows, cols, data)?));
        }
        let stored = r.u64()?;
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes after checksum"));
        }
        if stored != hash.finish() {
            return Err(corrupt("weight checksum mismatch"));
        }
        header.model.validate()?;
        let weights = Weights::from_tensors(&header.model, tensors)?;
        Ok(Self { header, weights })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Human-readable summary: config, provenance, tensor shapes and checksum status.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let h = &self.header;
        let _ = writeln!(s, "format: SINKCKPT v{CHECKPOINT_VERSION}");
        let _ = writeln!(
            s,
            "model: {}",
            serde_json::to_string_pretty(&h.model).unwrap_or_default()
        );
        match &h.train {
            Some(t) => {
                let _ = writeln!(s, "train: {}", serde_json::to_string_pretty(t).unwrap_or_default());
            }
            None => s.push_str("train: none (initialization)\n"),
        }
        let _ = writeln!(s, "seed: {}\nthreads: {}", h.seed, h.threads);
        let _ = writeln!(s, "parameters: {}", self.weights.n_params());
        for (name, m) in self.weights.tensors() {
            let _ = writeln!(s, "  {name:<20} {} x {}", m.rows(), m.cols());
        }
        s.push_str("checksum OK\n");
        s
    }
}

fn corrupt(msg: &str) -> Error {
    Error::CorruptCheckpoint(msg.to_owned())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt("truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Checkpoint {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            d_ff: 16,
            n_sink_tokens: 1,
            ..Default::default()
        };
        let w = Weights::init(&cfg).unwrap();
        Checkpoint::new(cfg, None, w)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = tiny();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(back.summary().contains("checksum OK"));
    }

    #[test]
    fn flipped_weight_byte_is_detected() {
        let bytes = tiny().to_bytes().unwrap();
        let mut bad = bytes.clone();
        let i = bad.len() - 20;
        bad[i] ^= 0x01;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::CorruptCheckpoint(_))));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::CorruptCheckpoint(_))
        ));
    }
}
