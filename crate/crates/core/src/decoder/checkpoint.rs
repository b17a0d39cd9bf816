//! Checkpoint layout: 8-byte magic, u32 version, u64 header length, JSON
//! header, then every parameter tensor as little-endian f32 in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, ModelParams};
use super::tape::Tensor;
use super::train::{TrainConfig, TrainHistory};
use super::DecoderError;

pub const MAGIC: &[u8; 8] = b"VISDCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_lo: f64,
    pub beta_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    schedule: ScheduleSpec,
    seed: u64,
    train: TrainConfig,
    history: TrainHistory,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub train: TrainConfig,
    pub history: TrainHistory,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, DecoderError> {
        let header = Header {
            model: self.params.config.clone(),
            schedule: ScheduleSpec {
                steps: self.train.diffusion_steps,
                beta_lo: self.train.beta_lo,
                beta_hi: self.train.beta_hi,
            },
            seed: self.train.seed,
            train: self.train.clone(),
            history: self.history.clone(),
            tensors: self
                .params
                .names
                .iter()
                .zip(&self.params.tensors)
                .map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape.clone() })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| DecoderError::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + 4 * self.params.n_values());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.params.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecoderError> {
        let bad = |m: String| DecoderError::Checkpoint(m);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).unwrap_or_default();
        if hlen > body.len() {
            return Err(bad("header length exceeds file size".into()));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
        let mut blob = &body[hlen..];
        let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if blob.len() != expected * 4 {
            return Err(bad(format!("blob holds {} bytes, header implies {}", blob.len(), expected * 4)));
        }
        let mut names = Vec::with_capacity(header.tensors.len());
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let (head, rest) = blob.split_at(n * 4);
            blob = rest;
            let data = head
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            names.push(e.name);
            tensors.push(Tensor::new(e.shape, data));
        }
        let params = ModelParams { config: header.model, names, tensors };
        params.check_layout()?;
        if !params.all_finite() {
            return Err(bad("checkpoint holds non-finite parameters".into()));
        }
        Ok(Checkpoint { params, train: header.train, history: header.history })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DecoderError> {
        let path = path.as_ref();
        let io = |source| DecoderError::Io { path: path.display().to_string(), source };
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&bytes).map_err(io)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DecoderError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| DecoderError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::model::ArchConfig;

    fn sample() -> Checkpoint {
        let arch = ArchConfig { widths: [8, 8, 8], groups: 4, latent_dim: 8, time_dim: 4, ..ArchConfig::default() };
        let cfg = ModelConfig::new(2, 8, arch.clone()).unwrap();
        Checkpoint {
            params: ModelParams::init(cfg, 4),
            train: TrainConfig { arch, seed: 4, ..TrainConfig::default() },
            history: TrainHistory { epochs: vec![], step_losses: vec![1.5, 0.25] },
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        let bits = |c: &Checkpoint| c.params.tensors.iter().flat_map(|t| t.data.iter().map(|v| v.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&ck));
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong).is_err());
        let mut ver = bytes;
        ver[8] = 9;
        assert!(Checkpoint::from_bytes(&ver).is_err());
        assert!(Checkpoint::from_bytes(b"short").is_err());
    }
}
