//! Binary checkpoints.
//!
//! ```text
//! "AISF" | u32 version | u32 header length | JSON header | f64 values
//! ```
//!
//! All integers and floats are little-endian. Tensor offsets in the header
//! count `f64` values from the start of the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AisFormer;
use crate::params::ParameterSet;
use crate::run::RunConfig;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AISF";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// Data order for epoch `e` is drawn from a generator seeded by `(seed, e)`,
    /// so the seed plus the iteration counter pins the stream position.
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ParameterSet,
    pub iteration: u64,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    iteration: u64,
    rng: RngState,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::with_capacity(self.params.len());
        let mut offset = 0;
        for (name, t) in self.params.iter() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.numel();
        }
        let header = Header {
            config: self.config.clone(),
            iteration: self.iteration,
            rng: self.rng,
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(12 + json.len() + 8 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let fmt = |m: String| Error::Format(m);
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(fmt("not a checkpoint (bad magic)".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != FORMAT_VERSION {
            return Err(fmt(format!("checkpoint version {version}, expected {FORMAT_VERSION}")));
        }
        let hlen = word(8) as usize;
        let payload_start = 12 + hlen;
        if bytes.len() < payload_start {
            return Err(fmt("truncated checkpoint header".into()));
        }
        let header: Header =
            serde_json::from_slice(&bytes[12..payload_start]).map_err(|e| fmt(format!("checkpoint header: {e}")))?;
        let payload = &bytes[payload_start..];
        if payload.len() % 8 != 0 {
            return Err(fmt("payload is not a whole number of f64 values".into()));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut params = ParameterSet::new();
        let mut expected_end = 0;
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let end = e.offset + n;
            if end > values.len() {
                return Err(fmt(format!("tensor {} runs past the payload", e.name)));
            }
            params.insert(e.name.clone(), Tensor::new(values[e.offset..end].to_vec(), &e.shape)?)?;
            expected_end = expected_end.max(end);
        }
        if expected_end != values.len() {
            return Err(fmt(format!("{} trailing payload values", values.len() - expected_end)));
        }
        Ok(Checkpoint {
            config: header.config,
            params,
            iteration: header.iteration,
            rng: header.rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Every parameter the model needs is present with the right shape, and
    /// nothing else is.
    pub fn check_against(&self, model: &AisFormer) -> Result<()> {
        let reference = model.init_params(0)?;
        for (name, t) in reference.iter() {
            let got = self
                .params
                .get(name)
                .map_err(|_| Error::Config(format!("checkpoint lacks parameter {name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if let Some(extra) = self.params.names().find(|n| !reference.contains(n)) {
            return Err(Error::Config(format!("checkpoint has unexpected parameter {extra}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::HeadConfig;

    fn small() -> RunConfig {
        RunConfig {
            head: HeadConfig {
                embed_dim: 8,
                roi_h: 3,
                roi_w: 3,
                ffn_dim: 8,
                ..HeadConfig::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn bytes_roundtrip_is_exact() {
        let cfg = small();
        let model = AisFormer::new(cfg.head.clone()).unwrap();
        let ck = Checkpoint {
            params: model.init_params(5).unwrap(),
            config: cfg,
            iteration: 17,
            rng: RngState { seed: 3 },
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.iteration, 17);
        assert_eq!(back.config, ck.config);
        for (name, t) in ck.params.iter() {
            let b = back.params.get(name).unwrap();
            assert_eq!(b.shape(), t.shape());
            assert!(b.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        back.check_against(&model).unwrap();
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        assert!(matches!(Checkpoint::from_bytes(b"NOPE"), Err(Error::Format(_))));
        let cfg = small();
        let model = AisFormer::new(cfg.head.clone()).unwrap();
        let ck = Checkpoint {
            params: model.init_params(5).unwrap(),
            config: cfg,
            iteration: 0,
            rng: RngState { seed: 0 },
        };
        let mut bytes = ck.to_bytes().unwrap();
        bytes.truncate(bytes.len() - 8);
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
        let mut v2 = ck.to_bytes().unwrap();
        v2[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(Error::Format(_))));
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let cfg = small();
        let model = AisFormer::new(cfg.head.clone()).unwrap();
        let ck = Checkpoint {
            params: model.init_params(1).unwrap(),
            config: cfg.clone(),
            iteration: 0,
            rng: RngState { seed: 0 },
        };
        let bigger = AisFormer::new(HeadConfig {
            embed_dim: 16,
            ..cfg.head
        })
        .unwrap();
        assert!(ck.check_against(&bigger).is_err());
    }
}
