use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::adam::AdamState;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, Real, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameters, optimizer state and progress of a run, stored as f32.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub params: ModelParams<f32>,
    pub optimizer: AdamState<f32>,
}

#[derive(Serialize, Deserialize)]
struct EncodedTensor {
    name: String,
    shape: Vec<usize>,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct EncodedOptimizer {
    t: u64,
    m: Vec<String>,
    v: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    dtype: String,
    config: ModelConfig,
    step: usize,
    params: Vec<EncodedTensor>,
    optimizer: EncodedOptimizer,
}

fn encode<T: Real>(xs: &[T]) -> String {
    let mut bytes = Vec::with_capacity(xs.len() * T::width());
    for x in xs {
        x.to_le_bytes_into(&mut bytes);
    }
    STANDARD.encode(bytes)
}

fn decode<T: Real>(s: &str, expect: usize, what: &str) -> Result<Vec<T>> {
    let bytes = STANDARD
        .decode(s)
        .map_err(|e| Error::Validation(format!("{what}: bad base64: {e}")))?;
    if bytes.len() != expect * T::width() {
        return Err(Error::Validation(format!(
            "{what}: {} bytes, expected {}",
            bytes.len(),
            expect * T::width()
        )));
    }
    Ok(bytes.chunks_exact(T::width()).map(T::from_le_slice).collect())
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            dtype: f32::DTYPE.to_string(),
            config: self.params.config.clone(),
            step: self.step,
            params: self
                .params
                .tensors
                .iter()
                .map(|t| EncodedTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: encode(&t.data),
                })
                .collect(),
            optimizer: EncodedOptimizer {
                t: self.optimizer.t,
                m: self.optimizer.m.iter().map(|x| encode(x)).collect(),
                v: self.optimizer.v.iter().map(|x| encode(x)).collect(),
            },
        };
        let mut s = serde_json::to_string_pretty(&file)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(raw: &str, location: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(raw).map_err(|e| Error::Parse {
            location: format!("{location}:{}:{}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Validation(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                file.version
            )));
        }
        if file.dtype != f32::DTYPE {
            return Err(Error::Validation(format!("checkpoint dtype {} is not f32", file.dtype)));
        }
        file.config.validate()?;
        let tensors = file
            .params
            .iter()
            .map(|t| {
                let n = t.shape.iter().product();
                Ok(Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: decode(&t.data, n, &t.name)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let params = ModelParams {
            config: file.config,
            tensors,
        };
        params.validate_layout()?;
        let o = &file.optimizer;
        if o.m.len() != params.tensors.len() || o.v.len() != params.tensors.len() {
            return Err(Error::Validation("optimizer moments do not match the parameters".into()));
        }
        let moments = |xs: &[String], tag: &str| {
            xs.iter()
                .zip(&params.tensors)
                .map(|(s, t)| decode(s, t.len(), &format!("{tag}.{}", t.name)))
                .collect::<Result<Vec<_>>>()
        };
        let optimizer = AdamState {
            t: o.t,
            m: moments(&o.m, "m")?,
            v: moments(&o.v, "v")?,
        };
        Ok(Self {
            step: file.step,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&raw, &path.display().to_string())
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_json()?.as_bytes()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ckpt() -> Checkpoint {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            max_seq_len: 12,
            vocab_size: 11,
            attn_dropout: 0.1,
        };
        let params = ModelParams::<f32>::init(&cfg, 3).unwrap();
        let mut optimizer = AdamState::new(&params);
        optimizer.t = 7;
        optimizer.m[2][1] = 0.25;
        optimizer.v[3][0] = 1e-9;
        Checkpoint {
            step: 7,
            params,
            optimizer,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = ckpt();
        let json = c.to_json().unwrap();
        let back = Checkpoint::from_json(&json, "mem").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
        assert_eq!(c.hash().unwrap().len(), 64);
    }

    #[test]
    fn version_is_checked() {
        let mut v: serde_json::Value = serde_json::from_str(&ckpt().to_json().unwrap()).unwrap();
        v["version"] = 99.into();
        assert!(matches!(Checkpoint::from_json(&v.to_string(), "mem"), Err(Error::Validation(_))));
        v.as_object_mut().unwrap().remove("version");
        let err = Checkpoint::from_json(&v.to_string(), "mem").unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn truncated_tensor_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&ckpt().to_json().unwrap()).unwrap();
        v["params"][0]["data"] = "AAAA".into();
        assert!(matches!(Checkpoint::from_json(&v.to_string(), "mem"), Err(Error::Validation(_))));
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
