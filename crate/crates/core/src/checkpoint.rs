//! Checkpoint files: an 8-byte little-endian manifest length, a JSON manifest,
//! then little-endian `f32` tensor payloads in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Matrix;

const FORMAT: &str = "pgm-checkpoint-1";
const EMA_PREFIX: &str = "ema.";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// Optimizer steps taken.
    pub step: u64,
    /// Completed distillation rounds.
    pub distill_rounds: u32,
    /// Sampling-step reduction relative to the original teacher, `2^rounds`.
    pub step_ratio: u64,
    #[serde(default)]
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    dtype: String,
    offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    model: ModelConfig,
    metadata: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ParamStore,
    /// Shadow weights; `None` when training did not keep them.
    pub ema: Option<ParamStore>,
    pub metadata: CheckpointMeta,
}

impl Checkpoint {
    pub fn from_model(model: &Model, ema: Option<&ParamStore>, metadata: CheckpointMeta) -> Self {
        Self {
            model: model.config(),
            params: model.params().clone(),
            ema: ema.cloned(),
            metadata,
        }
    }

    /// Raw weights.
    pub fn raw_model(&self) -> Result<Model> {
        Model::from_params(&self.model, self.params.clone())
    }

    /// EMA weights when present, raw weights otherwise.
    pub fn eval_model(&self) -> Result<Model> {
        Model::from_params(&self.model, self.ema.clone().unwrap_or_else(|| self.params.clone()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if let Some((name, _)) = self.params.iter().find(|(n, _)| n.starts_with(EMA_PREFIX)) {
            return Err(Error::Checkpoint(format!("tensor name {name} uses the reserved prefix")));
        }
        let mut tensors = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let ema = self.ema.iter().flat_map(|e| e.iter().map(|(n, m)| (format!("{EMA_PREFIX}{n}"), m)));
        for (name, m) in self.params.iter().map(|(n, m)| (n.to_string(), m)).chain(ema) {
            tensors.push(TensorEntry {
                name,
                shape: [m.rows(), m.cols()],
                dtype: "f32".into(),
                offset: payload.len() as u64,
            });
            for &v in m.data() {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            model: self.model.clone(),
            metadata: self.metadata.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(8 + json.len() + payload.len());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let head: [u8; 8] = bytes.get(..8).ok_or_else(|| bad("truncated header"))?.try_into().unwrap();
        let n = u64::from_le_bytes(head) as usize;
        let json = bytes.get(8..8usize.saturating_add(n)).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if manifest.format != FORMAT {
            return Err(bad("unknown checkpoint format"));
        }
        let payload = &bytes[8 + n..];
        let mut params = ParamStore::new();
        let mut ema = ParamStore::new();
        for t in &manifest.tensors {
            if t.dtype != "f32" {
                return Err(Error::Checkpoint(format!("unsupported dtype {}", t.dtype)));
            }
            let count = t.shape[0] * t.shape[1];
            let start = t.offset as usize;
            let raw = payload
                .get(start..start + 4 * count)
                .ok_or_else(|| Error::Checkpoint(format!("payload for {} is truncated", t.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect();
            let m = Matrix::from_vec(t.shape[0], t.shape[1], data);
            match t.name.strip_prefix(EMA_PREFIX) {
                Some(rest) => ema.add(rest, m),
                None => params.add(t.name.clone(), m),
            };
        }
        let ckpt = Self {
            model: manifest.model,
            params,
            ema: (!ema.is_empty()).then_some(ema),
            metadata: manifest.metadata,
        };
        ckpt.raw_model()?;
        if let Some(e) = &ckpt.ema {
            Model::from_params(&ckpt.model, e.clone())?;
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::PartitionConfig;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig::Pgm(PartitionConfig {
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            hidden_dim: 8,
            n_heads: 2,
            vocab_size: 5,
            max_len: 6,
            query_mode: Default::default(),
            dropout_rate: 0.0,
            n_classes: 0,
        });
        let m = Model::new(&cfg, 3).unwrap();
        let mut ema = m.params().clone();
        ema.values_mut()[0].scale_assign(0.5);
        Checkpoint::from_model(
            &m,
            Some(&ema),
            CheckpointMeta {
                step: 12,
                distill_rounds: 1,
                step_ratio: 2,
                note: None,
            },
        )
    }

    #[test]
    fn bit_exact_roundtrip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.metadata, c.metadata);
        assert_eq!(back.model, c.model);
        assert!(back.ema.is_some());
        for (a, b) in back.params.values().iter().zip(c.params.values()) {
            assert!(a.max_abs_diff(b) < 1e-7);
        }
    }

    #[test]
    fn file_roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/model.ckpt");
        let c = sample();
        c.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back.to_bytes().unwrap(), c.to_bytes().unwrap());
        let bytes = c.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..5]).is_err());
    }
}
