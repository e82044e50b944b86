//! A uniform interface over both model families.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdlm::{Mdlm, MdlmConfig, ModelKind};
use crate::params::ParamStore;
use crate::partition::{PartitionConfig, PartitionTransformer, PredictRequest};
use crate::tensor::{log_softmax_in_place, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum ModelConfig {
    Mdlm(MdlmConfig),
    Pgm(PartitionConfig),
}

impl ModelConfig {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelConfig::Mdlm(_) => ModelKind::Mdlm,
            ModelConfig::Pgm(_) => ModelKind::Pgm,
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            ModelConfig::Mdlm(c) => c.vocab_size,
            ModelConfig::Pgm(c) => c.vocab_size,
        }
    }

    pub fn max_len(&self) -> usize {
        match self {
            ModelConfig::Mdlm(c) => c.max_len,
            ModelConfig::Pgm(c) => c.max_len,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            ModelConfig::Mdlm(c) => c.n_classes,
            ModelConfig::Pgm(c) => c.n_classes,
        }
    }

    pub fn dropout_rate(&self) -> f64 {
        match self {
            ModelConfig::Mdlm(c) => c.dropout_rate,
            ModelConfig::Pgm(c) => c.dropout_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Mdlm(c) => c.validate(),
            ModelConfig::Pgm(c) => c.validate(),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Model {
    Mdlm(Mdlm),
    Pgm(PartitionTransformer),
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(match config {
            ModelConfig::Mdlm(c) => Model::Mdlm(Mdlm::new(c.clone(), seed)?),
            ModelConfig::Pgm(c) => Model::Pgm(PartitionTransformer::new(c.clone(), seed)?),
        })
    }

    pub fn from_params(config: &ModelConfig, params: ParamStore) -> Result<Self> {
        Ok(match config {
            ModelConfig::Mdlm(c) => Model::Mdlm(Mdlm::from_params(c.clone(), params)?),
            ModelConfig::Pgm(c) => Model::Pgm(PartitionTransformer::from_params(c.clone(), params)?),
        })
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            Model::Mdlm(m) => ModelConfig::Mdlm(m.config().clone()),
            Model::Pgm(m) => ModelConfig::Pgm(m.config().clone()),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Mdlm(_) => ModelKind::Mdlm,
            Model::Pgm(_) => ModelKind::Pgm,
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Model::Mdlm(m) => m.params(),
            Model::Pgm(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Mdlm(m) => m.params_mut(),
            Model::Pgm(m) => m.params_mut(),
        }
    }

    pub fn as_mdlm(&self) -> Result<&Mdlm> {
        match self {
            Model::Mdlm(m) => Ok(m),
            Model::Pgm(_) => Err(Error::Config("expected a masked-diffusion model".into())),
        }
    }

    pub fn as_pgm(&self) -> Result<&PartitionTransformer> {
        match self {
            Model::Pgm(m) => Ok(m),
            Model::Mdlm(_) => Err(Error::Config("expected a partition model".into())),
        }
    }

    pub fn denoiser(&self) -> &dyn Denoiser {
        match self {
            Model::Mdlm(m) => m,
            Model::Pgm(m) => m,
        }
    }
}

/// What a sampler asks of a model at one step for one sequence.
#[derive(Clone, Debug)]
pub struct DecodeQuery<'a> {
    pub clean_positions: &'a [usize],
    pub clean_tokens: &'a [u32],
    pub decode_positions: &'a [usize],
    pub class: Option<u32>,
}

/// Predicts token distributions at chosen positions from the clean ones.
pub trait Denoiser: Send + Sync {
    fn kind(&self) -> ModelKind;
    /// Data vocabulary size `N`.
    fn vocab_size(&self) -> usize;
    fn max_len(&self) -> usize;
    fn n_classes(&self) -> usize;
    /// Normalised log-probabilities, one `|decode| × N` matrix per query.
    fn log_probs(&self, seq_len: usize, queries: &[DecodeQuery<'_>]) -> Result<Vec<Matrix>>;
    fn positions_processed(&self) -> u64;
    fn reset_counter(&self);
}

impl Denoiser for Mdlm {
    fn kind(&self) -> ModelKind {
        ModelKind::Mdlm
    }

    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn max_len(&self) -> usize {
        self.config().max_len
    }

    fn n_classes(&self) -> usize {
        self.config().n_classes
    }

    fn log_probs(&self, seq_len: usize, queries: &[DecodeQuery<'_>]) -> Result<Vec<Matrix>> {
        let mask = self.mask_id();
        let mut zs = Vec::with_capacity(queries.len());
        for q in queries {
            if q.clean_positions.len() != q.clean_tokens.len() {
                return Err(Error::Argument("clean tokens and positions differ in length".into()));
            }
            let mut z = vec![mask; seq_len];
            for (&p, &t) in q.clean_positions.iter().zip(q.clean_tokens) {
                *z.get_mut(p).ok_or_else(|| Error::Argument(format!("position {p} out of range")))? = t;
            }
            for &p in q.decode_positions {
                if p >= seq_len || z[p] != mask {
                    return Err(Error::Argument(format!("decode position {p} is not masked")));
                }
            }
            zs.push(z);
        }
        let refs: Vec<&[u32]> = zs.iter().map(Vec::as_slice).collect();
        let classes: Vec<Option<u32>> = queries.iter().map(|q| q.class).collect();
        let full = self.forward_batch(&refs, &classes)?;
        Ok(full
            .iter()
            .zip(queries)
            .map(|(m, q)| m.select_rows(q.decode_positions))
            .collect())
    }

    fn positions_processed(&self) -> u64 {
        Mdlm::positions_processed(self)
    }

    fn reset_counter(&self) {
        Mdlm::reset_counter(self)
    }
}

impl Denoiser for PartitionTransformer {
    fn kind(&self) -> ModelKind {
        ModelKind::Pgm
    }

    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn max_len(&self) -> usize {
        self.config().max_len
    }

    fn n_classes(&self) -> usize {
        self.config().n_classes
    }

    fn log_probs(&self, seq_len: usize, queries: &[DecodeQuery<'_>]) -> Result<Vec<Matrix>> {
        if let Some(p) = queries
            .iter()
            .flat_map(|q| q.clean_positions.iter().chain(q.decode_positions))
            .find(|&&p| p >= seq_len)
        {
            return Err(Error::Argument(format!("position {p} out of range")));
        }
        let requests: Vec<PredictRequest<'_>> = queries
            .iter()
            .map(|q| PredictRequest {
                clean_tokens: q.clean_tokens,
                clean_positions: q.clean_positions,
                decode_positions: q.decode_positions,
                class: q.class,
            })
            .collect();
        let mut out = self.predict_batch(&requests)?;
        for m in &mut out {
            for i in 0..m.rows() {
                log_softmax_in_place(m.row_mut(i));
            }
        }
        Ok(out)
    }

    fn positions_processed(&self) -> u64 {
        PartitionTransformer::positions_processed(self)
    }

    fn reset_counter(&self) {
        PartitionTransformer::reset_counter(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrip() {
        let c = ModelConfig::Mdlm(MdlmConfig {
            n_layers: 2,
            hidden_dim: 16,
            n_heads: 2,
            vocab_size: 18,
            max_len: 32,
            dropout_rate: 0.0,
            n_classes: 0,
        });
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"family\":\"mdlm\""));
        let back: ModelConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn families_agree_on_interface() {
        let pgm = Model::new(
            &ModelConfig::Pgm(PartitionConfig {
                n_encoder_layers: 1,
                n_decoder_layers: 1,
                hidden_dim: 16,
                n_heads: 2,
                vocab_size: 6,
                max_len: 8,
                query_mode: Default::default(),
                dropout_rate: 0.0,
                n_classes: 0,
            }),
            0,
        )
        .unwrap();
        let mdlm = Model::new(
            &ModelConfig::Mdlm(MdlmConfig {
                n_layers: 1,
                hidden_dim: 16,
                n_heads: 2,
                vocab_size: 6,
                max_len: 8,
                dropout_rate: 0.0,
                n_classes: 0,
            }),
            0,
        )
        .unwrap();
        let q = DecodeQuery {
            clean_positions: &[0, 3],
            clean_tokens: &[4, 1],
            decode_positions: &[5, 1],
            class: None,
        };
        for m in [&pgm, &mdlm] {
            let d = m.denoiser();
            let out = d.log_probs(8, std::slice::from_ref(&q)).unwrap();
            assert_eq!(out[0].shape(), (2, 6));
            for i in 0..2 {
                let s: f64 = out[0].row(i).iter().map(|v| v.exp()).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(pgm.denoiser().positions_processed(), 4);
        assert_eq!(mdlm.denoiser().positions_processed(), 8);
    }
}
