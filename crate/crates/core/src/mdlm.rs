//! Masked-diffusion baseline: a bidirectional transformer over the partially
//! masked sequence, with the SUBS parameterization on its output.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttnLayout, MaskKind, Segment, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Attention, Dropout, FeedForward, LayerNorm, Linear};
use crate::params::{trunc_normal, ParamId, ParamStore, INIT_STD};
use crate::partition::{check_layout, split_rows};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdlmConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    /// Data vocabulary size `N`; the mask token is id `N`.
    pub vocab_size: usize,
    pub max_len: usize,
    #[serde(default)]
    pub dropout_rate: f64,
    #[serde(default)]
    pub n_classes: usize,
}

impl MdlmConfig {
    pub fn mask_id(&self) -> u32 {
        self.vocab_size as u32
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_layers == 0 {
            return fail("baseline needs at least one layer");
        }
        if self.n_heads == 0 || self.hidden_dim % self.n_heads != 0 {
            return fail("hidden_dim must be divisible by n_heads");
        }
        if (self.hidden_dim / self.n_heads) % 2 != 0 {
            return fail("head dimension must be even for rotary embeddings");
        }
        if self.vocab_size < 2 {
            return fail("vocab_size must be at least 2");
        }
        if self.max_len == 0 {
            return fail("max_len must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail("dropout_rate must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct Mdlm {
    config: MdlmConfig,
    params: ParamStore,
    tok_emb: ParamId,
    class_emb: Option<ParamId>,
    blocks: Vec<(Attention, FeedForward)>,
    out_norm: LayerNorm,
    head: Linear,
    processed: AtomicU64,
}

impl Clone for Mdlm {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            tok_emb: self.tok_emb,
            class_emb: self.class_emb,
            blocks: self.blocks.clone(),
            out_norm: self.out_norm.clone(),
            head: self.head.clone(),
            processed: AtomicU64::new(self.processed.load(Ordering::Relaxed)),
        }
    }
}

impl Mdlm {
    pub fn new(config: MdlmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden_dim;
        let mut store = ParamStore::new();
        let tok_emb = store.add("tok_emb", trunc_normal(&mut rng, config.vocab_size + 1, h, INIT_STD));
        let class_emb = (config.n_classes > 0)
            .then(|| store.add("class_emb", trunc_normal(&mut rng, config.n_classes + 1, h, INIT_STD)));
        let blocks = (0..config.n_layers)
            .map(|i| {
                (
                    Attention::new(&mut store, &mut rng, &format!("block.{i}.attn"), h, config.n_heads),
                    FeedForward::new(&mut store, &mut rng, &format!("block.{i}.ffn"), h),
                )
            })
            .collect();
        let out_norm = LayerNorm::new(&mut store, "out.norm", h);
        let head = Linear::new(&mut store, &mut rng, "out.head", h, config.vocab_size, true);
        Ok(Self {
            config,
            params: store,
            tok_emb,
            class_emb,
            blocks,
            out_norm,
            head,
            processed: AtomicU64::new(0),
        })
    }

    pub fn from_params(config: MdlmConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        check_layout(&model.params, &params)?;
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &MdlmConfig {
        &self.config
    }

    pub fn mask_id(&self) -> u32 {
        self.config.mask_id()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn positions_processed(&self) -> u64 {
        self.processed.load(Ordering::Relaxed)
    }

    pub fn reset_counter(&self) {
        self.processed.store(0, Ordering::Relaxed);
    }

    /// Raw logits (`Σ len × N`) before SUBS.
    pub fn build(&self, tape: &mut Tape, zs: &[&[u32]], classes: &[Option<u32>], drop: &mut Dropout) -> Result<Var> {
        if zs.len() != classes.len() {
            return Err(Error::Argument("batch components disagree in length".into()));
        }
        let store = &self.params;
        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(zs.len());
        let mut class_rows = Vec::new();
        for (z, class) in zs.iter().zip(classes) {
            if z.len() > self.config.max_len {
                return Err(Error::Config(format!(
                    "sequence length {} exceeds max_len {}",
                    z.len(),
                    self.config.max_len
                )));
            }
            if let Some(&t) = z.iter().find(|&&t| t > self.mask_id()) {
                return Err(Error::Validation(format!("token {t} outside the vocabulary")));
            }
            let start = tokens.len();
            segments.push(Segment { q_start: start, q_len: z.len(), k_start: start, k_len: z.len() });
            tokens.extend_from_slice(z);
            positions.extend(0..z.len());
            match (self.class_emb, class) {
                (None, None) => {}
                (None, Some(_)) => return Err(Error::Argument("model is not class-conditional".into())),
                (Some(_), c) => {
                    let idx = match c {
                        None => self.config.n_classes as u32,
                        Some(c) if (*c as usize) < self.config.n_classes => *c,
                        Some(c) => return Err(Error::Argument(format!("class {c} out of range"))),
                    };
                    class_rows.extend(std::iter::repeat(idx).take(z.len()));
                }
            }
        }
        let n = tokens.len();
        let layout = Arc::new(AttnLayout {
            segments,
            q_groups: vec![0; n],
            k_groups: vec![0; n],
            mask: MaskKind::Full,
            n_heads: self.config.n_heads,
        });
        let positions = Arc::new(positions);
        let emb = tape.param(store, self.tok_emb);
        let mut h = tape.embed(emb, &tokens);
        if let Some(ce) = self.class_emb {
            let table = tape.param(store, ce);
            let c = tape.embed(table, &class_rows);
            h = tape.add(h, c);
        }
        h = drop.apply(tape, h);
        for (attn, ffn) in &self.blocks {
            h = attn.self_attend(tape, store, h, &positions, &layout, drop);
            h = ffn.forward(tape, store, h, drop);
        }
        let h = self.out_norm.forward(tape, store, h);
        Ok(self.head.forward(tape, store, h))
    }

    /// Per-position log-probabilities over the data vocabulary under SUBS:
    /// the mask token gets no mass and unmasked positions copy their token.
    pub fn forward(&self, z: &[u32]) -> Result<Matrix> {
        let mut out = self.forward_batch(&[z], &[None])?;
        Ok(out.remove(0))
    }

    pub fn forward_batch(&self, zs: &[&[u32]], classes: &[Option<u32>]) -> Result<Vec<Matrix>> {
        let mut tape = Tape::inference();
        let logits = self.build(&mut tape, zs, classes, &mut Dropout::off())?;
        let raw = tape.take_value(logits);
        self.processed
            .fetch_add(zs.iter().map(|z| z.len() as u64).sum(), Ordering::Relaxed);
        let mut parts = split_rows(&raw, zs.iter().map(|z| z.len()));
        for (m, z) in parts.iter_mut().zip(zs) {
            apply_subs(m, z, self.mask_id());
        }
        Ok(parts)
    }
}

/// Normalises masked rows and pins unmasked rows to a point mass on their token.
pub fn apply_subs(logits: &mut Matrix, z: &[u32], mask_id: u32) {
    for (i, &tok) in z.iter().enumerate() {
        let row = logits.row_mut(i);
        if tok == mask_id {
            crate::tensor::log_softmax_in_place(row);
        } else {
            row.fill(f64::NEG_INFINITY);
            row[tok as usize] = 0.0;
        }
    }
}

/// Total token positions a sampler feeds through the network.
///
/// The baseline processes the full length every step. The partition model
/// processes the clean prefix plus the decode set per step.
pub fn count_token_positions(
    model: ModelKind,
    seq_len: usize,
    clean_sizes: &[usize],
    decode_sizes: &[usize],
) -> Result<u64> {
    if clean_sizes.len() != decode_sizes.len() {
        return Err(Error::Argument("clean and decode size traces differ in length".into()));
    }
    Ok(match model {
        ModelKind::Mdlm => (seq_len * clean_sizes.len()) as u64,
        ModelKind::Pgm => clean_sizes
            .iter()
            .zip(decode_sizes)
            .map(|(c, d)| (c + d) as u64)
            .sum(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Mdlm,
    Pgm,
}
