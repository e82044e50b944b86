#![allow(dead_code)]

use pgm_core::mdlm::MdlmConfig;
use pgm_core::model::{Model, ModelConfig};
use pgm_core::nn::Dropout;
use pgm_core::partition::{PartitionConfig, QueryMode};
use pgm_core::schedule::{NoiseSchedule, WeightConvention};
use pgm_core::training::{loss_and_grads, Estimator};
use pgm_core::data::TokenSequence;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn pgm_config(enc: usize, dec: usize, hidden: usize, heads: usize, vocab: usize, max_len: usize, mode: QueryMode) -> PartitionConfig {
    PartitionConfig {
        n_encoder_layers: enc,
        n_decoder_layers: dec,
        hidden_dim: hidden,
        n_heads: heads,
        vocab_size: vocab,
        max_len,
        query_mode: mode,
        dropout_rate: 0.0,
        n_classes: 0,
    }
}

pub fn mdlm_config(layers: usize, hidden: usize, heads: usize, vocab: usize, max_len: usize) -> MdlmConfig {
    MdlmConfig {
        n_layers: layers,
        hidden_dim: hidden,
        n_heads: heads,
        vocab_size: vocab,
        max_len,
        dropout_rate: 0.0,
        n_classes: 0,
    }
}

pub fn random_tokens<R: Rng>(rng: &mut R, len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

pub struct FdResult {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
}

impl FdResult {
    pub fn rel_error(&self) -> f64 {
        let d = (self.analytic - self.numeric).abs();
        let s = self.analytic.abs().max(self.numeric.abs());
        if s < 1e-8 {
            d
        } else {
            d / s
        }
    }
}

/// Central differences of the training loss at `n` random parameter entries.
pub fn finite_difference_check(
    model: &mut Model,
    estimator: Estimator,
    batch: &[TokenSequence],
    n: usize,
    step: f64,
    seed: u64,
) -> Vec<FdResult> {
    let schedule = NoiseSchedule::linear();
    let conv = WeightConvention::default();
    let loss_at = |m: &Model| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loss_and_grads(m, estimator, batch, &schedule, conv, &mut rng, &mut Dropout::off())
            .unwrap()
    };
    let (_, grads) = loss_at(model);
    let sizes: Vec<usize> = model.params().values().iter().map(|m| m.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut pick = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut k = pick.gen_range(0..total);
        let mut p = 0;
        while k >= sizes[p] {
            k -= sizes[p];
            p += 1;
        }
        let orig = model.params().values()[p].data()[k];
        model.params_mut().values_mut()[p].data_mut()[k] = orig + step;
        let up = loss_at(model).0;
        model.params_mut().values_mut()[p].data_mut()[k] = orig - step;
        let down = loss_at(model).0;
        model.params_mut().values_mut()[p].data_mut()[k] = orig;
        let id = model.params().ids().nth(p).unwrap();
        out.push(FdResult {
            name: format!("{}[{k}]", model.params().name(id)),
            analytic: grads[p].data()[k],
            numeric: (up - down) / (2.0 * step),
        });
    }
    out
}

pub fn tiny_fd_models() -> (Model, Model) {
    let pgm = Model::new(&ModelConfig::Pgm(pgm_config(1, 1, 16, 2, 11, 8, QueryMode::DataIndependent)), 11).unwrap();
    let mdlm = Model::new(&ModelConfig::Mdlm(mdlm_config(2, 16, 2, 11, 8)), 11).unwrap();
    (pgm, mdlm)
}

pub fn fd_batch(seed: u64) -> Vec<TokenSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..3).map(|_| TokenSequence::new(random_tokens(&mut rng, 8, 11))).collect()
}
