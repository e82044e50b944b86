//! Model fixtures shared by the criterion benches.

use pgm_core::config::matched_mdlm;
use pgm_core::model::{Model, ModelConfig};
use pgm_core::partition::PartitionConfig;

/// A partition transformer with `layers` encoder and decoder layers.
pub fn pgm(seq_len: usize, hidden: usize, layers: usize, vocab: usize) -> Model {
    Model::new(&ModelConfig::Pgm(pgm_config(seq_len, hidden, layers, vocab)), 0).expect("valid config")
}

/// The baseline with twice as many layers, so parameter counts roughly match.
pub fn mdlm(seq_len: usize, hidden: usize, layers: usize, vocab: usize) -> Model {
    let cfg = matched_mdlm(&pgm_config(seq_len, hidden, layers, vocab), 2 * layers);
    Model::new(&ModelConfig::Mdlm(cfg), 0).expect("valid config")
}

fn pgm_config(seq_len: usize, hidden: usize, layers: usize, vocab: usize) -> PartitionConfig {
    PartitionConfig {
        n_encoder_layers: layers,
        n_decoder_layers: layers,
        hidden_dim: hidden,
        n_heads: 4,
        vocab_size: vocab,
        max_len: seq_len,
        query_mode: Default::default(),
        dropout_rate: 0.0,
        n_classes: 0,
    }
}
