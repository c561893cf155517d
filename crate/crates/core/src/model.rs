//! Network shapes and parameter initialisation for the full model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{init_encoder, EncoderConfig};
use crate::error::Result;
use crate::objective::{classifier_mlp, CLASSIFIER_PREFIX};
use crate::params::{ParamGroup, ParameterStore};
use crate::selector::{init_mlp, selector_mlp, MlpConfig, SELECTOR_PREFIX};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Statements per function after padding/truncation (`L`).
    pub seq_len: usize,
    pub selector: MlpConfig,
    pub classifier: MlpConfig,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, dim: usize, seq_len: usize, selector_hidden: usize, classifier_hidden: usize, retain: f64) -> Self {
        ModelConfig {
            encoder: EncoderConfig::new(vocab_size, dim),
            seq_len,
            selector: selector_mlp(dim, selector_hidden, retain),
            classifier: classifier_mlp(seq_len * dim, classifier_hidden, retain),
        }
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim
    }
}

/// Fresh parameters for encoder, selector and classifier, in that order.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    init_encoder(&mut store, &cfg.encoder, &mut rng)?;
    init_mlp(&mut store, SELECTOR_PREFIX, ParamGroup::Selector, &cfg.selector, &mut rng)?;
    init_mlp(&mut store, CLASSIFIER_PREFIX, ParamGroup::Classifier, &cfg.classifier, &mut rng)?;
    Ok(store)
}
