use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecommenderConfig {
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    /// Linear warmup length; `None` uses 5% of the total step count.
    pub warmup_steps: Option<usize>,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub beam_size: usize,
    pub max_history_items: usize,
    /// Training examples drawn per user per epoch; `None` uses them all.
    pub examples_per_user: Option<usize>,
    /// Validate on the first `n` users (sorted by id); `None` uses all.
    pub val_users: Option<usize>,
    /// Beam width for validation; `None` uses `beam_size`.
    pub val_beam_size: Option<usize>,
    pub seed: u64,
}

impl Default for RecommenderConfig {
    fn default() -> Self {
        RecommenderConfig {
            d_model: 128,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            ffn_mult: 4,
            dropout: 0.1,
            learning_rate: 0.003,
            warmup_steps: None,
            weight_decay: 0.05,
            max_grad_norm: 1.0,
            batch_size: 256,
            max_epochs: 200,
            early_stop_patience: 20,
            beam_size: 50,
            max_history_items: 20,
            examples_per_user: None,
            val_users: None,
            val_beam_size: None,
            seed: 2025,
        }
    }
}

impl RecommenderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("recommender: {m}")));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 || self.ffn_mult == 0 {
            return bad("layer counts and ffn_mult must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative".into());
        }
        if self.batch_size == 0 || self.beam_size == 0 || self.max_history_items == 0 {
            return bad("batch_size, beam_size and max_history_items must be positive".into());
        }
        if self.examples_per_user == Some(0) || self.val_users == Some(0) || self.val_beam_size == Some(0) {
            return bad("optional budget knobs must be positive when set".into());
        }
        Ok(())
    }

    pub fn val_beam(&self) -> usize {
        self.val_beam_size.unwrap_or(self.beam_size)
    }
}
