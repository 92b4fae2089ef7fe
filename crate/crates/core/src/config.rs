//! Training configuration and dataset presets.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{GbreError, Result};

/// How a bag's sentence vectors collapse into one bag vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Relation-conditioned selective attention.
    Att,
    /// The single highest-scoring sentence.
    One,
    /// Mean of the sentence vectors.
    Ave,
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Aggregation::Att => "att",
            Aggregation::One => "one",
            Aggregation::Ave => "ave",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Biorel,
    Tbga,
    Nyt,
    Synthetic,
}

impl FromStr for Preset {
    type Err = GbreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "biorel" => Ok(Preset::Biorel),
            "tbga" => Ok(Preset::Tbga),
            "nyt" => Ok(Preset::Nyt),
            "synthetic" => Ok(Preset::Synthetic),
            other => Err(GbreError::Config(format!("unknown preset {other:?}"))),
        }
    }
}

/// Every knob of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Word embedding width `d_w`.
    pub word_dim: usize,
    /// Position embedding width `d_p`.
    pub pos_dim: usize,
    /// Number of convolution kernels `c`.
    pub hidden_size: usize,
    /// Convolution window (odd).
    pub window: usize,
    pub max_len: usize,
    pub max_bag_size: usize,
    /// Dropout on the bag self-attention output.
    pub bag_dropout: f64,
    /// Dropout on the bag vector before the classifier.
    pub dropout: f64,
    pub learning_rate: f64,
    /// Bags per SGD step.
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation AUC improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub qs_att: bool,
    pub bag_att: bool,
    pub aggregation: Aggregation,
    pub freeze_embeddings: bool,
}

impl TrainConfig {
    /// Hyper-parameters for a dataset preset.
    pub fn preset(preset: Preset) -> Self {
        let base = TrainConfig {
            word_dim: 200,
            pos_dim: 5,
            hidden_size: 230,
            window: 3,
            max_len: 100,
            max_bag_size: 32,
            bag_dropout: 0.3,
            dropout: 0.5,
            learning_rate: 0.05,
            batch_size: 30,
            epochs: 30,
            patience: 5,
            seed: 42,
            qs_att: true,
            bag_att: true,
            aggregation: Aggregation::Att,
            freeze_embeddings: false,
        };
        match preset {
            Preset::Biorel | Preset::Nyt => base,
            Preset::Tbga => TrainConfig {
                bag_dropout: 0.25,
                learning_rate: 0.1,
                batch_size: 128,
                ..base
            },
            Preset::Synthetic => TrainConfig {
                word_dim: 16,
                pos_dim: 5,
                hidden_size: 24,
                max_len: 32,
                bag_dropout: 0.3,
                dropout: 0.5,
                learning_rate: 0.1,
                batch_size: 4,
                epochs: 20,
                patience: 20,
                ..base
            },
        }
    }

    /// Width of the query-aware sentence representation.
    pub fn qs_output_size(&self) -> usize {
        3 * self.word_dim
    }

    /// Width of an encoded sentence (and of the classifier input).
    pub fn encoder_output_size(&self) -> usize {
        3 * self.hidden_size
    }

    /// Width of one encoder input row.
    pub fn encoder_input_size(&self) -> usize {
        let words = if self.qs_att {
            self.qs_output_size()
        } else {
            self.word_dim
        };
        words + 2 * self.pos_dim
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(GbreError::Config(msg));
        for (name, rate) in [("bag_dropout", self.bag_dropout), ("dropout", self.dropout)] {
            if !(0.0..=1.0).contains(&rate) {
                return fail(format!("{name} must lie in [0, 1], got {rate}"));
            }
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.window == 0 || self.window.is_multiple_of(2) {
            return fail(format!("window must be odd, got {}", self.window));
        }
        if self.hidden_size == 0 || self.word_dim == 0 || self.pos_dim == 0 {
            return fail("dimensions must be positive".into());
        }
        if self.max_len < 3 {
            return fail(format!("max_len must be at least 3, got {}", self.max_len));
        }
        if self.max_bag_size == 0 {
            return fail("max_bag_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        Ok(())
    }
}
