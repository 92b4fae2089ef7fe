//! Mini-batch SGD training with early stopping, plus checkpoint I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::corpus::{EmbeddingTable, EncodedBag, RelationId, RelationSchema, Vocabulary};
use crate::error::{GbreError, Result};
use crate::evaluation::{auc, gold_facts, pr_curve, rank_predictions};
use crate::model::{bag_loss, init_params, ModelParams};
use crate::numerics::{Tape, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's bags.
    pub loss: f64,
    /// `None` when there is no validation data with known facts.
    pub valid_auc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation AUC (the last
    /// epoch when there is no validation signal).
    pub model: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Mixes run coordinates into one 64-bit seed (splitmix64 finalizer).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h ^= p
            .wrapping_add(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// Validation AUC, or `None` when the validation set has no known facts.
pub fn validation_auc(
    model: &ModelParams,
    bags: &[EncodedBag],
    na: RelationId,
) -> Result<Option<f64>> {
    let gold = gold_facts(bags, na);
    if gold.is_empty() {
        return Ok(None);
    }
    let ranked = rank_predictions(model, bags, na)?;
    let points = pr_curve(&ranked, &gold)?;
    Ok(Some(auc(&points)?))
}

/// One epoch of shuffled mini-batch SGD. Returns the mean bag loss.
pub fn train_epoch(model: &mut ModelParams, bags: &[EncodedBag], epoch: usize) -> Result<f64> {
    let config = model.config.clone();
    let mut order: Vec<usize> = (0..bags.len()).collect();
    let mut shuffle = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, epoch as u64]));
    order.shuffle(&mut shuffle);

    let mut total = 0.0;
    for (step, batch) in order.chunks(config.batch_size).enumerate() {
        let scale = 1.0 / batch.len() as f64;
        for (i, &b) in batch.iter().enumerate() {
            let bag = &bags[b];
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
                config.seed,
                epoch as u64,
                step as u64,
                i as u64,
            ]));
            let mut tape = Tape::new();
            let loss = bag_loss(&mut tape, model, bag, Some(&mut rng))?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(GbreError::NonFinite(format!(
                    "loss {value} for bag {} (epoch {epoch}, step {step})",
                    bag.key.to_string().replace('\t', " | ")
                )));
            }
            total += value;
            tape.backward_scaled(loss, &mut model.store, scale)?;
        }
        model.store.sgd_step(config.learning_rate)?;
    }
    Ok(total / bags.len() as f64)
}

/// Trains until `epochs` are done or validation AUC has not improved for
/// `patience` epochs. `on_epoch` sees each history record as it is made.
pub fn train(
    mut model: ModelParams,
    train_bags: &[EncodedBag],
    valid_bags: &[EncodedBag],
    na: RelationId,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    model.config.validate()?;
    if train_bags.is_empty() {
        return Err(GbreError::Data("no training bags".into()));
    }
    let config = model.config.clone();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut since_best = 0;
    for epoch in 1..=config.epochs {
        let loss = train_epoch(&mut model, train_bags, epoch)?;
        let valid_auc = validation_auc(&model, valid_bags, na)?;
        let record = EpochRecord {
            epoch,
            loss,
            valid_auc,
        };
        on_epoch(&record);
        history.push(record);
        match valid_auc {
            Some(a) if best.as_ref().is_none_or(|(b, _, _)| a > *b) => {
                best = Some((a, epoch, model.clone()));
                since_best = 0;
            }
            Some(_) => {
                since_best += 1;
                if since_best >= config.patience {
                    log::info!(
                        "stopping after epoch {epoch}: no improvement for {since_best} epochs"
                    );
                    break;
                }
            }
            None => {}
        }
    }
    let (model, best_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => {
            let last = history.len();
            (model, last)
        }
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Everything needed to rebuild a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub relations: Vec<String>,
    pub vocab_hash: String,
    pub vocab: Vec<String>,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &ModelParams, vocab: &Vocabulary, schema: &RelationSchema) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            relations: schema.names().to_vec(),
            vocab_hash: vocab.hash(),
            vocab: vocab.words().to_vec(),
            params: model
                .store
                .iter()
                .map(|(_, p)| NamedTensor {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    values: p.tensor.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds the model, vocabulary and relation schema.
    pub fn restore(&self) -> Result<(ModelParams, Vocabulary, RelationSchema)> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(GbreError::Data(format!(
                "checkpoint format {} is not supported (expected {CHECKPOINT_VERSION})",
                self.format_version
            )));
        }
        let vocab = Vocabulary::new(self.vocab.iter().cloned());
        if vocab.hash() != self.vocab_hash || vocab.len() != self.vocab.len() {
            return Err(GbreError::Data(
                "checkpoint vocabulary does not match its hash".into(),
            ));
        }
        let schema = RelationSchema::new(self.relations.clone())?;
        let table = EmbeddingTable {
            vocab: vocab.clone(),
            vectors: Tensor::zeros(&[vocab.len(), self.config.word_dim]),
        };
        let mut model = init_params(&self.config, &table, schema.len())?;
        if model.store.len() != self.params.len() {
            return Err(GbreError::Data(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for saved in &self.params {
            let id = model.store.find(&saved.name).ok_or_else(|| {
                GbreError::Data(format!("unexpected tensor {:?} in checkpoint", saved.name))
            })?;
            let param = model.store.get_mut(id);
            if param.tensor.shape() != saved.shape.as_slice() {
                return Err(GbreError::Data(format!(
                    "tensor {:?} has shape {:?}, expected {:?}",
                    saved.name,
                    saved.shape,
                    param.tensor.shape()
                )));
            }
            param.tensor = Tensor::new(saved.shape.clone(), saved.values.clone())?;
        }
        Ok((model, vocab, schema))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| GbreError::io(path, e))?;
        let mut out = BufWriter::new(file);
        serde_json::to_writer(&mut out, self)?;
        out.write_all(b"\n").map_err(|e| GbreError::io(path, e))?;
        out.flush().map_err(|e| GbreError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| GbreError::io(path, e))?;
        serde_json::from_reader(BufReader::new(file))
            .map_err(|e| GbreError::Data(format!("{}: invalid checkpoint: {e}", path.display())))
    }
}

/// Writes the history as one JSON object per line.
pub fn write_history(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| GbreError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for rec in history {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n").map_err(|e| GbreError::io(path, e))?;
    }
    out.flush().map_err(|e| GbreError::io(path, e))
}
