//! Parameter layout of the full model and its forward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{self, AggregationParams, BagScores};
use crate::bag_graph;
use crate::config::{Aggregation, TrainConfig};
use crate::corpus::{position_table_rows, EmbeddingTable, EncodedBag, EncodedInstance, PAD_ID};
use crate::error::{GbreError, Result};
use crate::numerics::{Param, ParamId, ParamStore, Tape, Tensor, Var};
use crate::pcnn::{self, EncoderParams};
use crate::qs_attention;

/// Every parameter of the model plus the switches that decide which
/// components run.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub store: ParamStore,
    pub word_embeddings: ParamId,
    /// Trilinear similarity weights; absent when query attention is off.
    pub similarity: Option<ParamId>,
    pub encoder: EncoderParams,
    pub aggregation: AggregationParams,
    pub config: TrainConfig,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

/// Initializes all weights with a seeded symmetric uniform scheme scaled by
/// fan-in plus fan-out; biases start at zero, the attention diagonal at
/// one, and word vectors are copied from `embeddings`.
pub fn init_params(
    config: &TrainConfig,
    embeddings: &EmbeddingTable,
    relation_count: usize,
) -> Result<ModelParams> {
    config.validate()?;
    if embeddings.dim() != config.word_dim {
        return Err(GbreError::Config(format!(
            "embedding width {} does not match word_dim {}",
            embeddings.dim(),
            config.word_dim
        )));
    }
    if relation_count < 2 {
        return Err(GbreError::Config(format!(
            "need at least two relations (including NA), got {relation_count}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::new();

    let mut words = Param::new(
        "word_embeddings",
        embeddings.vectors.clone(),
        !config.freeze_embeddings,
    );
    words.frozen_rows = vec![PAD_ID];
    let word_embeddings = store.add(words);

    let d = config.word_dim;
    let similarity = config.qs_att.then(|| {
        store.add(Param::new(
            "similarity",
            xavier(&mut rng, 1, 3 * d, 3 * d, 1),
            true,
        ))
    });

    let rows = position_table_rows(config.max_len);
    let dp = config.pos_dim;
    let head_positions = store.add(Param::new(
        "head_positions",
        xavier(&mut rng, rows, dp, rows, dp),
        true,
    ));
    let tail_positions = store.add(Param::new(
        "tail_positions",
        xavier(&mut rng, rows, dp, rows, dp),
        true,
    ));
    let fan_in = config.window * config.encoder_input_size();
    let c = config.hidden_size;
    let kernel = store.add(Param::new(
        "conv_kernel",
        xavier(&mut rng, fan_in, c, fan_in, c),
        true,
    ));
    let bias = store.add(Param::new("conv_bias", Tensor::zeros(&[1, c]), true));

    let out = config.encoder_output_size();
    let r = relation_count;
    let diag = store.add(Param::new(
        "attention_diag",
        Tensor::filled(&[1, out], 1.0),
        true,
    ));
    let relations = store.add(Param::new(
        "relation_embeddings",
        xavier(&mut rng, r, out, out, r),
        true,
    ));
    let weight = store.add(Param::new(
        "classifier_weight",
        xavier(&mut rng, r, out, out, r),
        true,
    ));
    let class_bias = store.add(Param::new("classifier_bias", Tensor::zeros(&[1, r]), true));

    Ok(ModelParams {
        store,
        word_embeddings,
        similarity,
        encoder: EncoderParams {
            head_positions,
            tail_positions,
            kernel,
            bias,
            window: config.window,
        },
        aggregation: AggregationParams {
            diag,
            relations,
            weight,
            bias: class_bias,
        },
        config: config.clone(),
    })
}

impl ModelParams {
    pub fn relation_count(&self) -> usize {
        self.aggregation.relation_count(&self.store)
    }

    pub fn vocab_size(&self) -> usize {
        self.store.get(self.word_embeddings).tensor.rows()
    }
}

/// Intermediate results of encoding one bag.
#[derive(Clone, Debug)]
pub struct EncodedBagVars {
    /// Sentence vectors straight from the encoder, `N x 3c`.
    pub sentences: Var,
    /// Sentence vectors after bag self-attention (or `sentences` when it is
    /// disabled).
    pub updated: Var,
    /// Bag self-attention weights, `N x N`.
    pub alpha: Option<Var>,
    /// Query-to-sentence weights per sentence.
    pub q2s: Vec<Var>,
}

fn encode_one(
    tape: &mut Tape,
    model: &ModelParams,
    similarity: Option<Var>,
    inst: &EncodedInstance,
) -> Result<(Var, Option<Var>)> {
    if inst.len == 0 {
        return Err(GbreError::Data("empty sentence".into()));
    }
    let store = &model.store;
    let words = tape.gather(store, model.word_embeddings, &inst.word_ids[..inst.len])?;
    let (x_hat, q2s) = match similarity {
        Some(w_h) => {
            let query = tape.gather(store, model.word_embeddings, &inst.query_ids)?;
            let s_mask = vec![true; inst.len];
            let q_mask = vec![true; inst.query_ids.len()];
            let out =
                qs_attention::query_sentence_attention(tape, words, query, w_h, &s_mask, &q_mask)?;
            (out.fused, Some(out.q2s))
        }
        None => (words, None),
    };
    Ok((
        pcnn::encode_sentence(tape, store, &model.encoder, x_hat, inst)?,
        q2s,
    ))
}

/// Runs every sentence of `bag` through the encoder and, when enabled, the
/// bag self-attention layer. `rng` switches dropout on.
pub fn encode_bag(
    tape: &mut Tape,
    model: &ModelParams,
    bag: &EncodedBag,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<EncodedBagVars> {
    if bag.instances.is_empty() {
        return Err(GbreError::Data(format!("bag {} is empty", bag.key)));
    }
    let similarity = if model.config.qs_att {
        let id = model.similarity.ok_or_else(|| {
            GbreError::Config("query attention enabled but no similarity weights".into())
        })?;
        Some(tape.param(&model.store, id))
    } else {
        None
    };
    let mut rows = Vec::with_capacity(bag.instances.len());
    let mut q2s = Vec::new();
    for inst in &bag.instances {
        let (v, a) = encode_one(tape, model, similarity, inst)?;
        rows.push(v);
        q2s.extend(a);
    }
    let sentences = if rows.len() == 1 {
        rows[0]
    } else {
        tape.concat_rows(&rows)?
    };
    if !model.config.bag_att {
        return Ok(EncodedBagVars {
            sentences,
            updated: sentences,
            alpha: None,
            q2s,
        });
    }
    let dropout = rng.map(|r| (model.config.bag_dropout, r));
    let out = bag_graph::bag_self_attention(tape, sentences, dropout)?;
    Ok(EncodedBagVars {
        sentences,
        updated: out.updated,
        alpha: Some(out.alpha),
        q2s,
    })
}

/// Negative log-likelihood of the bag's label. Aggregation is conditioned
/// on the gold relation. `rng` enables both dropout layers.
pub fn bag_loss(
    tape: &mut Tape,
    model: &ModelParams,
    bag: &EncodedBag,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let enc = encode_bag(tape, model, bag, rng.as_deref_mut())?;
    let store = &model.store;
    let params = &model.aggregation;
    let label = bag.label;
    tape.scoped(aggregation::SCOPE, |tape| {
        let mut z = match model.config.aggregation {
            Aggregation::Att => {
                aggregation::selective_attention(tape, store, params, enc.updated, label)?.0
            }
            Aggregation::One => {
                aggregation::aggregate_one(tape, store, params, enc.updated, label)?.0
            }
            Aggregation::Ave => aggregation::aggregate_ave(tape, enc.updated),
        };
        if let Some(r) = rng {
            if model.config.dropout > 0.0 {
                z = tape.dropout(z, model.config.dropout, r)?;
            }
        }
        let logits = aggregation::logits(tape, store, params, z)?;
        let logp = tape.log_softmax_rows(logits)?;
        let gold = tape.element(logp, 0, label)?;
        Ok(tape.scale(gold, -1.0))
    })
}

/// Mean of per-bag losses over a batch. `rngs`, when given, holds one
/// dropout generator per bag.
pub fn batch_loss(
    tape: &mut Tape,
    model: &ModelParams,
    bags: &[&EncodedBag],
    rngs: Option<&mut [ChaCha8Rng]>,
) -> Result<Var> {
    if bags.is_empty() {
        return Err(GbreError::invalid("batch_loss", "empty batch"));
    }
    let mut losses = Vec::with_capacity(bags.len());
    match rngs {
        Some(rngs) => {
            if rngs.len() != bags.len() {
                return Err(GbreError::shape("batch_loss", &[bags.len()], &[rngs.len()]));
            }
            for (bag, rng) in bags.iter().zip(rngs.iter_mut()) {
                losses.push(bag_loss(tape, model, bag, Some(rng))?);
            }
        }
        None => {
            for bag in bags {
                losses.push(bag_loss(tape, model, bag, None)?);
            }
        }
    }
    let all = tape.concat_cols(&losses)?;
    let total = tape.sum(all);
    Ok(tape.scale(total, 1.0 / bags.len() as f64))
}

/// Evaluation output for one bag.
#[derive(Clone, Debug, PartialEq)]
pub struct BagPrediction {
    /// Relation-conditioned probabilities, one per relation.
    pub probs: Vec<f64>,
    /// Per-relation sentence weights of the aggregation step.
    pub beta: Vec<Vec<f64>>,
    /// Bag self-attention matrix, when that layer is enabled.
    pub alpha: Option<Vec<Vec<f64>>>,
}

/// Scores every relation for a bag without dropout.
pub fn score_bag(model: &ModelParams, bag: &EncodedBag) -> Result<BagPrediction> {
    let mut tape = Tape::new();
    let enc = encode_bag(&mut tape, model, bag, None)?;
    let BagScores { probs, weights } = aggregation::score_bag_eval(
        &mut tape,
        &model.store,
        &model.aggregation,
        enc.updated,
        model.config.aggregation,
    )?;
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(GbreError::NonFinite(format!(
            "probabilities of bag {}",
            bag.key
        )));
    }
    Ok(BagPrediction {
        probs,
        beta: weights,
        alpha: enc.alpha.map(|a| tape.value(a).to_rows()),
    })
}
