//! Bag-level aggregation (selective attention, only-one, average) and the
//! softmax relation classifier.

use crate::config::Aggregation;
use crate::corpus::RelationId;
use crate::error::{GbreError, Result};
use crate::numerics::{dot, softmax_in_place, ParamId, ParamStore, Tape, Var};

pub const SCOPE: &str = "aggregation";

#[derive(Clone, Copy, Debug)]
pub struct AggregationParams {
    /// Diagonal of the bilinear attention matrix, `1 x 3c`.
    pub diag: ParamId,
    /// Relation query embeddings, `R x 3c`.
    pub relations: ParamId,
    /// Classifier weights, `R x 3c`.
    pub weight: ParamId,
    /// Classifier bias, `1 x R`.
    pub bias: ParamId,
}

impl AggregationParams {
    pub fn relation_count(&self, store: &ParamStore) -> usize {
        store.get(self.weight).tensor.rows()
    }
}

fn check_relation(
    store: &ParamStore,
    params: &AggregationParams,
    relation: RelationId,
) -> Result<()> {
    let r = params.relation_count(store);
    if relation >= r {
        return Err(GbreError::invalid(
            "aggregation",
            format!("relation id {relation} out of range for {r} relations"),
        ));
    }
    Ok(())
}

/// Relation-conditioned attention over the rows of `sentences`
/// (`c_i = s_i A r`, `beta = softmax(c)`, `z = sum_i beta_i s_i`).
/// Returns `(z, beta)` with shapes `1 x 3c` and `1 x N`.
pub fn selective_attention(
    tape: &mut Tape,
    store: &ParamStore,
    params: &AggregationParams,
    sentences: Var,
    relation: RelationId,
) -> Result<(Var, Var)> {
    check_relation(store, params, relation)?;
    let diag = tape.param(store, params.diag);
    let rel = tape.gather(store, params.relations, &[relation])?;
    let query = tape.mul(diag, rel)?;
    let query = tape.transpose(query);
    let scores = tape.matmul(sentences, query)?;
    let scores = tape.transpose(scores);
    let beta = tape.softmax_rows(scores)?;
    let z = tape.matmul(beta, sentences)?;
    Ok((z, beta))
}

/// Per-sentence classifier probability of `relation`, computed on the
/// current values (no gradient flows through the choice).
pub fn sentence_scores(
    tape: &Tape,
    store: &ParamStore,
    params: &AggregationParams,
    sentences: Var,
    relation: RelationId,
) -> Vec<f64> {
    let s = tape.value(sentences);
    let w = &store.get(params.weight).tensor;
    let b = store.get(params.bias).tensor.data();
    (0..s.rows())
        .map(|i| {
            let mut logits: Vec<f64> = (0..w.rows())
                .map(|r| dot(w.row_slice(r), s.row_slice(i)) + b[r])
                .collect();
            softmax_in_place(&mut logits);
            logits[relation]
        })
        .collect()
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Only-one aggregation: the sentence whose classifier probability for
/// `relation` is highest. Returns `(z, chosen index)`.
pub fn aggregate_one(
    tape: &mut Tape,
    store: &ParamStore,
    params: &AggregationParams,
    sentences: Var,
    relation: RelationId,
) -> Result<(Var, usize)> {
    check_relation(store, params, relation)?;
    let scores = sentence_scores(tape, store, params, sentences, relation);
    let chosen = argmax(&scores);
    tape.note_branch(chosen as u64);
    Ok((tape.select_row(sentences, chosen)?, chosen))
}

/// Average aggregation.
pub fn aggregate_ave(tape: &mut Tape, sentences: Var) -> Var {
    tape.mean_rows(sentences)
}

/// Classifier logits `W z + b` (`1 x R`).
pub fn logits(
    tape: &mut Tape,
    store: &ParamStore,
    params: &AggregationParams,
    z: Var,
) -> Result<Var> {
    let w = tape.param(store, params.weight);
    let b = tape.param(store, params.bias);
    let wt = tape.transpose(w);
    let out = tape.matmul(z, wt)?;
    tape.add(out, b)
}

/// Relation distribution `softmax(W z + b)`.
pub fn classify(
    tape: &mut Tape,
    store: &ParamStore,
    params: &AggregationParams,
    z: Var,
) -> Result<Var> {
    let l = logits(tape, store, params, z)?;
    tape.softmax_rows(l)
}

/// Evaluation-time scores of one bag.
#[derive(Clone, Debug, PartialEq)]
pub struct BagScores {
    /// `probs[r]`: probability of relation `r` when the bag is aggregated
    /// for `r`.
    pub probs: Vec<f64>,
    /// `weights[r]`: sentence weights used when aggregating for `r`
    /// (attention for ATT, one-hot for ONE, uniform for AVE).
    pub weights: Vec<Vec<f64>>,
}

/// Scores every relation for a bag whose (updated) sentence matrix is
/// `sentences`. With ATT and ONE the bag is re-aggregated once per relation
/// and that relation's probability kept; AVE needs a single classifier call.
pub fn score_bag_eval(
    tape: &mut Tape,
    store: &ParamStore,
    params: &AggregationParams,
    sentences: Var,
    mode: Aggregation,
) -> Result<BagScores> {
    let r_count = params.relation_count(store);
    let n = tape.value(sentences).rows();
    tape.scoped(SCOPE, |tape| match mode {
        Aggregation::Ave => {
            let z = aggregate_ave(tape, sentences);
            let p = classify(tape, store, params, z)?;
            Ok(BagScores {
                probs: tape.value(p).data().to_vec(),
                weights: vec![vec![1.0 / n as f64; n]; r_count],
            })
        }
        Aggregation::Att => {
            let mut probs = Vec::with_capacity(r_count);
            let mut weights = Vec::with_capacity(r_count);
            for r in 0..r_count {
                let (z, beta) = selective_attention(tape, store, params, sentences, r)?;
                let p = classify(tape, store, params, z)?;
                probs.push(tape.value(p).data()[r]);
                weights.push(tape.value(beta).data().to_vec());
            }
            Ok(BagScores { probs, weights })
        }
        Aggregation::One => {
            let mut probs = Vec::with_capacity(r_count);
            let mut weights = Vec::with_capacity(r_count);
            for r in 0..r_count {
                let (z, chosen) = aggregate_one(tape, store, params, sentences, r)?;
                let p = classify(tape, store, params, z)?;
                probs.push(tape.value(p).data()[r]);
                let mut w = vec![0.0; n];
                w[chosen] = 1.0;
                weights.push(w);
            }
            Ok(BagScores { probs, weights })
        }
    })
}
