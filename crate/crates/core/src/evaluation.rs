//! Held-out ranking evaluation.
//!
//! Every (bag, non-NA relation) pair becomes one ranked prediction. Walking
//! the list from the most confident prediction down gives the PR curve,
//! from which AUC, best F1 and P@N follow.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{BagKey, EncodedBag, RelationId};
use crate::error::{GbreError, Result};
use crate::model::{score_bag, ModelParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedPrediction {
    pub key: BagKey,
    pub relation: RelationId,
    pub probability: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub precision: f64,
    pub recall: f64,
}

/// Known facts: `(bag, relation)` pairs, NA excluded.
pub type GoldFacts = BTreeSet<(BagKey, RelationId)>;

pub fn gold_facts(bags: &[EncodedBag], na: RelationId) -> GoldFacts {
    bags.iter()
        .flat_map(|b| {
            b.gold
                .iter()
                .filter(|&&r| r != na)
                .map(move |&r| (b.key.clone(), r))
        })
        .collect()
}

/// Pools per-bag relation probabilities into one list sorted by descending
/// probability, ties broken by bag key and then relation id.
pub fn rank_scores(scores: Vec<(BagKey, Vec<f64>)>, na: RelationId) -> Vec<RankedPrediction> {
    let mut ranked: Vec<RankedPrediction> = scores
        .into_iter()
        .flat_map(|(key, probs)| {
            probs
                .into_iter()
                .enumerate()
                .filter(|&(r, _)| r != na)
                .map(move |(relation, probability)| RankedPrediction {
                    key: key.clone(),
                    relation,
                    probability,
                })
                .collect::<Vec<_>>()
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.probability
            .total_cmp(&a.probability)
            .then_with(|| a.key.cmp(&b.key))
            .then_with(|| a.relation.cmp(&b.relation))
    });
    ranked
}

/// Scores every bag with the model and ranks the non-NA predictions.
pub fn rank_predictions(
    model: &ModelParams,
    bags: &[EncodedBag],
    na: RelationId,
) -> Result<Vec<RankedPrediction>> {
    let mut scores = Vec::with_capacity(bags.len());
    for bag in bags {
        scores.push((bag.key.clone(), score_bag(model, bag)?.probs));
    }
    Ok(rank_scores(scores, na))
}

fn is_hit(p: &RankedPrediction, gold: &GoldFacts) -> bool {
    gold.contains(&(p.key.clone(), p.relation))
}

/// One point per ranked prediction: precision and recall of the prefix
/// ending there.
pub fn pr_curve(ranked: &[RankedPrediction], gold: &GoldFacts) -> Result<Vec<PrPoint>> {
    if gold.is_empty() {
        return Err(GbreError::Metric(
            "no gold facts; recall is undefined".into(),
        ));
    }
    let total = gold.len() as f64;
    let mut hits = 0usize;
    Ok(ranked
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if is_hit(p, gold) {
                hits += 1;
            }
            PrPoint {
                precision: hits as f64 / (i + 1) as f64,
                recall: hits as f64 / total,
            }
        })
        .collect())
}

/// Trapezoidal area under the PR curve, starting from `(recall 0,
/// precision 1)`. Recall never reached adds nothing.
pub fn auc(points: &[PrPoint]) -> Result<f64> {
    if points.is_empty() {
        return Err(GbreError::Metric("empty PR curve".into()));
    }
    let mut area = 0.0;
    let (mut r0, mut p0) = (0.0, 1.0);
    for p in points {
        area += (p.recall - r0) * (p.precision + p0) / 2.0;
        r0 = p.recall;
        p0 = p.precision;
    }
    Ok(area)
}

/// Fraction of the top `n` predictions that are gold facts.
pub fn precision_at_n(ranked: &[RankedPrediction], gold: &GoldFacts, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(GbreError::Metric("P@N needs N >= 1".into()));
    }
    if n > ranked.len() {
        return Err(GbreError::Metric(format!(
            "P@{n} requested but only {} predictions are ranked",
            ranked.len()
        )));
    }
    let hits = ranked[..n].iter().filter(|p| is_hit(p, gold)).count();
    Ok(hits as f64 / n as f64)
}

/// Best F1 along the curve.
pub fn best_f1(points: &[PrPoint]) -> f64 {
    points
        .iter()
        .map(|p| {
            let s = p.precision + p.recall;
            if s == 0.0 {
                0.0
            } else {
                2.0 * p.precision * p.recall / s
            }
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: f64,
    pub f1: f64,
    pub p_at: BTreeMap<usize, f64>,
    pub mean_p_at: f64,
}

/// All summary metrics. Cutoffs longer than the ranked list are skipped
/// with a warning; `mean_p_at` averages the remaining ones (0 if none).
pub fn compute_metrics(
    ranked: &[RankedPrediction],
    gold: &GoldFacts,
    cutoffs: &[usize],
) -> Result<Metrics> {
    let points = pr_curve(ranked, gold)?;
    let mut p_at = BTreeMap::new();
    for &n in cutoffs {
        if n > ranked.len() {
            log::warn!("skipping P@{n}: only {} predictions", ranked.len());
            continue;
        }
        p_at.insert(n, precision_at_n(ranked, gold, n)?);
    }
    let mean_p_at = if p_at.is_empty() {
        0.0
    } else {
        p_at.values().sum::<f64>() / p_at.len() as f64
    };
    Ok(Metrics {
        auc: if points.is_empty() {
            0.0
        } else {
            auc(&points)?
        },
        f1: best_f1(&points),
        p_at,
        mean_p_at,
    })
}

/// Writes `rank,precision,recall,probability` rows, rank starting at 1.
pub fn write_pr_csv<W: Write>(
    mut out: W,
    ranked: &[RankedPrediction],
    points: &[PrPoint],
) -> std::io::Result<()> {
    writeln!(out, "rank,precision,recall,probability")?;
    for (i, (p, pt)) in ranked.iter().zip(points).enumerate() {
        writeln!(
            out,
            "{},{},{},{}",
            i + 1,
            pt.precision,
            pt.recall,
            p.probability
        )?;
    }
    Ok(())
}
