//! Acceptance suite. Each test writes one `criterion N PASS|FAIL` line to
//! stderr before asserting.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use clap::Parser;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gbre::aggregation::{self, AggregationParams};
use gbre::bag_graph::bag_self_attention;
use gbre::cli::{resolve_train, Cli, Command as CliCommand};
use gbre::config::{Aggregation, Preset, TrainConfig};
use gbre::corpus::{
    build_bags, encode_bags, BagKey, BagMode, EmbeddingTable, EncodedBag, Instance,
};
use gbre::evaluation::{
    auc, best_f1, gold_facts, pr_curve, precision_at_n, rank_predictions, GoldFacts,
    RankedPrediction,
};
use gbre::model::{bag_loss, batch_loss, encode_bag, init_params, score_bag, ModelParams};
use gbre::numerics::{finite_difference_check, Param, ParamStore, Tape, Tensor};
use gbre::pcnn::piecewise_pool;
use gbre::qs_attention::query_sentence_attention;
use gbre::synth::{generate, SynthBag, SynthSpec};
use gbre::trainer::{derive_seed, train};

use common::*;

fn rand_tensor<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-scale..scale))
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn row_sums(t: &Tensor) -> Vec<f64> {
    (0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect()
}

// ---------------------------------------------------------------- 1

const GRAD_STEP: f64 = 1e-4;
const GRAD_TOL: f64 = 1e-3;
const GRAD_BUDGET: Duration = Duration::from_secs(30);

#[test]
fn criterion_01_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let table = toy_table(&mut rng, 4);
    let schema = toy_schema(5);
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    let mut checked = 0usize;
    let mut skipped = 0usize;
    for (qs, bag, agg) in all_toggles() {
        let config = toy_config(qs, bag, agg);
        let bags = toy_bags(&mut rng, &table, &schema, 2, 4, 10);
        assert_eq!(bags.len(), 2);
        let mut model = init_params(&config, &table, schema.len()).unwrap();
        let mut store = std::mem::take(&mut model.store);
        let shell = model;
        let batch: Vec<&EncodedBag> = bags.iter().collect();
        // Dropout masks come from fresh generators on every evaluation, so
        // the loss is a deterministic function of the parameters.
        let report = finite_difference_check(
            &mut store,
            |tape, s| {
                let m = ModelParams {
                    store: s.clone(),
                    ..shell.clone()
                };
                let mut rngs: Vec<ChaCha8Rng> = (0..batch.len())
                    .map(|i| ChaCha8Rng::seed_from_u64(derive_seed(&[7, i as u64])))
                    .collect();
                batch_loss(tape, &m, &batch, Some(&mut rngs))
            },
            GRAD_STEP,
            GRAD_TOL,
        )
        .unwrap();
        for p in &report.params {
            checked += p.checked;
            skipped += p.skipped;
            assert!(p.checked > 0 || p.skipped == 0, "{} never compared", p.name);
        }
        worst = worst.max(report.worst());
        if !report.passed() {
            failures.push(format!("qs={qs} bag={bag} agg={agg}: {:?}", report.params));
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && elapsed < GRAD_BUDGET;
    report(
        1,
        "reverse-mode gradients vs central differences, 12 toggle combinations",
        pass,
        &format!(
            "worst rel err {worst:.2e} <= {GRAD_TOL:.0e}, {checked} coords compared, {skipped} at kinks, {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(failures.is_empty(), "{failures:#?}");
    assert!(elapsed < GRAD_BUDGET, "took {elapsed:?}");
}

// ---------------------------------------------------------------- 2

const SUM_TOL: f64 = 1e-9;
const MASK_TOL: f64 = 1e-12;

fn aggregation_store<R: Rng>(
    rng: &mut R,
    width: usize,
    relations: usize,
) -> (ParamStore, AggregationParams) {
    let mut store = ParamStore::new();
    let mut add = |name: &str, t: Tensor| store.add(Param::new(name, t, true));
    let diag = add("diag", rand_tensor(rng, 1, width, 1.0));
    let rel = add("rel", rand_tensor(rng, relations, width, 1.0));
    let weight = add("w", rand_tensor(rng, relations, width, 1.0));
    let bias = add("b", rand_tensor(rng, 1, relations, 1.0));
    (
        store,
        AggregationParams {
            diag,
            relations: rel,
            weight,
            bias,
        },
    )
}

/// Checks every attention distribution of one random case and returns the
/// largest deviation seen for (row sums, self-similarity, PAD invariance).
fn attention_case(rng: &mut ChaCha8Rng) -> (f64, f64, f64) {
    let d = rng.gen_range(1..=6);
    let l = rng.gen_range(1..=10);
    let t = rng.gen_range(1..=8);
    let pad_l = rng.gen_range(0..=4);
    let pad_t = rng.gen_range(0..=4);
    let s = rand_tensor(rng, l, d, 2.0);
    let q = rand_tensor(rng, t, d, 2.0);
    let w_h = rand_tensor(rng, 1, 3 * d, 2.0);
    let mut s_pad = s.to_rows();
    s_pad.extend((0..pad_l).map(|_| (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect()));
    let mut q_pad = q.to_rows();
    q_pad.extend((0..pad_t).map(|_| (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect()));
    let s_mask: Vec<bool> = (0..l + pad_l).map(|i| i < l).collect();
    let q_mask: Vec<bool> = (0..t + pad_t).map(|i| i < t).collect();

    let mut tape = Tape::new();
    let (sv, qv, wv) = (tape.constant(s), tape.constant(q), tape.constant(w_h));
    let plain =
        query_sentence_attention(&mut tape, sv, qv, wv, &vec![true; l], &vec![true; t]).unwrap();
    let sp = tape.constant(Tensor::from_rows(&s_pad).unwrap());
    let qp = tape.constant(Tensor::from_rows(&q_pad).unwrap());
    let padded = query_sentence_attention(&mut tape, sp, qp, wv, &s_mask, &q_mask).unwrap();

    let mut sum_err = 0.0f64;
    for out in [&plain, &padded] {
        let s2q = tape.value(out.s2q);
        for total in row_sums(s2q).into_iter().take(l) {
            sum_err = sum_err.max((total - 1.0).abs());
        }
        sum_err = sum_err.max((row_sums(tape.value(out.q2s))[0] - 1.0).abs());
    }

    // PAD extension leaves every real entry alone and gives PAD entries 0.
    let mut mask_err = 0.0f64;
    let (f0, f1) = (tape.value(plain.fused), tape.value(padded.fused));
    for r in 0..l + pad_l {
        for c in 0..3 * d {
            let want = if r < l { f0.get(r, c) } else { 0.0 };
            mask_err = mask_err.max((f1.get(r, c) - want).abs());
        }
    }
    let (a0, a1) = (tape.value(plain.q2s), tape.value(padded.q2s));
    for c in 0..l + pad_l {
        let want = if c < l { a0.get(0, c) } else { 0.0 };
        mask_err = mask_err.max((a1.get(0, c) - want).abs());
    }
    let (b0, b1) = (tape.value(plain.s2q), tape.value(padded.s2q));
    for r in 0..l {
        for c in 0..t + pad_t {
            let want = if c < t { b0.get(r, c) } else { 0.0 };
            mask_err = mask_err.max((b1.get(r, c) - want).abs());
        }
    }

    // Bag self-attention, with an occasional all-zero sentence.
    let n = rng.gen_range(1..=8);
    let k = rng.gen_range(1..=6);
    let mut bag = rand_tensor(rng, n, k, 1.0);
    let zero_row = if n > 1 && rng.gen_bool(0.3) {
        let z = rng.gen_range(0..n);
        bag.row_slice_mut(z).fill(0.0);
        Some(z)
    } else {
        None
    };
    let bv = tape.constant(bag);
    let cos = tape.cosine_rows(bv).unwrap();
    let mut diag_err = 0.0f64;
    for i in 0..n {
        if Some(i) != zero_row {
            diag_err = diag_err.max((tape.value(cos).get(i, i) - 1.0).abs());
        }
    }
    let g = bag_self_attention::<ChaCha8Rng>(&mut tape, bv, None).unwrap();
    let alpha = tape.value(g.alpha);
    assert!(alpha.data().iter().all(|&a| a >= 0.0));
    for total in row_sums(alpha) {
        sum_err = sum_err.max((total - 1.0).abs());
    }

    // Selective attention over the same bag.
    let relations = rng.gen_range(2..=6);
    let (store, params) = aggregation_store(rng, k, relations);
    for r in 0..relations {
        let (_, beta) =
            aggregation::selective_attention(&mut tape, &store, &params, bv, r).unwrap();
        sum_err = sum_err.max((row_sums(tape.value(beta))[0] - 1.0).abs());
    }
    (sum_err, diag_err, mask_err)
}

#[test]
fn criterion_02_attention_distributions_are_normalized_and_pad_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let cases = 1000;
    let (mut sum_err, mut diag_err, mut mask_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..cases {
        let (s, d, m) = attention_case(&mut rng);
        sum_err = sum_err.max(s);
        diag_err = diag_err.max(d);
        mask_err = mask_err.max(m);
    }
    let pass = sum_err <= SUM_TOL && diag_err <= SUM_TOL && mask_err <= MASK_TOL;
    report(
        2,
        "attention rows sum to 1, cosine self-similarity 1, PAD extension invariance",
        pass,
        &format!("{cases} cases; row-sum err {sum_err:.1e}, e_ii err {diag_err:.1e}, PAD err {mask_err:.1e}"),
    );
    assert!(
        sum_err <= SUM_TOL && diag_err <= SUM_TOL,
        "{sum_err} {diag_err}"
    );
    assert!(mask_err <= MASK_TOL, "{mask_err}");
}

// ---------------------------------------------------------------- 3

const PERM_TOL: f64 = 1e-9;

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&p| t.row_slice(p).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

#[test]
fn criterion_03_bag_outputs_are_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let cases = 500;
    for _ in 0..cases {
        let n = rng.gen_range(1..=8);
        let k = rng.gen_range(1..=9);
        let s = rand_tensor(&mut rng, n, k, 1.0);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let sp = permute_rows(&s, &perm);
        let relations = rng.gen_range(2..=5);
        let (store, params) = aggregation_store(&mut rng, k, relations);

        let mut tape = Tape::new();
        let (a, b) = (tape.constant(s), tape.constant(sp));
        let ga = bag_self_attention::<ChaCha8Rng>(&mut tape, a, None).unwrap();
        let gb = bag_self_attention::<ChaCha8Rng>(&mut tape, b, None).unwrap();
        let moved = permute_rows(tape.value(ga.updated), &perm);
        worst = worst.max(max_abs_diff(moved.data(), tape.value(gb.updated).data()));
        let (alpha_a, alpha_b) = (tape.value(ga.alpha), tape.value(gb.alpha));
        for i in 0..n {
            for j in 0..n {
                worst = worst.max((alpha_a.get(perm[i], perm[j]) - alpha_b.get(i, j)).abs());
            }
        }

        for (x, y) in [(a, b), (ga.updated, gb.updated)] {
            for r in 0..relations {
                let (za, _) =
                    aggregation::selective_attention(&mut tape, &store, &params, x, r).unwrap();
                let (zb, _) =
                    aggregation::selective_attention(&mut tape, &store, &params, y, r).unwrap();
                worst = worst.max(max_abs_diff(tape.value(za).data(), tape.value(zb).data()));
            }
            let za = aggregation::aggregate_ave(&mut tape, x);
            let zb = aggregation::aggregate_ave(&mut tape, y);
            worst = worst.max(max_abs_diff(tape.value(za).data(), tape.value(zb).data()));
        }
    }

    // End to end through the encoder: relation probabilities do not depend
    // on sentence order.
    let table = toy_table(&mut rng, 4);
    let schema = toy_schema(5);
    let mut model_cases = 0;
    for agg in [Aggregation::Att, Aggregation::Ave] {
        let model = init_params(&toy_config(true, true, agg), &table, schema.len()).unwrap();
        for _ in 0..20 {
            let bag = toy_bags(&mut rng, &table, &schema, 1, 8, 10).remove(0);
            let mut shuffled = bag.clone();
            shuffled.instances.shuffle(&mut rng);
            let p0 = score_bag(&model, &bag).unwrap();
            let p1 = score_bag(&model, &shuffled).unwrap();
            worst = worst.max(max_abs_diff(&p0.probs, &p1.probs));
            model_cases += 1;
        }
    }
    let pass = worst <= PERM_TOL;
    report(
        3,
        "bag vectors (ATT, AVE) invariant and bag-graph outputs equivariant under sentence permutation",
        pass,
        &format!("{cases} matrix cases + {model_cases} model bags, max deviation {worst:.1e}"),
    );
    assert!(pass, "{worst}");
}

// ---------------------------------------------------------------- 4

fn scopes(tape: &Tape) -> BTreeSet<&'static str> {
    tape.trace().iter().map(|r| r.scope).collect()
}

#[test]
fn criterion_04_ablated_model_records_only_pcnn_and_selective_attention() {
    let args = [
        "gbre",
        "train",
        "--preset",
        "synthetic",
        "--no-qs-att",
        "--no-bag-att",
        "--agg",
        "att",
        "--train",
        "t",
        "--relations",
        "r",
        "--embeddings",
        "e",
    ];
    let CliCommand::Train(train_args) = Cli::try_parse_from(args).unwrap().command else {
        panic!("expected train");
    };
    let mut config = resolve_train(&train_args).unwrap().model;
    assert!(!config.qs_att && !config.bag_att && config.aggregation == Aggregation::Att);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let table = toy_table(&mut rng, 4);
    let schema = toy_schema(5);
    config = TrainConfig {
        word_dim: 4,
        ..config
    };
    let bags = toy_bags(&mut rng, &table, &schema, 2, 4, 10);
    let ablated = init_params(&config, &table, schema.len()).unwrap();
    let full = init_params(
        &TrainConfig {
            qs_att: true,
            bag_att: true,
            ..config.clone()
        },
        &table,
        schema.len(),
    )
    .unwrap();

    let record = |model: &ModelParams| {
        let mut tape = Tape::new();
        let mut dropout = ChaCha8Rng::seed_from_u64(1);
        bag_loss(&mut tape, model, &bags[0], Some(&mut dropout)).unwrap();
        let enc = encode_bag(&mut tape, model, &bags[1], None).unwrap();
        aggregation::score_bag_eval(
            &mut tape,
            &model.store,
            &model.aggregation,
            enc.updated,
            model.config.aggregation,
        )
        .unwrap();
        scopes(&tape)
    };
    let seen = record(&ablated);
    let control = record(&full);
    let forbidden = [gbre::qs_attention::SCOPE, gbre::bag_graph::SCOPE];
    let pass = ablated.similarity.is_none()
        && forbidden.iter().all(|s| !seen.contains(s))
        && seen.contains(gbre::pcnn::SCOPE)
        && seen.contains(aggregation::SCOPE)
        && forbidden.iter().all(|s| control.contains(s));
    report(
        4,
        "--no-qs-att --no-bag-att --agg att records only the PCNN + selective attention pipeline",
        pass,
        &format!(
            "scopes on tape: {seen:?}; full model adds {:?}",
            control.difference(&seen).collect::<Vec<_>>()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_05_piecewise_pooling_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut configs = 0;
    let mut mismatches = 0;
    for l in 1..=8usize {
        for k1 in 1..=l {
            for k2 in k1..=l {
                for _ in 0..4 {
                    let c = rng.gen_range(1..=4);
                    let m = rand_tensor(&mut rng, c, l, 3.0);
                    let mut tape = Tape::new();
                    let mv = tape.constant(m.clone());
                    let pooled = piecewise_pool(&mut tape, mv, k1 - 1, k2 - 1).unwrap();
                    let got = tape.value(pooled);
                    for row in 0..c {
                        let v = m.row_slice(row);
                        let seg_max = |lo: usize, hi: usize| {
                            let mut best = f64::NEG_INFINITY;
                            for x in &v[lo..hi] {
                                if *x > best {
                                    best = *x;
                                }
                            }
                            if lo == hi {
                                0.0
                            } else {
                                best
                            }
                        };
                        let want = [seg_max(0, k1), seg_max(k1, k2), seg_max(k2, l)];
                        for (s, w) in want.iter().enumerate() {
                            if got.get(row, s) != *w {
                                mismatches += 1;
                            }
                        }
                    }
                    configs += 1;
                }
            }
        }
    }
    report(
        5,
        "piecewise max pooling vs brute force for every L <= 8, 1 <= k1 <= k2 <= L",
        mismatches == 0,
        &format!("{configs} random matrices, {mismatches} mismatches"),
    );
    assert_eq!(mismatches, 0);
}

// ---------------------------------------------------------------- 6

const METRIC_TOL: f64 = 1e-12;

struct MetricCase {
    hits: &'static str,
    gold: usize,
    precision: &'static [f64],
    auc: f64,
    f1: f64,
    p_at: &'static [(usize, f64)],
}

const fn case(
    hits: &'static str,
    gold: usize,
    precision: &'static [f64],
    auc: f64,
    f1: f64,
    p_at: &'static [(usize, f64)],
) -> MetricCase {
    MetricCase {
        hits,
        gold,
        precision,
        auc,
        f1,
        p_at,
    }
}

/// Hit patterns (`T` = known fact at that rank) with their gold counts and
/// hand-computed curves. Gold facts beyond the hits are never ranked.
const METRIC_CASES: &[MetricCase] = &[
    case("T", 1, &[1.0], 1.0, 1.0, &[(1, 1.0)]),
    case("F", 1, &[0.0], 0.0, 0.0, &[(1, 0.0)]),
    case("TTT", 3, &[1.0, 1.0, 1.0], 1.0, 1.0, &[(3, 1.0)]),
    case(
        "FFT",
        1,
        &[0.0, 0.0, 1.0 / 3.0],
        1.0 / 6.0,
        0.5,
        &[(1, 0.0), (2, 0.0), (3, 1.0 / 3.0)],
    ),
    case(
        "FFTT",
        2,
        &[0.0, 0.0, 1.0 / 3.0, 0.5],
        7.0 / 24.0,
        2.0 / 3.0,
        &[(2, 0.0), (4, 0.5)],
    ),
    case("TF", 1, &[1.0, 0.5], 1.0, 1.0, &[(2, 0.5)]),
    case(
        "TFTFF",
        2,
        &[1.0, 0.5, 2.0 / 3.0, 0.5, 0.4],
        19.0 / 24.0,
        0.8,
        &[(1, 1.0), (3, 2.0 / 3.0), (5, 0.4)],
    ),
    case("TT", 4, &[1.0, 1.0], 0.5, 2.0 / 3.0, &[(2, 1.0)]),
    case("FT", 1, &[0.0, 0.5], 0.25, 2.0 / 3.0, &[(1, 0.0), (2, 0.5)]),
    case(
        "FTT",
        2,
        &[0.0, 0.5, 2.0 / 3.0],
        5.0 / 12.0,
        0.8,
        &[(3, 2.0 / 3.0)],
    ),
    case(
        "TFFT",
        2,
        &[1.0, 0.5, 1.0 / 3.0, 0.5],
        17.0 / 24.0,
        2.0 / 3.0,
        &[(4, 0.5)],
    ),
    case("FFF", 2, &[0.0, 0.0, 0.0], 0.0, 0.0, &[(3, 0.0)]),
    case(
        "TTFF",
        2,
        &[1.0, 1.0, 2.0 / 3.0, 0.5],
        1.0,
        1.0,
        &[(2, 1.0), (4, 0.5)],
    ),
    case(
        "FTFT",
        2,
        &[0.0, 0.5, 1.0 / 3.0, 0.5],
        1.0 / 3.0,
        2.0 / 3.0,
        &[(2, 0.5)],
    ),
    case(
        "TFT",
        3,
        &[1.0, 0.5, 2.0 / 3.0],
        19.0 / 36.0,
        2.0 / 3.0,
        &[(3, 2.0 / 3.0)],
    ),
    case(
        "FFFFT",
        1,
        &[0.0, 0.0, 0.0, 0.0, 0.2],
        0.1,
        1.0 / 3.0,
        &[(4, 0.0), (5, 0.2)],
    ),
    case(
        "TTTFFF",
        3,
        &[1.0, 1.0, 1.0, 0.75, 0.6, 0.5],
        1.0,
        1.0,
        &[(6, 0.5)],
    ),
    case(
        "FFFTTT",
        3,
        &[0.0, 0.0, 0.0, 0.25, 0.4, 0.5],
        0.3,
        2.0 / 3.0,
        &[(3, 0.0), (6, 0.5)],
    ),
    case(
        "TFTFT",
        3,
        &[1.0, 0.5, 2.0 / 3.0, 0.5, 0.6],
        32.0 / 45.0,
        0.75,
        &[(5, 0.6)],
    ),
    case("T", 2, &[1.0], 0.5, 2.0 / 3.0, &[(1, 1.0)]),
    case("FT", 3, &[0.0, 0.5], 1.0 / 12.0, 0.4, &[(2, 0.5)]),
    case(
        "TTFT",
        5,
        &[1.0, 1.0, 2.0 / 3.0, 0.75],
        13.0 / 24.0,
        2.0 / 3.0,
        &[(4, 0.75)],
    ),
];

fn bag_key(name: String) -> BagKey {
    BagKey {
        head: name,
        tail: "t".into(),
        relation: None,
    }
}

fn build_case(c: &MetricCase) -> (Vec<RankedPrediction>, GoldFacts) {
    let ranked: Vec<RankedPrediction> = c
        .hits
        .chars()
        .enumerate()
        .map(|(i, _)| RankedPrediction {
            key: bag_key(format!("b{i:02}")),
            relation: 1,
            probability: 1.0 - i as f64 * 0.01,
        })
        .collect();
    let mut gold: GoldFacts = c
        .hits
        .chars()
        .enumerate()
        .filter(|&(_, h)| h == 'T')
        .map(|(i, _)| (bag_key(format!("b{i:02}")), 1))
        .collect();
    let mut extra = 0;
    while gold.len() < c.gold {
        gold.insert((bag_key(format!("unranked{extra}")), 1));
        extra += 1;
    }
    (ranked, gold)
}

#[test]
fn criterion_06_metrics_match_hand_computed_values() {
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for c in METRIC_CASES {
        let (ranked, gold) = build_case(c);
        let points = pr_curve(&ranked, &gold).unwrap();
        let mut errs = Vec::new();
        let hits_total = c.hits.matches('T').count() as f64;
        let precision: Vec<f64> = points.iter().map(|p| p.precision).collect();
        errs.push(max_abs_diff(&precision, c.precision));
        errs.push((points.last().unwrap().recall - hits_total / c.gold as f64).abs());
        errs.push((auc(&points).unwrap() - c.auc).abs());
        errs.push((best_f1(&points) - c.f1).abs());
        for &(n, want) in c.p_at {
            errs.push((precision_at_n(&ranked, &gold, n).unwrap() - want).abs());
        }
        let e = errs.iter().copied().fold(0.0, f64::max);
        worst = worst.max(e);
        if e > METRIC_TOL {
            failures.push(format!("{} / {}: {errs:?}", c.hits, c.gold));
        }
    }
    let pass = failures.is_empty() && METRIC_CASES.len() >= 20;
    report(
        6,
        "PR curve, AUC, best F1 and P@N vs hand-enumerated lists",
        pass,
        &format!(
            "{} lists incl. perfect and inverted, max error {worst:.1e}",
            METRIC_CASES.len()
        ),
    );
    assert!(pass, "{failures:#?}");
}

// ---------------------------------------------------------------- 7 and 8

const ABLATION_SEEDS: [u64; 3] = [42, 7, 123];
const ABLATION_EPOCHS: usize = 20;
const ABLATION_MARGIN: f64 = 0.03;
const ABLATION_BUDGET: Duration = Duration::from_secs(30 * 60);
const SELECTION_THRESHOLD: f64 = 0.70;

const VARIANTS: [(&str, bool, bool); 4] = [
    ("PACNN", false, false),
    ("PACNN+QS_ATT", true, false),
    ("PACNN+BAG_ATT", false, true),
    ("GBRE", true, true),
];

struct Ablation {
    /// Test AUC per variant, one entry per seed.
    auc: BTreeMap<&'static str, Vec<f64>>,
    /// (hits, bags) for the valid-sentence check of the full model, first seed.
    selection: (usize, usize),
    elapsed: Duration,
}

fn encoded_split(
    bags: &[SynthBag],
    corpus_schema: &gbre::corpus::RelationSchema,
    table: &EmbeddingTable,
    mode: BagMode,
    config: &TrainConfig,
) -> Vec<EncodedBag> {
    let instances: Vec<Instance> = bags.iter().flat_map(|b| b.instances.clone()).collect();
    let built = build_bags(&instances, corpus_schema, mode, config.max_bag_size).unwrap();
    encode_bags(&built, &table.vocab, config.max_len).unwrap()
}

/// Share of non-NA test bags with exactly one valid sentence whose largest
/// aggregation weight for the gold relation falls on that sentence.
fn valid_sentence_selection(
    model: &ModelParams,
    synth: &[SynthBag],
    encoded: &[EncodedBag],
) -> (usize, usize) {
    let by_key: BTreeMap<(String, String), &EncodedBag> = encoded
        .iter()
        .map(|b| ((b.key.head.clone(), b.key.tail.clone()), b))
        .collect();
    let (mut hits, mut total) = (0, 0);
    for sb in synth {
        if sb.relation == gbre::corpus::NA || sb.valid.iter().filter(|&&v| v).count() != 1 {
            continue;
        }
        let pair = sb.instances[0].pair_key();
        let bag = by_key[&pair];
        assert_eq!(
            bag.instances.len(),
            sb.instances.len(),
            "sentences dropped for {pair:?}"
        );
        let pred = score_bag(model, bag).unwrap();
        let top = aggregation::argmax(&pred.beta[bag.label]);
        total += 1;
        if sb.valid[top] {
            hits += 1;
        }
    }
    (hits, total)
}

fn run_ablation() -> Ablation {
    let start = Instant::now();
    let spec = SynthSpec::default();
    assert_eq!(
        (spec.seed, spec.relations, spec.train_bags, spec.test_bags),
        (42, 8, 2000, 500)
    );
    assert!(spec.noise_rate == 0.4 && spec.correlated_noise);
    let corpus = generate(&spec).unwrap();
    let schema = corpus.schema.clone();
    let mut auc_by_variant: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    let mut selection = (0, 0);
    for &seed in &ABLATION_SEEDS {
        for &(name, qs, bag) in &VARIANTS {
            let config = TrainConfig {
                seed,
                epochs: ABLATION_EPOCHS,
                qs_att: qs,
                bag_att: bag,
                aggregation: Aggregation::Att,
                ..TrainConfig::preset(Preset::Synthetic)
            };
            let table =
                EmbeddingTable::from_words(corpus.embeddings.clone(), spec.embedding_dim, seed)
                    .unwrap();
            let train_bags = encoded_split(&corpus.train, &schema, &table, BagMode::Train, &config);
            let valid_bags = encoded_split(&corpus.valid, &schema, &table, BagMode::Eval, &config);
            let test_bags = encoded_split(&corpus.test, &schema, &table, BagMode::Eval, &config);
            let model = init_params(&config, &table, schema.len()).unwrap();
            let outcome = train(model, &train_bags, &valid_bags, schema.na(), |_| {}).unwrap();
            let ranked = rank_predictions(&outcome.model, &test_bags, schema.na()).unwrap();
            let test_auc =
                auc(&pr_curve(&ranked, &gold_facts(&test_bags, schema.na())).unwrap()).unwrap();
            println!(
                "  seed {seed:>3} {name:<14} test AUC {test_auc:.4} (best epoch {})",
                outcome.best_epoch
            );
            auc_by_variant.entry(name).or_default().push(test_auc);
            if name == "GBRE" && seed == ABLATION_SEEDS[0] {
                selection = valid_sentence_selection(&outcome.model, &corpus.test, &test_bags);
            }
        }
    }
    Ablation {
        auc: auc_by_variant,
        selection,
        elapsed: start.elapsed(),
    }
}

fn ablation() -> &'static Ablation {
    static RESULT: OnceLock<Ablation> = OnceLock::new();
    RESULT.get_or_init(run_ablation)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_07_ablation_ordering_on_synthetic_corpus() {
    let result = ablation();
    let m = |name: &str| mean(&result.auc[name]);
    let (pacnn, qs, bag, full) = (m("PACNN"), m("PACNN+QS_ATT"), m("PACNN+BAG_ATT"), m("GBRE"));
    let ordered = full >= qs && full >= bag && qs >= pacnn && bag >= pacnn;
    let margin = full - pacnn;
    let pass = ordered && margin >= ABLATION_MARGIN && result.elapsed < ABLATION_BUDGET;
    report(
        7,
        "GBRE >= single-component variants >= PACNN on mean test AUC over seeds 42, 7, 123",
        pass,
        &format!(
            "PACNN {pacnn:.4}, +QS_ATT {qs:.4}, +BAG_ATT {bag:.4}, GBRE {full:.4}; margin {margin:.4} >= {ABLATION_MARGIN}; {:.0}s",
            result.elapsed.as_secs_f64()
        ),
    );
    assert!(ordered, "ordering violated: {:?}", result.auc);
    assert!(margin >= ABLATION_MARGIN, "margin {margin}");
    assert!(result.elapsed < ABLATION_BUDGET);
}

#[test]
fn criterion_08_aggregation_weight_peaks_on_the_valid_sentence() {
    let (hits, total) = ablation().selection;
    let share = hits as f64 / total.max(1) as f64;
    let pass = total > 0 && share >= SELECTION_THRESHOLD;
    report(
        8,
        "full model's largest aggregation weight falls on the single valid sentence",
        pass,
        &format!("{hits}/{total} = {share:.3} >= {SELECTION_THRESHOLD}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 9

fn gbre(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_gbre"))
        .args(args)
        .env("RUST_LOG", "warn")
        .status()
        .unwrap();
    assert!(status.success(), "gbre {args:?} failed with {status}");
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn criterion_09_identical_runs_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gbre(&[
        "synth",
        "--out-dir",
        s(&data),
        "--train-bags",
        "150",
        "--test-bags",
        "80",
    ]);
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        gbre(&[
            "train",
            "--preset",
            "synthetic",
            "--epochs",
            "3",
            "--seed",
            "17",
            "--train",
            s(&data.join("train.jsonl")),
            "--valid",
            s(&data.join("valid.jsonl")),
            "--relations",
            s(&data.join("relations.tsv")),
            "--embeddings",
            s(&data.join("embeddings.txt")),
            "--out-dir",
            s(&out),
        ]);
        gbre(&[
            "eval",
            "--checkpoint",
            s(&out.join("checkpoint.json")),
            "--test",
            s(&data.join("test.jsonl")),
            "--out-dir",
            s(&out),
            "--dump-attention",
        ]);
        runs.push(out);
    }
    let files = [
        "history.jsonl",
        "checkpoint.json",
        "metrics.json",
        "pr_curve.csv",
        "attention.jsonl",
    ];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| {
            std::fs::read(runs[0].join(f)).unwrap() != std::fs::read(runs[1].join(f)).unwrap()
        })
        .collect();
    let pass = differing.is_empty();
    report(
        9,
        "two runs with the same config and seed are byte-identical",
        pass,
        &format!("compared {files:?}; differing {differing:?}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 10

fn resolved(preset: &str) -> TrainConfig {
    let args = [
        "gbre",
        "train",
        "--preset",
        preset,
        "--train",
        "t",
        "--relations",
        "r",
        "--embeddings",
        "e",
    ];
    let CliCommand::Train(a) = Cli::try_parse_from(args).unwrap().command else {
        panic!("expected train");
    };
    resolve_train(&a).unwrap().model
}

#[test]
fn criterion_10_presets_resolve_to_dataset_hyper_parameters() {
    // (word, hidden, output, window, position, bag dropout, lr, dropout, batch)
    type Column = (usize, usize, usize, usize, usize, f64, f64, f64, usize);
    let expected: [(&str, Column); 2] = [
        ("biorel", (200, 230, 690, 3, 5, 0.3, 0.05, 0.5, 30)),
        ("tbga", (200, 230, 690, 3, 5, 0.25, 0.1, 0.5, 128)),
    ];
    let mut mismatches = Vec::new();
    for (preset, want) in expected {
        let c = resolved(preset);
        let got: Column = (
            c.word_dim,
            c.hidden_size,
            c.encoder_output_size(),
            c.window,
            c.pos_dim,
            c.bag_dropout,
            c.learning_rate,
            c.dropout,
            c.batch_size,
        );
        if got != want || !c.qs_att || !c.bag_att || c.aggregation != Aggregation::Att {
            mismatches.push(format!("{preset}: {got:?} != {want:?}"));
        }
    }
    let pass = mismatches.is_empty();
    report(
        10,
        "--preset biorel / tbga resolve to their hyper-parameter columns (plain SGD trainer)",
        pass,
        &format!("{mismatches:?}"),
    );
    assert!(pass);
}
