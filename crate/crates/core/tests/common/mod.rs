#![allow(dead_code)]

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;

use gbre::config::{Aggregation, Preset, TrainConfig};
use gbre::corpus::{
    build_bags, encode_bags, generate_query, BagMode, EmbeddingTable, EncodedBag, Entity, Instance,
    RelationSchema,
};
use gbre::model::{init_params, ModelParams};

pub const TOY_WORDS: usize = 12;

/// Toy dimensions: d_w 4, d_p 2, c 3, sentences up to 10 tokens.
pub fn toy_config(qs_att: bool, bag_att: bool, aggregation: Aggregation) -> TrainConfig {
    TrainConfig {
        word_dim: 4,
        pos_dim: 2,
        hidden_size: 3,
        window: 3,
        max_len: 10,
        max_bag_size: 4,
        qs_att,
        bag_att,
        aggregation,
        seed: 11,
        ..TrainConfig::preset(Preset::Synthetic)
    }
}

pub fn toy_schema(relations: usize) -> RelationSchema {
    let names: Vec<String> = std::iter::once("NA".to_string())
        .chain((1..relations).map(|r| format!("r{r}")))
        .collect();
    RelationSchema::new(names).unwrap()
}

/// Random word vectors for `w0..wN`, the entity names and the query
/// template words.
pub fn toy_table<R: Rng>(rng: &mut R, dim: usize) -> EmbeddingTable {
    let mut words: Vec<String> = (0..TOY_WORDS).map(|i| format!("w{i}")).collect();
    words.extend(["ha", "hb", "ta", "tb"].map(String::from));
    for w in generate_query("x", "y").unwrap() {
        if w != "x" && w != "y" && !words.contains(&w) {
            words.push(w);
        }
    }
    let rows = words
        .into_iter()
        .map(|w| (w, (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()))
        .collect();
    EmbeddingTable::from_words(rows, dim, 5).unwrap()
}

/// A sentence of `len` tokens with one-token head and tail mentions at
/// distinct random positions.
pub fn toy_instance<R: Rng>(
    rng: &mut R,
    len: usize,
    head: &str,
    tail: &str,
    rel: &str,
) -> Instance {
    let mut tokens: Vec<String> = (0..len)
        .map(|_| format!("w{}", rng.gen_range(0..TOY_WORDS)))
        .collect();
    let mut slots: Vec<usize> = (0..len).collect();
    slots.shuffle(rng);
    let (h, t) = (slots[0], slots[1]);
    tokens[h] = head.into();
    tokens[t] = tail.into();
    Instance {
        tokens,
        head: Entity {
            name: head.into(),
            span: h..h + 1,
        },
        tail: Entity {
            name: tail.into(),
            span: t..t + 1,
        },
        relation: rel.into(),
    }
}

/// Encoded training bags for the pairs `(ha, ta)`, `(hb, tb)`, ... with
/// `2..=max_bag` sentences of `3..=max_len` tokens each.
pub fn toy_bags<R: Rng>(
    rng: &mut R,
    table: &EmbeddingTable,
    schema: &RelationSchema,
    count: usize,
    max_bag: usize,
    max_len: usize,
) -> Vec<EncodedBag> {
    let pairs = [("ha", "ta"), ("hb", "tb"), ("ha", "tb"), ("hb", "ta")];
    let mut instances = Vec::new();
    for &(h, t) in pairs.iter().take(count) {
        let rel = schema.name(rng.gen_range(0..schema.len())).to_string();
        for _ in 0..rng.gen_range(2..=max_bag) {
            let len = rng.gen_range(3..=max_len);
            instances.push(toy_instance(rng, len, h, t, &rel));
        }
    }
    let bags = build_bags(&instances, schema, BagMode::Train, max_bag).unwrap();
    encode_bags(&bags, &table.vocab, max_len).unwrap()
}

pub fn toy_model(config: &TrainConfig, table: &EmbeddingTable, relations: usize) -> ModelParams {
    init_params(config, table, relations).unwrap()
}

pub fn all_toggles() -> Vec<(bool, bool, Aggregation)> {
    let mut out = Vec::new();
    for qs in [false, true] {
        for bag in [false, true] {
            for agg in [Aggregation::Att, Aggregation::One, Aggregation::Ave] {
                out.push((qs, bag, agg));
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Writes straight to stderr so the line shows up even when the test
/// harness captures output.
pub fn report(criterion: usize, title: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "criterion {criterion:>2} {status}: {title} ({detail})"
    );
}
