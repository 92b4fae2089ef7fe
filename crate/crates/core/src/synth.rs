//! Seeded generator for small corpora with planted relation signal and
//! controllable label noise.
//!
//! Head entities come in a few types whose word vectors cluster around a
//! type centroid. Trigger tokens are grouped, and which relation a trigger
//! group expresses depends on the head entity's type, so a trigger alone
//! is ambiguous and has to be read together with the entity pair. With a
//! single type every relation simply owns one trigger group.
//!
//! A sentence that really expresses its bag's relation carries a matching
//! trigger between the two entity mentions; a noisy sentence carries a
//! trigger of some other relation instead. With correlated noise switched
//! on, the valid sentences of a bag also share a pair of background tokens,
//! which gives them something in common beyond the trigger.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{generate_query, Entity, Instance, RelationSchema, NA};
use crate::error::{GbreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// Relation count including NA.
    pub relations: usize,
    pub vocab_size: usize,
    pub head_entities: usize,
    pub tail_entities: usize,
    /// Number of head entity types (1 disables type-dependent triggers).
    pub entity_types: usize,
    pub train_bags: usize,
    pub valid_bags: usize,
    pub test_bags: usize,
    pub min_bag_size: usize,
    pub max_bag_size: usize,
    /// Probability that a sentence does not express its bag's relation.
    pub noise_rate: f64,
    pub correlated_noise: bool,
    /// Fraction of bags labelled NA.
    pub na_fraction: f64,
    pub triggers_per_relation: usize,
    pub min_sentence_len: usize,
    pub max_sentence_len: usize,
    pub embedding_dim: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            relations: 8,
            vocab_size: 200,
            head_entities: 64,
            tail_entities: 56,
            entity_types: 2,
            train_bags: 2000,
            valid_bags: 300,
            test_bags: 500,
            min_bag_size: 2,
            max_bag_size: 6,
            noise_rate: 0.4,
            correlated_noise: true,
            na_fraction: 0.2,
            triggers_per_relation: 3,
            min_sentence_len: 8,
            max_sentence_len: 16,
            embedding_dim: 16,
            seed: 42,
        }
    }
}

/// A generated bag. `valid[i]` says whether sentence `i` expresses the
/// bag's relation.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthBag {
    pub relation: String,
    pub instances: Vec<Instance>,
    pub valid: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub spec: SynthSpec,
    pub schema: RelationSchema,
    pub train: Vec<SynthBag>,
    pub valid: Vec<SynthBag>,
    pub test: Vec<SynthBag>,
    /// Word vectors for every vocabulary word, in vocabulary order.
    pub embeddings: Vec<(String, Vec<f64>)>,
}

impl SynthCorpus {
    pub fn split(&self, name: &str) -> Option<&[SynthBag]> {
        match name {
            "train" => Some(&self.train),
            "valid" => Some(&self.valid),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

struct Lexicon {
    heads: Vec<String>,
    tails: Vec<String>,
    /// One trigger group per non-NA relation.
    groups: Vec<Vec<String>>,
    filler: Vec<String>,
}

fn template_words() -> Vec<String> {
    generate_query("x", "y")
        .expect("constant entities")
        .into_iter()
        .filter(|w| w != "x" && w != "y")
        .collect()
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(GbreError::Config(m));
        if self.relations < 2 {
            return fail("need at least one relation besides NA".into());
        }
        for (name, p) in [
            ("noise_rate", self.noise_rate),
            ("na_fraction", self.na_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.min_bag_size == 0 || self.min_bag_size > self.max_bag_size {
            return fail(format!(
                "bag size range {}..={} is empty",
                self.min_bag_size, self.max_bag_size
            ));
        }
        if self.min_sentence_len < 6 || self.min_sentence_len > self.max_sentence_len {
            return fail("sentence length range must start at 6 or more and be nonempty".into());
        }
        if self.triggers_per_relation == 0 || self.embedding_dim == 0 || self.entity_types == 0 {
            return fail(
                "triggers_per_relation, entity_types and embedding_dim must be positive".into(),
            );
        }
        if self.head_entities < self.entity_types || self.tail_entities == 0 {
            return fail("need at least one head entity per type and one tail entity".into());
        }
        let pairs = self.head_entities * self.tail_entities;
        let bags = self.train_bags + self.valid_bags + self.test_bags;
        if 4 * pairs < 5 * bags {
            return fail(format!("{pairs} entity pairs are too few for {bags} bags"));
        }
        let needed = self.fixed_words() + 8;
        if self.vocab_size < needed {
            return fail(format!(
                "vocab_size {} is too small; need at least {needed}",
                self.vocab_size
            ));
        }
        Ok(())
    }

    fn fixed_words(&self) -> usize {
        template_words().len()
            + (self.relations - 1) * self.triggers_per_relation
            + self.head_entities
            + self.tail_entities
    }

    /// Type of head entity `i`.
    fn head_type(&self, i: usize) -> usize {
        i % self.entity_types
    }

    /// Trigger group that expresses non-NA `relation` for a head of type
    /// `head_type`: type `t` rotates the groups by `t * shift`.
    fn trigger_group(&self, relation: usize, head_type: usize) -> usize {
        let k = self.relations - 1;
        let shift = (k / 2).max(1);
        (relation - 1 + k * self.entity_types - (shift * head_type) % k) % k
    }

    fn lexicon(&self) -> Lexicon {
        let heads = (0..self.head_entities)
            .map(|i| format!("head{i:03}"))
            .collect();
        let tails = (0..self.tail_entities)
            .map(|i| format!("tail{i:03}"))
            .collect();
        let groups = (0..self.relations - 1)
            .map(|g| {
                (0..self.triggers_per_relation)
                    .map(|k| format!("trig{g}_{k}"))
                    .collect()
            })
            .collect();
        let filler = (0..self.vocab_size - self.fixed_words())
            .map(|i| format!("w{i:03}"))
            .collect();
        Lexicon {
            heads,
            tails,
            groups,
            filler,
        }
    }
}

fn relation_name(r: usize) -> String {
    if r == 0 {
        NA.to_string()
    } else {
        format!("rel{r}")
    }
}

struct SentencePlan<'a> {
    head: &'a str,
    tail: &'a str,
    trigger: Option<&'a str>,
    background: &'a [String],
}

fn sentence(
    rng: &mut ChaCha8Rng,
    spec: &SynthSpec,
    lex: &Lexicon,
    plan: &SentencePlan<'_>,
) -> Instance {
    let len = rng.gen_range(spec.min_sentence_len..=spec.max_sentence_len);
    let gap = rng.gen_range(1..=4usize);
    let outside = len - gap - 2;
    let prefix = rng.gen_range(0..=outside);
    let filler = |rng: &mut ChaCha8Rng| lex.filler.choose(rng).expect("filler").clone();

    let mut tokens: Vec<String> = (0..len).map(|_| filler(rng)).collect();
    let first = prefix;
    let second = prefix + gap + 1;
    let head_first = rng.gen_bool(0.5);
    let (a, b) = if head_first {
        (plan.head, plan.tail)
    } else {
        (plan.tail, plan.head)
    };
    tokens[first] = a.to_string();
    tokens[second] = b.to_string();
    if let Some(t) = plan.trigger {
        tokens[rng.gen_range(first + 1..second)] = t.to_string();
    }
    let mut free: Vec<usize> = (0..len).filter(|&i| i < first || i > second).collect();
    free.shuffle(rng);
    for (slot, word) in free.into_iter().zip(plan.background) {
        tokens[slot] = word.clone();
    }
    let (hp, tp) = if head_first {
        (first, second)
    } else {
        (second, first)
    };
    Instance {
        tokens,
        head: Entity {
            name: plan.head.to_string(),
            span: hp..hp + 1,
        },
        tail: Entity {
            name: plan.tail.to_string(),
            span: tp..tp + 1,
        },
        relation: String::new(),
    }
}

fn bag(
    rng: &mut ChaCha8Rng,
    spec: &SynthSpec,
    lex: &Lexicon,
    head: usize,
    tail: usize,
) -> SynthBag {
    let relation = if rng.gen_bool(spec.na_fraction) {
        0
    } else {
        rng.gen_range(1..spec.relations)
    };
    let head_type = spec.head_type(head);
    let n = rng.gen_range(spec.min_bag_size..=spec.max_bag_size);
    let mut valid: Vec<bool> = (0..n).map(|_| !rng.gen_bool(spec.noise_rate)).collect();
    if spec.noise_rate < 1.0 && !valid.iter().any(|&v| v) {
        let i = rng.gen_range(0..n);
        valid[i] = true;
    }
    let background: Vec<String> = if spec.correlated_noise {
        (0..2)
            .map(|_| lex.filler.choose(rng).expect("filler").clone())
            .collect()
    } else {
        Vec::new()
    };
    let instances = valid
        .iter()
        .map(|&ok| {
            let expressed = if ok {
                relation
            } else {
                let others: Vec<usize> = (1..spec.relations).filter(|&r| r != relation).collect();
                *others.choose(rng).unwrap_or(&0)
            };
            let trigger = match expressed {
                0 => None,
                r => lex.groups[spec.trigger_group(r, head_type)]
                    .choose(rng)
                    .map(String::as_str),
            };
            let plan = SentencePlan {
                head: &lex.heads[head],
                tail: &lex.tails[tail],
                trigger,
                background: if ok { &background } else { &[] },
            };
            let mut inst = sentence(rng, spec, lex, &plan);
            inst.relation = relation_name(relation);
            inst
        })
        .collect();
    SynthBag {
        relation: relation_name(relation),
        instances,
        valid,
    }
}

fn uniform_vec(rng: &mut ChaCha8Rng, dim: usize, half_width: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| rng.gen_range(-half_width..half_width))
        .collect()
}

/// Generates the three splits, the relation schema and word vectors.
pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let lex = spec.lexicon();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut used: HashSet<(usize, usize)> = HashSet::new();
    let mut split = |count: usize, rng: &mut ChaCha8Rng| -> Vec<SynthBag> {
        (0..count)
            .map(|_| {
                let (h, t) = loop {
                    let h = rng.gen_range(0..spec.head_entities);
                    let t = rng.gen_range(0..spec.tail_entities);
                    if used.insert((h, t)) {
                        break (h, t);
                    }
                };
                bag(rng, spec, &lex, h, t)
            })
            .collect()
    };
    let train = split(spec.train_bags, &mut rng);
    let valid = split(spec.valid_bags, &mut rng);
    let test = split(spec.test_bags, &mut rng);

    // Entity vectors sit near a centroid per head type (and one for all
    // tails); every other word is independent noise.
    let dim = spec.embedding_dim;
    let centroids: Vec<Vec<f64>> = (0..=spec.entity_types)
        .map(|_| uniform_vec(&mut rng, dim, 0.5))
        .collect();
    let near = |rng: &mut ChaCha8Rng, c: &[f64]| -> Vec<f64> {
        c.iter().map(|x| x + rng.gen_range(-0.25..0.25)).collect()
    };
    let mut embeddings = Vec::with_capacity(spec.vocab_size);
    for w in template_words()
        .into_iter()
        .chain(lex.groups.iter().flatten().cloned())
    {
        embeddings.push((w, uniform_vec(&mut rng, dim, 0.5)));
    }
    for (i, w) in lex.heads.iter().enumerate() {
        embeddings.push((w.clone(), near(&mut rng, &centroids[spec.head_type(i)])));
    }
    for w in &lex.tails {
        embeddings.push((w.clone(), near(&mut rng, &centroids[spec.entity_types])));
    }
    for w in &lex.filler {
        embeddings.push((w.clone(), uniform_vec(&mut rng, dim, 0.5)));
    }

    let schema = RelationSchema::new((0..spec.relations).map(relation_name).collect())?;
    Ok(SynthCorpus {
        spec: spec.clone(),
        schema,
        train,
        valid,
        test,
        embeddings,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| GbreError::io(path, e))?,
    ))
}

/// Writes `{train,valid,test}.jsonl`, per-sentence validity flags
/// (`*.validity.txt`), `relations.tsv`, `embeddings.txt` and the generator settings
/// used (`synth.json`) into `dir`.
pub fn write_corpus(corpus: &SynthCorpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| GbreError::io(dir, e))?;
    for name in ["train", "valid", "test"] {
        let bags = corpus.split(name).expect("known split");
        let data_path = dir.join(format!("{name}.jsonl"));
        let flag_path = dir.join(format!("{name}.validity.txt"));
        let mut data = create(&data_path)?;
        let mut flags = create(&flag_path)?;
        for b in bags {
            for (inst, ok) in b.instances.iter().zip(&b.valid) {
                serde_json::to_writer(&mut data, &inst.to_record())?;
                data.write_all(b"\n")
                    .map_err(|e| GbreError::io(&data_path, e))?;
                writeln!(flags, "{}", u8::from(*ok)).map_err(|e| GbreError::io(&flag_path, e))?;
            }
        }
        data.flush().map_err(|e| GbreError::io(&data_path, e))?;
        flags.flush().map_err(|e| GbreError::io(&flag_path, e))?;
    }

    let rel_path = dir.join("relations.tsv");
    fs::write(&rel_path, corpus.schema.to_tsv()).map_err(|e| GbreError::io(&rel_path, e))?;

    let emb_path = dir.join("embeddings.txt");
    let mut emb = create(&emb_path)?;
    let io = |e| GbreError::io(&emb_path, e);
    writeln!(
        emb,
        "{} {}",
        corpus.embeddings.len(),
        corpus.spec.embedding_dim
    )
    .map_err(io)?;
    for (w, v) in &corpus.embeddings {
        let values: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
        writeln!(emb, "{w} {}", values.join(" ")).map_err(io)?;
    }
    emb.flush().map_err(io)?;

    let spec_path = dir.join("synth.json");
    let text = serde_json::to_string_pretty(&corpus.spec)?;
    fs::write(&spec_path, text + "\n").map_err(|e| GbreError::io(&spec_path, e))
}
