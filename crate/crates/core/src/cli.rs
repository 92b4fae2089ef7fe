//! Command-line front end: `train`, `eval`, `predict` and `synth`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{Aggregation, Preset, TrainConfig};
use crate::corpus::{
    build_bags, encode_bags, load_instances, load_unlabelled_instances, BagMode, EmbeddingTable,
    EncodedBag, RelationSchema, Vocabulary,
};
use crate::error::{GbreError, Result};
use crate::evaluation::{compute_metrics, gold_facts, pr_curve, rank_predictions, write_pr_csv};
use crate::model::{init_params, score_bag, ModelParams};
use crate::synth::{generate, write_corpus, SynthSpec};
use crate::trainer::{train, write_history, Checkpoint};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

/// Exit status for an error: 2 for configuration problems, 3 for bad or
/// missing data, 4 for numerical failures.
pub fn exit_code(err: &GbreError) -> u8 {
    match err {
        GbreError::Config(_) => EXIT_USAGE,
        GbreError::Data(_)
        | GbreError::Records { .. }
        | GbreError::Io { .. }
        | GbreError::Serde(_)
        | GbreError::Metric(_) => EXIT_DATA,
        GbreError::NonFinite(_)
        | GbreError::Shape { .. }
        | GbreError::InvalidOp { .. }
        | GbreError::TapeConsumed => EXIT_NUMERIC,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "gbre",
    version,
    about = "Bag-level relation extraction with query and bag attention"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint plus history.
    Train(TrainArgs),
    /// Rank held-out predictions and write metrics and the PR curve.
    Eval(EvalArgs),
    /// Score unlabelled entity pairs.
    Predict(PredictArgs),
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Hyper-parameter preset (default: biorel).
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// TOML file with run settings; flags win over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Feed raw word vectors to the encoder.
    #[arg(long)]
    pub no_qs_att: bool,
    /// Skip the bag self-attention layer.
    #[arg(long)]
    pub no_bag_att: bool,
    #[arg(long, value_enum)]
    pub agg: Option<Aggregation>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub valid: Option<PathBuf>,
    #[arg(long)]
    pub relations: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Cutoffs for P@N, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub p_at: Option<Vec<usize>>,
    /// Also write per-bag attention weights.
    #[arg(long)]
    pub dump_attention: bool,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Instances file; records may omit `relation`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML file with generator settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub noise_rate: Option<f64>,
    #[arg(long)]
    pub no_correlated_noise: bool,
    #[arg(long)]
    pub train_bags: Option<usize>,
    #[arg(long)]
    pub test_bags: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

/// Flat run settings as read from a config file. Every key is optional;
/// unset keys fall back to the preset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Option<Preset>,
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub relations: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub p_at: Option<Vec<usize>>,
    pub word_dim: Option<usize>,
    pub pos_dim: Option<usize>,
    pub hidden_size: Option<usize>,
    pub window: Option<usize>,
    pub max_len: Option<usize>,
    pub max_bag_size: Option<usize>,
    pub bag_dropout: Option<f64>,
    pub dropout: Option<f64>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub patience: Option<usize>,
    pub seed: Option<u64>,
    pub qs_att: Option<bool>,
    pub bag_att: Option<bool>,
    pub aggregation: Option<Aggregation>,
    pub freeze_embeddings: Option<bool>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| GbreError::io(path, e))?;
        toml::from_str(&text).map_err(|e| GbreError::Config(format!("{}: {e}", path.display())))
    }

    fn load_opt(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }

    /// Overwrites every field of `config` that is set here.
    pub fn apply(&self, config: &mut TrainConfig) {
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = self.$f.clone() {
                    config.$f = v;
                }
            )*};
        }
        set!(
            word_dim,
            pos_dim,
            hidden_size,
            window,
            max_len,
            max_bag_size,
            bag_dropout,
            dropout,
            learning_rate,
            batch_size,
            epochs,
            patience,
            seed,
            qs_att,
            bag_att,
            aggregation,
            freeze_embeddings
        );
    }
}

/// Fully resolved training run, echoed next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedTrainRun {
    pub preset: Preset,
    pub train: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid: Option<PathBuf>,
    pub relations: PathBuf,
    pub embeddings: PathBuf,
    pub out_dir: PathBuf,
    pub model: TrainConfig,
}

fn required(value: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    value.ok_or_else(|| {
        GbreError::Config(format!("missing --{what} (or `{what}` in the config file)"))
    })
}

/// Merges preset defaults, the config file and command-line flags, in that
/// order of increasing priority.
pub fn resolve_train(args: &TrainArgs) -> Result<ResolvedTrainRun> {
    let file = RunConfig::load_opt(args.config.as_deref())?;
    let preset = args.preset.or(file.preset).unwrap_or(Preset::Biorel);
    let mut model = TrainConfig::preset(preset);
    file.apply(&mut model);
    if let Some(seed) = args.seed {
        model.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        model.epochs = epochs;
    }
    if args.no_qs_att {
        model.qs_att = false;
    }
    if args.no_bag_att {
        model.bag_att = false;
    }
    if let Some(agg) = args.agg {
        model.aggregation = agg;
    }
    model.validate()?;
    Ok(ResolvedTrainRun {
        preset,
        train: required(args.train.clone().or(file.train), "train")?,
        valid: args.valid.clone().or(file.valid),
        relations: required(args.relations.clone().or(file.relations), "relations")?,
        embeddings: required(args.embeddings.clone().or(file.embeddings), "embeddings")?,
        out_dir: args
            .out_dir
            .clone()
            .or(file.out_dir)
            .unwrap_or_else(|| PathBuf::from("gbre_out")),
        model,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| GbreError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| GbreError::io(path, e))
}

fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

/// Reads instances and turns them into encoded bags.
pub fn load_bags(
    path: &Path,
    schema: &RelationSchema,
    vocab: &Vocabulary,
    mode: BagMode,
    config: &TrainConfig,
) -> Result<Vec<EncodedBag>> {
    let instances = load_instances(path, Some(schema))?;
    let bags = build_bags(&instances, schema, mode, config.max_bag_size)?;
    encode_bags(&bags, vocab, config.max_len)
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let run = resolve_train(args)?;
    let resolved = toml::to_string(&run).map_err(|e| GbreError::Serde(e.to_string()))?;
    log::info!("resolved configuration:\n{resolved}");

    let schema = RelationSchema::load(&run.relations)?;
    let table = EmbeddingTable::load(&run.embeddings, run.model.seed)?;
    let train_bags = load_bags(
        &run.train,
        &schema,
        &table.vocab,
        BagMode::Train,
        &run.model,
    )?;
    let valid_bags = match &run.valid {
        Some(p) => load_bags(p, &schema, &table.vocab, BagMode::Eval, &run.model)?,
        None => Vec::new(),
    };
    log::info!(
        "{} training bags, {} validation bags, {} relations, vocabulary {}",
        train_bags.len(),
        valid_bags.len(),
        schema.len(),
        table.vocab.len()
    );

    let model = init_params(&run.model, &table, schema.len())?;
    let outcome = train(model, &train_bags, &valid_bags, schema.na(), |r| {
        match r.valid_auc {
            Some(a) => log::info!(
                "epoch {:>3}  loss {:.6}  valid AUC {:.4}",
                r.epoch,
                r.loss,
                a
            ),
            None => log::info!("epoch {:>3}  loss {:.6}", r.epoch, r.loss),
        }
    })?;
    log::info!("keeping parameters from epoch {}", outcome.best_epoch);

    create_dir(&run.out_dir)?;
    write_text(&run.out_dir.join("config.toml"), &resolved)?;
    write_history(run.out_dir.join("history.jsonl"), &outcome.history)?;
    Checkpoint::from_model(&outcome.model, &table.vocab, &schema)
        .save(run.out_dir.join("checkpoint.json"))?;
    log::info!("wrote {}", run.out_dir.display());
    Ok(())
}

#[derive(Serialize)]
struct AttentionRecord<'a> {
    head: &'a str,
    tail: &'a str,
    gold: Vec<&'a str>,
    probabilities: BTreeMap<&'a str, f64>,
    /// Bag self-attention, one row per sentence.
    alpha: Option<Vec<Vec<f64>>>,
    /// Aggregation weights over sentences, per relation.
    beta: BTreeMap<&'a str, Vec<f64>>,
}

fn load_checkpoint(path: Option<PathBuf>) -> Result<(ModelParams, Vocabulary, RelationSchema)> {
    let path = required(path, "checkpoint")?;
    Checkpoint::load(&path)?.restore()
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let file = RunConfig::load_opt(args.config.as_deref())?;
    let (model, vocab, schema) = load_checkpoint(args.checkpoint.clone().or(file.checkpoint))?;
    let test = required(args.test.clone().or(file.test), "test")?;
    let out_dir = args
        .out_dir
        .clone()
        .or(file.out_dir)
        .unwrap_or_else(|| PathBuf::from("gbre_out"));
    let cutoffs = args
        .p_at
        .clone()
        .or(file.p_at)
        .unwrap_or_else(|| vec![100, 200, 300]);

    let bags = load_bags(&test, &schema, &vocab, BagMode::Eval, &model.config)?;
    let na = schema.na();
    let gold = gold_facts(&bags, na);
    let ranked = rank_predictions(&model, &bags, na)?;
    let metrics = compute_metrics(&ranked, &gold, &cutoffs)?;
    let points = pr_curve(&ranked, &gold)?;

    create_dir(&out_dir)?;
    write_json_pretty(&out_dir.join("metrics.json"), &metrics)?;
    let csv_path = out_dir.join("pr_curve.csv");
    let csv = fs::File::create(&csv_path).map_err(|e| GbreError::io(&csv_path, e))?;
    write_pr_csv(BufWriter::new(csv), &ranked, &points).map_err(|e| GbreError::io(&csv_path, e))?;
    log::info!(
        "AUC {:.4}  F1 {:.4}  mean P@N {:.4}  ({} bags, {} known facts)",
        metrics.auc,
        metrics.f1,
        metrics.mean_p_at,
        bags.len(),
        gold.len()
    );

    if args.dump_attention {
        let path = out_dir.join("attention.jsonl");
        let file = fs::File::create(&path).map_err(|e| GbreError::io(&path, e))?;
        let mut out = BufWriter::new(file);
        for bag in &bags {
            let pred = score_bag(&model, bag)?;
            let names = schema.names();
            let record = AttentionRecord {
                head: &bag.key.head,
                tail: &bag.key.tail,
                gold: bag.gold.iter().map(|&r| schema.name(r)).collect(),
                probabilities: names
                    .iter()
                    .map(String::as_str)
                    .zip(pred.probs.iter().copied())
                    .collect(),
                alpha: pred.alpha,
                beta: names.iter().map(String::as_str).zip(pred.beta).collect(),
            };
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n").map_err(|e| GbreError::io(&path, e))?;
        }
        out.flush().map_err(|e| GbreError::io(&path, e))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct PredictionRecord<'a> {
    head: &'a str,
    tail: &'a str,
    relation: &'a str,
    probability: f64,
    probabilities: BTreeMap<&'a str, f64>,
}

pub fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let (model, vocab, schema) = load_checkpoint(Some(args.checkpoint.clone()))?;
    let out_dir = args
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("gbre_out"));
    let instances = load_unlabelled_instances(&args.input, Some(&schema))?;
    let bags = build_bags(
        &instances,
        &schema,
        BagMode::Eval,
        model.config.max_bag_size,
    )?;
    let bags = encode_bags(&bags, &vocab, model.config.max_len)?;

    create_dir(&out_dir)?;
    let path = out_dir.join("predictions.jsonl");
    let file = fs::File::create(&path).map_err(|e| GbreError::io(&path, e))?;
    let mut out = BufWriter::new(file);
    for bag in &bags {
        let pred = score_bag(&model, bag)?;
        let best = crate::aggregation::argmax(&pred.probs);
        let record = PredictionRecord {
            head: &bag.key.head,
            tail: &bag.key.tail,
            relation: schema.name(best),
            probability: pred.probs[best],
            probabilities: schema
                .names()
                .iter()
                .map(String::as_str)
                .zip(pred.probs.iter().copied())
                .collect(),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n").map_err(|e| GbreError::io(&path, e))?;
    }
    out.flush().map_err(|e| GbreError::io(&path, e))?;
    log::info!("scored {} entity pairs into {}", bags.len(), path.display());
    Ok(())
}

pub fn resolve_synth(args: &SynthArgs) -> Result<SynthSpec> {
    let mut spec = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| GbreError::io(path, e))?;
            toml::from_str(&text)
                .map_err(|e| GbreError::Config(format!("{}: {e}", path.display())))?
        }
        None => SynthSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(rate) = args.noise_rate {
        spec.noise_rate = rate;
    }
    if args.no_correlated_noise {
        spec.correlated_noise = false;
    }
    if let Some(n) = args.train_bags {
        spec.train_bags = n;
    }
    if let Some(n) = args.test_bags {
        spec.test_bags = n;
    }
    spec.validate()?;
    Ok(spec)
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let spec = resolve_synth(args)?;
    let out_dir = args
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("synthetic"));
    let corpus = generate(&spec)?;
    write_corpus(&corpus, &out_dir)?;
    log::info!(
        "wrote {} / {} / {} bags to {}",
        corpus.train.len(),
        corpus.valid.len(),
        corpus.test.len(),
        out_dir.display()
    );
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Synth(a) => cmd_synth(a),
    }
}
