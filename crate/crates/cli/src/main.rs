//! Command-line entry point wiring the library into reproducible
//! experiments. Every command reads declared inputs, writes declared
//! outputs, and prints one JSON summary line to stdout.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use rewritelab::features::{load_features, save_features, FeatureKind, FeatureSet};
use rewritelab::jsonl;
use rewritelab::metrics::{aggregate_preferences, evaluate_model, Judgment};
use rewritelab::tensor::op_grad_battery;
use rewritelab::text::synth::{synth_generate, SynthConfig};
use rewritelab::text::{construct_triples, decode_tokens, split, RawQA, TripleExample, Vocab};
use rewritelab::training::{
    load_checkpoint, save_checkpoint, train, ModelKind, Predictor, TrainConfig,
};
use rewritelab::DecodeMode;

#[derive(Parser)]
#[command(name = "rewritelab", version, about = "Conditional question-rewriting experiments")]
struct Cli {
    /// JSON config file with default flag values (explicit flags win).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a capped frequency vocabulary from a triples file.
    BuildVocab(BuildVocabArgs),
    /// Turn raw Q&A records into rewrite triples.
    Construct(ConstructArgs),
    /// Deterministic 4:1 train/test split.
    Split(SplitArgs),
    /// Generate the synthetic corpus and its feature table.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Rewrite the questions in a triples file.
    Generate(GenerateArgs),
    /// Score a checkpoint on a test set.
    Evaluate(EvaluateArgs),
    /// Aggregate pairwise judgments by majority vote.
    JudgeAggregate(JudgeArgs),
    /// Gradient-check every op of the autodiff tape.
    GradCheck(GradCheckArgs),
}

/// Flat key-value defaults loadable from `--config`; unknown keys are
/// rejected.
#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    seed: Option<u64>,
    model: Option<String>,
    #[serde(rename = "in")]
    input: Option<PathBuf>,
    out: Option<PathBuf>,
    train: Option<PathBuf>,
    eval: Option<PathBuf>,
    test: Option<PathBuf>,
    features: Option<PathBuf>,
    ckpt: Option<PathBuf>,
    report: Option<PathBuf>,
    mode: Option<String>,
    beam_width: Option<usize>,
    cap: Option<usize>,
    n: Option<usize>,
    k: Option<usize>,
    dim: Option<usize>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f32>,
    patience: Option<usize>,
    vocab_cap: Option<usize>,
    embed_dim: Option<usize>,
    hidden_dim: Option<usize>,
    attn_dim: Option<usize>,
    d_model: Option<usize>,
    layers: Option<usize>,
    heads: Option<usize>,
    ffn_dim: Option<usize>,
    feature_dim: Option<usize>,
    trials: Option<usize>,
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<RunConfig> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        serde_json::from_str(&text)
            .with_context(|| format!("invalid config {}", path.display()))
    }
}

fn required<T>(flag: Option<T>, cfg: Option<T>, name: &str) -> Result<T> {
    flag.or(cfg).ok_or_else(|| anyhow!("missing required --{name} (flag or config key)"))
}

#[derive(Args)]
struct BuildVocabArgs {
    /// Triples file providing the corpus.
    #[arg(long = "in", value_name = "PATH")]
    input: Option<PathBuf>,
    /// Vocabulary size cap, special tokens included.
    #[arg(long)]
    cap: Option<usize>,
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConstructArgs {
    #[arg(long = "in", value_name = "PATH")]
    input: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long = "in", value_name = "PATH")]
    input: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "PATH")]
    train: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    test: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Number of triples.
    #[arg(long)]
    n: Option<usize>,
    /// Number of detail classes (2..=64).
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Feature vector width.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Pooled feature table output.
    #[arg(long, value_name = "PATH")]
    features: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// baseline | baseline+vis | transformer | transformer+vis
    #[arg(long)]
    model: Option<String>,
    #[arg(long, value_name = "PATH")]
    train: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    eval: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    features: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f32>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    vocab_cap: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    attn_dim: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ffn_dim: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_name = "PATH")]
    ckpt: Option<PathBuf>,
    /// Triples file whose bland questions are rewritten.
    #[arg(long = "in", value_name = "PATH")]
    input: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    features: Option<PathBuf>,
    /// greedy | beam
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, value_name = "PATH")]
    ckpt: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    test: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    features: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long, value_name = "PATH")]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct JudgeArgs {
    #[arg(long = "in", value_name = "PATH")]
    input: Option<PathBuf>,
    /// Optional JSON report destination.
    #[arg(long, value_name = "PATH")]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(1);
        }
    }
}

fn decode_mode(mode: Option<String>, beam_width: Option<usize>) -> Result<DecodeMode> {
    match mode.as_deref().unwrap_or("greedy") {
        "greedy" => Ok(DecodeMode::Greedy),
        "beam" => Ok(DecodeMode::Beam(beam_width.unwrap_or(4))),
        other => bail!("unknown decode mode {other:?} (expected greedy or beam)"),
    }
}

fn load_feature_file(
    path: Option<&Path>,
    kind: Option<FeatureKind>,
) -> Result<Option<FeatureSet>> {
    match (path, kind) {
        (Some(p), Some(k)) => Ok(Some(load_features(p, k)?)),
        (Some(p), None) => Ok(Some(load_features(p, FeatureKind::Pooled)?)),
        (None, _) => Ok(None),
    }
}

fn emit_summary(command: &str, seed: u64, started: Instant, extra: serde_json::Value) {
    let mut summary = json!({
        "command": command,
        "seed": seed,
        "elapsed_s": started.elapsed().as_secs_f64(),
    });
    if let (Some(obj), Some(more)) = (summary.as_object_mut(), extra.as_object()) {
        for (k, v) in more {
            obj.insert(k.clone(), v.clone());
        }
    }
    println!("{summary}");
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    let started = Instant::now();
    match cli.command {
        Command::BuildVocab(args) => {
            let input = required(args.input, cfg.input, "in")?;
            let out = required(args.out, cfg.out, "out")?;
            let cap = args.cap.or(cfg.cap).unwrap_or(5000);
            let triples: Vec<TripleExample> = jsonl::read(&input)?;
            let corpus: Vec<&str> = triples
                .iter()
                .flat_map(|t| [t.bland.as_str(), t.attractive.as_str()])
                .collect();
            let vocab = Vocab::build(&corpus, cap)?;
            let payload = json!({ "words": vocab.words() });
            std::fs::write(&out, format!("{payload}\n"))
                .with_context(|| format!("cannot write {}", out.display()))?;
            emit_summary(
                "build-vocab",
                0,
                started,
                json!({ "size": vocab.size(), "out": out.display().to_string() }),
            );
        }
        Command::Construct(args) => {
            let input = required(args.input, cfg.input, "in")?;
            let out = required(args.out, cfg.out, "out")?;
            let raw: Vec<RawQA> = jsonl::read(&input)?;
            let (triples, dropped) = construct_triples(&raw);
            jsonl::write(&out, &triples)?;
            emit_summary(
                "construct",
                0,
                started,
                json!({ "kept": triples.len(), "dropped": dropped, "out": out.display().to_string() }),
            );
        }
        Command::Split(args) => {
            let input = required(args.input, cfg.input, "in")?;
            let train_out = required(args.train, cfg.train, "train")?;
            let test_out = required(args.test, cfg.test, "test")?;
            let seed = args.seed.or(cfg.seed).unwrap_or(0);
            let triples: Vec<TripleExample> = jsonl::read(&input)?;
            let (train_set, test_set) = split(triples, seed)?;
            jsonl::write(&train_out, &train_set)?;
            jsonl::write(&test_out, &test_set)?;
            emit_summary(
                "split",
                seed,
                started,
                json!({ "n_train": train_set.len(), "n_test": test_set.len() }),
            );
        }
        Command::Synth(args) => {
            let out = required(args.out, cfg.out, "out")?;
            let features_out = required(args.features, cfg.features, "features")?;
            let seed = args.seed.or(cfg.seed).unwrap_or(0);
            let mut synth_cfg = SynthConfig::new(
                args.n.or(cfg.n).unwrap_or(4000),
                args.k.or(cfg.k).unwrap_or(8),
                seed,
            );
            if let Some(dim) = args.dim.or(cfg.dim) {
                synth_cfg.feature_dim = dim;
            }
            let data = synth_generate(&synth_cfg)?;
            jsonl::write(&out, &data.triples)?;
            save_features(&features_out, &FeatureSet::from_pooled(data.features))?;
            emit_summary(
                "synth",
                seed,
                started,
                json!({
                    "n": data.triples.len(),
                    "k": synth_cfg.k_details,
                    "dim": synth_cfg.feature_dim,
                    "out": out.display().to_string(),
                    "features": features_out.display().to_string(),
                }),
            );
        }
        Command::Train(args) => {
            let model: ModelKind = required(args.model, cfg.model, "model")?
                .parse()
                .map_err(|e: String| anyhow!(e))?;
            let train_path = required(args.train, cfg.train, "train")?;
            let eval_path = required(args.eval, cfg.eval, "eval")?;
            let ckpt_path = required(args.ckpt, cfg.ckpt, "ckpt")?;

            let mut tc = TrainConfig::new(model);
            tc.seed = args.seed.or(cfg.seed).unwrap_or(0);
            macro_rules! overlay {
                ($($field:ident),*) => {
                    $(if let Some(v) = args.$field.or(cfg.$field) { tc.$field = v; })*
                };
            }
            overlay!(
                epochs, batch_size, learning_rate, patience, vocab_cap, embed_dim,
                hidden_dim, attn_dim, d_model, layers, heads, ffn_dim, feature_dim
            );

            let train_set: Vec<TripleExample> = jsonl::read(&train_path)?;
            let eval_set: Vec<TripleExample> = jsonl::read(&eval_path)?;
            let features = load_feature_file(
                args.features.or(cfg.features).as_deref(),
                model.feature_kind(),
            )?;
            let ckpt = train(&tc, &train_set, features.as_ref(), &eval_set)?;
            save_checkpoint(&ckpt, &ckpt_path)?;
            let last = ckpt.history.last();
            emit_summary(
                "train",
                tc.seed,
                started,
                json!({
                    "model": model.as_str(),
                    "epochs_run": ckpt.history.len(),
                    "train_loss": last.map(|h| h.train_loss),
                    "eval_loss": last.map(|h| h.eval_loss),
                    "ckpt": ckpt_path.display().to_string(),
                }),
            );
        }
        Command::Generate(args) => {
            let ckpt_path = required(args.ckpt, cfg.ckpt, "ckpt")?;
            let input = required(args.input, cfg.input, "in")?;
            let out = required(args.out, cfg.out, "out")?;
            let mode = decode_mode(args.mode.or(cfg.mode), args.beam_width.or(cfg.beam_width))?;
            let ckpt = load_checkpoint(&ckpt_path)?;
            let features = load_feature_file(
                args.features.or(cfg.features).as_deref(),
                ckpt.config.model.feature_kind(),
            )?;
            let triples: Vec<TripleExample> = jsonl::read(&input)?;
            let predictor = Predictor::new(&ckpt)?;

            #[derive(serde::Serialize)]
            struct Rewrite {
                id: String,
                bland: String,
                rewrite: String,
            }
            let mut rewrites = Vec::with_capacity(triples.len());
            for ex in &triples {
                let feature = if predictor.uses_features() {
                    Some(
                        features
                            .as_ref()
                            .and_then(|f| f.get(&ex.feature_ref))
                            .ok_or_else(|| anyhow!("example {} has no feature vector", ex.id))?,
                    )
                } else {
                    None
                };
                let seq = predictor.generate(&ex.bland, feature, mode)?;
                rewrites.push(Rewrite {
                    id: ex.id.clone(),
                    bland: ex.bland.clone(),
                    rewrite: decode_tokens(&seq.ids, predictor.vocab())?,
                });
            }
            jsonl::write(&out, &rewrites)?;
            emit_summary(
                "generate",
                ckpt.config.seed,
                started,
                json!({ "n": rewrites.len(), "out": out.display().to_string() }),
            );
        }
        Command::Evaluate(args) => {
            let ckpt_path = required(args.ckpt, cfg.ckpt, "ckpt")?;
            let test_path = required(args.test, cfg.test, "test")?;
            let report_path = required(args.report, cfg.report, "report")?;
            let mode = decode_mode(args.mode.or(cfg.mode), args.beam_width.or(cfg.beam_width))?;
            let ckpt = load_checkpoint(&ckpt_path)?;
            let features = load_feature_file(
                args.features.or(cfg.features).as_deref(),
                ckpt.config.model.feature_kind(),
            )?;
            let test_set: Vec<TripleExample> = jsonl::read(&test_path)?;
            let score = evaluate_model(&ckpt, &test_set, features.as_ref(), mode)?;
            let payload = serde_json::to_string(&score)?;
            std::fs::write(&report_path, format!("{payload}\n"))
                .with_context(|| format!("cannot write {}", report_path.display()))?;
            emit_summary(
                "evaluate",
                ckpt.config.seed,
                started,
                json!({
                    "bleu": score.bleu,
                    "rouge_l_f1": score.rouge_l.f1,
                    "n_examples": score.n_examples,
                    "report": report_path.display().to_string(),
                }),
            );
        }
        Command::JudgeAggregate(args) => {
            let input = required(args.input, cfg.input, "in")?;
            let judgments: Vec<Judgment> = jsonl::read(&input)?;
            let report = aggregate_preferences(&judgments)?;
            if let Some(path) = args.report.or(cfg.report) {
                std::fs::write(&path, format!("{}\n", serde_json::to_string(&report)?))
                    .with_context(|| format!("cannot write {}", path.display()))?;
            }
            emit_summary(
                "judge-aggregate",
                0,
                started,
                json!({
                    "n_items": report.n_items,
                    "n_prefer_a": report.n_prefer_a,
                    "rate_a": report.rate_a,
                }),
            );
        }
        Command::GradCheck(args) => {
            let trials = args.trials.or(cfg.trials).unwrap_or(20);
            let seed = args.seed.or(cfg.seed).unwrap_or(0);
            let reports = op_grad_battery(trials, seed)?;
            let worst = reports
                .iter()
                .max_by(|a, b| a.max_rel_err.partial_cmp(&b.max_rel_err).unwrap())
                .expect("at least one op");
            let pass = reports.iter().all(|r| r.max_rel_err < 1e-3);
            emit_summary(
                "grad-check",
                seed,
                started,
                json!({
                    "ops": reports.len(),
                    "trials": trials,
                    "worst_op": worst.op,
                    "max_rel_err": worst.max_rel_err,
                    "pass": pass,
                }),
            );
            if !pass {
                bail!("gradient check exceeded tolerance: {} = {}", worst.op, worst.max_rel_err);
            }
        }
    }
    Ok(())
}
