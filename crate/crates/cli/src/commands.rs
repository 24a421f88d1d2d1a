use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use log::info;
use ltdqg_core::corpus::{load_jsonl, save_jsonl, synth_corpus, TemplateLibrary};
use ltdqg_core::experiment::{
    evaluate_default, generate_for_records, load_model, run_training, select_split, write_generations, write_report, ExperimentConfig,
    GenerationHeader, SplitSelector, CHECKPOINT_FILE, VOCAB_FILE,
};
use ltdqg_core::metrics::load_generations;
use ltdqg_core::training::{LogRecord, TrainMode};
use ltdqg_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Traditional,
    Ltd,
}

impl From<Mode> for TrainMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Traditional => TrainMode::Traditional,
            Mode::Ltd => TrainMode::Ltd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Validation,
    Test,
    All,
}

impl From<Split> for SplitSelector {
    fn from(s: Split) -> Self {
        match s {
            Split::Train => SplitSelector::Train,
            Split::Validation => SplitSelector::Validation,
            Split::Test => SplitSelector::Test,
            Split::All => SplitSelector::All,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of products to generate
    #[arg(long, default_value_t = 500)]
    products: usize,
    /// Share of questions drawn from the general templates
    #[arg(long)]
    general_share: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let mut library = TemplateLibrary::default();
    if let Some(share) = args.general_share {
        library.general_share = share;
    }
    let records = synth_corpus(args.seed, args.products, &library)?;
    save_jsonl(&records, &args.out)?;
    info!("wrote {} products to {}", records.len(), args.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON experiment config; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Diversity weight (λ)
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for checkpoint, vocabulary, log and resolved config
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Branches per batch (an LTD pair counts as two)
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_pairs_per_product: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    enc_layers: Option<usize>,
    #[arg(long)]
    dec_layers: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Threads for validation scoring
    #[arg(long)]
    workers: Option<usize>,
}

fn base_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn required(value: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    value.ok_or_else(|| Error::Config(format!("missing {flag} (flag or config file)")))
}

fn print_config(cfg: &ExperimentConfig) -> Result<()> {
    eprintln!("configuration (flags > config file > defaults):");
    eprintln!("{}", serde_json::to_string_pretty(cfg)?);
    Ok(())
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = base_config(args.config.as_deref())?;
    if args.corpus.is_some() {
        cfg.corpus = args.corpus;
    }
    if args.out.is_some() {
        cfg.out_dir = args.out;
    }
    set(&mut cfg.mode, args.mode.map(Into::into));
    set(&mut cfg.split_seed, args.split_seed);
    set(&mut cfg.workers, args.workers);
    let t = &mut cfg.train;
    set(&mut t.lambda, args.lambda);
    set(&mut t.seed, args.seed);
    set(&mut t.learning_rate, args.learning_rate);
    set(&mut t.batch_size, args.batch_size);
    set(&mut t.epochs, args.epochs);
    set(&mut t.max_pairs_per_product, args.max_pairs_per_product);
    if args.max_steps.is_some() {
        t.max_steps = args.max_steps;
    }
    let m = &mut cfg.model;
    set(&mut m.d_model, args.d_model);
    set(&mut m.n_heads, args.n_heads);
    set(&mut m.enc_layers, args.enc_layers);
    set(&mut m.dec_layers, args.dec_layers);
    set(&mut m.d_ff, args.d_ff);
    set(&mut m.max_len, args.max_len);
    print_config(&cfg)?;
    cfg.train.validate()?;
    let corpus = required(cfg.corpus.clone(), "--corpus")?;
    let out = required(cfg.out_dir.clone(), "--out")?;
    let records = load_jsonl(&corpus)?;
    let (prepared, outcome) = run_training(&records, &cfg, &out)?;
    info!(
        "{} mode: {} train / {} validation products, vocabulary {}",
        cfg.mode,
        prepared.train.len(),
        prepared.validation.len(),
        prepared.vocab.len()
    );
    for r in &outcome.log {
        if let LogRecord::Epoch {
            epoch,
            train_loss,
            val_cg_loss,
            best,
            ..
        } = r
        {
            info!(
                "epoch {epoch}: train loss {train_loss:.4}, validation CG loss {val_cg_loss:.4}{}",
                if *best { " (best)" } else { "" }
            );
        }
    }
    println!(
        "final validation CG loss: {:.10} (best epoch {}, {} steps)",
        outcome.best_val_cg_loss, outcome.best_epoch, outcome.steps
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// JSON experiment config; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Vocabulary file; defaults to vocab.txt next to the checkpoint
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    corpus_split: Split,
    #[arg(long)]
    split_seed: Option<u64>,
    /// Number of DBS groups (G)
    #[arg(long)]
    groups: Option<usize>,
    /// Beams per group (B')
    #[arg(long)]
    beams_per_group: Option<usize>,
    #[arg(long)]
    diversity_penalty: Option<f64>,
    #[arg(long)]
    length_penalty: Option<f64>,
    /// n-gram size that may not repeat (0 disables)
    #[arg(long)]
    no_repeat_ngram: Option<usize>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[arg(long)]
    questions_per_product: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn resolve_model_paths(checkpoint: Option<PathBuf>, vocab: Option<PathBuf>, cfg: &ExperimentConfig) -> Result<(PathBuf, PathBuf)> {
    let checkpoint = checkpoint
        .or_else(|| cfg.checkpoint.clone())
        .or_else(|| cfg.out_dir.as_ref().map(|d| d.join(CHECKPOINT_FILE)));
    let checkpoint = required(checkpoint, "--checkpoint")?;
    let vocab = vocab.unwrap_or_else(|| checkpoint.with_file_name(VOCAB_FILE));
    Ok((checkpoint, vocab))
}

pub fn generate(args: GenerateArgs) -> Result<()> {
    let mut cfg = base_config(args.config.as_deref())?;
    if args.corpus.is_some() {
        cfg.corpus = args.corpus;
    }
    set(&mut cfg.split_seed, args.split_seed);
    set(&mut cfg.workers, args.workers);
    let g = &mut cfg.generation;
    set(&mut g.num_groups, args.groups);
    set(&mut g.beams_per_group, args.beams_per_group);
    set(&mut g.diversity_penalty, args.diversity_penalty);
    set(&mut g.length_penalty, args.length_penalty);
    set(&mut g.no_repeat_ngram, args.no_repeat_ngram);
    set(&mut g.max_new_tokens, args.max_new_tokens);
    set(&mut g.questions_per_product, args.questions_per_product);
    let (checkpoint, vocab_path) = resolve_model_paths(args.checkpoint, args.vocab, &cfg)?;
    cfg.checkpoint = Some(checkpoint.clone());
    print_config(&cfg)?;
    cfg.generation.validate()?;
    let corpus = required(cfg.corpus.clone(), "--corpus")?;
    let (params, vocab) = load_model(&checkpoint, &vocab_path)?;
    let records = select_split(&load_jsonl(&corpus)?, args.corpus_split.into(), cfg.split_seed)?;
    let generations = generate_for_records(&params, &vocab, &records, &cfg.generation, cfg.workers)?;
    let short = generations.iter().filter(|g| g.shortage).count();
    if short > 0 {
        log::warn!(
            "{short} products produced fewer than {} unique questions",
            cfg.generation.questions_per_product
        );
    }
    let header = GenerationHeader {
        checkpoint: checkpoint.display().to_string(),
        split: args.corpus_split.into(),
        split_seed: cfg.split_seed,
        products: generations.len(),
        generation: cfg.generation.clone(),
    };
    write_generations(&args.out, &generations, &header)?;
    info!("wrote {} generation records to {}", generations.len(), args.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    generations: PathBuf,
    /// Gold corpus (JSON lines)
    #[arg(long)]
    gold: PathBuf,
    /// Split of the gold corpus the generations cover
    #[arg(long, value_enum, default_value_t = Split::Test)]
    gold_split: Split,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Checkpoint whose encoder embeds questions for e-Div and clustering
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Output stem: writes <stem>.json, <stem>.txt and <stem>.clusters.csv
    #[arg(long)]
    report: PathBuf,
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let vocab_path = args.vocab.unwrap_or_else(|| args.checkpoint.with_file_name(VOCAB_FILE));
    let (params, vocab) = load_model(&args.checkpoint, &vocab_path)?;
    let gold = select_split(&load_jsonl(&args.gold)?, args.gold_split.into(), args.split_seed)?;
    let generations = load_generations(&args.generations)?;
    let report = evaluate_default(&generations, &gold, &params, &vocab)?;
    write_report(&report, &args.report)?;
    print!("{}", report.to_table());
    Ok(())
}
