//! End-to-end pipeline pieces shared by the command line and the test
//! suites: corpus preparation, training runs, generation files, reports.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{encode_corpus, split, EncodedProduct, ProductRecord, SplitCorpus, SplitName, Vocab};
use crate::decoding::{generate_corpus, GeneratedQuestions, GenerationConfig};
use crate::error::{Error, Result};
use crate::metrics::{default_thresholds, evaluate, MetricsReport};
use crate::model::{ModelConfig, ModelParams};
use crate::rng::derive_seed;
use crate::training::{train, LogRecord, TrainConfig, TrainMode, TrainOutcome};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_FILE: &str = "experiment.json";

/// Everything needed to re-run an experiment. `model.vocab_size` is replaced
/// by the size of the vocabulary built from the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub mode: TrainMode,
    pub split_seed: u64,
    pub vocab_min_count: usize,
    pub workers: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generation: GenerationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: None,
            out_dir: None,
            checkpoint: None,
            mode: TrainMode::Ltd,
            split_seed: 0,
            vocab_min_count: 1,
            workers: 1,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            generation: GenerationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &serde_json::to_vec_pretty(self)?)
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Split, vocabulary and encoded products for one experiment.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub split: SplitCorpus,
    pub vocab: Vocab,
    pub model: ModelConfig,
    pub train: Vec<EncodedProduct>,
    pub validation: Vec<EncodedProduct>,
    pub test: Vec<EncodedProduct>,
}

pub fn prepare(records: &[ProductRecord], cfg: &ExperimentConfig) -> Result<Prepared> {
    let split = split(records, cfg.split_seed)?;
    let vocab = Vocab::build(&split.train, cfg.vocab_min_count)?;
    let model = ModelConfig {
        vocab_size: vocab.len(),
        ..cfg.model.clone()
    };
    model.validate()?;
    let enc = |which| encode_corpus(split.get(which), &vocab, model.max_len);
    Ok(Prepared {
        train: enc(SplitName::Train)?,
        validation: enc(SplitName::Validation)?,
        test: enc(SplitName::Test)?,
        split,
        vocab,
        model,
    })
}

/// Initial weights are seeded from the training seed, so runs that differ
/// only in mode start from the same point.
pub fn init_params(model: &ModelConfig, train_seed: u64) -> Result<ModelParams> {
    ModelParams::init(model, derive_seed(train_seed, &[0x1417]))
}

pub fn train_prepared(prepared: &Prepared, cfg: &ExperimentConfig, sink: &mut dyn FnMut(&LogRecord) -> Result<()>) -> Result<TrainOutcome> {
    let params = init_params(&prepared.model, cfg.train.seed)?;
    let train_cfg = TrainConfig {
        workers: cfg.workers,
        ..cfg.train.clone()
    };
    train(params, &prepared.train, &prepared.validation, &train_cfg, cfg.mode, sink)
}

/// Which records a command operates on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSelector {
    Train,
    Validation,
    Test,
    All,
}

impl std::str::FromStr for SplitSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitSelector::Train),
            "validation" => Ok(SplitSelector::Validation),
            "test" => Ok(SplitSelector::Test),
            "all" => Ok(SplitSelector::All),
            other => Err(Error::Config(format!(
                "unknown split {other:?} (expected train, validation, test or all)"
            ))),
        }
    }
}

pub fn select_split(records: &[ProductRecord], which: SplitSelector, seed: u64) -> Result<Vec<ProductRecord>> {
    let name = match which {
        SplitSelector::All => return Ok(records.to_vec()),
        SplitSelector::Train => SplitName::Train,
        SplitSelector::Validation => SplitName::Validation,
        SplitSelector::Test => SplitName::Test,
    };
    Ok(split(records, seed)?.get(name).to_vec())
}

/// Runs one full experiment into `out_dir`: checkpoint of the best epoch,
/// vocabulary, JSONL training log and the resolved config.
pub fn run_training(records: &[ProductRecord], cfg: &ExperimentConfig, out_dir: &Path) -> Result<(Prepared, TrainOutcome)> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let prepared = prepare(records, cfg)?;
    let log_path = out_dir.join(LOG_FILE);
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut sink = |r: &LogRecord| -> Result<()> {
        serde_json::to_writer(&mut log, r)?;
        log.write_all(b"\n").map_err(|e| Error::io(&log_path, e))
    };
    let outcome = train_prepared(&prepared, cfg, &mut sink)?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    crate::model::save_checkpoint(&outcome.best, &out_dir.join(CHECKPOINT_FILE))?;
    prepared.vocab.save(&out_dir.join(VOCAB_FILE))?;
    let resolved = ExperimentConfig {
        model: prepared.model.clone(),
        ..cfg.clone()
    };
    resolved.save(&out_dir.join(CONFIG_FILE))?;
    Ok((prepared, outcome))
}

/// Loads a checkpoint and checks it against a vocabulary.
pub fn load_model(checkpoint: &Path, vocab_path: &Path) -> Result<(ModelParams, Vocab)> {
    let params = crate::model::load_checkpoint(checkpoint)?;
    let vocab = Vocab::load(vocab_path)?;
    if params.config().vocab_size != vocab.len() {
        return Err(Error::Version(format!(
            "checkpoint expects {} vocabulary entries, {} has {}",
            params.config().vocab_size,
            vocab_path.display(),
            vocab.len()
        )));
    }
    Ok((params, vocab))
}

/// Encodes records for generation, truncating contexts to the model window.
pub fn encode_for_generation(records: &[ProductRecord], vocab: &Vocab, max_len: usize) -> Result<Vec<EncodedProduct>> {
    records
        .iter()
        .map(|r| {
            let mut context = vocab.encode(&r.context);
            context.truncate(max_len);
            if context.is_empty() {
                return Err(Error::Data(format!("product {} has an empty context", r.product_id)));
            }
            Ok(EncodedProduct {
                product_id: r.product_id.clone(),
                context,
                questions: Vec::new(),
            })
        })
        .collect()
}

pub fn generate_for_records(
    params: &ModelParams,
    vocab: &Vocab,
    records: &[ProductRecord],
    generation: &GenerationConfig,
    workers: usize,
) -> Result<Vec<GeneratedQuestions>> {
    let products = encode_for_generation(records, vocab, params.config().max_len)?;
    generate_corpus(params, vocab, &products, generation, workers)
}

/// Sidecar path holding the generation settings for `out`.
pub fn header_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".header.json");
    out.with_file_name(name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationHeader {
    pub checkpoint: String,
    pub split: SplitSelector,
    pub split_seed: u64,
    pub products: usize,
    pub generation: GenerationConfig,
}

/// Writes one JSON record per product plus the header sidecar.
pub fn write_generations(out: &Path, generations: &[GeneratedQuestions], header: &GenerationHeader) -> Result<()> {
    let mut buf = Vec::new();
    for g in generations {
        serde_json::to_writer(&mut buf, g)?;
        buf.push(b'\n');
    }
    write_file(out, &buf)?;
    write_file(&header_path(out), &serde_json::to_vec_pretty(header)?)
}

pub fn evaluate_default(
    generations: &[GeneratedQuestions],
    gold: &[ProductRecord],
    params: &ModelParams,
    vocab: &Vocab,
) -> Result<MetricsReport> {
    evaluate(generations, gold, params, vocab, &default_thresholds())
}

/// Writes `<stem>.json`, `<stem>.txt` and `<stem>.clusters.csv`.
pub fn write_report(report: &MetricsReport, stem: &Path) -> Result<()> {
    let with = |ext: &str| {
        let mut name = stem.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(ext);
        stem.with_file_name(name)
    };
    write_file(&with(".json"), &serde_json::to_vec_pretty(report)?)?;
    write_file(&with(".txt"), report.to_table().as_bytes())?;
    write_file(&with(".clusters.csv"), report.cluster_csv().as_bytes())
}
