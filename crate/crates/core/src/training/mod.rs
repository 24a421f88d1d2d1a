//! Traditional and learning-to-diversify (LTD) fine-tuning.
//!
//! Traditional training sees every `(context, question)` pair as a single
//! branch. LTD training groups two different gold questions of the same
//! product into a triplet and adds the layer-averaged cosine similarity of
//! their decoder states, weighted by `lambda`, to the two branch losses.
//!
//! A batch holds up to `batch_size` branches (a triplet counts twice) and its
//! objective is the sum of example totals divided by the number of branches.
//! With `lambda = 0` an LTD batch therefore has exactly the objective of the
//! traditional batch built from the same questions.

mod adam;
mod loss;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{EncodedProduct, TokenId};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::rng::derive_seed;
use crate::tensor::Tape;

pub use adam::{adam_step, clip_grad_norm, AdamConfig, AdamState};
pub use loss::{cg_loss, div_loss, example_gradients, ltd_loss_unchecked, LossBreakdown};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Traditional,
    Ltd,
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Traditional => "traditional",
            TrainMode::Ltd => "ltd",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub max_pairs_per_product: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<u64>,
    /// Threads for validation scoring.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            lambda: 0.1,
            learning_rate: adam.lr,
            batch_size: 8,
            epochs: 3,
            seed: 0,
            max_pairs_per_product: 10,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            max_grad_norm: Some(1.0),
            max_steps: None,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be a finite value >= 0, got {}", self.lambda));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2 (one triplet), got {}", self.batch_size));
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.max_pairs_per_product == 0 {
            return bad("max_pairs_per_product must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if matches!(self.max_grad_norm, Some(n) if !(n > 0.0)) {
            return bad("max_grad_norm must be positive".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// One LTD training example: a context and two different gold questions of
/// that product.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub context_ids: Vec<TokenId>,
    pub q1_ids: Vec<TokenId>,
    pub q2_ids: Vec<TokenId>,
}

impl Triplet {
    pub fn new(context_ids: Vec<TokenId>, q1_ids: Vec<TokenId>, q2_ids: Vec<TokenId>) -> Result<Self> {
        if q1_ids == q2_ids {
            return Err(Error::Contract("triplet questions must differ".into()));
        }
        Ok(Triplet {
            context_ids,
            q1_ids,
            q2_ids,
        })
    }

    pub fn example(&self) -> Example<'_> {
        Example::Pair {
            context: &self.context_ids,
            q1: &self.q1_ids,
            q2: &self.q2_ids,
        }
    }
}

/// A borrowed training example: one branch or an LTD pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Example<'a> {
    Single { context: &'a [TokenId], question: &'a [TokenId] },
    Pair { context: &'a [TokenId], q1: &'a [TokenId], q2: &'a [TokenId] },
}

impl Example<'_> {
    pub fn branches(&self) -> usize {
        match self {
            Example::Single { .. } => 1,
            Example::Pair { .. } => 2,
        }
    }
}

fn distinct_questions(product: &EncodedProduct) -> Vec<&[TokenId]> {
    let mut seen = HashSet::new();
    product
        .questions
        .iter()
        .filter(|q| seen.insert(q.as_slice()))
        .map(Vec::as_slice)
        .collect()
}

/// Unordered pairs of distinct questions, shuffled by `seed` and capped.
fn product_pairs(product: &EncodedProduct, cap: usize, seed: u64) -> Vec<(&[TokenId], &[TokenId])> {
    let qs = distinct_questions(product);
    let mut pairs = Vec::new();
    for i in 0..qs.len() {
        for j in i + 1..qs.len() {
            pairs.push((qs[i], qs[j]));
        }
    }
    pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    pairs.truncate(cap);
    pairs
}

/// Triplets for every product with at least two distinct questions.
pub fn build_triplets(corpus: &[EncodedProduct], max_pairs_per_product: usize, seed: u64) -> Result<Vec<Triplet>> {
    if corpus.is_empty() {
        return Err(Error::Data("cannot build triplets from an empty corpus".into()));
    }
    let mut out = Vec::new();
    for (i, product) in corpus.iter().enumerate() {
        if product.questions.is_empty() {
            return Err(Error::Data(format!("product {} has no questions", product.product_id)));
        }
        for (q1, q2) in product_pairs(product, max_pairs_per_product, derive_seed(seed, &[i as u64])) {
            out.push(Triplet::new(product.context.clone(), q1.to_vec(), q2.to_vec())?);
        }
    }
    Ok(out)
}

/// Batches for one epoch. Products are visited in a seeded order; in LTD mode
/// each product contributes its (re-shuffled, capped) pairs, or single
/// branches when it has fewer than two distinct questions.
pub fn plan_epoch<'a>(corpus: &'a [EncodedProduct], mode: TrainMode, config: &TrainConfig, epoch: usize) -> Vec<Vec<Example<'a>>> {
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0x0e90c4, epoch as u64])));
    let mut examples = Vec::new();
    for i in order {
        let p = &corpus[i];
        let singles = |examples: &mut Vec<Example<'a>>| {
            examples.extend(p.questions.iter().map(|q| Example::Single {
                context: &p.context,
                question: q,
            }))
        };
        match mode {
            TrainMode::Traditional => singles(&mut examples),
            TrainMode::Ltd => {
                let seed = derive_seed(config.seed, &[0x9a125, epoch as u64, i as u64]);
                let pairs = product_pairs(p, config.max_pairs_per_product, seed);
                if pairs.is_empty() {
                    singles(&mut examples);
                }
                examples.extend(pairs.into_iter().map(|(q1, q2)| Example::Pair {
                    context: &p.context,
                    q1,
                    q2,
                }));
            }
        }
    }
    let mut batches = Vec::new();
    let mut current: Vec<Example<'a>> = Vec::new();
    let mut branches = 0;
    for ex in examples {
        if branches + ex.branches() > config.batch_size && !current.is_empty() {
            batches.push(std::mem::take(&mut current));
            branches = 0;
        }
        branches += ex.branches();
        current.push(ex);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    /// Means over the batch's examples, plus the optimized batch objective.
    Step {
        epoch: usize,
        step: u64,
        cg1: f64,
        cg2: f64,
        div: f64,
        total: f64,
        loss: f64,
        grad_norm: f64,
    },
    Epoch {
        epoch: usize,
        steps: u64,
        train_loss: f64,
        val_cg_loss: f64,
        best: bool,
    },
}

/// Result of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub items: Vec<LossBreakdown>,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Parameters plus optimizer state, advanced one batch at a time.
#[derive(Debug, Clone)]
pub struct Trainer {
    params: ModelParams,
    state: AdamState,
    config: TrainConfig,
}

impl Trainer {
    pub fn new(params: ModelParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let state = AdamState::new(params.tensors());
        Ok(Trainer { params, state, config })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn steps(&self) -> u64 {
        self.state.step()
    }

    /// Backpropagates the batch objective, clips, and applies Adam.
    pub fn train_step(&mut self, batch: &[Example<'_>]) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::Data("empty training batch".into()));
        }
        let branches: usize = batch.iter().map(Example::branches).sum();
        let pad = self.params.config().pad_id;
        let (items, loss, grads) = {
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape, true);
            let mut items = Vec::with_capacity(batch.len());
            let mut sum = None;
            for ex in batch {
                let g = loss::example_graph(&bound, &mut tape, ex, self.config.lambda, pad)?;
                items.push(g);
                sum = Some(match sum {
                    Some(s) => tape.add(s, g.total)?,
                    None => g.total,
                });
            }
            let objective = tape.scale(sum.expect("non-empty batch"), 1.0 / branches as f64);
            let loss = tape.scalar(objective);
            if !loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            tape.backward(objective)?;
            let grads: Vec<Option<Vec<f64>>> = bound.vars().iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec)).collect();
            let items: Vec<LossBreakdown> = items.iter().map(|g| g.breakdown(&tape)).collect();
            (items, loss, grads)
        };
        let tensors = self.params.tensors_mut();
        for (t, g) in tensors.iter_mut().zip(grads) {
            if let Some(g) = g {
                t.accumulate_grad(&g)?;
            }
        }
        let grad_norm = match self.config.max_grad_norm {
            Some(max) => clip_grad_norm(tensors, max)?,
            None => clip_grad_norm(tensors, f64::INFINITY)?,
        };
        adam_step(tensors, &mut self.state, &self.config.adam())?;
        self.params.zero_grad();
        Ok(StepStats { items, loss, grad_norm })
    }
}

/// Per-question CG losses for every `(context, question)` pair, in corpus
/// order.
pub fn question_losses(params: &ModelParams, corpus: &[EncodedProduct], workers: usize) -> Result<Vec<f64>> {
    let score = |p: &EncodedProduct| -> Result<Vec<f64>> {
        let enc = params.encode(&p.context)?;
        p.questions
            .iter()
            .map(|q| cg_loss(&params.decode_teacher_forced(&enc, q)?))
            .collect()
    };
    let nested: Vec<Vec<f64>> = if workers <= 1 {
        corpus.iter().map(score).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
        pool.install(|| corpus.par_iter().map(score).collect::<Result<_>>())?
    };
    Ok(nested.into_iter().flatten().collect())
}

/// Mean per-question CG loss; the model-selection criterion.
pub fn mean_cg_loss(params: &ModelParams, corpus: &[EncodedProduct], workers: usize) -> Result<f64> {
    let losses = question_losses(params, corpus, workers)?;
    if losses.is_empty() {
        return Err(Error::Data("cannot score an empty split".into()));
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// `exp` of the token-weighted mean negative log-likelihood (targets include
/// the closing EOS).
pub fn perplexity(params: &ModelParams, corpus: &[EncodedProduct], workers: usize) -> Result<f64> {
    let losses = question_losses(params, corpus, workers)?;
    let counts = corpus.iter().flat_map(|p| p.questions.iter().map(|q| q.len() + 1));
    let (mut nll, mut tokens) = (0.0, 0usize);
    for (l, n) in losses.iter().zip(counts) {
        nll += l * n as f64;
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::Data("cannot score an empty split".into()));
    }
    Ok((nll / tokens as f64).exp())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation CG loss.
    pub best: ModelParams,
    pub best_epoch: usize,
    pub best_val_cg_loss: f64,
    pub last: ModelParams,
    pub steps: u64,
    pub log: Vec<LogRecord>,
}

/// Runs `config.epochs` epochs (or until `max_steps`), scoring validation
/// after each and keeping the best parameters. Every log record is also passed
/// to `sink` as it is produced.
pub fn train(
    init: ModelParams,
    train_set: &[EncodedProduct],
    validation: &[EncodedProduct],
    config: &TrainConfig,
    mode: TrainMode,
    sink: &mut dyn FnMut(&LogRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if validation.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    let mut trainer = Trainer::new(init, config.clone())?;
    let mut log = Vec::new();
    let mut emit = |r: LogRecord, log: &mut Vec<LogRecord>| -> Result<()> {
        sink(&r)?;
        log.push(r);
        Ok(())
    };
    let mut best: Option<(ModelParams, usize, f64)> = None;
    'epochs: for epoch in 0..config.epochs {
        let batches = plan_epoch(train_set, mode, config, epoch);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0u64;
        let mut stop = false;
        for batch in &batches {
            let stats = trainer.train_step(batch)?;
            let n = stats.items.len() as f64;
            let mean = |f: fn(&LossBreakdown) -> f64| stats.items.iter().map(f).sum::<f64>() / n;
            epoch_loss += stats.loss;
            epoch_steps += 1;
            emit(
                LogRecord::Step {
                    epoch,
                    step: trainer.steps(),
                    cg1: mean(|b| b.cg1),
                    cg2: mean(|b| b.cg2),
                    div: mean(|b| b.div),
                    total: mean(|b| b.total),
                    loss: stats.loss,
                    grad_norm: stats.grad_norm,
                },
                &mut log,
            )?;
            if config.max_steps.is_some_and(|m| trainer.steps() >= m) {
                stop = true;
                break;
            }
        }
        let val = mean_cg_loss(trainer.params(), validation, config.workers)?;
        let improved = best.as_ref().map_or(true, |(_, _, b)| val < *b);
        if improved {
            best = Some((trainer.params().clone(), epoch, val));
        }
        emit(
            LogRecord::Epoch {
                epoch,
                steps: trainer.steps(),
                train_loss: epoch_loss / epoch_steps.max(1) as f64,
                val_cg_loss: val,
                best: improved,
            },
            &mut log,
        )?;
        if stop {
            break 'epochs;
        }
    }
    let (best, best_epoch, best_val_cg_loss) = best.expect("at least one epoch ran");
    let steps = trainer.steps();
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_cg_loss,
        last: trainer.into_params(),
        steps,
        log,
    })
}
