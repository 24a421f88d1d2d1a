//! Greedy, beam and diverse beam search (DBS) decoding.
//!
//! Search runs against a [`StepScorer`], so the same code drives the model
//! and small hand-built scorers. DBS advances its groups in lock step: at
//! every time step group `g` expands after groups `0..g`, and each candidate
//! token is penalised by `diversity_penalty` times the number of beams in
//! earlier groups that picked the same token at this step (Hamming
//! diversity). The penalty only influences selection; stored
//! `cum_logprob`s are plain sums of token log-probabilities.
//!
//! A beam that emits EOS, or reaches `max_new_tokens`, is frozen and keeps
//! competing for its slot with its cumulative log-probability. A group stops
//! once all of its slots hold frozen beams.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{EncodedProduct, TokenId, Vocab};
use crate::error::{Error, Result};
use crate::model::{EncoderOutput, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub num_groups: usize,
    pub beams_per_group: usize,
    pub diversity_penalty: f64,
    pub length_penalty: f64,
    /// Size of n-grams that may not repeat within a candidate; 0 disables.
    pub no_repeat_ngram: usize,
    pub max_new_tokens: usize,
    pub questions_per_product: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            num_groups: 3,
            beams_per_group: 2,
            diversity_penalty: 5.0,
            length_penalty: 1.0,
            no_repeat_ngram: 2,
            max_new_tokens: 24,
            questions_per_product: 6,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_groups == 0 || self.beams_per_group == 0 {
            return bad("num_groups and beams_per_group must be at least 1".into());
        }
        if !(self.diversity_penalty >= 0.0 && self.diversity_penalty.is_finite()) {
            return bad(format!("diversity_penalty must be finite and >= 0, got {}", self.diversity_penalty));
        }
        if !self.length_penalty.is_finite() {
            return bad("length_penalty must be finite".into());
        }
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be positive".into());
        }
        if self.questions_per_product == 0 {
            return bad("questions_per_product must be positive".into());
        }
        Ok(())
    }

    /// Plain beam search with `beams` beams.
    pub fn beam(beams: usize) -> Self {
        GenerationConfig {
            num_groups: 1,
            beams_per_group: beams,
            diversity_penalty: 0.0,
            ..GenerationConfig::default()
        }
    }
}

/// Next-token distribution source for search.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn bos_id(&self) -> TokenId;
    fn eos_id(&self) -> TokenId;
    /// Tokens that may never be generated.
    fn banned(&self) -> Vec<TokenId>;
    /// Longest generated continuation the scorer accepts.
    fn max_new_tokens(&self) -> usize {
        usize::MAX
    }
    /// Log-probabilities over the vocabulary after `prefix` (BOS first).
    fn log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>>;
}

/// The model conditioned on one encoded context.
pub struct ModelScorer<'a> {
    params: &'a ModelParams,
    enc: EncoderOutput,
}

impl<'a> ModelScorer<'a> {
    pub fn new(params: &'a ModelParams, context: &[TokenId]) -> Result<Self> {
        Ok(ModelScorer {
            params,
            enc: params.encode(context)?,
        })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.params.config().vocab_size
    }

    fn bos_id(&self) -> TokenId {
        self.params.config().bos_id
    }

    fn eos_id(&self) -> TokenId {
        self.params.config().eos_id
    }

    fn banned(&self) -> Vec<TokenId> {
        vec![self.params.config().pad_id, self.params.config().bos_id]
    }

    fn max_new_tokens(&self) -> usize {
        self.params.config().max_len - 1
    }

    fn log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        self.params.decode_step(&self.enc, prefix)
    }
}

/// A generated sequence (without the leading BOS).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub token_ids: Vec<TokenId>,
    pub cum_logprob: f64,
    pub finished: bool,
}

impl Candidate {
    /// `cum_logprob / len^alpha`, counting EOS in the length.
    pub fn score(&self, alpha: f64) -> f64 {
        self.cum_logprob / (self.token_ids.len().max(1) as f64).powf(alpha)
    }
}

/// Higher score first, then shorter, then lexicographically smaller.
fn rank(a: &Candidate, b: &Candidate, alpha: f64) -> Ordering {
    b.score(alpha)
        .total_cmp(&a.score(alpha))
        .then(a.token_ids.len().cmp(&b.token_ids.len()))
        .then_with(|| a.token_ids.cmp(&b.token_ids))
}

fn sort_ranked(cands: &mut [Candidate], alpha: f64) {
    cands.sort_by(|a, b| rank(a, b, alpha));
}

/// Argmax decoding; ties go to the lowest token id.
pub fn greedy_decode(scorer: &dyn StepScorer, max_new_tokens: usize) -> Result<Vec<TokenId>> {
    let limit = max_new_tokens.min(scorer.max_new_tokens());
    let banned = scorer.banned();
    let mut prefix = vec![scorer.bos_id()];
    for step in 0..limit {
        let lp = scorer.log_probs(&prefix)?;
        let best = lp
            .iter()
            .enumerate()
            .filter(|&(t, l)| !banned.contains(&(t as TokenId)) && *l > f64::NEG_INFINITY)
            .fold(None::<(usize, f64)>, |acc, (t, &l)| match acc {
                Some((_, bl)) if bl >= l => acc,
                _ => Some((t, l)),
            });
        let Some((tok, _)) = best else {
            return Err(Error::DecodingStuck { step, group: 0 });
        };
        prefix.push(tok as TokenId);
        if tok as TokenId == scorer.eos_id() {
            break;
        }
    }
    prefix.remove(0);
    Ok(prefix)
}

/// Tokens that would complete an n-gram already present in `seq`.
fn repeated_ngram_bans(seq: &[TokenId], n: usize) -> Vec<TokenId> {
    if n == 0 || seq.len() + 1 < n {
        return Vec::new();
    }
    if n == 1 {
        return seq.to_vec();
    }
    let tail = &seq[seq.len() + 1 - n..];
    seq.windows(n).filter(|w| &w[..n - 1] == tail).map(|w| w[n - 1]).collect()
}

#[derive(Debug, Clone)]
struct Beam {
    tokens: Vec<TokenId>,
    cum: f64,
    frozen: bool,
    finished: bool,
}

struct Choice {
    key: f64,
    tokens: Vec<TokenId>,
    cum: f64,
    frozen: bool,
    finished: bool,
}

fn choice_order(a: &Choice, b: &Choice) -> Ordering {
    b.key
        .total_cmp(&a.key)
        .then(a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Diverse beam search; returns one ranked candidate list per group.
pub fn diverse_beam_search(scorer: &dyn StepScorer, config: &GenerationConfig) -> Result<Vec<Vec<Candidate>>> {
    config.validate()?;
    let vocab = scorer.vocab_size();
    if config.num_groups * config.beams_per_group > vocab {
        return Err(Error::Config(format!(
            "{} groups x {} beams exceeds vocabulary size {vocab}",
            config.num_groups, config.beams_per_group
        )));
    }
    let limit = config.max_new_tokens.min(scorer.max_new_tokens());
    let (bos, eos) = (scorer.bos_id(), scorer.eos_id());
    let always_banned = scorer.banned();
    let start = Beam {
        tokens: Vec::new(),
        cum: 0.0,
        frozen: false,
        finished: false,
    };
    let mut groups: Vec<Vec<Beam>> = vec![vec![start]; config.num_groups];
    for step in 0..limit {
        if groups.iter().all(|g| g.iter().all(|b| b.frozen)) {
            break;
        }
        let mut counts = vec![0usize; vocab];
        for (gi, beams) in groups.iter_mut().enumerate() {
            if beams.iter().all(|b| b.frozen) {
                continue;
            }
            let mut choices = Vec::new();
            for beam in beams.iter() {
                if beam.frozen {
                    choices.push(Choice {
                        key: beam.cum,
                        tokens: beam.tokens.clone(),
                        cum: beam.cum,
                        frozen: true,
                        finished: beam.finished,
                    });
                    continue;
                }
                let mut prefix = Vec::with_capacity(beam.tokens.len() + 1);
                prefix.push(bos);
                prefix.extend_from_slice(&beam.tokens);
                let mut lp = scorer.log_probs(&prefix)?;
                if lp.len() != vocab {
                    return Err(Error::Shape {
                        op: "log_probs",
                        lhs: vec![vocab],
                        rhs: vec![lp.len()],
                    });
                }
                for &t in always_banned.iter().chain(&repeated_ngram_bans(&beam.tokens, config.no_repeat_ngram)) {
                    lp[t as usize] = f64::NEG_INFINITY;
                }
                if lp.iter().any(|l| l.is_nan()) {
                    return Err(Error::NonFinite("log_probs"));
                }
                if lp.iter().all(|&l| l == f64::NEG_INFINITY) {
                    return Err(Error::DecodingStuck { step, group: gi });
                }
                for (t, &l) in lp.iter().enumerate() {
                    if l == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut tokens = beam.tokens.clone();
                    tokens.push(t as TokenId);
                    let done = t as TokenId == eos;
                    choices.push(Choice {
                        key: beam.cum + l - config.diversity_penalty * counts[t] as f64,
                        frozen: done || tokens.len() >= limit,
                        tokens,
                        cum: beam.cum + l,
                        finished: done,
                    });
                }
            }
            choices.sort_by(choice_order);
            choices.truncate(config.beams_per_group);
            for c in &choices {
                if c.tokens.len() == step + 1 {
                    counts[*c.tokens.last().expect("expanded beam") as usize] += 1;
                }
            }
            *beams = choices
                .into_iter()
                .map(|c| Beam {
                    tokens: c.tokens,
                    cum: c.cum,
                    frozen: c.frozen,
                    finished: c.finished,
                })
                .collect();
        }
    }
    Ok(groups
        .into_iter()
        .map(|beams| {
            let mut cands: Vec<Candidate> = beams
                .into_iter()
                .map(|b| Candidate {
                    token_ids: b.tokens,
                    cum_logprob: b.cum,
                    finished: b.finished,
                })
                .collect();
            sort_ranked(&mut cands, config.length_penalty);
            cands
        })
        .collect())
}

/// Standard beam search: DBS with a single group.
pub fn beam_search(scorer: &dyn StepScorer, config: &GenerationConfig) -> Result<Vec<Candidate>> {
    let single = GenerationConfig {
        num_groups: 1,
        ..config.clone()
    };
    Ok(diverse_beam_search(scorer, &single)?.pop().expect("one group"))
}

/// Ranked, deduplicated questions for one product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedQuestions {
    pub product_id: String,
    pub questions: Vec<String>,
    pub scores: Vec<f64>,
    #[serde(skip)]
    pub token_ids: Vec<Vec<TokenId>>,
    /// Fewer unique candidates than `questions_per_product` were found.
    #[serde(skip)]
    pub shortage: bool,
}

/// Pools every group's candidates, drops exact duplicates (ignoring the EOS
/// marker), and ranks finished candidates by length-penalised score ahead of
/// truncated ones.
pub fn pool_candidates(groups: Vec<Vec<Candidate>>, config: &GenerationConfig) -> (Vec<Candidate>, bool) {
    let mut all: Vec<Candidate> = groups.into_iter().flatten().collect();
    all.sort_by(|a, b| b.finished.cmp(&a.finished).then_with(|| rank(a, b, config.length_penalty)));
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for c in all {
        let body = match c.token_ids.split_last() {
            Some((_, body)) if c.finished => body.to_vec(),
            _ => c.token_ids.clone(),
        };
        if !body.is_empty() && seen.insert(body) {
            out.push(c);
        }
    }
    let shortage = out.len() < config.questions_per_product;
    out.truncate(config.questions_per_product);
    (out, shortage)
}

pub fn generate_questions(params: &ModelParams, vocab: &Vocab, product: &EncodedProduct, config: &GenerationConfig) -> Result<GeneratedQuestions> {
    let scorer = ModelScorer::new(params, &product.context)?;
    let groups = diverse_beam_search(&scorer, config)?;
    let (ranked, shortage) = pool_candidates(groups, config);
    Ok(GeneratedQuestions {
        product_id: product.product_id.clone(),
        questions: ranked.iter().map(|c| vocab.decode(&c.token_ids)).collect(),
        scores: ranked.iter().map(|c| c.score(config.length_penalty)).collect(),
        token_ids: ranked.into_iter().map(|c| c.token_ids).collect(),
        shortage,
    })
}

/// Generates for every product, fanning out over `workers` threads; output
/// order follows `products`.
pub fn generate_corpus(
    params: &ModelParams,
    vocab: &Vocab,
    products: &[EncodedProduct],
    config: &GenerationConfig,
    workers: usize,
) -> Result<Vec<GeneratedQuestions>> {
    config.validate()?;
    let run = |p: &EncodedProduct| generate_questions(params, vocab, p, config);
    if workers <= 1 {
        return products.iter().map(run).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    pool.install(|| products.par_iter().map(run).collect())
}
