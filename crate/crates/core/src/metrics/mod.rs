//! Relevance and diversity metrics over generated questions.
//!
//! Text metrics work on token sequences produced by [`crate::corpus::tokenize`]
//! for both hypotheses and references. Embedding metrics (e-Div, the cluster
//! sweep) use the model's own encoder, mean-pooled over question tokens.

mod embedding;
mod text;

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, ProductRecord, Vocab};
use crate::decoding::GeneratedQuestions;
use crate::error::{Error, Result};
use crate::model::ModelParams;

pub use embedding::{
    cluster_count_sweep, cosine_distance, default_thresholds, e_div, embed_questions, merge_heights, ClusterPoint, EmbeddingMatrix,
    DISTANCE_SNAP, RADIUS_FLOOR,
};
pub use text::{align, avg_bleu, bleu, bleu_score, distinct_n, meteor_lite, meteor_lite_multi, pairwise_bleu, Alignment, BleuScore, BLEU_MAX_ORDER};

pub const METEOR_VARIANT: &str = "METEOR-lite (exact unigram matches only; no stemming or synonyms)";

/// Questions per product that feed Avg-BLEU and Pairwise-BLEU.
pub const TOP_K: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub products: usize,
    pub bleu_top1: f64,
    pub avg_bleu_top3: f64,
    pub meteor_top1: f64,
    /// Distinct-N for N = 1, 2, 3 as fractions; `None` when undefined.
    pub distinct_n: BTreeMap<usize, Option<f64>>,
    /// Mean over products with at least two generations; `None` if none.
    pub pairwise_bleu: Option<f64>,
    pub e_div: Option<f64>,
    pub cluster_curve: Vec<ClusterPoint>,
    /// Products whose top-1 generation was missing or empty.
    pub degenerate: usize,
    pub meteor_variant: String,
}

impl MetricsReport {
    pub fn distinct(&self, n: usize) -> Option<f64> {
        self.distinct_n.get(&n).copied().flatten()
    }

    /// Human-readable table; Distinct-N is shown ×100.
    pub fn to_table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"));
        let dist = |n| opt(self.distinct(n).map(|d| d * 100.0));
        let mut s = String::new();
        let _ = writeln!(s, "# {} products; METEOR = {}", self.products, self.meteor_variant);
        let _ = writeln!(
            s,
            "{:>8} {:>9} {:>8} {:>8} {:>7} {:>7} {:>7} {:>8}",
            "BLEU", "Avg-BLEU", "METEOR", "PW-BLEU", "Dist-1", "Dist-2", "Dist-3", "e-Div"
        );
        let _ = writeln!(
            s,
            "{:>8.2} {:>9.2} {:>8.2} {:>8} {:>7} {:>7} {:>7} {:>8}",
            self.bleu_top1,
            self.avg_bleu_top3,
            self.meteor_top1,
            opt(self.pairwise_bleu),
            dist(1),
            dist(2),
            dist(3),
            self.e_div.map_or_else(|| "n/a".into(), |x| format!("{x:.4}")),
        );
        s
    }

    pub fn cluster_csv(&self) -> String {
        let mut s = String::from("threshold,count\n");
        for p in &self.cluster_curve {
            let _ = writeln!(s, "{:.2},{}", p.threshold, p.count);
        }
        s
    }
}

/// Reads generation records written by the generator (one JSON object per
/// line: `product_id`, `questions`, `scores`).
pub fn load_generations(path: &Path) -> Result<Vec<GeneratedQuestions>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GeneratedQuestions = serde_json::from_str(&line).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.questions.len() != rec.scores.len() {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("{} questions but {} scores", rec.questions.len(), rec.scores.len()),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

/// Matches generations to gold products one-to-one by id, in gold order.
fn align_records<'g>(generations: &'g [GeneratedQuestions], gold: &[ProductRecord]) -> Result<Vec<&'g GeneratedQuestions>> {
    let mut by_id: HashMap<&str, &GeneratedQuestions> = HashMap::new();
    let mut offenders = Vec::new();
    for g in generations {
        if by_id.insert(g.product_id.as_str(), g).is_some() {
            offenders.push(format!("{} (duplicate generation)", g.product_id));
        }
    }
    let gold_ids: std::collections::HashSet<&str> = gold.iter().map(|r| r.product_id.as_str()).collect();
    for g in generations {
        if !gold_ids.contains(g.product_id.as_str()) {
            offenders.push(format!("{} (no gold record)", g.product_id));
        }
    }
    let mut out = Vec::with_capacity(gold.len());
    for r in gold {
        match by_id.get(r.product_id.as_str()) {
            Some(g) => out.push(*g),
            None => offenders.push(format!("{} (no generation)", r.product_id)),
        }
    }
    if !offenders.is_empty() {
        return Err(Error::Alignment(offenders));
    }
    Ok(out)
}

/// Per-product relevance metrics averaged over products; Distinct-N, e-Div
/// and the cluster curve over the pooled top-1 questions.
pub fn evaluate(
    generations: &[GeneratedQuestions],
    gold: &[ProductRecord],
    params: &ModelParams,
    vocab: &Vocab,
    thresholds: &[f64],
) -> Result<MetricsReport> {
    if gold.is_empty() {
        return Err(Error::Data("cannot evaluate against an empty gold set".into()));
    }
    let aligned = align_records(generations, gold)?;
    let (mut bleu_sum, mut avg_sum, mut meteor_sum) = (0.0, 0.0, 0.0);
    let (mut pw_sum, mut pw_count) = (0.0, 0usize);
    let mut degenerate = 0usize;
    let mut pooled: Vec<Vec<String>> = Vec::new();
    let mut pooled_text: Vec<&str> = Vec::new();
    for (gen, record) in aligned.iter().zip(gold) {
        let refs: Vec<Vec<String>> = record.questions.iter().map(|q| tokenize(q)).collect();
        let hyps: Vec<Vec<String>> = gen.questions.iter().take(TOP_K).map(|q| tokenize(q)).collect();
        match hyps.first().filter(|h| !h.is_empty()) {
            Some(top1) => {
                bleu_sum += bleu(top1, &refs);
                meteor_sum += meteor_lite_multi(top1, &refs);
                pooled.push(top1.clone());
                pooled_text.push(&gen.questions[0]);
            }
            None => degenerate += 1,
        }
        if !hyps.is_empty() {
            avg_sum += avg_bleu(&hyps, &refs)?;
        }
        if hyps.len() >= 2 {
            pw_sum += pairwise_bleu(&hyps)?;
            pw_count += 1;
        }
    }
    let n = gold.len() as f64;
    let distinct = (1..=3).map(|k| (k, distinct_n(&pooled, k))).collect();
    let max_len = params.config().max_len;
    let ids: Vec<Vec<u32>> = pooled_text
        .iter()
        .map(|q| {
            let mut ids = vocab.encode(q);
            ids.truncate(max_len);
            ids
        })
        .filter(|ids| !ids.is_empty())
        .collect();
    let embeddings = embed_questions(params, &ids)?;
    let e_div_value = if embeddings.len() >= 2 { Some(e_div(&embeddings)?) } else { None };
    let cluster_curve = if embeddings.is_empty() {
        Vec::new()
    } else {
        cluster_count_sweep(&embeddings, thresholds)
    };
    Ok(MetricsReport {
        products: gold.len(),
        bleu_top1: bleu_sum / n,
        avg_bleu_top3: avg_sum / n,
        meteor_top1: meteor_sum / n,
        distinct_n: distinct,
        pairwise_bleu: (pw_count > 0).then(|| pw_sum / pw_count as f64),
        e_div: e_div_value,
        cluster_curve,
        degenerate,
        meteor_variant: METEOR_VARIANT.into(),
    })
}
