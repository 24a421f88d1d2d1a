use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use crate::error::{Error, Result};

pub const BLEU_MAX_ORDER: usize = 4;

/// BLEU value plus whether the inputs were degenerate (empty hypothesis or no
/// usable reference), in which case the score is 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BleuScore {
    pub score: f64,
    pub degenerate: bool,
}

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU-4 on a 0–100 scale.
///
/// Modified precisions clip each hypothesis n-gram by its largest count in any
/// single reference. Orders n ≥ 2 with no clipped match use add-one smoothing
/// `1 / (total + 1)`. The brevity penalty uses the reference length closest to
/// the hypothesis length (shorter wins ties).
pub fn bleu_score<T: Hash + Eq, R: AsRef<[T]>>(hypothesis: &[T], references: &[R]) -> BleuScore {
    let refs: Vec<&[T]> = references.iter().map(AsRef::as_ref).filter(|r| !r.is_empty()).collect();
    if hypothesis.is_empty() || refs.is_empty() {
        return BleuScore {
            score: 0.0,
            degenerate: true,
        };
    }
    let mut log_sum = 0.0;
    for n in 1..=BLEU_MAX_ORDER {
        let hyp = ngram_counts(hypothesis, n);
        let total = hypothesis.len().saturating_sub(n - 1);
        let ref_counts: Vec<HashMap<&[T], usize>> = refs.iter().map(|r| ngram_counts(r, n)).collect();
        let matched: usize = hyp
            .iter()
            .map(|(g, &c)| c.min(ref_counts.iter().map(|rc| rc.get(g).copied().unwrap_or(0)).max().unwrap_or(0)))
            .sum();
        let p = if matched > 0 {
            matched as f64 / total as f64
        } else if n == 1 {
            return BleuScore {
                score: 0.0,
                degenerate: false,
            };
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_sum += p.ln();
    }
    let c = hypothesis.len();
    let r = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("non-empty references");
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    BleuScore {
        score: 100.0 * bp * (log_sum / BLEU_MAX_ORDER as f64).exp(),
        degenerate: false,
    }
}

pub fn bleu<T: Hash + Eq, R: AsRef<[T]>>(hypothesis: &[T], references: &[R]) -> f64 {
    bleu_score(hypothesis, references).score
}

/// Mean BLEU of each hypothesis against the full gold set.
pub fn avg_bleu<T: Hash + Eq, H: AsRef<[T]>, R: AsRef<[T]>>(hypotheses: &[H], references: &[R]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::Data("avg_bleu needs at least one hypothesis".into()));
    }
    let total: f64 = hypotheses.iter().map(|h| bleu(h.as_ref(), references)).sum();
    Ok(total / hypotheses.len() as f64)
}

/// Mean BLEU of each question against the other questions of its group.
pub fn pairwise_bleu<T: Hash + Eq, Q: AsRef<[T]>>(group: &[Q]) -> Result<f64> {
    if group.len() < 2 {
        return Err(Error::Data(format!("pairwise_bleu needs at least 2 questions, got {}", group.len())));
    }
    let mut total = 0.0;
    for i in 0..group.len() {
        let others: Vec<&[T]> = (0..group.len()).filter(|&j| j != i).map(|j| group[j].as_ref()).collect();
        total += bleu(group[i].as_ref(), &others);
    }
    Ok(total / group.len() as f64)
}

/// Unique over total n-grams pooled across `questions`; `None` when there are
/// no n-grams at all.
pub fn distinct_n<T: Hash + Eq, Q: AsRef<[T]>>(questions: &[Q], n: usize) -> Option<f64> {
    if n == 0 {
        return None;
    }
    let mut unique = HashSet::new();
    let mut total = 0usize;
    for q in questions {
        let q = q.as_ref();
        if q.len() >= n {
            for w in q.windows(n) {
                unique.insert(w);
                total += 1;
            }
        }
    }
    (total > 0).then(|| unique.len() as f64 / total as f64)
}

/// Exact-match unigram alignment statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Alignment {
    pub matches: usize,
    pub chunks: usize,
}

/// Alignment with the most matches and, among those, the fewest chunks. A
/// chunk is a maximal run of matched hypothesis tokens mapped to consecutive
/// reference positions.
pub fn align<T: Eq>(hypothesis: &[T], reference: &[T]) -> Alignment {
    struct Search<'s, T> {
        hyp: &'s [T],
        reference: &'s [T],
        memo: HashMap<(usize, Vec<bool>, Option<usize>), (usize, usize)>,
    }
    impl<T: Eq> Search<'_, T> {
        // Best (matches, chunks) for hyp[i..] given used reference slots and
        // the reference position matched by hyp[i-1], if any.
        fn best(&mut self, i: usize, used: &mut Vec<bool>, prev: Option<usize>) -> (usize, usize) {
            if i == self.hyp.len() {
                return (0, 0);
            }
            let key = (i, used.clone(), prev);
            if let Some(&v) = self.memo.get(&key) {
                return v;
            }
            let mut best = self.best(i + 1, used, None);
            for j in 0..self.reference.len() {
                if used[j] || self.reference[j] != self.hyp[i] {
                    continue;
                }
                used[j] = true;
                let (m, c) = self.best(i + 1, used, Some(j));
                used[j] = false;
                let continues = prev.is_some_and(|p| p + 1 == j);
                let cand = (m + 1, c + usize::from(!continues));
                if cand.0 > best.0 || (cand.0 == best.0 && cand.1 < best.1) {
                    best = cand;
                }
            }
            self.memo.insert(key, best);
            best
        }
    }
    let mut search = Search {
        hyp: hypothesis,
        reference,
        memo: HashMap::new(),
    };
    let (matches, chunks) = search.best(0, &mut vec![false; reference.len()], None);
    Alignment { matches, chunks }
}

/// Exact-match METEOR on a 0–100 scale (no stemming or synonyms).
pub fn meteor_lite<T: Eq>(hypothesis: &[T], reference: &[T]) -> f64 {
    if hypothesis.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let Alignment { matches, chunks } = align(hypothesis, reference);
    if matches == 0 {
        return 0.0;
    }
    let m = matches as f64;
    let p = m / hypothesis.len() as f64;
    let r = m / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m).powi(3);
    100.0 * f_mean * (1.0 - penalty)
}

/// Best METEOR-lite over several references.
pub fn meteor_lite_multi<T: Eq, R: AsRef<[T]>>(hypothesis: &[T], references: &[R]) -> f64 {
    references
        .iter()
        .map(|r| meteor_lite(hypothesis, r.as_ref()))
        .fold(0.0, f64::max)
}
