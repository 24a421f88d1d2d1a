#![allow(dead_code)]
//! Independent oracles shared by the test suites and the acceptance run.

use ltdqg_core::corpus::TokenId;
use ltdqg_core::decoding::{Candidate, StepScorer};
use ltdqg_core::model::{ModelConfig, ModelParams};
use ltdqg_core::rng::derive_seed;
use ltdqg_core::tensor::log_softmax;
use ltdqg_core::training::{example_gradients, Example};
use ltdqg_core::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub type Graph = dyn Fn(&mut Tape<'_>, &[Var]) -> Result<Var>;

/// Reduces the op output to a scalar with fixed random weights so every
/// output element contributes a distinct amount.
pub fn scalarize(tape: &mut Tape<'_>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    if shape.is_empty() {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, &shape);
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

pub fn eval(inputs: &[Tensor], f: &Graph) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t, false)).collect();
    let out = f(&mut tape, &vars).unwrap();
    let s = scalarize(&mut tape, out, 99).unwrap();
    tape.scalar(s)
}

/// Largest relative error between analytic and central-difference gradients.
pub fn check(inputs: Vec<Tensor>, f: &Graph) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t, true)).collect();
    let out = f(&mut tape, &vars).unwrap();
    let s = scalarize(&mut tape, out, 99).unwrap();
    tape.backward(s).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            let numeric = (eval(&plus, f) - eval(&minus, f)) / (2.0 * H);
            worst = worst.max(rel_err(analytic[k][i], numeric));
        }
    }
    worst
}

pub fn toy_model() -> ModelParams {
    let cfg = ModelConfig {
        vocab_size: 20,
        d_model: 8,
        n_heads: 2,
        enc_layers: 2,
        dec_layers: 2,
        d_ff: 16,
        max_len: 12,
        ..ModelConfig::default()
    };
    let mut params = ModelParams::init(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for t in params.tensors_mut() {
        for x in t.data_mut() {
            *x += rng.gen_range(-0.3..0.3);
        }
    }
    params
}

pub fn total_loss(params: &ModelParams, example: &Example<'_>, lambda: f64) -> f64 {
    example_gradients(params, example, lambda).unwrap().0.total
}

/// Largest relative error between the analytic gradient of the full pair
/// loss and central differences, over every parameter of `params`.
pub fn model_gradient_error(params: &ModelParams, example: &Example<'_>, lambda: f64) -> (usize, f64) {
    let (_, analytic) = example_gradients(params, example, lambda).unwrap();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (k, t) in params.tensors().iter().enumerate() {
        for i in 0..t.numel() {
            let mut plus = params.clone();
            plus.tensors_mut()[k].data_mut()[i] += H;
            let mut minus = params.clone();
            minus.tensors_mut()[k].data_mut()[i] -= H;
            let numeric = (total_loss(&plus, example, lambda) - total_loss(&minus, example, lambda)) / (2.0 * H);
            worst = worst.max(rel_err(analytic[k][i], numeric));
            checked += 1;
        }
    }
    (checked, worst)
}

pub const BOS: TokenId = 0;
pub const A: TokenId = 1;
pub const B: TokenId = 2;
pub const EOS: TokenId = 3;

/// Seeded log-probabilities over {a, b, EOS}; every other id (BOS and the
/// padding ids that make room for wide beams) is banned.
pub struct ToyScorer {
    pub seed: u64,
    pub vocab: usize,
    pub steps: usize,
}

impl StepScorer for ToyScorer {
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn bos_id(&self) -> TokenId {
        BOS
    }
    fn eos_id(&self) -> TokenId {
        EOS
    }
    fn banned(&self) -> Vec<TokenId> {
        std::iter::once(BOS).chain(4..self.vocab as TokenId).collect()
    }
    fn max_new_tokens(&self) -> usize {
        self.steps
    }
    fn log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let stream: Vec<u64> = prefix.iter().map(|&t| t as u64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &stream));
        let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut out = vec![f64::NEG_INFINITY; self.vocab];
        out[1..4].copy_from_slice(&log_softmax(&raw));
        Ok(out)
    }
}

/// Every sequence of at most `steps` tokens over {a, b, EOS} that either ends
/// at its first EOS or is cut at `steps`, with its summed log-probability.
pub fn enumerate(scorer: &ToyScorer) -> Vec<Candidate> {
    let mut out = Vec::new();
    let mut stack = vec![(Vec::<TokenId>::new(), 0.0)];
    while let Some((seq, cum)) = stack.pop() {
        let mut prefix = vec![BOS];
        prefix.extend(&seq);
        let lp = scorer.log_probs(&prefix).unwrap();
        for t in [A, B, EOS] {
            let mut next = seq.clone();
            next.push(t);
            let c = cum + lp[t as usize];
            if t == EOS || next.len() == scorer.steps {
                out.push(Candidate {
                    token_ids: next,
                    cum_logprob: c,
                    finished: t == EOS,
                });
            } else {
                stack.push((next, c));
            }
        }
    }
    out
}

pub fn ranked(mut cands: Vec<Candidate>, alpha: f64) -> Vec<Vec<TokenId>> {
    cands.sort_by(|a, b| {
        b.score(alpha)
            .total_cmp(&a.score(alpha))
            .then(a.token_ids.len().cmp(&b.token_ids.len()))
            .then_with(|| a.token_ids.cmp(&b.token_ids))
    });
    cands.into_iter().map(|c| c.token_ids).collect()
}

pub fn question(rng: &mut ChaCha8Rng) -> Vec<u8> {
    let len = rng.gen_range(1..=6);
    (0..len).map(|_| rng.gen_range(0..4)).collect()
}

pub fn five_questions(rng: &mut ChaCha8Rng) -> Vec<Vec<u8>> {
    (0..5).map(|_| question(rng)).collect()
}

pub fn count(seq: &[u8], gram: &[u8]) -> usize {
    let n = gram.len();
    if seq.len() < n {
        return 0;
    }
    (0..=seq.len() - n).filter(|&i| &seq[i..i + n] == gram).count()
}

pub fn naive_bleu(hyp: &[u8], refs: &[Vec<u8>]) -> f64 {
    let mut precisions = Vec::new();
    for n in 1..=4 {
        let total = hyp.len().saturating_sub(n - 1);
        let mut seen: Vec<&[u8]> = Vec::new();
        let mut matched = 0;
        if hyp.len() >= n {
            for i in 0..=hyp.len() - n {
                let g = &hyp[i..i + n];
                if seen.contains(&g) {
                    continue;
                }
                seen.push(g);
                let best_ref = refs.iter().map(|r| count(r, g)).max().unwrap();
                matched += count(hyp, g).min(best_ref);
            }
        }
        if matched == 0 && n == 1 {
            return 0.0;
        }
        precisions.push(if matched == 0 {
            1.0 / (total as f64 + 1.0)
        } else {
            matched as f64 / total as f64
        });
    }
    let c = hyp.len() as f64;
    let mut r = refs[0].len();
    for x in refs {
        let (d, best) = ((x.len() as f64 - c).abs(), (r as f64 - c).abs());
        if d < best || (d == best && x.len() < r) {
            r = x.len();
        }
    }
    let bp = if c < r as f64 { (1.0 - r as f64 / c).exp() } else { 1.0 };
    100.0 * bp * precisions.iter().product::<f64>().powf(0.25)
}

/// Every partial one-to-one mapping of equal tokens; keeps the most matches,
/// then the fewest chunks.
pub fn naive_align(hyp: &[u8], reference: &[u8]) -> (usize, usize) {
    fn go(i: usize, hyp: &[u8], reference: &[u8], map: &mut Vec<Option<usize>>, best: &mut (usize, usize)) {
        if i == hyp.len() {
            let matches = map.iter().flatten().count();
            let mut chunks = 0;
            for k in 0..map.len() {
                if let Some(j) = map[k] {
                    let continues = k > 0 && map[k - 1].is_some_and(|p| p + 1 == j);
                    if !continues {
                        chunks += 1;
                    }
                }
            }
            if matches > best.0 || (matches == best.0 && chunks < best.1) {
                *best = (matches, chunks);
            }
            return;
        }
        map.push(None);
        go(i + 1, hyp, reference, map, best);
        map.pop();
        for j in 0..reference.len() {
            if reference[j] == hyp[i] && !map.contains(&Some(j)) {
                map.push(Some(j));
                go(i + 1, hyp, reference, map, best);
                map.pop();
            }
        }
    }
    let mut best = (0, 0);
    go(0, hyp, reference, &mut Vec::new(), &mut best);
    best
}

pub fn naive_meteor(hyp: &[u8], reference: &[u8]) -> f64 {
    let (m, ch) = naive_align(hyp, reference);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / hyp.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = p * r / (0.9 * p + 0.1 * r);
    let frag = ch as f64 / m as f64;
    100.0 * fmean * (1.0 - 0.5 * frag * frag * frag)
}

pub fn naive_distinct(qs: &[Vec<u8>], n: usize) -> Option<f64> {
    let mut all: Vec<&[u8]> = Vec::new();
    for q in qs {
        if q.len() >= n {
            for i in 0..=q.len() - n {
                all.push(&q[i..i + n]);
            }
        }
    }
    if all.is_empty() {
        return None;
    }
    let mut unique: Vec<&[u8]> = Vec::new();
    for g in &all {
        if !unique.contains(g) {
            unique.push(g);
        }
    }
    Some(unique.len() as f64 / all.len() as f64)
}

pub fn random_embeddings(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

pub fn cos_dist(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    1.0 - dot / (nu * nv)
}

/// Average linkage from explicit member lists: merge the closest pair while
/// its mean pairwise distance is within the threshold.
pub fn naive_clusters(rows: &[Vec<f64>], threshold: f64) -> usize {
    let mut clusters: Vec<Vec<usize>> = (0..rows.len()).map(|i| vec![i]).collect();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let mut sum = 0.0;
                for &i in &clusters[a] {
                    for &j in &clusters[b] {
                        sum += cos_dist(&rows[i], &rows[j]);
                    }
                }
                let d = sum / (clusters[a].len() * clusters[b].len()) as f64;
                if best.map_or(true, |(bd, _, _)| d < bd) {
                    best = Some((d, a, b));
                }
            }
        }
        match best {
            Some((d, a, b)) if d <= threshold => {
                let moved = clusters.remove(b);
                clusters[a].extend(moved);
            }
            _ => return clusters.len(),
        }
    }
}

