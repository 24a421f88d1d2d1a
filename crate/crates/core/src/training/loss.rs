use serde::{Deserialize, Serialize};

use super::Example;
use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::model::{Bound, DecoderTrace, EncodedGraph, ModelParams, TraceGraph};
use crate::tensor::{log_softmax, Tape, Var, COSINE_MIN_NORM};

/// Per-example loss components. Single-question examples report
/// `cg2 = div = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cg1: f64,
    pub cg2: f64,
    pub div: f64,
    pub total: f64,
}

/// Token-mean cross entropy of a teacher-forced trace over its non-pad targets.
pub fn cg_loss(trace: &DecoderTrace) -> Result<f64> {
    let v = trace.logits.cols();
    if trace.logits.rows() != trace.targets.len() {
        return Err(Error::Shape {
            op: "cg_loss",
            lhs: trace.logits.shape().to_vec(),
            rhs: vec![trace.targets.len()],
        });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (row, (&tok, &keep)) in trace.targets.iter().zip(&trace.target_mask).enumerate() {
        if !keep {
            continue;
        }
        if tok as usize >= v {
            return Err(Error::Index {
                op: "cg_loss target",
                index: tok as usize,
                bound: v,
            });
        }
        total -= log_softmax(trace.logits.row(row))[tok as usize];
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyPool("cg_loss"));
    }
    Ok(total / count as f64)
}

fn pooled(states: &crate::tensor::Tensor, mask: &[bool]) -> Result<Vec<f64>> {
    let d = states.cols();
    if mask.len() != states.rows() {
        return Err(Error::Shape {
            op: "div_loss pooling",
            lhs: states.shape().to_vec(),
            rhs: vec![mask.len()],
        });
    }
    let rows: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if rows.is_empty() {
        return Err(Error::EmptyPool("div_loss"));
    }
    let mut out = vec![0.0; d];
    for &r in &rows {
        out.iter_mut().zip(states.row(r)).for_each(|(o, x)| *o += x);
    }
    let inv = 1.0 / rows.len() as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    Ok(out)
}

fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for norm in [nu, nv] {
        if norm < COSINE_MIN_NORM {
            return Err(Error::DegenerateVector { op: "div_loss", norm });
        }
    }
    Ok(dot / (nu * nv))
}

/// Layer-averaged cosine similarity of the two traces' mean-pooled decoder
/// states.
pub fn div_loss(t1: &DecoderTrace, t2: &DecoderTrace) -> Result<f64> {
    if t1.layer_states.len() != t2.layer_states.len() || t1.layer_states.is_empty() {
        return Err(Error::Contract(format!(
            "div_loss needs equal, non-zero layer counts, got {} and {}",
            t1.layer_states.len(),
            t2.layer_states.len()
        )));
    }
    let mut total = 0.0;
    for (a, b) in t1.layer_states.iter().zip(&t2.layer_states) {
        total += cosine(&pooled(a, &t1.pool_mask)?, &pooled(b, &t2.pool_mask)?)?;
    }
    Ok(total / t1.layer_states.len() as f64)
}

pub(crate) fn cg_graph(tape: &mut Tape<'_>, trace: &TraceGraph, pad_id: TokenId) -> Result<Var> {
    tape.cross_entropy(trace.logits, &trace.targets, pad_id)
}

pub(crate) fn div_graph(tape: &mut Tape<'_>, t1: &TraceGraph, t2: &TraceGraph) -> Result<Var> {
    if t1.layer_states.len() != t2.layer_states.len() || t1.layer_states.is_empty() {
        return Err(Error::Contract(format!(
            "div_loss needs equal, non-zero layer counts, got {} and {}",
            t1.layer_states.len(),
            t2.layer_states.len()
        )));
    }
    let mut acc: Option<Var> = None;
    for (&a, &b) in t1.layer_states.iter().zip(&t2.layer_states) {
        let pa = tape.mean_pool(a, &t1.pool_mask)?;
        let pb = tape.mean_pool(b, &t2.pool_mask)?;
        let c = tape.cosine(pa, pb)?;
        acc = Some(match acc {
            Some(s) => tape.add(s, c)?,
            None => c,
        });
    }
    let sum = acc.expect("at least one layer");
    Ok(tape.scale(sum, 1.0 / t1.layer_states.len() as f64))
}

/// Loss nodes for one example on a tape.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ExampleGraph {
    pub cg1: Var,
    pub cg2: Option<Var>,
    pub div: Option<Var>,
    pub total: Var,
}

impl ExampleGraph {
    pub fn breakdown(&self, tape: &Tape<'_>) -> LossBreakdown {
        LossBreakdown {
            cg1: tape.scalar(self.cg1),
            cg2: self.cg2.map_or(0.0, |v| tape.scalar(v)),
            div: self.div.map_or(0.0, |v| tape.scalar(v)),
            total: tape.scalar(self.total),
        }
    }
}

/// Shared encoder pass, one teacher-forced decode per branch, and
/// `cg1 + cg2 + λ·div` for pairs.
pub(crate) fn example_graph<'a>(bound: &Bound<'a>, tape: &mut Tape<'a>, example: &Example<'_>, lambda: f64, pad_id: TokenId) -> Result<ExampleGraph> {
    match *example {
        Example::Single { context, question } => {
            let enc = bound.encode(tape, context)?;
            let trace = bound.decode_teacher_forced(tape, &enc, question)?;
            let cg1 = cg_graph(tape, &trace, pad_id)?;
            Ok(ExampleGraph {
                cg1,
                cg2: None,
                div: None,
                total: cg1,
            })
        }
        Example::Pair { context, q1, q2 } => {
            let enc: EncodedGraph = bound.encode(tape, context)?;
            let t1 = bound.decode_teacher_forced(tape, &enc, q1)?;
            let t2 = bound.decode_teacher_forced(tape, &enc, q2)?;
            let cg1 = cg_graph(tape, &t1, pad_id)?;
            let cg2 = cg_graph(tape, &t2, pad_id)?;
            let div = div_graph(tape, &t1, &t2)?;
            let cg = tape.add(cg1, cg2)?;
            let total = if lambda == 0.0 {
                cg
            } else {
                let reg = tape.scale(div, lambda);
                tape.add(cg, reg)?
            };
            Ok(ExampleGraph {
                cg1,
                cg2: Some(cg2),
                div: Some(div),
                total,
            })
        }
    }
}

/// Loss cg1 + cg2 + λ·div for one context and two target questions,
/// without checking that the questions differ.
pub fn ltd_loss_unchecked(params: &ModelParams, context: &[TokenId], q1: &[TokenId], q2: &[TokenId], lambda: f64) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let ex = Example::Pair { context, q1, q2 };
    let g = example_graph(&bound, &mut tape, &ex, lambda, params.config().pad_id)?;
    Ok(g.breakdown(&tape))
}

/// Loss value and the gradient of `total` for every parameter tensor, in
/// declared order.
pub fn example_gradients(params: &ModelParams, example: &Example<'_>, lambda: f64) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let g = example_graph(&bound, &mut tape, example, lambda, params.config().pad_id)?;
    tape.backward(g.total)?;
    let grads = bound
        .vars()
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    Ok((g.breakdown(&tape), grads))
}
