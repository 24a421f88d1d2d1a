use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Radii below this are clamped before taking logs.
pub const RADIUS_FLOOR: f64 = 1e-12;
/// Cosine distances closer to zero than this are treated as exactly zero.
pub const DISTANCE_SNAP: f64 = 1e-12;

/// One embedding row per question.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: Vec<Vec<f64>>,
    dim: usize,
}

impl EmbeddingMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Data("embedding rows differ in width".into()));
        }
        if rows.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("embedding"));
        }
        Ok(EmbeddingMatrix { rows, dim })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Encoder states of each question, mean-pooled over its (non-pad) tokens.
pub fn embed_questions<Q: AsRef<[TokenId]>>(params: &ModelParams, questions: &[Q]) -> Result<EmbeddingMatrix> {
    let pad = params.config().pad_id;
    let rows = questions
        .iter()
        .map(|q| {
            let q = q.as_ref();
            if q.iter().all(|&t| t == pad) {
                return Err(Error::Data("cannot embed an empty question".into()));
            }
            let enc = params.encode(q)?;
            let d = enc.states.cols();
            let mut row = vec![0.0; d];
            let mut n = 0usize;
            for (i, &keep) in enc.source_mask.iter().enumerate() {
                if keep {
                    row.iter_mut().zip(enc.states.row(i)).for_each(|(r, x)| *r += x);
                    n += 1;
                }
            }
            row.iter_mut().for_each(|r| *r /= n as f64);
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    EmbeddingMatrix::new(rows)
}

/// Geometric mean of per-dimension population standard deviations.
pub fn e_div(embeddings: &EmbeddingMatrix) -> Result<f64> {
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::Data(format!("e_div needs at least 2 embeddings, got {n}")));
    }
    let d = embeddings.dim();
    if d == 0 {
        return Err(Error::Data("e_div needs non-empty embeddings".into()));
    }
    let mut radii = Vec::with_capacity(d);
    for j in 0..d {
        let mean = embeddings.rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var = embeddings.rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n as f64;
        radii.push(var.sqrt());
    }
    if radii.iter().all(|&r| r < RADIUS_FLOOR) {
        return Ok(0.0);
    }
    let log_mean = radii.iter().map(|r| r.max(RADIUS_FLOOR).ln()).sum::<f64>() / d as f64;
    Ok(log_mean.exp())
}

/// `1 − cos(u, v)`, snapped to 0 near zero. A zero vector is at distance 1
/// from everything except another zero vector.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let d = match (nu < RADIUS_FLOOR, nv < RADIUS_FLOOR) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 1.0,
        _ => 1.0 - dot / (nu * nv),
    };
    if d.abs() < DISTANCE_SNAP {
        0.0
    } else {
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterPoint {
    pub threshold: f64,
    pub count: usize,
}

/// Default sweep: 0.05, 0.10, ..., 0.95.
pub fn default_thresholds() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).collect()
}

/// Heights of successive average-linkage merges under cosine distance.
/// Closest pair first; ties go to the lowest cluster indices.
pub fn merge_heights(embeddings: &EmbeddingMatrix) -> Vec<f64> {
    let rows = embeddings.rows();
    let n = rows.len();
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = cosine_distance(&rows[i], &rows[j]);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let mut size = vec![1usize; n];
    let mut alive: Vec<usize> = (0..n).collect();
    let mut heights = Vec::with_capacity(n.saturating_sub(1));
    while alive.len() > 1 {
        let mut best = (f64::INFINITY, 0, 0);
        for (ai, &a) in alive.iter().enumerate() {
            for &b in &alive[ai + 1..] {
                if dist[a][b] < best.0 {
                    best = (dist[a][b], a, b);
                }
            }
        }
        let (h, a, b) = best;
        heights.push(h);
        for &c in &alive {
            if c != a && c != b {
                let d = (size[a] as f64 * dist[a][c] + size[b] as f64 * dist[b][c]) / (size[a] + size[b]) as f64;
                dist[a][c] = d;
                dist[c][a] = d;
            }
        }
        size[a] += size[b];
        alive.retain(|&c| c != b);
    }
    heights
}

/// Cluster count at each threshold: merging stops before the first merge
/// whose average-linkage distance exceeds the threshold.
pub fn cluster_count_sweep(embeddings: &EmbeddingMatrix, thresholds: &[f64]) -> Vec<ClusterPoint> {
    let heights = merge_heights(embeddings);
    let n = embeddings.len();
    thresholds
        .iter()
        .map(|&t| ClusterPoint {
            threshold: t,
            count: n - heights.iter().take_while(|&&h| h <= t).count(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> EmbeddingMatrix {
        EmbeddingMatrix::new(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn e_div_examples() {
        assert_eq!(e_div(&m(&[&[1.0, 2.0], &[1.0, 2.0]])).unwrap(), 0.0);
        assert!((e_div(&m(&[&[0.0, 0.0], &[2.0, 2.0]])).unwrap() - 1.0).abs() < 1e-12);
        assert!((e_div(&m(&[&[0.0, 0.0], &[2.0, 8.0]])).unwrap() - 2.0).abs() < 1e-12);
        assert!(e_div(&m(&[&[0.0, 0.0]])).is_err());
    }

    #[test]
    fn cluster_examples() {
        let e = m(&[&[1.0, 0.0], &[0.999, 0.01], &[0.0, 1.0], &[0.01, 0.999]]);
        let sweep = cluster_count_sweep(&e, &[0.0, 0.5, 2.0]);
        let counts: Vec<usize> = sweep.iter().map(|p| p.count).collect();
        assert_eq!(counts, vec![4, 2, 1]);
        let dup = m(&[&[1.0, 0.0], &[2.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(cluster_count_sweep(&dup, &[0.0])[0].count, 2);
    }
}
