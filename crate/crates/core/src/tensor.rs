//! Dense `f64` tensors and a dynamic reverse-mode tape.
//!
//! A [`Tape`] is built fresh for every forward pass. Operations append nodes
//! in execution order, so the node index is already a topological order and
//! [`Tape::backward`] is a single reverse sweep. Leaves may borrow their data
//! from long-lived tensors (model weights) to avoid copying them per pass.
//!
//! Gradients accumulate: calling `backward` twice without
//! [`Tape::zero_grad`] doubles every stored gradient.

use std::borrow::Cow;

use crate::error::{Error, Result};

/// Dense row-major array with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::Shape {
                op: "from_rows",
                lhs: vec![cols],
                rhs: vec![bad.len()],
            });
        }
        Tensor::matrix(rows.len(), cols, rows.concat())
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Shape {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![g.len()],
            });
        }
        match &mut self.grad {
            Some(slot) => slot.iter_mut().zip(g).for_each(|(s, x)| *s += x),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn scale_grad(&mut self, factor: f64) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Row `i` of a matrix.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { a: Var, row: Var, cols: usize },
    Scale { a: Var, factor: f64 },
    AddConst { a: Var },
    Gelu { a: Var },
    Softmax { a: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gather { table: Var, ids: Vec<usize>, width: usize },
    SliceCols { a: Var, start: usize, cols: usize },
    ConcatCols { parts: Vec<(Var, usize)> },
    MeanPool { a: Var, rows: Vec<usize>, width: usize },
    Cosine { u: Var, v: Var, dot: f64, nu: f64, nv: f64 },
    CrossEntropy { logits: Var, picks: Vec<(usize, usize)>, probs: Vec<f64>, width: usize },
    Sum { a: Var },
}

#[derive(Debug)]
struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Degenerate-vector threshold for cosine similarity.
pub const COSINE_MIN_NORM: f64 = 1e-12;

/// Recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [f64]>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf borrowing `tensor`'s data; honours its `requires_grad` flag.
    pub fn leaf(&mut self, tensor: &'a Tensor) -> Var {
        self.push(
            tensor.shape.clone(),
            Cow::Borrowed(&tensor.data),
            Op::Leaf,
            tensor.requires_grad,
        )
    }

    /// Leaf borrowing `tensor`'s data with an explicit gradient flag.
    pub fn input(&mut self, tensor: &'a Tensor, requires_grad: bool) -> Var {
        self.push(
            tensor.shape.clone(),
            Cow::Borrowed(&tensor.data),
            Op::Leaf,
            requires_grad,
        )
    }

    /// Owned leaf.
    pub fn owned(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad;
        self.push(tensor.shape, Cow::Owned(tensor.data), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.shape, Cow::Owned(tensor.data), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor {
            shape: node.shape.clone(),
            data: node.value.to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape {
                op,
                lhs: other.to_vec(),
                rhs: vec![0, 0],
            }),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::MatMul { a, b, m, k, n }, needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(a, "transpose")?;
        let src = self.value(a);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(vec![cols, rows], Cow::Owned(out), Op::Transpose { a, rows, cols }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::Add { a, b }, needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::Mul { a, b }, needs))
    }

    /// Adds a length-`n` vector to every row of an `[m×n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "add_row")?;
        if self.shape(row) != [n] {
            return Err(Error::Shape {
                op: "add_row",
                lhs: vec![m, n],
                rhs: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row);
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + r[i % n])
            .collect();
        let needs = self.needs(a) || self.needs(row);
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::AddRow { a, row, cols: n }, needs))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * factor).collect();
        let needs = self.needs(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, Cow::Owned(out), Op::Scale { a, factor }, needs)
    }

    /// Adds a constant (non-differentiable) tensor; used for attention masks.
    pub fn add_const(&mut self, a: Var, c: &[f64]) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(Error::Shape {
                op: "add_const",
                lhs: self.shape(a).to_vec(),
                rhs: vec![c.len()],
            });
        }
        let out: Vec<f64> = self.value(a).iter().zip(c).map(|(x, y)| x + y).collect();
        let needs = self.needs(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::AddConst { a }, needs))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|&x| gelu(x)).collect();
        let needs = self.needs(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, Cow::Owned(out), Op::Gelu { a }, needs)
    }

    /// Softmax along `axis`. `-inf` entries are treated as masked out; NaN,
    /// `+inf`, or a fully masked slice is a numeric error.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                op: "softmax axis",
                index: axis,
                bound: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| o * len * inner + l * inner + i;
                let mut max = f64::NEG_INFINITY;
                for l in 0..len {
                    let v = x[at(l)];
                    if v.is_nan() || v == f64::INFINITY {
                        return Err(Error::NonFinite("softmax"));
                    }
                    max = max.max(v);
                }
                if max == f64::NEG_INFINITY {
                    return Err(Error::NonFinite("softmax"));
                }
                let mut sum = 0.0;
                for l in 0..len {
                    let e = (x[at(l)] - max).exp();
                    out[at(l)] = e;
                    sum += e;
                }
                for l in 0..len {
                    out[at(l)] /= sum;
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(shape, Cow::Owned(out), Op::Softmax { a, outer, len, inner }, needs))
    }

    /// Layer normalisation over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(Error::Shape {
            op: "layer_norm",
            lhs: vec![],
            rhs: vec![],
        })?;
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xs = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            shape,
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Selects rows of a `[n×d]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, d) = self.matrix_dims(table, "gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::Index {
                op: "gather_rows",
                index: bad,
                bound: n,
            });
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            vec![ids.len(), d],
            Cow::Owned(out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
                width: d,
            },
            needs,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "slice_cols")?;
        if start + width > n {
            return Err(Error::Index {
                op: "slice_cols",
                index: start + width,
                bound: n,
            });
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(m * width);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + width]);
        }
        let needs = self.needs(a);
        Ok(self.push(
            vec![m, width],
            Cow::Owned(out),
            Op::SliceCols { a, start, cols: n },
            needs,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Contract("concat_cols of nothing".into()))?;
        let (m, _) = self.matrix_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.matrix_dims(p, "concat_cols")?;
            if pm != m {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: vec![m],
                    rhs: vec![pm],
                });
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let parts = parts.iter().copied().zip(widths).collect();
        Ok(self.push(vec![m, total], Cow::Owned(out), Op::ConcatCols { parts }, needs))
    }

    /// Mean of the rows of `[T×d]` states where `mask` is true.
    pub fn mean_pool(&mut self, states: Var, mask: &[bool]) -> Result<Var> {
        let (t, d) = self.matrix_dims(states, "mean_pool")?;
        if mask.len() != t {
            return Err(Error::Shape {
                op: "mean_pool",
                lhs: vec![t, d],
                rhs: vec![mask.len()],
            });
        }
        let rows: Vec<usize> = (0..t).filter(|&i| mask[i]).collect();
        if rows.is_empty() {
            return Err(Error::EmptyPool("mean_pool"));
        }
        let s = self.value(states);
        let mut out = vec![0.0; d];
        for &r in &rows {
            for j in 0..d {
                out[j] += s[r * d + j];
            }
        }
        let inv = 1.0 / rows.len() as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let needs = self.needs(states);
        Ok(self.push(
            vec![d],
            Cow::Owned(out),
            Op::MeanPool {
                a: states,
                rows,
                width: d,
            },
            needs,
        ))
    }

    /// Cosine similarity of two equal-length vectors, as a scalar node.
    pub fn cosine(&mut self, u: Var, v: Var) -> Result<Var> {
        self.same_shape(u, v, "cosine")?;
        let (a, b) = (self.value(u), self.value(v));
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let nu = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        for norm in [nu, nv] {
            if norm < COSINE_MIN_NORM {
                return Err(Error::DegenerateVector { op: "cosine", norm });
            }
        }
        let c = dot / (nu * nv);
        let needs = self.needs(u) || self.needs(v);
        Ok(self.push(
            Vec::new(),
            Cow::Owned(vec![c]),
            Op::Cosine { u, v, dot, nu, nv },
            needs,
        ))
    }

    /// Mean token cross-entropy of `[T×V]` logits against `targets`,
    /// skipping positions whose target is `pad_id`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], pad_id: u32) -> Result<Var> {
        let (t, v) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != t {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![t, v],
                rhs: vec![targets.len()],
            });
        }
        let mut picks = Vec::new();
        for (row, &tok) in targets.iter().enumerate() {
            if tok == pad_id {
                continue;
            }
            if tok as usize >= v {
                return Err(Error::Index {
                    op: "cross_entropy target",
                    index: tok as usize,
                    bound: v,
                });
            }
            picks.push((row, tok as usize));
        }
        if picks.is_empty() {
            return Err(Error::EmptyPool("cross_entropy"));
        }
        let x = self.value(logits);
        let mut probs = Vec::with_capacity(picks.len() * v);
        let mut total = 0.0;
        for &(row, tok) in &picks {
            let r = &x[row * v..(row + 1) * v];
            let lsm = log_softmax(r);
            if lsm.iter().any(|l| l.is_nan()) {
                return Err(Error::NonFinite("cross_entropy"));
            }
            total -= lsm[tok];
            probs.extend(lsm.iter().map(|l| l.exp()));
        }
        let loss = total / picks.len() as f64;
        let needs = self.needs(logits);
        Ok(self.push(
            Vec::new(),
            Cow::Owned(vec![loss]),
            Op::CrossEntropy {
                logits,
                picks,
                probs,
                width: v,
            },
            needs,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let needs = self.needs(a);
        self.push(Vec::new(), Cow::Owned(vec![s]), Op::Sum { a }, needs)
    }

    /// Reverse sweep from a scalar `loss`, accumulating into every node that
    /// needs a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.shape(loss).to_vec(),
                rhs: Vec::new(),
            });
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            self.propagate(id, &g, &mut adj);
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(slot) => slot.iter_mut().zip(&g).for_each(|(s, x)| *s += x),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &nodes[id].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(a, &mut |s| matmul_a_bt_acc(g, bv, s, m, n, k));
                acc(b, &mut |s| matmul_at_b_acc(av, g, s, m, k, n));
            }
            &Op::Transpose { a, rows, cols } => acc(a, &mut |s| {
                for i in 0..rows {
                    for j in 0..cols {
                        s[i * cols + j] += g[j * rows + i];
                    }
                }
            }),
            &Op::Add { a, b } => {
                acc(a, &mut |s| add_into(s, g));
                acc(b, &mut |s| add_into(s, g));
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * bv[i];
                    }
                });
                acc(b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * av[i];
                    }
                });
            }
            &Op::AddRow { a, row, cols } => {
                acc(a, &mut |s| add_into(s, g));
                acc(row, &mut |s| {
                    for (i, gi) in g.iter().enumerate() {
                        s[i % cols] += gi;
                    }
                });
            }
            &Op::Scale { a, factor } => acc(a, &mut |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * factor;
                }
            }),
            &Op::AddConst { a } => acc(a, &mut |s| add_into(s, g)),
            &Op::Gelu { a } => {
                let x = &nodes[a.0].value;
                acc(a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * gelu_grad(x[i]);
                    }
                })
            }
            &Op::Softmax { a, outer, len, inner } => {
                let y = &nodes[id].value;
                acc(a, &mut |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| o * len * inner + l * inner + i;
                            let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                s[at(l)] += y[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                })
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = nodes[gain.0].value.len();
                let gv = &nodes[gain.0].value;
                let rows = inv_std.len();
                acc(*x, &mut |s| {
                    let mut dh = vec![0.0; d];
                    for r in 0..rows {
                        let off = r * d;
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            dh[j] = g[off + j] * gv[j];
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * xhat[off + j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            s[off + j] += inv_std[r] * (dh[j] - mean_dh - xhat[off + j] * mean_dh_h);
                        }
                    }
                });
                acc(*gain, &mut |s| {
                    for (i, gi) in g.iter().enumerate() {
                        s[i % d] += gi * xhat[i];
                    }
                });
                acc(*bias, &mut |s| {
                    for (i, gi) in g.iter().enumerate() {
                        s[i % d] += gi;
                    }
                });
            }
            Op::Gather { table, ids, width } => acc(*table, &mut |s| {
                for (r, &i) in ids.iter().enumerate() {
                    add_into(&mut s[i * width..(i + 1) * width], &g[r * width..(r + 1) * width]);
                }
            }),
            &Op::SliceCols { a, start, cols } => {
                let width = nodes[id].shape[1];
                let m = nodes[id].shape[0];
                acc(a, &mut |s| {
                    for i in 0..m {
                        add_into(
                            &mut s[i * cols + start..i * cols + start + width],
                            &g[i * width..(i + 1) * width],
                        );
                    }
                })
            }
            Op::ConcatCols { parts } => {
                let (m, total) = (nodes[id].shape[0], nodes[id].shape[1]);
                let mut offset = 0;
                for &(p, w) in parts {
                    acc(p, &mut |s| {
                        for i in 0..m {
                            add_into(&mut s[i * w..(i + 1) * w], &g[i * total + offset..i * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::MeanPool { a, rows, width } => {
                let inv = 1.0 / rows.len() as f64;
                acc(*a, &mut |s| {
                    for &r in rows {
                        for j in 0..*width {
                            s[r * width + j] += g[j] * inv;
                        }
                    }
                })
            }
            &Op::Cosine { u, v, dot, nu, nv } => {
                let (uv, vv) = (&nodes[u.0].value, &nodes[v.0].value);
                let c = dot / (nu * nv);
                acc(u, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[0] * (vv[i] / (nu * nv) - c * uv[i] / (nu * nu));
                    }
                });
                acc(v, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[0] * (uv[i] / (nu * nv) - c * vv[i] / (nv * nv));
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                picks,
                probs,
                width,
            } => {
                let scale = g[0] / picks.len() as f64;
                acc(*logits, &mut |s| {
                    for (k, &(row, tok)) in picks.iter().enumerate() {
                        let p = &probs[k * width..(k + 1) * width];
                        let dst = &mut s[row * width..(row + 1) * width];
                        for j in 0..*width {
                            dst[j] += scale * p[j];
                        }
                        dst[tok] -= scale;
                    }
                })
            }
            &Op::Sum { a } => acc(a, &mut |s| s.iter_mut().for_each(|x| *x += g[0])),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Numerically stable log-softmax of one row. `-inf` entries stay `-inf`.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// `out[m×n] = a[m×k] · b[k×n]`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`.
fn matmul_a_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`.
fn matmul_at_b_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn tensor_rejects_bad_shape() {
        assert!(matches!(Tensor::new(vec![2, 2], vec![1.0; 3]), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_identity_and_dot() {
        let id = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = m(&[&[3.0, 4.0], &[5.0, 6.0]]);
        let mut t = Tape::new();
        let (x, y) = (t.leaf(&id), t.leaf(&b));
        let z = t.matmul(x, y).unwrap();
        assert_eq!(t.value(z), &[3.0, 4.0, 5.0, 6.0]);

        let r = m(&[&[1.0, 2.0]]);
        let c = m(&[&[3.0], &[4.0]]);
        let (x, y) = (t.leaf(&r), t.leaf(&c));
        let z = t.matmul(x, y).unwrap();
        assert_eq!(t.value(z), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        let mut t = Tape::new();
        let (x, y) = (t.leaf(&a), t.leaf(&b));
        match t.matmul(x, y) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let cases: [(Vec<f64>, Vec<f64>); 3] = [
            (vec![0.0, 0.0], vec![0.5, 0.5]),
            (vec![1000.0, 1000.0], vec![0.5, 0.5]),
            (vec![0.0, 3f64.ln()], vec![0.25, 0.75]),
        ];
        for (input, want) in cases {
            let x = t.constant(Tensor::vector(input));
            let y = t.softmax(x, 0).unwrap();
            for (a, b) in t.value(y).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn softmax_along_first_axis() {
        let x = m(&[&[0.0, 1.0], &[0.0, 1.0]]);
        let mut t = Tape::new();
        let v = t.leaf(&x);
        let y = t.softmax(v, 0).unwrap();
        assert_eq!(t.value(y), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_nan_and_fully_masked_rows() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![f64::NAN, 0.0]));
        assert!(matches!(t.softmax(x, 0), Err(Error::NonFinite(_))));
        let x = t.constant(Tensor::vector(vec![f64::NEG_INFINITY; 2]));
        assert!(matches!(t.softmax(x, 0), Err(Error::NonFinite(_))));
        let x = t.constant(Tensor::vector(vec![f64::NEG_INFINITY, 0.0]));
        let y = t.softmax(x, 0).unwrap();
        assert_eq!(t.value(y), &[0.0, 1.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::new();
        let g = t.constant(Tensor::vector(vec![1.0; 3]));
        let b = t.constant(Tensor::vector(vec![0.0; 3]));
        let x = t.constant(Tensor::vector(vec![5.0; 3]));
        let y = t.layer_norm(x, g, b, 1e-6).unwrap();
        assert_eq!(t.value(y), &[0.0, 0.0, 0.0]);

        let g = t.constant(Tensor::vector(vec![1.0; 2]));
        let b = t.constant(Tensor::vector(vec![0.0; 2]));
        let x = t.constant(Tensor::vector(vec![1.0, 3.0]));
        let y = t.layer_norm(x, g, b, 1e-6).unwrap();
        let want = [-1.0 / (1.0f64 + 1e-6).sqrt(), 1.0 / (1.0f64 + 1e-6).sqrt()];
        for (a, w) in t.value(y).iter().zip(want) {
            assert!((a - w).abs() < 1e-12);
        }
        assert!((t.value(y)[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn mean_pool_examples() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[1.0, 2.0, 3.0]]));
        let p = t.mean_pool(x, &[true]).unwrap();
        assert_eq!(t.value(p), &[1.0, 2.0, 3.0]);

        let x = t.constant(m(&[&[0.0, 0.0], &[2.0, 4.0]]));
        let p = t.mean_pool(x, &[true, true]).unwrap();
        assert_eq!(t.value(p), &[1.0, 2.0]);
        let p = t.mean_pool(x, &[true, false]).unwrap();
        assert_eq!(t.value(p), &[0.0, 0.0]);
        assert!(matches!(t.mean_pool(x, &[false, false]), Err(Error::EmptyPool(_))));
    }

    #[test]
    fn cosine_examples() {
        let mut t = Tape::new();
        let mut cos = |a: Vec<f64>, b: Vec<f64>| {
            let u = t.constant(Tensor::vector(a));
            let v = t.constant(Tensor::vector(b));
            t.cosine(u, v).map(|c| t.scalar(c))
        };
        assert!((cos(vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cos(vec![1.0, 0.0], vec![0.0, 1.0]).unwrap(), 0.0);
        assert!((cos(vec![1.0, 1.0], vec![1.0, 0.0]).unwrap() - 0.707_106_781_186_547_5).abs() < 1e-6);
        assert!(matches!(
            cos(vec![0.0, 0.0], vec![1.0, 0.0]),
            Err(Error::DegenerateVector { .. })
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut t = Tape::new();
        let mut logits = vec![0.0; 4];
        logits[2] = 1e6;
        let x = t.constant(Tensor::matrix(1, 4, logits).unwrap());
        let l = t.cross_entropy(x, &[2], 0).unwrap();
        assert!(t.scalar(l).abs() < 1e-12);

        let x = t.constant(Tensor::zeros(vec![3, 4]));
        let l = t.cross_entropy(x, &[1, 2, 3], 0).unwrap();
        assert!((t.scalar(l) - 4f64.ln()).abs() < 1e-12);

        assert!(matches!(t.cross_entropy(x, &[0, 0, 0], 0), Err(Error::EmptyPool(_))));
        assert!(matches!(t.cross_entropy(x, &[1, 9, 1], 0), Err(Error::Index { .. })));
    }

    #[test]
    fn backward_examples_and_accumulation() {
        let x = Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap().with_requires_grad(true);
        let mut t = Tape::new();
        let v = t.leaf(&x);
        let s = t.sum(v);
        t.backward(s).unwrap();
        assert_eq!(t.grad(v).unwrap(), &[1.0; 6]);
        t.backward(s).unwrap();
        assert_eq!(t.grad(v).unwrap(), &[2.0; 6]);
        t.zero_grad();
        assert!(t.grad(v).is_none());

        let x = Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true);
        let mut t = Tape::new();
        let v = t.leaf(&x);
        let sq = t.mul(v, v).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        assert_eq!(t.grad(v).unwrap(), &[2.0, 4.0]);
        assert!(matches!(t.backward(sq), Err(Error::Shape { .. })));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let mut t = Tape::new();
        let v = t.leaf(&x);
        let s = t.sum(v);
        t.backward(s).unwrap();
        assert!(t.grad(v).is_none());
    }

    #[test]
    fn tensor_grad_slot_accumulates() {
        let mut x = Tensor::zeros(vec![2]);
        x.accumulate_grad(&[1.0, 2.0]).unwrap();
        x.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(x.grad().unwrap(), &[2.0, 4.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
        assert!(x.accumulate_grad(&[1.0]).is_err());
    }
}
