//! Miniature pre-layer-norm transformer encoder-decoder.
//!
//! The forward pass is written once against a [`Tape`]; the value-level
//! functions ([`ModelParams::encode`], [`ModelParams::decode_teacher_forced`],
//! ...) run it on a throwaway tape with the weights bound as constants.
//! Training binds the same weights as differentiable leaves instead.

mod checkpoint;
mod layout;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, BOS_ID, EOS_ID, PAD_ID};
use crate::error::{Error, Result};
use crate::tensor::{log_softmax, Tape, Tensor, Var};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
use layout::{AttnIds, Layout, LinearIds, NormIds};

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub pad_id: TokenId,
    pub bos_id: TokenId,
    pub eos_id: TokenId,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            d_model: 32,
            n_heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            d_ff: 64,
            max_len: 64,
            pad_id: PAD_ID,
            bos_id: BOS_ID,
            eos_id: EOS_ID,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return bad("encoder and decoder need at least one layer".into());
        }
        if self.max_len < 2 {
            return bad(format!("max_len {} must be at least 2", self.max_len));
        }
        if self.d_ff == 0 {
            return bad("d_ff must be positive".into());
        }
        let specials = [self.pad_id, self.bos_id, self.eos_id];
        if specials.iter().any(|&s| s as usize >= self.vocab_size) {
            return bad(format!("special token ids {specials:?} must be below vocab_size {}", self.vocab_size));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// All learnable weights, stored flat in a fixed declared order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    layout: Layout,
    tensors: Vec<Tensor>,
}

/// Encoder states for one context.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub states: Tensor,
    pub source_mask: Vec<bool>,
}

/// Teacher-forced decoder pass for one target question.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderTrace {
    /// Residual stream after each decoder block, each `[m×d_model]`.
    pub layer_states: Vec<Tensor>,
    pub logits: Tensor,
    /// Prediction targets (`question ++ [EOS]`).
    pub targets: Vec<TokenId>,
    /// True where the target is not PAD.
    pub target_mask: Vec<bool>,
    /// True where the decoder input is a question token (not BOS, not PAD).
    pub pool_mask: Vec<bool>,
}

impl ModelParams {
    /// Deterministic initialisation: weights ~ N(0, 0.02²), layer-norm gains 1,
    /// biases 0.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let tensors = layout
            .specs()
            .iter()
            .map(|spec| {
                let n: usize = spec.shape.iter().product();
                let data = match spec.init {
                    layout::Init::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                    layout::Init::Ones => vec![1.0; n],
                    layout::Init::Zeros => vec![0.0; n],
                };
                Tensor::new(spec.shape.clone(), data).expect("layout shapes are consistent")
            })
            .collect();
        Ok(ModelParams {
            config: config.clone(),
            layout,
            tensors,
        })
    }

    pub(crate) fn from_parts(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if tensors.len() != layout.specs().len() {
            return Err(Error::Version(format!(
                "expected {} tensors for this config, found {}",
                layout.specs().len(),
                tensors.len()
            )));
        }
        for (t, spec) in tensors.iter().zip(layout.specs()) {
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Version(format!(
                    "tensor {} has shape {:?}, config implies {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(ModelParams { config, layout, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Tensor names in declared order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.layout.specs().iter().map(|s| s.name.as_str())
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Binds every weight to `tape` as a leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, requires_grad: bool) -> Bound<'a> {
        let vars = self.tensors.iter().map(|t| tape.input(t, requires_grad)).collect();
        Bound { params: self, vars }
    }

    fn check_ids(&self, ids: &[TokenId], what: &'static str) -> Result<()> {
        if ids.len() > self.config.max_len {
            return Err(Error::Length {
                what,
                len: ids.len(),
                limit: self.config.max_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::Index {
                op: what,
                index: bad as usize,
                bound: self.config.vocab_size,
            });
        }
        Ok(())
    }

    pub fn encode(&self, context: &[TokenId]) -> Result<EncoderOutput> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let enc = bound.encode(&mut tape, context)?;
        Ok(EncoderOutput {
            states: tape.tensor(enc.states),
            source_mask: enc.mask,
        })
    }

    pub fn decode_teacher_forced(&self, enc: &EncoderOutput, target: &[TokenId]) -> Result<DecoderTrace> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let enc_graph = EncodedGraph {
            states: tape.input(&enc.states, false),
            mask: enc.source_mask.clone(),
        };
        let trace = bound.decode_teacher_forced(&mut tape, &enc_graph, target)?;
        Ok(DecoderTrace {
            layer_states: trace.layer_states.iter().map(|&v| tape.tensor(v)).collect(),
            logits: tape.tensor(trace.logits),
            targets: trace.targets,
            target_mask: trace.target_mask,
            pool_mask: trace.pool_mask,
        })
    }

    /// Log-probabilities of the next token after `prefix` (which starts with BOS).
    pub fn decode_step(&self, enc: &EncoderOutput, prefix: &[TokenId]) -> Result<Vec<f64>> {
        if prefix.first() != Some(&self.config.bos_id) {
            return Err(Error::Contract("decode prefix must start with BOS".into()));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let enc_graph = EncodedGraph {
            states: tape.input(&enc.states, false),
            mask: enc.source_mask.clone(),
        };
        let (_, logits) = bound.decoder(&mut tape, &enc_graph, prefix)?;
        let v = self.config.vocab_size;
        let last = &tape.value(logits)[(prefix.len() - 1) * v..];
        Ok(log_softmax(last))
    }

    /// Final layer norm followed by the vocabulary projection.
    pub fn cg_head(&self, states: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.input(states, false);
        let logits = bound.cg_head(&mut tape, x)?;
        Ok(tape.tensor(logits))
    }

    /// `Σ_t log p(y_t | y_<t, c)` over the non-pad targets `question ++ [EOS]`.
    pub fn sequence_log_likelihood(&self, context: &[TokenId], question: &[TokenId]) -> Result<f64> {
        let enc = self.encode(context)?;
        let trace = self.decode_teacher_forced(&enc, question)?;
        let v = self.config.vocab_size;
        let mut total = 0.0;
        for (row, (&tok, &keep)) in trace.targets.iter().zip(&trace.target_mask).enumerate() {
            if keep {
                total += log_softmax(trace.logits.row(row))[tok as usize];
            }
        }
        debug_assert_eq!(trace.logits.numel(), trace.targets.len() * v);
        Ok(total)
    }
}

/// Encoder result on a tape.
#[derive(Debug, Clone)]
pub struct EncodedGraph {
    pub states: Var,
    pub mask: Vec<bool>,
}

/// Teacher-forced decoder result on a tape.
#[derive(Debug, Clone)]
pub struct TraceGraph {
    pub layer_states: Vec<Var>,
    pub logits: Var,
    pub targets: Vec<TokenId>,
    pub target_mask: Vec<bool>,
    pub pool_mask: Vec<bool>,
}

/// Model weights bound to a tape.
pub struct Bound<'a> {
    params: &'a ModelParams,
    vars: Vec<Var>,
}

impl<'a> Bound<'a> {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn cfg(&self) -> &ModelConfig {
        &self.params.config
    }

    fn layout(&self) -> &Layout {
        &self.params.layout
    }

    fn var(&self, id: layout::ParamId) -> Var {
        self.vars[id.0]
    }

    fn linear(&self, tape: &mut Tape<'a>, x: Var, ids: LinearIds) -> Result<Var> {
        let y = tape.matmul(x, self.var(ids.weight))?;
        tape.add_row(y, self.var(ids.bias))
    }

    fn norm(&self, tape: &mut Tape<'a>, x: Var, ids: NormIds) -> Result<Var> {
        tape.layer_norm(x, self.var(ids.gain), self.var(ids.bias), LAYER_NORM_EPS)
    }

    /// Multi-head attention; `mask` is an additive `[Tq×Tk]` mask.
    fn attention(&self, tape: &mut Tape<'a>, query: Var, memory: Var, ids: &AttnIds, mask: &[f64]) -> Result<Var> {
        let q = self.linear(tape, query, ids.query)?;
        let k = self.linear(tape, memory, ids.key)?;
        let v = self.linear(tape, memory, ids.value)?;
        let dh = self.cfg().head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg().n_heads);
        for h in 0..self.cfg().n_heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let scores = tape.add_const(scores, mask)?;
            let probs = tape.softmax(scores, 1)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let joined = tape.concat_cols(&heads)?;
        self.linear(tape, joined, ids.output)
    }

    fn embed(&self, tape: &mut Tape<'a>, ids: &[TokenId]) -> Result<Var> {
        let tok: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let pos: Vec<usize> = (0..ids.len()).collect();
        let t = tape.gather_rows(self.var(self.layout().token_embedding), &tok)?;
        let p = tape.gather_rows(self.var(self.layout().positions), &pos)?;
        tape.add(t, p)
    }

    fn feed_forward(&self, tape: &mut Tape<'a>, x: Var, up: LinearIds, down: LinearIds) -> Result<Var> {
        let h = self.linear(tape, x, up)?;
        let h = tape.gelu(h);
        self.linear(tape, h, down)
    }

    pub fn encode(&self, tape: &mut Tape<'a>, context: &[TokenId]) -> Result<EncodedGraph> {
        self.params.check_ids(context, "context")?;
        let pad = self.cfg().pad_id;
        let mask: Vec<bool> = context.iter().map(|&t| t != pad).collect();
        if !mask.iter().any(|&m| m) {
            return Err(Error::Length {
                what: "context (non-pad tokens)",
                len: 0,
                limit: self.cfg().max_len,
            });
        }
        let n = context.len();
        let key_mask: Vec<f64> = (0..n * n)
            .map(|i| if mask[i % n] { 0.0 } else { f64::NEG_INFINITY })
            .collect();
        let layout = self.layout();
        let mut x = self.embed(tape, context)?;
        for layer in &layout.encoder {
            let h = self.norm(tape, x, layer.attn_norm)?;
            let a = self.attention(tape, h, h, &layer.attn, &key_mask)?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, x, layer.ff_norm)?;
            let f = self.feed_forward(tape, h, layer.ff_up, layer.ff_down)?;
            x = tape.add(x, f)?;
        }
        let states = self.norm(tape, x, layout.encoder_norm)?;
        Ok(EncodedGraph { states, mask })
    }

    /// Runs the decoder stack on `inputs` (BOS-prefixed). Returns each block's
    /// output and the CG-head logits.
    pub fn decoder(&self, tape: &mut Tape<'a>, enc: &EncodedGraph, inputs: &[TokenId]) -> Result<(Vec<Var>, Var)> {
        self.params.check_ids(inputs, "decoder input")?;
        if inputs.is_empty() {
            return Err(Error::Length {
                what: "decoder input",
                len: 0,
                limit: self.cfg().max_len,
            });
        }
        let m = inputs.len();
        let n = enc.mask.len();
        let causal: Vec<f64> = (0..m * m)
            .map(|i| if i % m <= i / m { 0.0 } else { f64::NEG_INFINITY })
            .collect();
        let cross: Vec<f64> = (0..m * n)
            .map(|i| if enc.mask[i % n] { 0.0 } else { f64::NEG_INFINITY })
            .collect();
        let layout = self.layout();
        let mut x = self.embed(tape, inputs)?;
        let mut states = Vec::with_capacity(layout.decoder.len());
        for layer in &layout.decoder {
            let h = self.norm(tape, x, layer.self_norm)?;
            let a = self.attention(tape, h, h, &layer.self_attn, &causal)?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, x, layer.cross_norm)?;
            let c = self.attention(tape, h, enc.states, &layer.cross_attn, &cross)?;
            x = tape.add(x, c)?;
            let h = self.norm(tape, x, layer.ff_norm)?;
            let f = self.feed_forward(tape, h, layer.ff_up, layer.ff_down)?;
            x = tape.add(x, f)?;
            states.push(x);
        }
        let logits = self.cg_head(tape, x)?;
        Ok((states, logits))
    }

    pub fn cg_head(&self, tape: &mut Tape<'a>, states: Var) -> Result<Var> {
        let h = self.norm(tape, states, self.layout().head_norm)?;
        self.linear(tape, h, self.layout().head)
    }

    /// Decoder input `[BOS] ++ question`, prediction target `question ++ [EOS]`.
    pub fn decode_teacher_forced(&self, tape: &mut Tape<'a>, enc: &EncodedGraph, question: &[TokenId]) -> Result<TraceGraph> {
        if question.is_empty() {
            return Err(Error::Length {
                what: "target question",
                len: 0,
                limit: self.cfg().max_len - 1,
            });
        }
        let cfg = self.cfg();
        let mut inputs = Vec::with_capacity(question.len() + 1);
        inputs.push(cfg.bos_id);
        inputs.extend_from_slice(question);
        let mut targets = question.to_vec();
        targets.push(cfg.eos_id);
        let (layer_states, logits) = self.decoder(tape, enc, &inputs)?;
        let target_mask = targets.iter().map(|&t| t != cfg.pad_id).collect();
        let pool_mask = inputs.iter().map(|&t| t != cfg.pad_id && t != cfg.bos_id).collect();
        Ok(TraceGraph {
            layer_states,
            logits,
            targets,
            target_mask,
            pool_mask,
        })
    }
}
