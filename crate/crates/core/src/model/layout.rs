//! Declared order, names and shapes of every weight tensor.

use super::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Init {
    Normal,
    Ones,
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct LinearIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct NormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct AttnIds {
    pub query: LinearIds,
    pub key: LinearIds,
    pub value: LinearIds,
    pub output: LinearIds,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct EncoderLayerIds {
    pub attn_norm: NormIds,
    pub attn: AttnIds,
    pub ff_norm: NormIds,
    pub ff_up: LinearIds,
    pub ff_down: LinearIds,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct DecoderLayerIds {
    pub self_norm: NormIds,
    pub self_attn: AttnIds,
    pub cross_norm: NormIds,
    pub cross_attn: AttnIds,
    pub ff_norm: NormIds,
    pub ff_up: LinearIds,
    pub ff_down: LinearIds,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    specs: Vec<ParamSpec>,
    pub token_embedding: ParamId,
    pub positions: ParamId,
    pub encoder: Vec<EncoderLayerIds>,
    pub encoder_norm: NormIds,
    pub decoder: Vec<DecoderLayerIds>,
    pub head_norm: NormIds,
    pub head: LinearIds,
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> ParamId {
        self.specs.push(ParamSpec { name, shape, init });
        ParamId(self.specs.len() - 1)
    }

    fn linear(&mut self, prefix: &str, input: usize, output: usize) -> LinearIds {
        LinearIds {
            weight: self.push(format!("{prefix}.weight"), vec![input, output], Init::Normal),
            bias: self.push(format!("{prefix}.bias"), vec![output], Init::Zeros),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIds {
        NormIds {
            gain: self.push(format!("{prefix}.gain"), vec![d], Init::Ones),
            bias: self.push(format!("{prefix}.bias"), vec![d], Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIds {
        AttnIds {
            query: self.linear(&format!("{prefix}.query"), d, d),
            key: self.linear(&format!("{prefix}.key"), d, d),
            value: self.linear(&format!("{prefix}.value"), d, d),
            output: self.linear(&format!("{prefix}.output"), d, d),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let mut b = Builder { specs: Vec::new() };
        let token_embedding = b.push("token_embedding".into(), vec![cfg.vocab_size, d], Init::Normal);
        let positions = b.push("positions".into(), vec![cfg.max_len, d], Init::Normal);
        let encoder = (0..cfg.enc_layers)
            .map(|l| {
                let p = format!("encoder.{l}");
                EncoderLayerIds {
                    attn_norm: b.norm(&format!("{p}.attn_norm"), d),
                    attn: b.attn(&format!("{p}.attn"), d),
                    ff_norm: b.norm(&format!("{p}.ff_norm"), d),
                    ff_up: b.linear(&format!("{p}.ff_up"), d, cfg.d_ff),
                    ff_down: b.linear(&format!("{p}.ff_down"), cfg.d_ff, d),
                }
            })
            .collect();
        let encoder_norm = b.norm("encoder.norm", d);
        let decoder = (0..cfg.dec_layers)
            .map(|l| {
                let p = format!("decoder.{l}");
                DecoderLayerIds {
                    self_norm: b.norm(&format!("{p}.self_norm"), d),
                    self_attn: b.attn(&format!("{p}.self_attn"), d),
                    cross_norm: b.norm(&format!("{p}.cross_norm"), d),
                    cross_attn: b.attn(&format!("{p}.cross_attn"), d),
                    ff_norm: b.norm(&format!("{p}.ff_norm"), d),
                    ff_up: b.linear(&format!("{p}.ff_up"), d, cfg.d_ff),
                    ff_down: b.linear(&format!("{p}.ff_down"), cfg.d_ff, d),
                }
            })
            .collect();
        let head_norm = b.norm("head.norm", d);
        let head = b.linear("head.proj", d, cfg.vocab_size);
        Layout {
            specs: b.specs,
            token_embedding,
            positions,
            encoder,
            encoder_norm,
            decoder,
            head_norm,
            head,
        }
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }
}
