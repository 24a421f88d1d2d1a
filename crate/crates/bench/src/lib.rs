//! Fixtures shared by the benchmarks.

use ltdqg_core::corpus::{encode_corpus, synth_corpus, EncodedProduct, TemplateLibrary, Vocab};
use ltdqg_core::model::{ModelConfig, ModelParams};

pub struct Fixture {
    pub vocab: Vocab,
    pub params: ModelParams,
    pub products: Vec<EncodedProduct>,
}

/// A default-sized model over a small synthetic corpus.
pub fn fixture(products: usize) -> Fixture {
    let records = synth_corpus(0, products, &TemplateLibrary::default()).expect("synthetic corpus");
    let vocab = Vocab::build(&records, 1).expect("vocabulary");
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        ..ModelConfig::default()
    };
    let params = ModelParams::init(&cfg, 0).expect("model");
    let products = encode_corpus(&records, &vocab, cfg.max_len).expect("encoding");
    Fixture { vocab, params, products }
}
