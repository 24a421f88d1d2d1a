//! Product/question records, tokenization, vocabulary, JSONL I/O and splits.

mod synth;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synth::{synth_corpus, ProductTypeSpec, TemplateLibrary};

pub type TokenId = u32;

pub const PAD_ID: TokenId = 0;
pub const BOS_ID: TokenId = 1;
pub const EOS_ID: TokenId = 2;
pub const UNK_ID: TokenId = 3;
pub const NUM_RESERVED: usize = 4;
const RESERVED: [&str; NUM_RESERVED] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// One product: its context (title + description) and gold question set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductRecord {
    pub product_id: String,
    pub context: String,
    pub questions: Vec<String>,
}

/// Lowercases, splits on whitespace and makes every punctuation character a
/// token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() {
            current.push(c);
            continue;
        }
        if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
        if !c.is_whitespace() {
            tokens.push(c.to_string());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Joins tokens with spaces, attaching closing punctuation to the left.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for tok in tokens {
        let tok = tok.as_ref();
        let attach = matches!(tok, "?" | "." | "," | "!" | ";" | ":" | ")");
        if !out.is_empty() && !attach {
            out.push(' ');
        }
        out.push_str(tok);
    }
    out
}

/// Word-level vocabulary. Ids 0..4 are PAD, BOS, EOS, UNK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds from records' contexts and questions, keeping tokens seen at
    /// least `min_count` times, ordered by (frequency desc, token asc).
    pub fn build(records: &[ProductRecord], min_count: usize) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for r in records {
            for text in std::iter::once(&r.context).chain(&r.questions) {
                for tok in tokenize(text) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut entries: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(tok, c)| *c >= min_count.max(1) && !RESERVED.contains(&tok.as_str()))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Vocab::from_tokens(entries.into_iter().map(|(t, _)| t)))
    }

    fn from_tokens(words: impl IntoIterator<Item = String>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == NUM_RESERVED
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Text for `ids`, dropping PAD/BOS/EOS.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&id| !matches!(id, PAD_ID | BOS_ID | EOS_ID))
            .map(|&id| self.token(id).unwrap_or("<unk>"))
            .collect();
        detokenize(&words)
    }

    /// Writes non-reserved tokens one per line; line `n` (0-based) holds id `n + 4`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for tok in &self.tokens[NUM_RESERVED..] {
            body.push_str(tok);
            body.push('\n');
        }
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let words: Vec<String> = text.lines().map(str::to_string).collect();
        for (line, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Schema {
                    path: path.to_path_buf(),
                    line: line + 1,
                    message: format!("invalid vocabulary token {w:?}"),
                });
            }
        }
        Ok(Vocab::from_tokens(words))
    }
}

/// A product with tokenized context and questions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedProduct {
    pub product_id: String,
    pub context: Vec<TokenId>,
    pub questions: Vec<Vec<TokenId>>,
}

/// Encodes records, rejecting contexts longer than `max_len` and questions
/// that would not fit the decoder (question + BOS/EOS framing).
pub fn encode_corpus(records: &[ProductRecord], vocab: &Vocab, max_len: usize) -> Result<Vec<EncodedProduct>> {
    records
        .iter()
        .map(|r| {
            let context = vocab.encode(&r.context);
            if context.is_empty() || context.len() > max_len {
                return Err(Error::Data(format!(
                    "product {}: context has {} tokens (allowed 1..={max_len})",
                    r.product_id,
                    context.len()
                )));
            }
            let questions = r
                .questions
                .iter()
                .map(|q| {
                    let ids = vocab.encode(q);
                    if ids.is_empty() || ids.len() + 1 > max_len {
                        return Err(Error::Data(format!(
                            "product {}: question {q:?} has {} tokens (allowed 1..={})",
                            r.product_id,
                            ids.len(),
                            max_len - 1
                        )));
                    }
                    Ok(ids)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(EncodedProduct {
                product_id: r.product_id.clone(),
                context,
                questions,
            })
        })
        .collect()
}

/// Reads JSON-lines product records. Blank lines are skipped.
pub fn load_jsonl(path: &Path) -> Result<Vec<ProductRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let schema = |message: String| Error::Schema {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let record: ProductRecord = serde_json::from_str(&line).map_err(|e| schema(e.to_string()))?;
        validate_record(&record).map_err(schema)?;
        out.push(record);
    }
    Ok(out)
}

fn validate_record(r: &ProductRecord) -> std::result::Result<(), String> {
    if r.questions.is_empty() {
        return Err(format!("product {} has no questions", r.product_id));
    }
    if let Some(q) = r.questions.iter().find(|q| tokenize(q).is_empty()) {
        return Err(format!("product {} has an empty question {q:?}", r.product_id));
    }
    Ok(())
}

pub fn save_jsonl(records: &[ProductRecord], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Product-disjoint train/validation/test partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitCorpus {
    pub train: Vec<ProductRecord>,
    pub validation: Vec<ProductRecord>,
    pub test: Vec<ProductRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl SplitCorpus {
    pub fn get(&self, which: SplitName) -> &[ProductRecord] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Validation => &self.validation,
            SplitName::Test => &self.test,
        }
    }
}

/// Seeded shuffle, then 80/10/10 by product. Validation and test each get
/// `floor(n / 10)` products; training takes the rest.
pub fn split(records: &[ProductRecord], seed: u64) -> Result<SplitCorpus> {
    if records.len() < 10 {
        return Err(Error::Data(format!(
            "need at least 10 products to split, got {}",
            records.len()
        )));
    }
    let mut shuffled = records.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let tenth = records.len() / 10;
    let test = shuffled.split_off(shuffled.len() - tenth);
    let validation = shuffled.split_off(shuffled.len() - tenth);
    Ok(SplitCorpus {
        train: shuffled,
        validation,
        test,
    })
}
