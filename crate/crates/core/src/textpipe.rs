//! Corpus ingestion, tokenization, vocabulary construction and encoding.
//!
//! Word level: whitespace split, every ASCII punctuation character becomes
//! its own token, ASCII letters are lowercased, and every other character is
//! dropped. Character level: one token per `char`, case preserved.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numkernel::{splitmix_mix, Matrix};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const EOS: u32 = 2;
pub const NUM_SPECIALS: usize = 3;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<unk>", "<eos>"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Word,
    Char,
}

impl std::str::FromStr for Level {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(Level::Word),
            "char" => Ok(Level::Char),
            other => Err(Error::Config(format!("unknown tokenization level {other:?}"))),
        }
    }
}

pub fn is_special(id: u32) -> bool {
    (id as usize) < NUM_SPECIALS
}

/// Word tokenizer. Punctuation is the ASCII punctuation class
/// (`char::is_ascii_punctuation`).
pub fn tokenize_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_ascii_alphabetic() {
                word.push(ch.to_ascii_lowercase());
            } else if ch.is_ascii_punctuation() {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

pub fn tokenize_chars(text: &str) -> Vec<String> {
    text.chars().map(|c| c.to_string()).collect()
}

pub fn tokenize(text: &str, level: Level) -> Vec<String> {
    match level {
        Level::Word => tokenize_words(text),
        Level::Char => tokenize_chars(text),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    level: Level,
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds from a list of tokenized documents. Tokens with fewer than
    /// `min_count` occurrences are left out; the rest are ordered by
    /// frequency (descending) and then lexicographically.
    pub fn build<S: AsRef<str>>(docs: &[Vec<S>], min_count: usize, level: Level) -> Result<Self> {
        if docs.is_empty() {
            return Err(Error::Contract("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for doc in docs {
            for tok in doc {
                *counts.entry(tok.as_ref()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, n)| n >= min_count.max(1) && !SPECIAL_TOKENS.contains(&t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Ok(Self::from_tokens(level, tokens))
    }

    /// Reassembles a vocabulary from its id-ordered token list (specials first).
    pub fn from_tokens(level: Level, tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            level,
            tokens,
            index,
        }
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Maps tokens to ids (unknown tokens to UNK) and appends EOS.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).filter(|&i| !is_special(i)).unwrap_or(UNK))
            .chain(std::iter::once(EOS))
            .collect()
    }

    /// Inverse of [`Vocabulary::encode`]: stops at the first EOS.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .map(|&i| self.token(i).unwrap_or(SPECIAL_TOKENS[UNK as usize]).to_string())
            .collect()
    }

    /// SHA-256 (hex) over the level and the id-ordered token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(match self.level {
            Level::Word => b"word\0",
            Level::Char => b"char\0",
        });
        for t in &self.tokens {
            h.update((t.len() as u64).to_le_bytes());
            h.update(t.as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("vocabulary serializes");
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: Vocabulary = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.into(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        Ok(Self::from_tokens(v.level, v.tokens))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDocument {
    pub tokens: Vec<u32>,
    pub label: Option<usize>,
    pub source: String,
}

/// Real-valued sequence: one row per timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct RowSequence {
    pub rows: Matrix,
    pub label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub documents: Vec<LabeledDocument>,
    pub split: Split,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawDocument {
    pub label: Option<usize>,
    pub text: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    LabeledTsv,
    PlainLines,
    RowMatrix,
}

impl std::str::FromStr for CorpusFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "labeled-tsv" => Ok(CorpusFormat::LabeledTsv),
            "plain-lines" => Ok(CorpusFormat::PlainLines),
            "row-matrix" => Ok(CorpusFormat::RowMatrix),
            other => Err(Error::Config(format!("unknown corpus format {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RawCorpus {
    Text(Vec<RawDocument>),
    Rows(Vec<RowSequence>),
}

impl RawCorpus {
    pub fn len(&self) -> usize {
        match self {
            RawCorpus::Text(d) => d.len(),
            RawCorpus::Rows(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Reads a corpus file. When `num_classes` is given every label must be
/// below it.
pub fn load_corpus(path: &Path, format: CorpusFormat, num_classes: Option<usize>) -> Result<RawCorpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, path, format, num_classes)
}

pub fn parse_corpus(text: &str, path: &Path, format: CorpusFormat, num_classes: Option<usize>) -> Result<RawCorpus> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.into(),
        line,
        msg,
    };
    let check_label = |line: usize, s: &str| -> Result<usize> {
        let label: usize = s
            .trim()
            .parse()
            .map_err(|_| perr(line, format!("invalid label {s:?}")))?;
        if let Some(n) = num_classes {
            if label >= n {
                return Err(perr(line, format!("unknown label id {label} (num_classes {n})")));
            }
        }
        Ok(label)
    };
    match format {
        CorpusFormat::LabeledTsv => {
            let mut docs = Vec::new();
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let (label, body) = line
                    .split_once('\t')
                    .ok_or_else(|| perr(i + 1, "expected \"label<TAB>text\"".into()))?;
                docs.push(RawDocument {
                    label: Some(check_label(i + 1, label)?),
                    text: body.to_string(),
                });
            }
            Ok(RawCorpus::Text(docs))
        }
        CorpusFormat::PlainLines => Ok(RawCorpus::Text(
            text.lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| RawDocument {
                    label: None,
                    text: l.to_string(),
                })
                .collect(),
        )),
        CorpusFormat::RowMatrix => {
            let mut seqs = Vec::new();
            let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
            while let Some((i, header)) = lines.next() {
                let fields: Vec<&str> = header.split_whitespace().collect();
                if fields.first() != Some(&"ROWS") || !(3..=4).contains(&fields.len()) {
                    return Err(perr(i + 1, "expected \"ROWS <seq_len> <row_dim> [label]\"".into()));
                }
                let dim = |s: &str| -> Result<usize> {
                    s.parse::<usize>()
                        .ok()
                        .filter(|&n| n > 0)
                        .ok_or_else(|| perr(i + 1, format!("invalid dimension {s:?}")))
                };
                let (seq_len, row_dim) = (dim(fields[1])?, dim(fields[2])?);
                let label = fields.get(3).map(|s| check_label(i + 1, s)).transpose()?;
                let mut data = Vec::with_capacity(seq_len * row_dim);
                for _ in 0..seq_len {
                    let (j, row) = lines
                        .next()
                        .ok_or_else(|| perr(i + 1, format!("block declares {seq_len} rows but the file ends")))?;
                    let vals: Vec<f64> = row
                        .split_whitespace()
                        .map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite()))
                        .collect::<Option<_>>()
                        .ok_or_else(|| perr(j + 1, "invalid number".into()))?;
                    if vals.len() != row_dim {
                        return Err(perr(j + 1, format!("expected {row_dim} values, found {}", vals.len())));
                    }
                    data.extend(vals);
                }
                seqs.push(RowSequence {
                    rows: Matrix::from_vec(seq_len, row_dim, data)?,
                    label,
                });
            }
            Ok(RawCorpus::Rows(seqs))
        }
    }
}

/// Tokenizes and encodes text documents against `vocab`.
pub fn encode_documents(docs: &[RawDocument], vocab: &Vocabulary, source: &str) -> Vec<LabeledDocument> {
    docs.iter()
        .map(|d| LabeledDocument {
            tokens: vocab.encode(&tokenize(&d.text, vocab.level())),
            label: d.label,
            source: source.to_string(),
        })
        .collect()
}

/// Deterministic 15% validation split keyed on the document index.
pub fn is_validation(index: usize) -> bool {
    splitmix_mix(index as u64) % 100 < 15
}

/// Splits `items` into (train, validation) using [`is_validation`].
pub fn validation_split<T: Clone>(items: &[T]) -> (Vec<T>, Vec<T>) {
    let mut train = Vec::new();
    let mut valid = Vec::new();
    for (i, x) in items.iter().enumerate() {
        if is_validation(i) {
            valid.push(x.clone());
        } else {
            train.push(x.clone());
        }
    }
    (train, valid)
}
