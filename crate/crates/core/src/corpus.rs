//! Code/query pair datasets, splits, candidate pools and the shared vocabulary.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lexing::TokenKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeQueryPair {
    pub id: String,
    pub language: String,
    pub code_tokens: Vec<String>,
    pub query_tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl CodeQueryPair {
    /// Text shown to humans: the original code when known, else the joined tokens.
    pub fn display_code(&self) -> String {
        self.raw_code.clone().unwrap_or_else(|| self.code_tokens.join(" "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" | "dev" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidInput(format!("unknown split {s:?}"))),
        }
    }
}

/// Queries plus the candidate codes they are ranked against.
#[derive(Debug, Clone, Copy)]
pub struct EvalSet<'a> {
    pub queries: &'a [CodeQueryPair],
    pub pool: &'a [CodeQueryPair],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub pairs: Vec<CodeQueryPair>,
    pub splits: Vec<Split>,
    pub candidate_pool: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub loaded: usize,
    pub skipped: usize,
}

#[derive(Deserialize)]
struct RawRecord {
    code_tokens: Vec<String>,
    docstring_tokens: Vec<String>,
    #[serde(default)]
    code: Option<String>,
    #[serde(default)]
    url: Option<String>,
    #[serde(default)]
    id: Option<serde_json::Value>,
    #[serde(default)]
    language: Option<String>,
}

/// Reads CodeSearchNet-style line-delimited JSON. A record's own `language`
/// field wins over `language`, which also prefixes the ids. Every pair is labelled
/// `train` and the candidate pool is left empty.
pub fn load_jsonl(path: &Path, language: &str) -> Result<(Corpus, LoadStats)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut stats = LoadStats::default();
    let mut pairs = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("{}:{}: skipping malformed record: {e}", path.display(), lineno + 1);
                stats.skipped += 1;
                continue;
            }
        };
        if record.code_tokens.is_empty() || record.docstring_tokens.is_empty() {
            log::warn!("{}:{}: skipping record with empty tokens", path.display(), lineno + 1);
            stats.skipped += 1;
            continue;
        }
        let source = record.url.or_else(|| {
            record.id.map(|v| match v {
                serde_json::Value::String(s) => s,
                other => other.to_string(),
            })
        });
        pairs.push(CodeQueryPair {
            id: format!("{language}:{}", lineno + 1),
            language: record.language.unwrap_or_else(|| language.to_owned()),
            code_tokens: record.code_tokens,
            query_tokens: record.docstring_tokens,
            raw_code: record.code,
            source,
        });
    }
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus {
            path: path.to_owned(),
            skipped: stats.skipped,
        });
    }
    stats.loaded = pairs.len();
    let splits = vec![Split::Train; pairs.len()];
    Ok((
        Corpus {
            pairs,
            splits,
            candidate_pool: Vec::new(),
        },
        stats,
    ))
}

impl Corpus {
    /// Builds a corpus from pairs that all share one split label.
    pub fn from_pairs(pairs: Vec<CodeQueryPair>, split: Split) -> Self {
        let splits = vec![split; pairs.len()];
        let mut corpus = Self {
            pairs,
            splits,
            candidate_pool: Vec::new(),
        };
        corpus.reset_pool();
        corpus
    }

    /// Concatenates per-split corpora, keeping their pairs in order. The pool
    /// becomes every valid and test code.
    pub fn from_splits(train: Vec<CodeQueryPair>, valid: Vec<CodeQueryPair>, test: Vec<CodeQueryPair>) -> Result<Self> {
        let mut corpus = Corpus::default();
        for (split, pairs) in [(Split::Train, train), (Split::Valid, valid), (Split::Test, test)] {
            corpus.splits.extend(std::iter::repeat_n(split, pairs.len()));
            corpus.pairs.extend(pairs);
        }
        corpus.reset_pool();
        corpus.validate()?;
        Ok(corpus)
    }

    /// Seeded random split by fractions of (valid, test); the rest is train.
    pub fn resplit(&mut self, valid_frac: f64, test_frac: f64, seed: u64) -> Result<()> {
        if !(0.0..=1.0).contains(&valid_frac) || !(0.0..=1.0).contains(&test_frac) || valid_frac + test_frac > 1.0 {
            return Err(Error::Config(format!(
                "split fractions valid={valid_frac} test={test_frac} must be in [0,1] and sum to at most 1"
            )));
        }
        let n = self.pairs.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_valid = (valid_frac * n as f64).round() as usize;
        let n_test = ((test_frac * n as f64).round() as usize).min(n - n_valid);
        for (rank, &i) in order.iter().enumerate() {
            self.splits[i] = if rank < n_valid {
                Split::Valid
            } else if rank < n_valid + n_test {
                Split::Test
            } else {
                Split::Train
            };
        }
        self.reset_pool();
        Ok(())
    }

    /// Sets the candidate pool to the codes of all valid and test pairs.
    pub fn reset_pool(&mut self) {
        self.candidate_pool = self
            .pairs
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s != Split::Train)
            .map(|(p, _)| p.id.clone())
            .collect();
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn split_pairs(&self, split: Split) -> Vec<CodeQueryPair> {
        self.pairs
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == split)
            .map(|(p, _)| p.clone())
            .collect()
    }

    pub fn pool_pairs(&self) -> Vec<CodeQueryPair> {
        let by_id: HashMap<&str, &CodeQueryPair> = self.pairs.iter().map(|p| (p.id.as_str(), p)).collect();
        self.candidate_pool
            .iter()
            .filter_map(|id| by_id.get(id.as_str()).map(|p| (*p).clone()))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.splits.len() != self.pairs.len() {
            return Err(Error::Corrupt(format!(
                "corpus has {} pairs but {} split labels",
                self.pairs.len(),
                self.splits.len()
            )));
        }
        let mut ids = HashSet::new();
        for p in &self.pairs {
            if p.code_tokens.is_empty() || p.query_tokens.is_empty() {
                return Err(Error::InvalidInput(format!("pair {} has empty tokens", p.id)));
            }
            if !ids.insert(p.id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate pair id {}", p.id)));
            }
        }
        let pool: HashSet<&str> = self.candidate_pool.iter().map(String::as_str).collect();
        if let Some(missing) = pool.iter().find(|id| !ids.contains(*id)) {
            return Err(Error::InvalidInput(format!(
                "candidate pool id {missing} is not in the corpus"
            )));
        }
        for (p, s) in self.pairs.iter().zip(&self.splits) {
            if *s == Split::Test && !pool.contains(p.id.as_str()) {
                return Err(Error::GoldMissing { query_id: p.id.clone() });
            }
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let corpus: Corpus = serde_json::from_reader(BufReader::new(file))?;
        corpus.validate()?;
        Ok(corpus)
    }
}

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const MASK: &str = "[MASK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

pub const SPECIALS: [&str; 5] = [PAD, UNK, MASK, CLS, SEP];

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
pub const CLS_ID: u32 = 3;
pub const SEP_ID: u32 = 4;

/// Number of ids that exist regardless of corpus content.
pub const RESERVED: usize = SPECIALS.len() + TokenKind::ALL.len();

const VOCAB_FORMAT: &str = "codeseek-vocab";
const VOCAB_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    format: String,
    version: u32,
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Fails unless the list starts with the reserved tokens and has no repeats.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Corrupt(format!("vocabulary repeats token {t:?}")));
            }
        }
        let reserved_ok = reserved_tokens().zip(&tokens).all(|(r, t)| r == t);
        if tokens.len() < RESERVED || !reserved_ok {
            return Err(Error::Corrupt(
                "vocabulary does not start with the reserved tokens".into(),
            ));
        }
        Ok(Self { tokens, token_to_id })
    }

    /// Specials and type tokens only.
    pub fn reserved_only() -> Self {
        Self::from_tokens(reserved_tokens().map(str::to_owned).collect()).expect("reserved tokens are distinct")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Hex SHA-256 over the ordered token list.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        format!("{:x}", h.finalize())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&VocabFile {
            format: VOCAB_FORMAT.into(),
            version: VOCAB_VERSION,
            tokens: self.tokens.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text)?;
        if file.format != VOCAB_FORMAT {
            return Err(Error::Corrupt(format!(
                "not a vocabulary file (format {:?})",
                file.format
            )));
        }
        if file.version != VOCAB_VERSION {
            return Err(Error::Version {
                what: "vocabulary",
                found: file.version,
                expected: VOCAB_VERSION,
            });
        }
        Self::from_tokens(file.tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn reserved_tokens() -> impl Iterator<Item = &'static str> {
    SPECIALS
        .into_iter()
        .chain(TokenKind::ALL.into_iter().map(TokenKind::type_token))
}

/// Reserved tokens first, then corpus tokens from both code and query streams
/// by descending frequency with lexicographic tie-break.
pub fn build_vocab(pairs: &[CodeQueryPair], max_size: usize) -> Result<Vocabulary> {
    if max_size < RESERVED + 1 {
        return Err(Error::Config(format!(
            "vocabulary size {max_size} is below the minimum {}",
            RESERVED + 1
        )));
    }
    let reserved: HashSet<&str> = reserved_tokens().collect();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for p in pairs {
        for t in p.code_tokens.iter().chain(&p.query_tokens) {
            if !reserved.contains(t.as_str()) {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let tokens = reserved_tokens()
        .map(str::to_owned)
        .chain(ranked.into_iter().take(max_size - RESERVED).map(|(t, _)| t.to_owned()))
        .collect();
    Vocabulary::from_tokens(tokens)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedTokens {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
}

impl EncodedTokens {
    pub fn attended(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }
}

/// `[CLS] tokens [SEP]`, truncated to `max_len` (keeping the trailing `[SEP]`)
/// and right-padded.
pub fn encode_tokens<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary, max_len: usize) -> EncodedTokens {
    assert!(max_len > 0, "max_len must be positive");
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    if max_len >= 2 {
        let room = max_len - 2;
        ids.extend(tokens.iter().take(room).map(|t| vocab.id(t.as_ref())));
        ids.push(SEP_ID);
    }
    let used = ids.len();
    ids.resize(max_len, PAD_ID);
    let mut mask = vec![1u8; used];
    mask.resize(max_len, 0);
    EncodedTokens { ids, mask }
}
