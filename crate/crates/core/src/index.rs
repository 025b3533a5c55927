//! Exact cosine search over a persisted matrix of code embeddings.

use std::collections::HashSet;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::container;
use crate::corpus::CodeQueryPair;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CSEEKIDX";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub language: String,
    pub snippet: String,
    pub source: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    entries: Vec<IndexEntry>,
    vectors: Array2<f32>,
    fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dim: usize,
    count: usize,
    endianness: String,
    fingerprint: String,
}

/// Embeds every snippet with the checkpoint's code encoder.
pub fn build_index(ck: &Checkpoint, pairs: &[CodeQueryPair]) -> Result<EmbeddingIndex> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("cannot index an empty snippet set".into()));
    }
    let tokens: Vec<&Vec<String>> = pairs.iter().map(|p| &p.code_tokens).collect();
    let vectors = ck.model.embed_code_tokens(&tokens, &ck.vocab, ck.config.limits)?;
    EmbeddingIndex::new(
        pairs.iter().map(|p| p.id.clone()).collect(),
        pairs
            .iter()
            .map(|p| IndexEntry {
                language: p.language.clone(),
                snippet: p.display_code(),
                source: p.source.clone(),
            })
            .collect(),
        vectors,
        ck.model_fingerprint(),
    )
}

impl EmbeddingIndex {
    pub fn new(ids: Vec<String>, entries: Vec<IndexEntry>, vectors: Array2<f32>, fingerprint: String) -> Result<Self> {
        if ids.len() != entries.len() || ids.len() != vectors.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "{} ids, {} metadata entries, {} vectors",
                ids.len(),
                entries.len(),
                vectors.nrows()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::InvalidInput(format!("duplicate index id {dup:?}")));
        }
        if fingerprint.is_empty() {
            return Err(Error::InvalidInput("index fingerprint is empty".into()));
        }
        for (i, r) in vectors.rows().into_iter().enumerate() {
            let norm = r.dot(&r).sqrt() as f64;
            if (norm - 1.0).abs() > 1e-4 {
                return Err(Error::NotNormalized { index: i, norm });
            }
        }
        Ok(Self {
            ids,
            entries,
            vectors,
            fingerprint,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn vectors(&self) -> &Array2<f32> {
        &self.vectors
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Count of snippets per language, sorted by language.
    pub fn languages(&self) -> Vec<(String, usize)> {
        let mut counts = std::collections::BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.language.clone()).or_insert(0usize) += 1;
        }
        counts.into_iter().collect()
    }

    /// Top `k` rows by dot product with `query` (a unit vector): descending
    /// score, lower row first on ties. `k` is clamped to the pool size.
    pub fn top_k(&self, query: &[f32], k: usize) -> Result<Vec<(usize, f32)>> {
        if k == 0 {
            return Err(Error::InvalidInput("k must be at least 1".into()));
        }
        if query.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "query of width {} against index of width {}",
                query.len(),
                self.dim()
            )));
        }
        let q = ndarray::ArrayView1::from(query);
        let mut scored: Vec<(usize, f32)> = self
            .vectors
            .rows()
            .into_iter()
            .map(|r| r.dot(&q).clamp(-1.0, 1.0))
            .enumerate()
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k.min(self.len()));
        Ok(scored)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            dim: self.dim(),
            count: self.len(),
            endianness: "little".into(),
            fingerprint: self.fingerprint.clone(),
        })?;
        let mut body = Vec::new();
        for id in &self.ids {
            body.extend_from_slice(&(id.len() as u32).to_le_bytes());
            body.extend_from_slice(id.as_bytes());
        }
        let meta = serde_json::to_vec(&self.entries)?;
        body.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        body.extend_from_slice(&meta);
        container::f32_bytes(self.vectors.iter().copied(), &mut body);
        Ok(container::encode(MAGIC, INDEX_VERSION, &header, &body))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let env = container::decode(bytes, MAGIC, INDEX_VERSION, "index")?;
        let header: Header = serde_json::from_slice(&env.header)?;
        if header.endianness != "little" {
            return Err(Error::Corrupt(format!(
                "unsupported endianness {:?}",
                header.endianness
            )));
        }
        let body = &env.payload;
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos + n;
            if end > body.len() {
                return Err(Error::Corrupt("index body is shorter than its header claims".into()));
            }
            let s = &body[pos..end];
            pos = end;
            Ok(s)
        };
        let mut ids = Vec::with_capacity(header.count);
        for _ in 0..header.count {
            let len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
            let id = std::str::from_utf8(take(len)?).map_err(|e| Error::Corrupt(e.to_string()))?;
            ids.push(id.to_owned());
        }
        let meta_len = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let entries: Vec<IndexEntry> = serde_json::from_slice(take(meta_len)?)?;
        let floats = take(header.count * header.dim * 4)?;
        let data = container::read_f32s(floats, 0, header.count * header.dim)?;
        if pos != body.len() {
            return Err(Error::Corrupt("trailing bytes in index body".into()));
        }
        let vectors =
            Array2::from_shape_vec((header.count, header.dim), data).map_err(|e| Error::Corrupt(e.to_string()))?;
        Self::new(ids, entries, vectors, header.fingerprint)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&container::read_file(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub rank: usize,
    pub id: String,
    pub score: f32,
    pub language: String,
    pub snippet: String,
    pub source: Option<String>,
}

/// Free-text queries are split on whitespace.
pub fn tokenize_query(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

/// An index paired with the checkpoint that produced it.
#[derive(Debug, Clone)]
pub struct Searcher {
    index: EmbeddingIndex,
    checkpoint: Checkpoint,
}

impl Searcher {
    /// Fails with [`Error::StaleIndex`] unless the fingerprints agree.
    pub fn new(index: EmbeddingIndex, checkpoint: Checkpoint) -> Result<Self> {
        let current = checkpoint.model_fingerprint();
        if index.fingerprint() != current {
            return Err(Error::StaleIndex {
                index: index.fingerprint().to_owned(),
                checkpoint: current,
            });
        }
        if index.dim() != checkpoint.config.encoder.hidden_dim {
            return Err(Error::ShapeMismatch(
                "index width differs from the encoder width".into(),
            ));
        }
        Ok(Self { index, checkpoint })
    }

    pub fn open(index_path: &Path, checkpoint_path: &Path) -> Result<Self> {
        Self::new(EmbeddingIndex::load(index_path)?, Checkpoint::load(checkpoint_path)?)
    }

    pub fn index(&self) -> &EmbeddingIndex {
        &self.index
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.checkpoint
    }

    pub fn search(&self, query: &str, k: usize) -> Result<Vec<SearchHit>> {
        if k == 0 {
            return Err(Error::InvalidInput("k must be at least 1".into()));
        }
        let tokens = tokenize_query(query);
        if tokens.is_empty() {
            return Err(Error::InvalidInput("query is empty".into()));
        }
        let ck = &self.checkpoint;
        let q = ck.model.embed_query_tokens(&[tokens], &ck.vocab, ck.config.limits)?;
        let row = q.row(0).to_vec();
        Ok(self
            .index
            .top_k(&row, k)?
            .into_iter()
            .enumerate()
            .map(|(i, (row, score))| {
                let e = &self.index.entries[row];
                SearchHit {
                    rank: i + 1,
                    id: self.index.ids[row].clone(),
                    score,
                    language: e.language.clone(),
                    snippet: e.snippet.clone(),
                    source: e.source.clone(),
                }
            })
            .collect())
    }
}

/// Convenience wrapper used by one-shot callers.
pub fn search(index: &EmbeddingIndex, ck: &Checkpoint, query: &str, k: usize) -> Result<Vec<SearchHit>> {
    Searcher::new(index.clone(), ck.clone())?.search(query, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy_index() -> EmbeddingIndex {
        let v = array![[1.0f32, 0.0], [0.0, 1.0], [1.0, 0.0], [0.6, 0.8]];
        let entries = (0..4)
            .map(|i| IndexEntry {
                language: "python".into(),
                snippet: format!("s{i}"),
                source: None,
            })
            .collect();
        EmbeddingIndex::new((0..4).map(|i| format!("id{i}")).collect(), entries, v, "fp".into()).unwrap()
    }

    #[test]
    fn top_k_orders_and_clamps() {
        let idx = toy_index();
        let hits = idx.top_k(&[1.0, 0.0], 10).unwrap();
        assert_eq!(hits.iter().map(|h| h.0).collect::<Vec<_>>(), vec![0, 2, 3, 1]);
        assert_eq!(idx.top_k(&[1.0, 0.0], 2).unwrap().len(), 2);
        assert!(idx.top_k(&[1.0, 0.0], 0).is_err());
        assert!(idx.top_k(&[1.0], 1).is_err());
    }

    #[test]
    fn rejects_duplicates_and_unnormalized_rows() {
        let e = IndexEntry {
            language: "x".into(),
            snippet: "y".into(),
            source: None,
        };
        assert!(EmbeddingIndex::new(
            vec!["a".into(), "a".into()],
            vec![e.clone(), e.clone()],
            array![[1.0f32, 0.0], [0.0, 1.0]],
            "fp".into()
        )
        .is_err());
        assert!(EmbeddingIndex::new(vec!["a".into()], vec![e], array![[2.0f32, 0.0]], "fp".into()).is_err());
    }

    #[test]
    fn bytes_round_trip_and_truncation() {
        let idx = toy_index();
        let bytes = idx.to_bytes().unwrap();
        assert_eq!(EmbeddingIndex::from_bytes(&bytes).unwrap(), idx);
        assert!(matches!(
            EmbeddingIndex::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Checksum(_))
        ));
    }

    #[test]
    fn query_tokenization() {
        assert_eq!(tokenize_query("  read csv\trows \n"), vec!["read", "csv", "rows"]);
        assert!(tokenize_query("   ").is_empty());
    }
}
