//! Inverted index, BM25 ranking and reranking into a model context.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ChunkStore, DocumentChunk};
use crate::text;

pub const DEFAULT_RETRIEVE_K: usize = 30;
pub const DEFAULT_CONTEXT_SIZE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexOptions {
    /// Index title terms together with body terms.
    pub include_title: bool,
}

impl Default for IndexOptions {
    fn default() -> Self {
        Self {
            include_title: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexStats {
    pub n_docs: usize,
    pub avg_len: f64,
    pub doc_freq: BTreeMap<String, u32>,
    pub doc_len: BTreeMap<String, u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RetrievalError {
    #[error("chunk `{0}` indexed twice")]
    DuplicateChunk(String),
    #[error("chunk `{0}` is not in the index")]
    UnknownChunk(String),
    #[error("rerank needs at least one candidate")]
    NoCandidates,
    #[error("reranker failed on candidate {candidate_id:?}: {message}")]
    Scorer {
        candidate_id: Option<String>,
        message: String,
    },
    #[error("index and chunk store disagree at document {0}")]
    StoreMismatch(usize),
}

/// Term → postings, with postings sorted by internal document number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "IndexRepr")]
pub struct InvertedIndex {
    options: IndexOptions,
    chunk_ids: Vec<String>,
    doc_len: Vec<u32>,
    postings: BTreeMap<String, Vec<Posting>>,
    #[serde(skip)]
    id_lookup: BTreeMap<String, u32>,
}

#[derive(Deserialize)]
struct IndexRepr {
    options: IndexOptions,
    chunk_ids: Vec<String>,
    doc_len: Vec<u32>,
    postings: BTreeMap<String, Vec<Posting>>,
}

impl From<IndexRepr> for InvertedIndex {
    fn from(r: IndexRepr) -> Self {
        let id_lookup = r
            .chunk_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i as u32))
            .collect();
        Self {
            options: r.options,
            chunk_ids: r.chunk_ids,
            doc_len: r.doc_len,
            postings: r.postings,
            id_lookup,
        }
    }
}

/// Terms a chunk contributes to the index.
pub fn indexed_terms(chunk: &DocumentChunk, options: &IndexOptions) -> Vec<String> {
    let mut terms = if options.include_title {
        text::tokenize(&chunk.title)
    } else {
        Vec::new()
    };
    terms.extend(chunk.body_tokens.iter().filter_map(|t| text::token_term(t)));
    terms
}

/// The non-negative BM25 inverse document frequency.
pub fn idf(n_docs: usize, df: u32) -> f64 {
    let n = n_docs as f64;
    let df = f64::from(df);
    libm::log(1.0 + (n - df + 0.5) / (df + 0.5))
}

/// Saturated term-frequency component of BM25.
pub fn tf_component(tf: u32, doc_len: u32, avg_len: f64, params: &Bm25Params) -> f64 {
    let tf = f64::from(tf);
    let norm = if avg_len > 0.0 {
        f64::from(doc_len) / avg_len
    } else {
        1.0
    };
    tf * (params.k1 + 1.0) / (tf + params.k1 * (1.0 - params.b + params.b * norm))
}

impl InvertedIndex {
    pub fn build<'a>(
        chunks: impl IntoIterator<Item = &'a DocumentChunk>,
        options: IndexOptions,
    ) -> Result<Self, RetrievalError> {
        let mut index = Self {
            options,
            chunk_ids: Vec::new(),
            doc_len: Vec::new(),
            postings: BTreeMap::new(),
            id_lookup: BTreeMap::new(),
        };
        for chunk in chunks {
            let doc = index.chunk_ids.len() as u32;
            if index
                .id_lookup
                .insert(chunk.chunk_id.clone(), doc)
                .is_some()
            {
                return Err(RetrievalError::DuplicateChunk(chunk.chunk_id.clone()));
            }
            let terms = indexed_terms(chunk, &options);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for term in &terms {
                *tf.entry(term.clone()).or_default() += 1;
            }
            for (term, count) in tf {
                index
                    .postings
                    .entry(term)
                    .or_default()
                    .push(Posting { doc, tf: count });
            }
            index.chunk_ids.push(chunk.chunk_id.clone());
            index.doc_len.push(terms.len() as u32);
        }
        Ok(index)
    }

    pub fn options(&self) -> &IndexOptions {
        &self.options
    }

    pub fn n_docs(&self) -> usize {
        self.chunk_ids.len()
    }

    pub fn avg_len(&self) -> f64 {
        if self.doc_len.is_empty() {
            return 0.0;
        }
        self.doc_len.iter().map(|&l| f64::from(l)).sum::<f64>() / self.doc_len.len() as f64
    }

    pub fn doc_freq(&self, term: &str) -> u32 {
        self.postings.get(term).map_or(0, |p| p.len() as u32)
    }

    pub fn chunk_id(&self, doc: u32) -> &str {
        &self.chunk_ids[doc as usize]
    }

    pub fn doc_number(&self, chunk_id: &str) -> Option<u32> {
        self.id_lookup.get(chunk_id).copied()
    }

    pub fn term_frequency(&self, term: &str, doc: u32) -> u32 {
        self.postings
            .get(term)
            .and_then(|p| {
                p.binary_search_by_key(&doc, |x| x.doc)
                    .ok()
                    .map(|i| p[i].tf)
            })
            .unwrap_or(0)
    }

    pub fn stats(&self) -> IndexStats {
        IndexStats {
            n_docs: self.n_docs(),
            avg_len: self.avg_len(),
            doc_freq: self
                .postings
                .iter()
                .map(|(t, p)| (t.clone(), p.len() as u32))
                .collect(),
            doc_len: self
                .chunk_ids
                .iter()
                .cloned()
                .zip(self.doc_len.iter().copied())
                .collect(),
        }
    }

    /// Checks that document `i` of the index is chunk `i` of the store.
    pub fn check_store(&self, store: &ChunkStore) -> Result<(), RetrievalError> {
        if store.len() != self.n_docs() {
            return Err(RetrievalError::StoreMismatch(
                store.len().min(self.n_docs()),
            ));
        }
        for (i, chunk) in store.chunks().iter().enumerate() {
            if chunk.chunk_id != self.chunk_ids[i] {
                return Err(RetrievalError::StoreMismatch(i));
            }
        }
        Ok(())
    }

    /// BM25 score of one chunk. Query terms absent from the index contribute 0.
    pub fn bm25_score<S: AsRef<str>>(
        &self,
        query_terms: &[S],
        chunk_id: &str,
        params: &Bm25Params,
    ) -> Result<f64, RetrievalError> {
        let doc = self
            .doc_number(chunk_id)
            .ok_or_else(|| RetrievalError::UnknownChunk(chunk_id.into()))?;
        let avg_len = self.avg_len();
        let len = self.doc_len[doc as usize];
        let mut parts = Vec::new();
        for term in query_terms {
            let term = term.as_ref();
            let tf = self.term_frequency(term, doc);
            if tf > 0 {
                parts.push(
                    idf(self.n_docs(), self.doc_freq(term))
                        * tf_component(tf, len, avg_len, params),
                );
            }
        }
        Ok(order_free_sum(parts))
    }

    /// The `k` best chunks for `query`, best first, ties by ascending chunk
    /// id. Chunks sharing no term with the query are never returned.
    pub fn retrieve_top_k(&self, query: &str, k: usize, params: &Bm25Params) -> Vec<Candidate> {
        let terms = text::tokenize(query);
        if terms.is_empty() || self.n_docs() == 0 || k == 0 {
            return Vec::new();
        }
        let avg_len = self.avg_len();
        let mut parts: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for term in &terms {
            let Some(postings) = self.postings.get(term) else {
                continue;
            };
            let term_idf = idf(self.n_docs(), postings.len() as u32);
            for p in postings {
                parts.entry(p.doc).or_default().push(
                    term_idf * tf_component(p.tf, self.doc_len[p.doc as usize], avg_len, params),
                );
            }
        }
        let mut ranked: Vec<Candidate> = parts
            .into_iter()
            .map(|(doc, parts)| Candidate {
                doc,
                chunk_id: self.chunk_ids[doc as usize].clone(),
                bm25_score: order_free_sum(parts),
            })
            .collect();
        let cmp = |a: &Candidate, b: &Candidate| {
            b.bm25_score
                .total_cmp(&a.bm25_score)
                .then_with(|| a.chunk_id.cmp(&b.chunk_id))
        };
        if ranked.len() > k {
            ranked.select_nth_unstable_by(k - 1, cmp);
            ranked.truncate(k);
        }
        ranked.sort_by(cmp);
        ranked
    }
}

/// Sums in ascending order, so equal multisets of per-term scores give
/// bit-identical totals whatever the query term order.
fn order_free_sum(mut parts: Vec<f64>) -> f64 {
    parts.sort_by(f64::total_cmp);
    parts.into_iter().sum()
}

/// A first-stage BM25 hit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub doc: u32,
    pub chunk_id: String,
    pub bm25_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextEntry {
    pub chunk: DocumentChunk,
    pub bm25_score: f64,
    pub rerank_score: f64,
    pub context_position: usize,
}

/// The ordered documents handed to the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedContext {
    pub question_id: String,
    pub entries: Vec<ContextEntry>,
}

impl RetrievedContext {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn display_texts(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.chunk.display_text.as_str())
    }

    /// Marks the `top_n` entries with the highest rerank score as relevant,
    /// ties broken by context position.
    pub fn relevance_predictions(&self, top_n: usize) -> Vec<bool> {
        let mut order: Vec<usize> = (0..self.entries.len()).collect();
        order.sort_by(|&a, &b| {
            self.entries[b]
                .rerank_score
                .total_cmp(&self.entries[a].rerank_score)
                .then(a.cmp(&b))
        });
        let mut flags = alloc::vec![false; self.entries.len()];
        for &i in order.iter().take(top_n) {
            flags[i] = true;
        }
        flags
    }

    /// Renumbers positions to match entry order.
    pub fn renumber(&mut self) {
        for (i, e) in self.entries.iter_mut().enumerate() {
            e.context_position = i;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScorerError {
    pub candidate_id: Option<String>,
    pub message: String,
}

/// Second-stage relevance scoring over a candidate batch. One score per
/// candidate, in candidate order; higher is better.
pub trait RerankScorer {
    fn score(&self, query: &str, candidates: &[&DocumentChunk]) -> Result<Vec<f64>, ScorerError>;
}

impl<T: RerankScorer + ?Sized> RerankScorer for &T {
    fn score(&self, query: &str, candidates: &[&DocumentChunk]) -> Result<Vec<f64>, ScorerError> {
        (**self).score(query, candidates)
    }
}

impl<T: RerankScorer + ?Sized> RerankScorer for Box<T> {
    fn score(&self, query: &str, candidates: &[&DocumentChunk]) -> Result<Vec<f64>, ScorerError> {
        (**self).score(query, candidates)
    }
}

/// Fraction of distinct query terms that occur in the chunk's display text.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalOverlapScorer;

impl LexicalOverlapScorer {
    pub fn overlap(query_terms: &BTreeSet<String>, chunk: &DocumentChunk) -> f64 {
        if query_terms.is_empty() {
            return 0.0;
        }
        let chunk_terms: BTreeSet<String> =
            text::tokenize(&chunk.display_text).into_iter().collect();
        let shared = query_terms.intersection(&chunk_terms).count();
        shared as f64 / query_terms.len() as f64
    }
}

impl RerankScorer for LexicalOverlapScorer {
    fn score(&self, query: &str, candidates: &[&DocumentChunk]) -> Result<Vec<f64>, ScorerError> {
        let q: BTreeSet<String> = text::tokenize(query).into_iter().collect();
        Ok(candidates.iter().map(|c| Self::overlap(&q, c)).collect())
    }
}

/// Gives every candidate the same score, leaving BM25 order intact.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConstantScorer;

impl RerankScorer for ConstantScorer {
    fn score(&self, _query: &str, candidates: &[&DocumentChunk]) -> Result<Vec<f64>, ScorerError> {
        Ok(alloc::vec![0.0; candidates.len()])
    }
}

/// Reorders candidates by `scorer` and keeps the best `m`; ties keep the
/// BM25 order.
pub fn rerank<S: RerankScorer + ?Sized>(
    question_id: &str,
    query: &str,
    candidates: &[Candidate],
    store: &ChunkStore,
    scorer: &S,
    m: usize,
) -> Result<RetrievedContext, RetrievalError> {
    if candidates.is_empty() {
        return Err(RetrievalError::NoCandidates);
    }
    let chunks: Vec<&DocumentChunk> = candidates
        .iter()
        .map(|c| {
            store
                .by_id(&c.chunk_id)
                .ok_or_else(|| RetrievalError::UnknownChunk(c.chunk_id.clone()))
        })
        .collect::<Result<_, _>>()?;
    let scores = scorer
        .score(query, &chunks)
        .map_err(|e| RetrievalError::Scorer {
            candidate_id: e.candidate_id,
            message: e.message,
        })?;
    if scores.len() != candidates.len() {
        return Err(RetrievalError::Scorer {
            candidate_id: None,
            message: alloc::format!("expected {} scores, got {}", candidates.len(), scores.len()),
        });
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(RetrievalError::Scorer {
            candidate_id: Some(candidates[i].chunk_id.clone()),
            message: "score is NaN".into(),
        });
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        other => other,
    });
    let entries = order
        .into_iter()
        .take(m)
        .enumerate()
        .map(|(pos, i)| ContextEntry {
            chunk: chunks[i].clone(),
            bm25_score: candidates[i].bm25_score,
            rerank_score: scores[i],
            context_position: pos,
        })
        .collect();
    Ok(RetrievedContext {
        question_id: question_id.into(),
        entries,
    })
}
