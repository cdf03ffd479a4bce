//! Source documents, fixed-size chunks and the in-memory chunk store.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text;

pub const DEFAULT_CHUNK_SIZE: usize = 100;
pub const DEFAULT_TITLE_SEPARATOR: &str = "\n";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDocument {
    pub doc_id: String,
    pub title: String,
    pub text: String,
}

/// A titled passage of at most `chunk_size` surface tokens; the unit that is
/// retrieved, placed in a context and cited.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentChunk {
    pub chunk_id: String,
    pub source_doc_id: String,
    pub title: String,
    pub body_tokens: Vec<String>,
    pub position_index: usize,
    pub display_text: String,
}

impl DocumentChunk {
    /// Builds a chunk whose display text is `title + separator + body`.
    pub fn new(
        source_doc_id: &str,
        title: &str,
        position_index: usize,
        body_tokens: Vec<String>,
        separator: &str,
    ) -> Self {
        let display_text = format!("{title}{separator}{}", text::detokenize(&body_tokens));
        Self {
            chunk_id: chunk_id(source_doc_id, position_index),
            source_doc_id: source_doc_id.into(),
            title: title.into(),
            body_tokens,
            position_index,
            display_text,
        }
    }
}

pub fn chunk_id(doc_id: &str, ordinal: usize) -> String {
    format!("{doc_id}#{ordinal}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question_id: String,
    pub question_text: String,
    pub gold_answers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkOptions {
    pub chunk_size: usize,
    pub title_separator: String,
}

impl Default for ChunkOptions {
    fn default() -> Self {
        Self {
            chunk_size: DEFAULT_CHUNK_SIZE,
            title_separator: DEFAULT_TITLE_SEPARATOR.into(),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CorpusError {
    #[error("chunk_size must be at least 1")]
    ZeroChunkSize,
    #[error("duplicate document id `{0}`")]
    DuplicateDocument(String),
    #[error("duplicate chunk id `{0}`")]
    DuplicateChunk(String),
    #[error("document id must not be empty")]
    EmptyDocumentId,
}

/// Greedy left-to-right packing of the document's surface tokens.
pub fn chunk_document(
    doc: &SourceDocument,
    options: &ChunkOptions,
) -> Result<Vec<DocumentChunk>, CorpusError> {
    if options.chunk_size == 0 {
        return Err(CorpusError::ZeroChunkSize);
    }
    let tokens = text::surface_tokens(&doc.text);
    Ok(tokens
        .chunks(options.chunk_size)
        .enumerate()
        .map(|(i, body)| {
            DocumentChunk::new(
                &doc.doc_id,
                &doc.title,
                i,
                body.to_vec(),
                &options.title_separator,
            )
        })
        .collect())
}

/// Chunks every document, rejecting duplicate or empty ids.
pub fn chunk_corpus<'a>(
    docs: impl IntoIterator<Item = &'a SourceDocument>,
    options: &ChunkOptions,
) -> Result<Vec<DocumentChunk>, CorpusError> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for doc in docs {
        if doc.doc_id.is_empty() {
            return Err(CorpusError::EmptyDocumentId);
        }
        if seen.insert(doc.doc_id.as_str(), ()).is_some() {
            return Err(CorpusError::DuplicateDocument(doc.doc_id.clone()));
        }
        out.extend(chunk_document(doc, options)?);
    }
    Ok(out)
}

/// Sealed, id-addressable collection of chunks. Chunk order is the order
/// the index assigns internal document numbers in.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChunkStore {
    chunks: Vec<DocumentChunk>,
    by_id: BTreeMap<String, usize>,
}

impl ChunkStore {
    pub fn new(chunks: Vec<DocumentChunk>) -> Result<Self, CorpusError> {
        let mut by_id = BTreeMap::new();
        for (i, c) in chunks.iter().enumerate() {
            if by_id.insert(c.chunk_id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateChunk(c.chunk_id.clone()));
            }
        }
        Ok(Self { chunks, by_id })
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn chunks(&self) -> &[DocumentChunk] {
        &self.chunks
    }

    pub fn get(&self, index: usize) -> Option<&DocumentChunk> {
        self.chunks.get(index)
    }

    pub fn by_id(&self, chunk_id: &str) -> Option<&DocumentChunk> {
        self.by_id.get(chunk_id).map(|&i| &self.chunks[i])
    }

    pub fn into_chunks(self) -> Vec<DocumentChunk> {
        self.chunks
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn doc(n_tokens: usize) -> SourceDocument {
        let text = (0..n_tokens)
            .map(|i| format!("w{i}"))
            .collect::<Vec<_>>()
            .join(" ");
        SourceDocument {
            doc_id: "d".into(),
            title: "Title".into(),
            text,
        }
    }

    #[test]
    fn greedy_packing_250() {
        let chunks = chunk_document(&doc(250), &ChunkOptions::default()).unwrap();
        let sizes: Vec<usize> = chunks.iter().map(|c| c.body_tokens.len()).collect();
        assert_eq!(sizes, vec![100, 100, 50]);
        assert_eq!(
            chunks.iter().map(|c| c.position_index).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
        assert!(chunks.iter().all(|c| c.display_text.starts_with("Title\n")));
        assert_eq!(chunks[2].chunk_id, "d#2");
    }

    #[test]
    fn exactly_one_chunk() {
        let chunks = chunk_document(&doc(100), &ChunkOptions::default()).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].position_index, 0);
    }

    #[test]
    fn empty_text_no_chunks() {
        assert!(chunk_document(&doc(0), &ChunkOptions::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn zero_chunk_size_rejected() {
        let opts = ChunkOptions {
            chunk_size: 0,
            ..ChunkOptions::default()
        };
        assert_eq!(
            chunk_document(&doc(3), &opts),
            Err(CorpusError::ZeroChunkSize)
        );
    }

    #[test]
    fn duplicate_docs_rejected() {
        let d = doc(3);
        let err = chunk_corpus([&d, &d], &ChunkOptions::default()).unwrap_err();
        assert_eq!(err, CorpusError::DuplicateDocument("d".to_string()));
    }

    #[test]
    fn store_lookup_and_duplicates() {
        let chunks = chunk_document(
            &doc(30),
            &ChunkOptions {
                chunk_size: 10,
                ..Default::default()
            },
        )
        .unwrap();
        let store = ChunkStore::new(chunks.clone()).unwrap();
        assert_eq!(store.by_id("d#1").unwrap().body_tokens[0], "w10");
        let mut dup = chunks.clone();
        dup.push(chunks[0].clone());
        assert!(matches!(
            ChunkStore::new(dup),
            Err(CorpusError::DuplicateChunk(_))
        ));
    }
}
