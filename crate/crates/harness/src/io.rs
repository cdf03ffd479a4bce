//! JSONL readers and writers for corpora, QA sets, chunk stores, indexes
//! and scripted-model knowledge.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use citeprobe_core::corpus::{DocumentChunk, QaPair, SourceDocument};
use citeprobe_core::model::KnowledgeEntry;
use citeprobe_core::retrieval::InvertedIndex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::DataError;

pub const CHUNK_STORE_VERSION: u32 = 1;
pub const INDEX_VERSION: u32 = 1;
const CHUNK_STORE_KIND: &str = "citeprobe.chunks";
const INDEX_KIND: &str = "citeprobe.index";

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusRecord {
    id: String,
    title: String,
    text: String,
}

#[derive(Debug, Deserialize)]
struct QaRecord {
    id: String,
    question: String,
    #[serde(default)]
    answers: Vec<String>,
}

/// Streams `(line number, parsed record)` from a JSONL file, skipping blank
/// lines.
pub struct JsonlReader<T> {
    path: PathBuf,
    lines: std::io::Lines<BufReader<File>>,
    line: usize,
    _marker: std::marker::PhantomData<T>,
}

impl<T: DeserializeOwned> JsonlReader<T> {
    pub fn open(path: &Path) -> Result<Self, DataError> {
        let file = File::open(path).map_err(|e| DataError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            lines: BufReader::new(file).lines(),
            line: 0,
            _marker: std::marker::PhantomData,
        })
    }
}

impl<T: DeserializeOwned> Iterator for JsonlReader<T> {
    type Item = Result<(usize, T), DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let raw = self.lines.next()?;
            self.line += 1;
            let raw = match raw {
                Ok(r) => r,
                Err(e) => return Some(Err(DataError::io(&self.path, e))),
            };
            if raw.trim().is_empty() {
                continue;
            }
            return Some(
                serde_json::from_str(&raw)
                    .map(|v| (self.line, v))
                    .map_err(|e| DataError::Parse {
                        path: self.path.clone(),
                        line: self.line,
                        message: e.to_string(),
                    }),
            );
        }
    }
}

/// Documents of a corpus file in file order. Duplicate ids end the stream
/// with an error.
pub struct CorpusReader {
    inner: JsonlReader<CorpusRecord>,
    seen: HashSet<String>,
}

impl Iterator for CorpusReader {
    type Item = Result<SourceDocument, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        let (line, record) = match self.inner.next()? {
            Ok(r) => r,
            Err(e) => return Some(Err(e)),
        };
        if record.id.is_empty() {
            return Some(Err(DataError::Parse {
                path: self.inner.path.clone(),
                line,
                message: "empty document id".into(),
            }));
        }
        if !self.seen.insert(record.id.clone()) {
            return Some(Err(DataError::DuplicateId { path: self.inner.path.clone(), line, id: record.id }));
        }
        Some(Ok(SourceDocument { doc_id: record.id, title: record.title, text: record.text }))
    }
}

pub fn ingest_corpus(path: &Path) -> Result<CorpusReader, DataError> {
    Ok(CorpusReader { inner: JsonlReader::open(path)?, seen: HashSet::new() })
}

pub fn read_corpus(path: &Path) -> Result<Vec<SourceDocument>, DataError> {
    ingest_corpus(path)?.collect()
}

pub fn read_qa(path: &Path) -> Result<Vec<QaPair>, DataError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for item in JsonlReader::<QaRecord>::open(path)? {
        let (line, r) = item?;
        if r.question.trim().is_empty() {
            return Err(DataError::Parse { path: path.into(), line, message: "empty question".into() });
        }
        if !seen.insert(r.id.clone()) {
            return Err(DataError::DuplicateId { path: path.into(), line, id: r.id });
        }
        out.push(QaPair { question_id: r.id, question_text: r.question, gold_answers: r.answers });
    }
    Ok(out)
}

pub fn read_knowledge(path: &Path) -> Result<Vec<KnowledgeEntry>, DataError> {
    JsonlReader::<KnowledgeEntry>::open(path)?.map(|r| r.map(|(_, e)| e)).collect()
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DataError> {
    JsonlReader::<T>::open(path)?.map(|r| r.map(|(_, v)| v)).collect()
}

/// Writes `items` as JSONL to a temporary sibling and renames it into place.
pub fn write_jsonl_atomic<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), DataError> {
    write_atomic(path, |w| {
        for item in items {
            serde_json::to_writer(&mut *w, &item).map_err(std::io::Error::other)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(std::io::Error::other)?;
        w.write_all(b"\n")
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, DataError> {
    let raw = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    serde_json::from_str(&raw)
        .map_err(|e| DataError::Schema { path: path.into(), message: e.to_string() })
}

pub(crate) fn write_atomic(
    path: &Path,
    body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<(), DataError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| DataError::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    let run = || -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(&tmp)?);
        body(&mut w)?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)
    };
    run().map_err(|e| DataError::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct ChunkStoreHeader {
    kind: String,
    schema_version: u32,
    chunk_size: usize,
    count: usize,
}

pub fn save_chunks(path: &Path, chunks: &[DocumentChunk], chunk_size: usize) -> Result<(), DataError> {
    let header = ChunkStoreHeader {
        kind: CHUNK_STORE_KIND.into(),
        schema_version: CHUNK_STORE_VERSION,
        chunk_size,
        count: chunks.len(),
    };
    write_atomic(path, |w| {
        serde_json::to_writer(&mut *w, &header).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
        for c in chunks {
            serde_json::to_writer(&mut *w, c).map_err(std::io::Error::other)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

/// Chunks and the chunk size they were cut with.
pub fn load_chunks(path: &Path) -> Result<(Vec<DocumentChunk>, usize), DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let schema = |message: String| DataError::Schema { path: path.into(), message };
    let first = lines
        .next()
        .ok_or_else(|| schema("missing header".into()))?
        .map_err(|e| DataError::io(path, e))?;
    let header: ChunkStoreHeader =
        serde_json::from_str(&first).map_err(|e| schema(format!("bad header: {e}")))?;
    if header.kind != CHUNK_STORE_KIND {
        return Err(schema(format!("not a chunk store (kind `{}`)", header.kind)));
    }
    if header.schema_version > CHUNK_STORE_VERSION {
        return Err(DataError::SchemaVersion {
            path: path.into(),
            found: header.schema_version,
            supported: CHUNK_STORE_VERSION,
        });
    }
    let mut chunks = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let chunk = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            path: path.into(),
            line: i + 2,
            message: e.to_string(),
        })?;
        chunks.push(chunk);
    }
    if chunks.len() != header.count {
        return Err(schema(format!("header promises {} chunks, found {}", header.count, chunks.len())));
    }
    Ok((chunks, header.chunk_size))
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    kind: String,
    schema_version: u32,
    index: InvertedIndex,
}

pub fn save_index(path: &Path, index: &InvertedIndex) -> Result<(), DataError> {
    #[derive(Serialize)]
    struct Borrowed<'a> {
        kind: &'a str,
        schema_version: u32,
        index: &'a InvertedIndex,
    }
    write_atomic(path, |w| {
        serde_json::to_writer(&mut *w, &Borrowed { kind: INDEX_KIND, schema_version: INDEX_VERSION, index })
            .map_err(std::io::Error::other)
    })
}

pub fn load_index(path: &Path) -> Result<InvertedIndex, DataError> {
    #[derive(Deserialize)]
    struct Header {
        kind: String,
        schema_version: u32,
    }
    let raw = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let schema = |message: String| DataError::Schema { path: path.into(), message };
    let header: Header = serde_json::from_str(&raw).map_err(|e| schema(e.to_string()))?;
    if header.kind != INDEX_KIND {
        return Err(schema(format!("not an index (kind `{}`)", header.kind)));
    }
    if header.schema_version > INDEX_VERSION {
        return Err(DataError::SchemaVersion {
            path: path.into(),
            found: header.schema_version,
            supported: INDEX_VERSION,
        });
    }
    let file: IndexFile = serde_json::from_str(&raw).map_err(|e| schema(e.to_string()))?;
    Ok(file.index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use citeprobe_core::corpus::{chunk_corpus, ChunkOptions};
    use citeprobe_core::retrieval::IndexOptions;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn corpus_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "c.jsonl",
            "{\"id\":\"a\",\"title\":\"A\",\"text\":\"x\"}\n{\"id\":\"b\",\"title\":\"B\",\"text\":\"y\"}\n\n{\"id\":\"c\",\"title\":\"C\",\"text\":\"\"}\n",
        );
        let docs = read_corpus(&p).unwrap();
        assert_eq!(docs.iter().map(|d| d.doc_id.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
    }

    #[test]
    fn empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "c.jsonl", "");
        assert!(read_corpus(&p).unwrap().is_empty());
    }

    #[test]
    fn missing_title_names_line_one() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "c.jsonl", "{\"id\":\"a\",\"text\":\"x\"}\n");
        match read_corpus(&p).unwrap_err() {
            DataError::Parse { line, message, .. } => {
                assert_eq!(line, 1);
                assert!(message.contains("title"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_document_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "c.jsonl",
            "{\"id\":\"a\",\"title\":\"A\",\"text\":\"x\"}\n{\"id\":\"a\",\"title\":\"A\",\"text\":\"y\"}\n",
        );
        assert!(matches!(read_corpus(&p), Err(DataError::DuplicateId { line: 2, .. })));
    }

    #[test]
    fn qa_records() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "qa.jsonl",
            "{\"id\":\"q1\",\"question\":\"how long\",\"answers\":[\"three months\"]}\n{\"id\":\"q2\",\"question\":\"who\"}\n",
        );
        let qa = read_qa(&p).unwrap();
        assert_eq!(qa[0].gold_answers, vec!["three months"]);
        assert!(qa[1].gold_answers.is_empty());
        let bad = write(dir.path(), "bad.jsonl", "{\"id\":\"q1\",\"question\":\" \"}\n");
        assert!(read_qa(&bad).is_err());
    }

    fn ten_chunks() -> Vec<DocumentChunk> {
        let docs: Vec<SourceDocument> = (0..5)
            .map(|i| SourceDocument {
                doc_id: format!("d{i}"),
                title: format!("Doc {i}"),
                text: "one two three four, five (six).".into(),
            })
            .collect();
        chunk_corpus(&docs, &ChunkOptions { chunk_size: 5, ..ChunkOptions::default() }).unwrap()
    }

    #[test]
    fn chunk_store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("chunks.jsonl");
        let chunks = ten_chunks();
        assert_eq!(chunks.len(), 10);
        save_chunks(&p, &chunks, 5).unwrap();
        assert_eq!(load_chunks(&p).unwrap(), (chunks, 5));
    }

    #[test]
    fn empty_chunk_store() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("chunks.jsonl");
        save_chunks(&p, &[], 100).unwrap();
        assert_eq!(load_chunks(&p).unwrap(), (vec![], 100));
    }

    #[test]
    fn newer_schema_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "chunks.jsonl",
            "{\"kind\":\"citeprobe.chunks\",\"schema_version\":2,\"chunk_size\":100,\"count\":0}\n",
        );
        assert!(matches!(load_chunks(&p), Err(DataError::SchemaVersion { found: 2, .. })));
    }

    #[test]
    fn index_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("index.json");
        let chunks = ten_chunks();
        let index = InvertedIndex::build(&chunks, IndexOptions::default()).unwrap();
        save_index(&p, &index).unwrap();
        let loaded = load_index(&p).unwrap();
        assert_eq!(loaded, index);
        assert_eq!(loaded.doc_number("d3#1"), Some(7));
    }
}
