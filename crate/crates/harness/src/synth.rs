//! Synthetic corpora with known answers, for exercising the scripted
//! models end to end.
//!
//! Every question asks for one relation of a made-up entity. The corpus
//! holds, per question, a gold document stating the fact, a distractor that
//! mentions the entity without the answer, and shared filler documents.

use std::collections::HashSet;
use std::path::Path;

use citeprobe_core::corpus::{QaPair, SourceDocument};
use citeprobe_core::model::KnowledgeEntry;
use citeprobe_core::text;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::DataError;
use crate::io;

const RELATIONS: &[&str] = &[
    "capital", "founder", "river", "mascot", "anthem", "currency", "harbor", "emblem", "patron", "festival",
    "mountain", "language",
];
const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthOptions {
    pub n_questions: usize,
    /// Filler documents, each `filler_tokens` long.
    pub n_filler: usize,
    pub filler_tokens: usize,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self { n_questions: 200, n_filler: 60, filler_tokens: 220, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SynthCorpus {
    pub documents: Vec<SourceDocument>,
    pub qa: Vec<QaPair>,
    pub knowledge: Vec<KnowledgeEntry>,
}

struct Words {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

impl Words {
    fn fresh(&mut self, syllables: usize) -> String {
        loop {
            let mut w = String::new();
            for _ in 0..syllables {
                w.push(*CONSONANTS.choose(&mut self.rng).unwrap_or(&b'k') as char);
                w.push(*VOWELS.choose(&mut self.rng).unwrap_or(&b'a') as char);
            }
            if text::is_stopword(&w) || RELATIONS.contains(&w.as_str()) {
                continue;
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(first) => first.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn filler_sentence(rng: &mut ChaCha8Rng, vocab: &[String], len: usize) -> String {
    let words: Vec<&str> = (0..len).filter_map(|_| vocab.choose(rng).map(String::as_str)).collect();
    format!("{}.", capitalize(&words.join(" ")))
}

pub fn generate(options: &SynthOptions) -> SynthCorpus {
    let mut words = Words { rng: ChaCha8Rng::seed_from_u64(options.seed), used: HashSet::new() };
    let vocab: Vec<String> = (0..400).map(|_| words.fresh(2)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ 0x5eed);
    let mut out = SynthCorpus::default();
    for i in 0..options.n_questions {
        let entity = capitalize(&words.fresh(3));
        let answer = capitalize(&words.fresh(3));
        let relation = RELATIONS[i % RELATIONS.len()];
        let question = format!("what is the {relation} of {entity}");
        let gold_fact = format!("The {relation} of {entity} is {answer}.");
        out.documents.push(SourceDocument {
            doc_id: format!("gold-{i:04}"),
            title: entity.clone(),
            text: format!(
                "{entity} is recorded in the {} archives. {gold_fact} {}",
                vocab[rng.random_range(0..vocab.len())],
                filler_sentence(&mut rng, &vocab, 12)
            ),
        });
        out.documents.push(SourceDocument {
            doc_id: format!("about-{i:04}"),
            title: format!("{entity} travel notes"),
            text: format!(
                "{entity} is a name from the archive of {}. Visitors to {entity} mention {} and {}. {} {entity} also appears in {}.",
                vocab[rng.random_range(0..vocab.len())],
                vocab[rng.random_range(0..vocab.len())],
                vocab[rng.random_range(0..vocab.len())],
                filler_sentence(&mut rng, &vocab, 10),
                vocab[rng.random_range(0..vocab.len())],
            ),
        });
        out.qa.push(QaPair {
            question_id: format!("q{i:04}"),
            question_text: question.clone(),
            gold_answers: vec![answer.clone()],
        });
        out.knowledge.push(KnowledgeEntry { question, answer, gold_fact, topic: Some(entity) });
    }
    for i in 0..options.n_filler {
        let mut body = Vec::new();
        let mut n = 0;
        while n < options.filler_tokens {
            let len = rng.random_range(6..14);
            body.push(filler_sentence(&mut rng, &vocab, len));
            n += len + 1;
        }
        out.documents.push(SourceDocument {
            doc_id: format!("filler-{i:04}"),
            title: capitalize(&vocab[i % vocab.len()]),
            text: body.join(" "),
        });
    }
    out
}

#[derive(Serialize)]
struct CorpusLine<'a> {
    id: &'a str,
    title: &'a str,
    text: &'a str,
}

#[derive(Serialize)]
struct QaLine<'a> {
    id: &'a str,
    question: &'a str,
    answers: &'a [String],
}

/// Writes `corpus.jsonl`, `qa.jsonl` and `knowledge.jsonl` into `dir`.
pub fn write(dir: &Path, corpus: &SynthCorpus) -> Result<(), DataError> {
    io::write_jsonl_atomic(
        &dir.join("corpus.jsonl"),
        corpus.documents.iter().map(|d| CorpusLine { id: &d.doc_id, title: &d.title, text: &d.text }),
    )?;
    io::write_jsonl_atomic(
        &dir.join("qa.jsonl"),
        corpus.qa.iter().map(|q| QaLine { id: &q.question_id, question: &q.question_text, answers: &q.gold_answers }),
    )?;
    io::write_jsonl_atomic(&dir.join("knowledge.jsonl"), &corpus.knowledge)
}

#[cfg(test)]
mod tests {
    use super::*;
    use citeprobe_core::corpus::{chunk_corpus, ChunkOptions};

    #[test]
    fn deterministic() {
        let o = SynthOptions { n_questions: 10, n_filler: 3, ..SynthOptions::default() };
        assert_eq!(generate(&o), generate(&o));
        assert_ne!(generate(&o), generate(&SynthOptions { seed: 1, ..o }));
    }

    #[test]
    fn default_size() {
        let c = generate(&SynthOptions::default());
        assert_eq!(c.qa.len(), 200);
        let chunks = chunk_corpus(&c.documents, &ChunkOptions::default()).unwrap();
        assert!(chunks.len() >= 500, "{}", chunks.len());
    }

    #[test]
    fn gold_fact_only_in_gold_document() {
        let c = generate(&SynthOptions { n_questions: 30, n_filler: 5, ..SynthOptions::default() });
        for (i, k) in c.knowledge.iter().enumerate() {
            let fact = text::tokenize(&k.gold_fact);
            let answer = text::tokenize(&k.answer);
            for d in &c.documents {
                let terms = text::tokenize(&format!("{} {}", d.title, d.text));
                let is_gold = d.doc_id == format!("gold-{i:04}");
                assert_eq!(text::contains_run(&terms, &fact), is_gold, "{}", d.doc_id);
                assert_eq!(text::contains_run(&terms, &answer), is_gold, "{}", d.doc_id);
            }
        }
    }
}
