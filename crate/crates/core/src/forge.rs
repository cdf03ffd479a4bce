//! Adversarial documents: previously cited statements appended to documents
//! that should not be cited for them.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{self, AttributedAnswer, Citation};
use crate::corpus::{ChunkStore, DocumentChunk};
use crate::retrieval::{ContextEntry, RetrievedContext};
use crate::text;

pub const INJECTION_SEPARATOR: &str = " ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgeCondition {
    /// A corpus document from outside the retrieved set, appended to the context.
    Random,
    /// A context document predicted relevant but not cited at all.
    RelevantNotCited,
    /// A context document cited, but only for other statements.
    CitedOther,
}

impl ForgeCondition {
    pub const ALL: [ForgeCondition; 3] = [
        ForgeCondition::Random,
        ForgeCondition::RelevantNotCited,
        ForgeCondition::CitedOther,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ForgeCondition::Random => "random",
            ForgeCondition::RelevantNotCited => "relevant_not_cited",
            ForgeCondition::CitedOther => "cited_other",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ForgeCondition::Random => "Random",
            ForgeCondition::RelevantNotCited => "Relevant but not cited",
            ForgeCondition::CitedOther => "Cited for other reason",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "position")]
pub enum Insertion {
    AppendToContext,
    SubstituteAtPosition(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdversarialVariant {
    pub base_chunk: DocumentChunk,
    pub condition: ForgeCondition,
    pub injected_statement: String,
    pub forged_display_text: String,
    pub insertion: Insertion,
}

impl AdversarialVariant {
    /// The forged document as a chunk, with the base chunk's identity.
    pub fn forged_chunk(&self) -> DocumentChunk {
        DocumentChunk {
            display_text: self.forged_display_text.clone(),
            ..self.base_chunk.clone()
        }
    }
}

/// A document chosen to receive the statement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForgeTarget {
    pub base_chunk: DocumentChunk,
    pub insertion: Insertion,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ForgeError {
    #[error("injected statement is empty")]
    EmptyStatement,
    #[error("{0:?} targets cannot be appended; only random documents are")]
    AppendForContextDocument(ForgeCondition),
    #[error("random documents must be appended, not substituted")]
    SubstituteRandom,
    #[error("substitution position {position} invalid for context of {len}")]
    InvalidPosition { position: usize, len: usize },
    #[error("document at position {position} is `{found}`, expected `{expected}`")]
    BaseMismatch {
        position: usize,
        expected: String,
        found: String,
    },
    #[error("injected statement contains the gold fact")]
    StatementCarriesGoldFact,
}

/// Length bounds on a target statement, in terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StatementBounds {
    pub min_terms: usize,
    pub max_terms: usize,
}

impl Default for StatementBounds {
    fn default() -> Self {
        Self {
            min_terms: 1,
            max_terms: 6,
        }
    }
}

/// Picks at most one target statement: among citations whose statement has
/// a length within `bounds` and does not just restate the question, the
/// longest (in terms), earliest span first on ties.
pub fn select_statements(
    answer: &AttributedAnswer,
    question: &str,
    bounds: StatementBounds,
) -> Vec<Citation> {
    answer
        .citations
        .iter()
        .filter(|c| {
            let n = text::tokenize(&c.statement_text).len();
            n >= bounds.min_terms
                && n <= bounds.max_terms
                && !attribution::appropriateness_check(&c.statement_text, question)
        })
        .max_by(|a, b| {
            let la = text::tokenize(&a.statement_text).len();
            let lb = text::tokenize(&b.statement_text).len();
            la.cmp(&lb).then_with(|| b.answer_span.cmp(&a.answer_span))
        })
        .cloned()
        .into_iter()
        .collect()
}

/// Seed for one question's random draw, independent of processing order.
pub fn question_seed(seed: u64, question_id: &str) -> u64 {
    crate::digest::fnv1a64(seed, question_id)
}

/// Chooses the document for each condition. Conditions without an eligible
/// document are absent from the result.
///
/// `excluded` lists chunk ids the random draw must avoid (the retrieved
/// candidates); context chunks are always excluded.
pub fn categorize_targets(
    answer: &AttributedAnswer,
    target: &Citation,
    context: &RetrievedContext,
    corpus: &ChunkStore,
    excluded: &BTreeSet<String>,
    seed: u64,
) -> BTreeMap<ForgeCondition, ForgeTarget> {
    let mut out = BTreeMap::new();

    let in_context: BTreeSet<&str> = context
        .entries
        .iter()
        .map(|e| e.chunk.chunk_id.as_str())
        .collect();
    let eligible: Vec<&DocumentChunk> = corpus
        .chunks()
        .iter()
        .filter(|c| !in_context.contains(c.chunk_id.as_str()) && !excluded.contains(&c.chunk_id))
        .collect();
    if !eligible.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(question_seed(seed, &answer.question_id));
        let pick = eligible[rng.random_range(0..eligible.len())];
        out.insert(
            ForgeCondition::Random,
            ForgeTarget {
                base_chunk: pick.clone(),
                insertion: Insertion::AppendToContext,
            },
        );
    }

    let cited_anywhere: BTreeSet<usize> = answer.cited_positions().into_iter().collect();
    let relevant_uncited = context.entries.iter().position(|e| {
        answer
            .relevance_predictions
            .get(e.context_position)
            .copied()
            .unwrap_or(false)
            && !cited_anywhere.contains(&e.context_position)
    });
    if let Some(i) = relevant_uncited {
        let e = &context.entries[i];
        out.insert(
            ForgeCondition::RelevantNotCited,
            ForgeTarget {
                base_chunk: e.chunk.clone(),
                insertion: Insertion::SubstituteAtPosition(e.context_position),
            },
        );
    }

    let target_norm = target.normalized();
    let cited_for_target: BTreeSet<usize> = answer
        .citations
        .iter()
        .filter(|c| c.normalized() == target_norm)
        .flat_map(|c| c.cited_positions.iter().copied())
        .collect();
    let cited_for_other: BTreeSet<usize> = answer
        .citations
        .iter()
        .filter(|c| c.normalized() != target_norm)
        .flat_map(|c| c.cited_positions.iter().copied())
        .filter(|p| !cited_for_target.contains(p))
        .collect();
    if let Some(e) = context
        .entries
        .iter()
        .find(|e| cited_for_other.contains(&e.context_position))
    {
        out.insert(
            ForgeCondition::CitedOther,
            ForgeTarget {
                base_chunk: e.chunk.clone(),
                insertion: Insertion::SubstituteAtPosition(e.context_position),
            },
        );
    }
    out
}

/// Appends `statement` to the base chunk's display text. No separator is
/// added when the display text already ends in whitespace.
pub fn forge_document(
    base: &DocumentChunk,
    condition: ForgeCondition,
    insertion: Insertion,
    statement: &str,
) -> Result<AdversarialVariant, ForgeError> {
    if statement.trim().is_empty() {
        return Err(ForgeError::EmptyStatement);
    }
    match (condition, insertion) {
        (ForgeCondition::Random, Insertion::SubstituteAtPosition(_)) => {
            return Err(ForgeError::SubstituteRandom)
        }
        (c, Insertion::AppendToContext) if c != ForgeCondition::Random => {
            return Err(ForgeError::AppendForContextDocument(c))
        }
        _ => {}
    }
    let base_text = &base.display_text;
    let separator = if base_text.is_empty() || base_text.ends_with(char::is_whitespace) {
        ""
    } else {
        INJECTION_SEPARATOR
    };
    Ok(AdversarialVariant {
        base_chunk: base.clone(),
        condition,
        injected_statement: statement.into(),
        forged_display_text: format!("{base_text}{separator}{statement}"),
        insertion,
    })
}

/// Rejects an injection whose statement alone already states the gold fact.
pub fn ensure_irrelevant(statement: &str, gold_fact: &str) -> Result<(), ForgeError> {
    if text::contains_run(&text::tokenize(statement), &text::tokenize(gold_fact)) {
        return Err(ForgeError::StatementCarriesGoldFact);
    }
    Ok(())
}

/// The context the model sees in the adversarial run. Returns the new
/// context and the adversarial document's position in it.
pub fn build_adversarial_context(
    original: &RetrievedContext,
    variant: &AdversarialVariant,
) -> Result<(RetrievedContext, usize), ForgeError> {
    let mut ctx = original.clone();
    let forged = variant.forged_chunk();
    let position = match variant.insertion {
        Insertion::AppendToContext => {
            ctx.entries.push(ContextEntry {
                chunk: forged,
                bm25_score: 0.0,
                rerank_score: 0.0,
                context_position: original.len(),
            });
            original.len()
        }
        Insertion::SubstituteAtPosition(p) => {
            let entry = ctx.entries.get_mut(p).ok_or(ForgeError::InvalidPosition {
                position: p,
                len: original.len(),
            })?;
            if entry.chunk.chunk_id != variant.base_chunk.chunk_id {
                return Err(ForgeError::BaseMismatch {
                    position: p,
                    expected: variant.base_chunk.chunk_id.clone(),
                    found: entry.chunk.chunk_id.clone(),
                });
            }
            entry.chunk = forged;
            p
        }
    };
    ctx.renumber();
    Ok((ctx, position))
}

/// Removes every occurrence of the statement's term run from `text_`,
/// line by line, keeping the remaining surface tokens.
pub fn ablate_statement(text_: &str, statement: &str) -> String {
    let needle = text::tokenize(statement);
    let lines: Vec<String> = text_
        .split('\n')
        .map(|line| {
            let tokens = text::surface_tokens(line);
            if needle.is_empty() {
                return text::detokenize(&tokens);
            }
            // Word tokens only take part in matching; punctuation is kept.
            let words: Vec<(usize, String)> = tokens
                .iter()
                .enumerate()
                .filter_map(|(i, t)| text::token_term(t).map(|term| (i, term)))
                .collect();
            let mut drop = alloc::vec![false; tokens.len()];
            let mut w = 0;
            while w + needle.len() <= words.len() {
                if words[w..w + needle.len()]
                    .iter()
                    .map(|(_, t)| t)
                    .eq(needle.iter())
                {
                    for (i, _) in &words[w..w + needle.len()] {
                        drop[*i] = true;
                    }
                    w += needle.len();
                } else {
                    w += 1;
                }
            }
            let kept: Vec<&String> = tokens
                .iter()
                .zip(&drop)
                .filter(|(_, d)| !**d)
                .map(|(t, _)| t)
                .collect();
            text::detokenize(&kept)
        })
        .collect();
    lines.join("\n")
}
