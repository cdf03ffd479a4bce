//! Citations, attributed answers, the provider wire format and the
//! citation-quality checks (support, appropriateness, comprehensiveness).
//!
//! All offsets are character indices into the answer text.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::retrieval::RetrievedContext;
use crate::text;

pub const ANSWER_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

/// A link from a statement in the answer to the context documents claimed to
/// support it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Citation {
    pub statement_text: String,
    pub answer_span: Span,
    pub cited_positions: Vec<usize>,
}

impl Citation {
    /// Citation over `answer_text[span]`. Returns `None` for an invalid span.
    pub fn over(answer_text: &str, span: Span, cited_positions: Vec<usize>) -> Option<Self> {
        if span.start >= span.end {
            return None;
        }
        let statement_text = text::char_slice(answer_text, span.start, span.end)?.into();
        Some(Self {
            statement_text,
            answer_span: span,
            cited_positions,
        })
    }

    pub fn normalized(&self) -> String {
        text::normalize_statement(&self.statement_text)
    }
}

/// The full factual assertion behind a statement. Only housed; nothing in
/// this crate populates it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claim {
    pub citation_index: usize,
    pub expanded_assertion: String,
}

impl Claim {
    pub fn new(citation_index: usize, expanded_assertion: impl Into<String>) -> Option<Self> {
        let expanded_assertion = expanded_assertion.into();
        (!expanded_assertion.trim().is_empty()).then_some(Self {
            citation_index,
            expanded_assertion,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributedAnswer {
    #[serde(default = "schema_v1")]
    pub schema_version: u32,
    pub question_id: String,
    pub answer_text: String,
    pub citations: Vec<Citation>,
    pub relevance_predictions: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cite_predictions: Option<Vec<bool>>,
    pub context_fingerprint: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub claims: Vec<Claim>,
}

fn schema_v1() -> u32 {
    ANSWER_SCHEMA_VERSION
}

impl AttributedAnswer {
    /// Answer with no citations for the given context.
    pub fn uncited(
        question_id: &str,
        answer_text: impl Into<String>,
        context: &RetrievedContext,
        relevance_predictions: Vec<bool>,
    ) -> Self {
        Self {
            schema_version: ANSWER_SCHEMA_VERSION,
            question_id: question_id.into(),
            answer_text: answer_text.into(),
            citations: Vec::new(),
            relevance_predictions,
            cite_predictions: None,
            context_fingerprint: context_fingerprint(context),
            claims: Vec::new(),
        }
    }

    /// Positions cited by any citation, ascending.
    pub fn cited_positions(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self
            .citations
            .iter()
            .flat_map(|c| c.cited_positions.iter().copied())
            .collect();
        all.sort_unstable();
        all.dedup();
        all
    }

    /// Answer text with ` [p, q]` markers after each cited statement.
    pub fn render_inline(&self) -> String {
        let mut order: Vec<&Citation> = self.citations.iter().collect();
        order.sort_by_key(|c| c.answer_span);
        let chars: Vec<char> = self.answer_text.chars().collect();
        let mut out = String::new();
        let mut cursor = 0;
        for c in order {
            let end = c.answer_span.end.min(chars.len());
            if end < cursor {
                continue;
            }
            out.extend(&chars[cursor..end]);
            let marks: Vec<String> = c.cited_positions.iter().map(|p| format!("{p}")).collect();
            out.push_str(&format!(" [{}]", marks.join(", ")));
            cursor = end;
        }
        out.extend(&chars[cursor..]);
        out
    }
}

/// SHA-256 over the context's display texts, in order.
pub fn context_fingerprint(context: &RetrievedContext) -> String {
    crate::digest::sha256_hex(context.display_texts())
}

/// Provider-facing id of the document at a context position.
pub fn wire_document_id(position: usize) -> String {
    format!("doc_{position}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderCitation {
    pub start: usize,
    pub end: usize,
    pub text: String,
    pub document_ids: Vec<String>,
}

/// Grounded-generation response shape every provider is mapped to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderResponse {
    pub text: String,
    #[serde(default)]
    pub citations: Vec<ProviderCitation>,
    /// Documents the provider predicted it would cite, when it reports them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cited_document_ids: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseWarning {
    /// Citation `index` repeated the span of citation `kept`; positions merged.
    CollapsedDuplicateSpan { index: usize, kept: usize },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("citation {index}: span {start}..{end} outside answer of {len} characters")]
    SpanOutOfRange {
        index: usize,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("citation {index}: text {found:?} does not match answer span {expected:?}")]
    SpanTextMismatch {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("citation {index}: unknown document id `{id}`")]
    UnknownDocument { index: usize, id: String },
    #[error("citation {index}: no document ids")]
    NoDocuments { index: usize },
    #[error("cite prediction names unknown document id `{0}`")]
    UnknownPredictedDocument(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedAnswer {
    pub answer: AttributedAnswer,
    pub warnings: Vec<ParseWarning>,
}

fn position_lookup(context: &RetrievedContext) -> BTreeMap<String, usize> {
    (0..context.len())
        .map(|p| (wire_document_id(p), p))
        .collect()
}

/// Validates a provider response against its context and maps document ids
/// to context positions. Relevance predictions are the top `relevance_top_n`
/// context entries by rerank score.
pub fn parse_citations(
    response: &ProviderResponse,
    context: &RetrievedContext,
    question_id: &str,
    relevance_top_n: usize,
) -> Result<ParsedAnswer, ParseError> {
    let lookup = position_lookup(context);
    let len = text::char_len(&response.text);
    let mut citations: Vec<Citation> = Vec::new();
    let mut by_span: BTreeMap<Span, usize> = BTreeMap::new();
    let mut warnings = Vec::new();
    for (index, raw) in response.citations.iter().enumerate() {
        if raw.start >= raw.end || raw.end > len {
            return Err(ParseError::SpanOutOfRange {
                index,
                start: raw.start,
                end: raw.end,
                len,
            });
        }
        let expected = text::char_slice(&response.text, raw.start, raw.end).unwrap_or_default();
        if expected != raw.text {
            return Err(ParseError::SpanTextMismatch {
                index,
                expected: expected.into(),
                found: raw.text.clone(),
            });
        }
        if raw.document_ids.is_empty() {
            return Err(ParseError::NoDocuments { index });
        }
        let mut positions = Vec::with_capacity(raw.document_ids.len());
        for id in &raw.document_ids {
            let p = *lookup.get(id).ok_or_else(|| ParseError::UnknownDocument {
                index,
                id: id.clone(),
            })?;
            if !positions.contains(&p) {
                positions.push(p);
            }
        }
        let span = Span {
            start: raw.start,
            end: raw.end,
        };
        if let Some(&kept) = by_span.get(&span) {
            let target: &mut Citation = &mut citations[kept];
            for p in positions {
                if !target.cited_positions.contains(&p) {
                    target.cited_positions.push(p);
                }
            }
            warnings.push(ParseWarning::CollapsedDuplicateSpan { index, kept });
            continue;
        }
        by_span.insert(span, citations.len());
        citations.push(Citation {
            statement_text: raw.text.clone(),
            answer_span: span,
            cited_positions: positions,
        });
    }
    let cite_predictions = match &response.cited_document_ids {
        None => None,
        Some(ids) => {
            let mut flags = alloc::vec![false; context.len()];
            for id in ids {
                let p = *lookup
                    .get(id)
                    .ok_or_else(|| ParseError::UnknownPredictedDocument(id.clone()))?;
                flags[p] = true;
            }
            Some(flags)
        }
    };
    let answer = AttributedAnswer {
        citations,
        cite_predictions,
        ..AttributedAnswer::uncited(
            question_id,
            response.text.clone(),
            context,
            context.relevance_predictions(relevance_top_n),
        )
    };
    Ok(ParsedAnswer { answer, warnings })
}

/// Inverse of [`parse_citations`] for answers produced against `context`.
pub fn to_provider_response(answer: &AttributedAnswer) -> ProviderResponse {
    ProviderResponse {
        text: answer.answer_text.clone(),
        citations: answer
            .citations
            .iter()
            .map(|c| ProviderCitation {
                start: c.answer_span.start,
                end: c.answer_span.end,
                text: c.statement_text.clone(),
                document_ids: c
                    .cited_positions
                    .iter()
                    .map(|&p| wire_document_id(p))
                    .collect(),
            })
            .collect(),
        cited_document_ids: answer.cite_predictions.as_ref().map(|flags| {
            flags
                .iter()
                .enumerate()
                .filter(|(_, f)| **f)
                .map(|(p, _)| wire_document_id(p))
                .collect()
        }),
    }
}

/// First citation of `new_answer` whose normalized statement equals the
/// target's.
pub fn match_statement<'a>(
    target: &Citation,
    new_answer: &'a AttributedAnswer,
) -> Option<&'a Citation> {
    let wanted = target.normalized();
    if wanted.is_empty() {
        return None;
    }
    new_answer
        .citations
        .iter()
        .find(|c| c.normalized() == wanted)
}

/// Decides whether a document supports a statement.
pub trait SupportJudge {
    fn supports(&self, statement: &str, document: &str) -> bool;
}

/// Support as containment: the statement's terms occur contiguously, in
/// order, among the document's terms.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalContainment;

impl SupportJudge for LexicalContainment {
    fn supports(&self, statement: &str, document: &str) -> bool {
        text::contains_run(&text::tokenize(document), &text::tokenize(statement))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AttributionError {
    #[error("cited position {position} outside context of {len} documents")]
    PositionOutOfRange { position: usize, len: usize },
}

/// Support verdict for each cited position, in citation order.
pub fn citation_support_proxy<J: SupportJudge + ?Sized>(
    citation: &Citation,
    context: &RetrievedContext,
    judge: &J,
) -> Result<Vec<(usize, bool)>, AttributionError> {
    citation
        .cited_positions
        .iter()
        .map(|&p| {
            let entry = context
                .entries
                .get(p)
                .ok_or(AttributionError::PositionOutOfRange {
                    position: p,
                    len: context.len(),
                })?;
            Ok((
                p,
                judge.supports(&citation.statement_text, &entry.chunk.display_text),
            ))
        })
        .collect()
}

/// `true` when every content term of the statement already appears in the
/// question, i.e. the citation only restates the question.
pub fn appropriateness_check(statement: &str, question: &str) -> bool {
    let question_terms = text::tokenize(question);
    text::content_terms(statement)
        .iter()
        .all(|t| question_terms.contains(t))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coverage {
    Covered,
    NotCovered,
    /// No gold answers to check against.
    Skipped,
}

/// Whether some gold answer is attributed: it occurs (as a term run) inside a
/// cited statement, or at most `window` answer terms away from one.
pub fn comprehensiveness_check<S: AsRef<str>>(
    answer: &AttributedAnswer,
    gold_answers: &[S],
    window: usize,
) -> Coverage {
    if gold_answers.is_empty() {
        return Coverage::Skipped;
    }
    let spans = text::term_spans(&answer.answer_text);
    let terms: Vec<&str> = spans.iter().map(|t| t.term.as_str()).collect();
    let cited: Vec<(usize, usize)> = answer
        .citations
        .iter()
        .filter_map(|c| {
            let inside: Vec<usize> = spans
                .iter()
                .enumerate()
                .filter(|(_, t)| t.start >= c.answer_span.start && t.end <= c.answer_span.end)
                .map(|(i, _)| i)
                .collect();
            Some((*inside.first()?, *inside.last()? + 1))
        })
        .collect();
    for gold in gold_answers {
        let gold_terms = text::tokenize(gold.as_ref());
        if gold_terms.is_empty() || gold_terms.len() > terms.len() {
            continue;
        }
        let needle: Vec<&str> = gold_terms.iter().map(String::as_str).collect();
        for (start, w) in terms.windows(needle.len()).enumerate() {
            if w != needle.as_slice() {
                continue;
            }
            let end = start + needle.len();
            let near = cited.iter().any(|&(cs, ce)| {
                let gap = cs.saturating_sub(end).max(start.saturating_sub(ce));
                gap <= window
            });
            if near {
                return Coverage::Covered;
            }
        }
    }
    Coverage::NotCovered
}

/// Clause-level candidate statements of an answer.
pub fn candidate_statements(answer_text: &str) -> Vec<Span> {
    text::clause_spans(answer_text)
        .into_iter()
        .map(|(start, end)| Span { start, end })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::DocumentChunk;
    use crate::retrieval::ContextEntry;
    use alloc::string::ToString;
    use alloc::vec;

    fn context(texts: &[&str]) -> RetrievedContext {
        RetrievedContext {
            question_id: "q".into(),
            entries: texts
                .iter()
                .enumerate()
                .map(|(i, t)| ContextEntry {
                    chunk: DocumentChunk::new(
                        &format!("d{i}"),
                        "T",
                        0,
                        text::surface_tokens(t),
                        "\n",
                    ),
                    bm25_score: 1.0,
                    rerank_score: 1.0 - i as f64 / 10.0,
                    context_position: i,
                })
                .collect(),
        }
    }

    const PENGUIN: &str = "The Emperor Penguin is the tallest or biggest penguin in the world.";

    fn penguin_response() -> ProviderResponse {
        ProviderResponse {
            text: PENGUIN.into(),
            citations: vec![
                ProviderCitation {
                    start: 4,
                    end: 19,
                    text: "Emperor Penguin".into(),
                    document_ids: vec!["doc_0".into()],
                },
                ProviderCitation {
                    start: 27,
                    end: 34,
                    text: "tallest".into(),
                    document_ids: vec!["doc_0".into()],
                },
            ],
            cited_document_ids: None,
        }
    }

    #[test]
    fn parse_tallest_to_doc_zero() {
        let ctx = context(&["emperor penguins are the tallest penguins"]);
        let parsed = parse_citations(&penguin_response(), &ctx, "q", 3).unwrap();
        let tallest = &parsed.answer.citations[1];
        assert_eq!(tallest.statement_text, "tallest");
        assert_eq!(tallest.cited_positions, vec![0]);
        assert!(parsed.warnings.is_empty());
        assert_eq!(parsed.answer.context_fingerprint, context_fingerprint(&ctx));
    }

    #[test]
    fn parse_rejects_span_beyond_answer() {
        let ctx = context(&["x"]);
        let mut resp = penguin_response();
        resp.citations[1].end = 500;
        match parse_citations(&resp, &ctx, "q", 3).unwrap_err() {
            ParseError::SpanOutOfRange { index, .. } => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parse_rejects_unknown_document_and_text_mismatch() {
        let ctx = context(&["x"]);
        let mut resp = penguin_response();
        resp.citations[0].document_ids = vec!["doc_7".into()];
        assert!(matches!(
            parse_citations(&resp, &ctx, "q", 3),
            Err(ParseError::UnknownDocument { index: 0, .. })
        ));
        let mut resp = penguin_response();
        resp.citations[0].text = "Emperor".into();
        assert!(matches!(
            parse_citations(&resp, &ctx, "q", 3),
            Err(ParseError::SpanTextMismatch { index: 0, .. })
        ));
    }

    #[test]
    fn parse_empty_citations() {
        let ctx = context(&["x"]);
        let resp = ProviderResponse {
            text: "No idea.".into(),
            citations: vec![],
            cited_document_ids: None,
        };
        let parsed = parse_citations(&resp, &ctx, "q", 3).unwrap();
        assert!(parsed.answer.citations.is_empty());
    }

    #[test]
    fn parse_collapses_identical_spans() {
        let ctx = context(&["a", "b"]);
        let mut resp = penguin_response();
        resp.citations.push(ProviderCitation {
            start: 4,
            end: 19,
            text: "Emperor Penguin".into(),
            document_ids: vec!["doc_1".into(), "doc_0".into()],
        });
        let parsed = parse_citations(&resp, &ctx, "q", 3).unwrap();
        assert_eq!(parsed.answer.citations.len(), 2);
        assert_eq!(parsed.answer.citations[0].cited_positions, vec![0, 1]);
        assert_eq!(
            parsed.warnings,
            vec![ParseWarning::CollapsedDuplicateSpan { index: 2, kept: 0 }]
        );
    }

    #[test]
    fn match_statement_cases() {
        let ctx = context(&["x"]);
        let answer = parse_citations(&penguin_response(), &ctx, "q", 3)
            .unwrap()
            .answer;
        let target = answer.citations[0].clone();
        assert_eq!(
            match_statement(&target, &answer),
            Some(&answer.citations[0])
        );

        let lower = ProviderResponse {
            text: "the emperor penguin.".into(),
            citations: vec![ProviderCitation {
                start: 4,
                end: 19,
                text: "emperor penguin".into(),
                document_ids: vec!["doc_0".into()],
            }],
            cited_document_ids: None,
        };
        let other = parse_citations(&lower, &ctx, "q", 3).unwrap().answer;
        assert!(match_statement(&target, &other).is_some());

        let none = AttributedAnswer::uncited("q", "nothing", &ctx, vec![true]);
        assert!(match_statement(&target, &none).is_none());
    }

    #[test]
    fn support_proxy_cases() {
        let ctx = context(&[
            "The capital of Germany is Berlin",
            "Penguins live in Antarctica",
        ]);
        let berlin = Citation {
            statement_text: "Berlin".into(),
            answer_span: Span { start: 0, end: 6 },
            cited_positions: vec![0, 1],
        };
        let verdicts = citation_support_proxy(&berlin, &ctx, &LexicalContainment).unwrap();
        assert_eq!(verdicts, vec![(0, true), (1, false)]);
        let bad = Citation {
            cited_positions: vec![9],
            ..berlin
        };
        assert_eq!(
            citation_support_proxy(&bad, &ctx, &LexicalContainment),
            Err(AttributionError::PositionOutOfRange {
                position: 9,
                len: 2
            })
        );
    }

    #[test]
    fn appropriateness_cases() {
        let q = "how long was gabby in a coma in the choice";
        assert!(appropriateness_check("the choice", q));
        assert!(!appropriateness_check("three months", q));
        assert!(appropriateness_check("", q));
    }

    fn gabby_answer(cite_months: bool) -> AttributedAnswer {
        let text = "In the novel the choice, Gabby is in a coma for three months.";
        let ctx = context(&["a", "b", "c", "d", "e"]);
        let mut citations = vec![
            Citation::over(text, Span { start: 7, end: 12 }, vec![0, 4]).unwrap(),
            Citation::over(text, Span { start: 13, end: 23 }, vec![0, 3, 4]).unwrap(),
        ];
        if cite_months {
            citations.push(Citation::over(text, Span { start: 48, end: 60 }, vec![2]).unwrap());
        }
        AttributedAnswer {
            citations,
            ..AttributedAnswer::uncited("q", text, &ctx, vec![])
        }
    }

    #[test]
    fn comprehensiveness_cases() {
        assert_eq!(
            gabby_answer(false).citations[1].statement_text,
            "the choice"
        );
        assert_eq!(
            comprehensiveness_check(&gabby_answer(true), &["three months"], 1),
            Coverage::Covered
        );
        assert_eq!(
            comprehensiveness_check(&gabby_answer(false), &["three months"], 1),
            Coverage::NotCovered
        );
        assert_eq!(
            comprehensiveness_check(&gabby_answer(true), &["two weeks"], 1),
            Coverage::NotCovered
        );
        assert_eq!(
            comprehensiveness_check::<&str>(&gabby_answer(true), &[], 1),
            Coverage::Skipped
        );
    }

    #[test]
    fn comprehensiveness_window() {
        let text = "Berlin is big";
        let ctx = context(&["a"]);
        let answer = AttributedAnswer {
            citations: vec![Citation::over(text, Span { start: 10, end: 13 }, vec![0]).unwrap()],
            ..AttributedAnswer::uncited("q", text, &ctx, vec![])
        };
        assert_eq!(
            comprehensiveness_check(&answer, &["berlin"], 0),
            Coverage::NotCovered
        );
        assert_eq!(
            comprehensiveness_check(&answer, &["berlin"], 1),
            Coverage::Covered
        );
    }

    #[test]
    fn inline_rendering() {
        let answer = gabby_answer(false);
        assert_eq!(
            answer.render_inline(),
            "In the novel [0, 4] the choice [0, 3, 4], Gabby is in a coma for three months."
        );
    }

    #[test]
    fn claim_must_be_nonempty() {
        assert!(Claim::new(0, "  ").is_none());
        assert_eq!(
            Claim::new(0, "Emperor penguin: tallest")
                .unwrap()
                .citation_index,
            0
        );
        let _ = "x".to_string();
    }
}
