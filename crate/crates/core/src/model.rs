//! Attributed-answer generators.
//!
//! [`AnswerGenerator`] is the seam between the experiment and a model. The
//! scripted models here are deterministic and have known citation behavior,
//! which makes them ground truth for the detector:
//!
//! * [`ModelBehavior::FaithfulOracle`] answers from its knowledge and cites a
//!   document only when it contains the full gold fact sentence.
//! * [`ModelBehavior::PostRationalizer`] answers from memory and cites every
//!   document whose text contains the statement, i.e. pure token matching.
//! * [`ModelBehavior::Parametric`] answers from memory and never cites.
//!
//! Live services are reached through the harness crate, which maps them onto
//! [`ProviderRequest`] and [`ProviderResponse`](crate::attribution::ProviderResponse).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{self, AttributedAnswer, Citation, Span};
use crate::retrieval::RetrievedContext;
use crate::text;

pub const DEFAULT_RELEVANCE_TOP_N: usize = 3;
pub const DEFAULT_POSTHOC_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationMode {
    DirectAttribution,
    PostHocAttribution,
    NoAttribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub question_id: String,
    pub question_text: String,
    pub context: RetrievedContext,
    pub mode: GenerationMode,
    pub seed: u64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GenerationError {
    #[error("{mode:?} needs a non-empty context")]
    EmptyContext { mode: GenerationMode },
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited; gave up after {attempts} attempt(s)")]
    RateLimited { attempts: u32 },
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
    #[error("no scripted answer for question `{0}`")]
    UnknownQuestion(String),
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<(), GenerationError> {
        if self.mode != GenerationMode::NoAttribution && self.context.is_empty() {
            return Err(GenerationError::EmptyContext { mode: self.mode });
        }
        Ok(())
    }

    /// The provider-facing request body.
    pub fn to_provider_request(&self) -> ProviderRequest {
        ProviderRequest {
            message: self.question_text.clone(),
            documents: self
                .context
                .entries
                .iter()
                .enumerate()
                .map(|(p, e)| ProviderDocument {
                    id: attribution::wire_document_id(p),
                    title: e.chunk.title.clone(),
                    snippet: e.chunk.display_text.clone(),
                })
                .collect(),
            temperature: Some(0.0),
            seed: Some(self.seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderDocument {
    pub id: String,
    pub title: String,
    pub snippet: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderRequest {
    pub message: String,
    pub documents: Vec<ProviderDocument>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Anything that turns a question plus context into an attributed answer.
pub trait AnswerGenerator {
    fn generate(&self, request: &GenerationRequest) -> Result<AttributedAnswer, GenerationError>;
}

impl<T: AnswerGenerator + ?Sized> AnswerGenerator for &T {
    fn generate(&self, request: &GenerationRequest) -> Result<AttributedAnswer, GenerationError> {
        (**self).generate(request)
    }
}

impl<T: AnswerGenerator + ?Sized> AnswerGenerator for alloc::boxed::Box<T> {
    fn generate(&self, request: &GenerationRequest) -> Result<AttributedAnswer, GenerationError> {
        (**self).generate(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelBehavior {
    FaithfulOracle,
    PostRationalizer,
    Parametric,
}

/// What a scripted model knows about one question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub question: String,
    pub answer: String,
    /// Sentence a document must contain for the faithful oracle to cite it.
    pub gold_fact: String,
    /// Optional second statement, typically the question's subject.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScriptedOptions {
    pub relevance_top_n: usize,
    pub posthoc_threshold: f64,
}

impl Default for ScriptedOptions {
    fn default() -> Self {
        Self {
            relevance_top_n: DEFAULT_RELEVANCE_TOP_N,
            posthoc_threshold: DEFAULT_POSTHOC_THRESHOLD,
        }
    }
}

/// Deterministic model keyed by normalized question text.
#[derive(Debug, Clone)]
pub struct ScriptedModel {
    behavior: ModelBehavior,
    knowledge: BTreeMap<String, KnowledgeEntry>,
    options: ScriptedOptions,
}

struct Statement<'a> {
    text: &'a str,
    span: Span,
    /// Term run a document must contain to be cited for this statement.
    evidence: Vec<String>,
}

impl ScriptedModel {
    pub fn new(
        behavior: ModelBehavior,
        entries: impl IntoIterator<Item = KnowledgeEntry>,
        options: ScriptedOptions,
    ) -> Self {
        let knowledge = entries
            .into_iter()
            .map(|e| (text::normalize_statement(&e.question), e))
            .collect();
        Self {
            behavior,
            knowledge,
            options,
        }
    }

    pub fn behavior(&self) -> ModelBehavior {
        self.behavior
    }

    pub fn lookup(&self, question: &str) -> Option<&KnowledgeEntry> {
        self.knowledge.get(&text::normalize_statement(question))
    }

    /// Answer text and the spans of its statements: `(topic span, answer span)`.
    pub fn compose_answer(entry: &KnowledgeEntry) -> (String, Option<Span>, Span) {
        match &entry.topic {
            Some(topic) => {
                let prefix = "Regarding ";
                let middle = ", the answer is ";
                let topic_start = text::char_len(prefix);
                let topic_end = topic_start + text::char_len(topic);
                let answer_start = topic_end + text::char_len(middle);
                let answer_end = answer_start + text::char_len(&entry.answer);
                (
                    format!("{prefix}{topic}{middle}{}.", entry.answer),
                    Some(Span {
                        start: topic_start,
                        end: topic_end,
                    }),
                    Span {
                        start: answer_start,
                        end: answer_end,
                    },
                )
            }
            None => {
                let start = text::char_len("The answer is ");
                let end = start + text::char_len(&entry.answer);
                (
                    format!("The answer is {}.", entry.answer),
                    None,
                    Span { start, end },
                )
            }
        }
    }

    fn direct_citations(
        &self,
        entry: &KnowledgeEntry,
        text_: &str,
        topic_span: Option<Span>,
        answer_span: Span,
        context: &RetrievedContext,
    ) -> Vec<Citation> {
        let mut statements = Vec::new();
        let gold = text::tokenize(&entry.gold_fact);
        let evidence_for = |statement: &str| match self.behavior {
            ModelBehavior::FaithfulOracle => gold.clone(),
            _ => text::tokenize(statement),
        };
        if let (Some(span), Some(topic)) = (topic_span, entry.topic.as_deref()) {
            statements.push(Statement {
                text: topic,
                span,
                evidence: evidence_for(topic),
            });
        }
        statements.push(Statement {
            text: &entry.answer,
            span: answer_span,
            evidence: evidence_for(&entry.answer),
        });
        let doc_terms: Vec<Vec<String>> = context.display_texts().map(text::tokenize).collect();
        statements
            .into_iter()
            .filter_map(|s| {
                debug_assert_eq!(
                    text::char_slice(text_, s.span.start, s.span.end),
                    Some(s.text)
                );
                let positions: Vec<usize> = doc_terms
                    .iter()
                    .enumerate()
                    .filter(|(_, terms)| text::contains_run(terms, &s.evidence))
                    .map(|(p, _)| p)
                    .collect();
                if positions.is_empty() {
                    None
                } else {
                    Citation::over(text_, s.span, positions)
                }
            })
            .collect()
    }
}

impl AnswerGenerator for ScriptedModel {
    fn generate(&self, request: &GenerationRequest) -> Result<AttributedAnswer, GenerationError> {
        request.validate()?;
        let entry = self
            .lookup(&request.question_text)
            .ok_or_else(|| GenerationError::UnknownQuestion(request.question_text.clone()))?;
        let (answer_text, topic_span, answer_span) = Self::compose_answer(entry);
        let relevance = request
            .context
            .relevance_predictions(self.options.relevance_top_n);
        let base = AttributedAnswer::uncited(
            &request.question_id,
            answer_text.clone(),
            &request.context,
            relevance,
        );
        let answer = match (request.mode, self.behavior) {
            (GenerationMode::NoAttribution, _) | (_, ModelBehavior::Parametric) => base,
            (GenerationMode::PostHocAttribution, _) => {
                attach_posthoc_citations(base, &request.context, self.options.posthoc_threshold)
            }
            (GenerationMode::DirectAttribution, _) => {
                let citations = self.direct_citations(
                    entry,
                    &answer_text,
                    topic_span,
                    answer_span,
                    &request.context,
                );
                let mut flags = alloc::vec![false; request.context.len()];
                for c in &citations {
                    for &p in &c.cited_positions {
                        flags[p] = true;
                    }
                }
                AttributedAnswer {
                    citations,
                    cite_predictions: Some(flags),
                    ..base
                }
            }
        };
        Ok(answer)
    }
}

/// Fraction of the statement's distinct content terms present in `document`.
fn support_overlap(statement_terms: &[String], document_terms: &[String]) -> f64 {
    if statement_terms.is_empty() {
        return 0.0;
    }
    let hits = statement_terms
        .iter()
        .filter(|t| document_terms.contains(t))
        .count();
    hits as f64 / statement_terms.len() as f64
}

/// Post-hoc attribution: each clause of the answer is cited to the context
/// document with the highest content-term overlap, if that overlap reaches
/// `threshold`. Ties go to the earlier context position.
pub fn attach_posthoc_citations(
    answer: AttributedAnswer,
    context: &RetrievedContext,
    threshold: f64,
) -> AttributedAnswer {
    let doc_terms: Vec<Vec<String>> = context.display_texts().map(text::tokenize).collect();
    let mut citations = answer.citations;
    for span in attribution::candidate_statements(&answer.answer_text) {
        let Some(statement) = text::char_slice(&answer.answer_text, span.start, span.end) else {
            continue;
        };
        let mut terms = text::content_terms(statement);
        terms.sort_unstable();
        terms.dedup();
        let best = doc_terms
            .iter()
            .enumerate()
            .map(|(p, d)| (p, support_overlap(&terms, d)))
            .fold(None::<(usize, f64)>, |best, (p, s)| match best {
                Some((_, bs)) if bs >= s => best,
                _ => Some((p, s)),
            });
        if let Some((p, score)) = best {
            if score > 0.0 && score >= threshold {
                if let Some(c) = Citation::over(&answer.answer_text, span, alloc::vec![p]) {
                    citations.push(c);
                }
            }
        }
    }
    AttributedAnswer {
        citations,
        ..answer
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::DocumentChunk;
    use crate::retrieval::ContextEntry;
    use alloc::vec;

    pub(crate) fn context(texts: &[&str]) -> RetrievedContext {
        RetrievedContext {
            question_id: "q".into(),
            entries: texts
                .iter()
                .enumerate()
                .map(|(i, t)| ContextEntry {
                    chunk: DocumentChunk::new(
                        &format!("d{i}"),
                        "Doc",
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

    fn entry() -> KnowledgeEntry {
        KnowledgeEntry {
            question: "What is the capital of Germany?".into(),
            answer: "Berlin".into(),
            gold_fact: "The capital of Germany is Berlin".into(),
            topic: None,
        }
    }

    fn request(ctx: RetrievedContext, mode: GenerationMode) -> GenerationRequest {
        GenerationRequest {
            question_id: "q1".into(),
            question_text: "what is the capital of germany".into(),
            context: ctx,
            mode,
            seed: 7,
        }
    }

    fn model(behavior: ModelBehavior) -> ScriptedModel {
        ScriptedModel::new(behavior, [entry()], ScriptedOptions::default())
    }

    #[test]
    fn faithful_cites_gold_document_only() {
        let ctx = context(&[
            "Berlin has the best night-life",
            "The capital of Germany is Berlin.",
        ]);
        let a = model(ModelBehavior::FaithfulOracle)
            .generate(&request(ctx, GenerationMode::DirectAttribution))
            .unwrap();
        assert_eq!(a.answer_text, "The answer is Berlin.");
        assert_eq!(a.citations.len(), 1);
        assert_eq!(a.citations[0].statement_text, "Berlin");
        assert_eq!(a.citations[0].cited_positions, vec![1]);
        assert_eq!(a.cite_predictions, Some(vec![false, true]));
    }

    #[test]
    fn faithful_without_gold_cites_nothing() {
        let ctx = context(&["Berlin has the best night-life", "Berlin"]);
        let a = model(ModelBehavior::FaithfulOracle)
            .generate(&request(ctx, GenerationMode::DirectAttribution))
            .unwrap();
        assert!(a.citations.is_empty());
        assert_eq!(a.answer_text, "The answer is Berlin.");
    }

    #[test]
    fn post_rationalizer_cites_every_token_match() {
        let ctx = context(&[
            "Penguins",
            "The capital of Germany is Berlin",
            "Berlin has the best night-life",
        ]);
        let a = model(ModelBehavior::PostRationalizer)
            .generate(&request(ctx, GenerationMode::DirectAttribution))
            .unwrap();
        assert_eq!(a.citations[0].cited_positions, vec![1, 2]);
    }

    #[test]
    fn parametric_and_no_attribution_never_cite() {
        let ctx = context(&["The capital of Germany is Berlin"]);
        let a = model(ModelBehavior::Parametric)
            .generate(&request(ctx.clone(), GenerationMode::DirectAttribution))
            .unwrap();
        assert!(a.citations.is_empty());
        let b = model(ModelBehavior::PostRationalizer)
            .generate(&request(ctx, GenerationMode::NoAttribution))
            .unwrap();
        assert!(b.citations.is_empty());
        assert!(b.cite_predictions.is_none());
    }

    #[test]
    fn empty_context_rejected_for_attribution() {
        let ctx = context(&[]);
        let err = model(ModelBehavior::PostRationalizer)
            .generate(&request(ctx.clone(), GenerationMode::DirectAttribution))
            .unwrap_err();
        assert!(matches!(err, GenerationError::EmptyContext { .. }));
        assert!(model(ModelBehavior::PostRationalizer)
            .generate(&request(ctx, GenerationMode::NoAttribution))
            .is_ok());
    }

    #[test]
    fn unknown_question() {
        let mut req = request(context(&["x"]), GenerationMode::DirectAttribution);
        req.question_text = "who?".into();
        assert!(matches!(
            model(ModelBehavior::FaithfulOracle).generate(&req),
            Err(GenerationError::UnknownQuestion(_))
        ));
    }

    #[test]
    fn topic_statement_spans() {
        let e = KnowledgeEntry {
            topic: Some("Zorbia".into()),
            ..entry()
        };
        let (text_, topic, answer) = ScriptedModel::compose_answer(&e);
        assert_eq!(text_, "Regarding Zorbia, the answer is Berlin.");
        let t = topic.unwrap();
        assert_eq!(text::char_slice(&text_, t.start, t.end), Some("Zorbia"));
        assert_eq!(
            text::char_slice(&text_, answer.start, answer.end),
            Some("Berlin")
        );
    }

    #[test]
    fn posthoc_single_match() {
        let ctx = context(&["penguins of antarctica", "Berlin is a city"]);
        let base = AttributedAnswer::uncited("q", "Berlin.", &ctx, vec![]);
        let a = attach_posthoc_citations(base, &ctx, 0.5);
        assert_eq!(a.citations.len(), 1);
        assert_eq!(a.citations[0].cited_positions, vec![1]);
    }

    #[test]
    fn posthoc_no_overlap() {
        let ctx = context(&["penguins", "antarctica"]);
        let base = AttributedAnswer::uncited("q", "Berlin.", &ctx, vec![]);
        assert!(attach_posthoc_citations(base, &ctx, 0.5)
            .citations
            .is_empty());
    }

    #[test]
    fn posthoc_prefers_higher_overlap_then_position() {
        // statement content terms {emperor, penguin, tallest}:
        // doc0 has 2/3, doc1 has 3/3, doc2 has 3/3.
        let ctx = context(&[
            "the emperor penguin swims",
            "the tallest emperor penguin",
            "emperor penguin, tallest bird",
        ]);
        let base = AttributedAnswer::uncited("q", "Emperor penguin is tallest.", &ctx, vec![]);
        let a = attach_posthoc_citations(base, &ctx, 0.5);
        assert_eq!(a.citations[0].cited_positions, vec![1]);
    }

    #[test]
    fn posthoc_mode_via_scripted() {
        let ctx = context(&["night", "Berlin"]);
        let a = model(ModelBehavior::FaithfulOracle)
            .generate(&request(ctx, GenerationMode::PostHocAttribution))
            .unwrap();
        // Clause "The answer is Berlin": content {answer, berlin}; doc1 has 1/2.
        assert_eq!(a.citations.len(), 1);
        assert_eq!(a.citations[0].cited_positions, vec![1]);
    }

    #[test]
    fn provider_request_shape() {
        let req = request(context(&["a", "b"]), GenerationMode::DirectAttribution);
        let wire = req.to_provider_request();
        assert_eq!(wire.documents[1].id, "doc_1");
        assert_eq!(wire.temperature, Some(0.0));
        assert_eq!(wire.seed, Some(7));
    }
}
