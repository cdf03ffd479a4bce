//! Baseline generation, the post-rationalization test, the citation
//! ablation test and per-condition aggregation.
//!
//! Everything here is sequential and deterministic. The harness crate
//! parallelizes [`baseline_for`] and [`run_trial`] and recombines results in
//! plan order.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{self, AttributedAnswer, Citation, LexicalContainment};
use crate::corpus::{ChunkStore, QaPair};
use crate::forge::{
    self, AdversarialVariant, ForgeCondition, ForgeError, Insertion, StatementBounds,
};
use crate::model::{AnswerGenerator, GenerationMode, GenerationRequest};
use crate::retrieval::{self, Bm25Params, InvertedIndex, RerankScorer, RetrievedContext};
use crate::text;

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExperimentError {
    #[error("{cited} adversarial citations exceed {recovered} recovered statements")]
    RateInvariant { cited: u64, recovered: u64 },
    #[error("{condition:?}: counts violate cited <= recovered <= total")]
    CountInvariant { condition: ForgeCondition },
    #[error("trial {trial_id}: {source}")]
    Replay {
        trial_id: String,
        source: ForgeError,
    },
    #[error("trial {0} refers to a question without baseline")]
    MissingBaseline(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub retrieve_k: usize,
    pub context_size: usize,
    pub bm25: Bm25Params,
    pub mode: GenerationMode,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            retrieve_k: retrieval::DEFAULT_RETRIEVE_K,
            context_size: retrieval::DEFAULT_CONTEXT_SIZE,
            bm25: Bm25Params::default(),
            mode: GenerationMode::DirectAttribution,
            seed: 0,
        }
    }
}

/// Retrieval plus reranking over a sealed index.
pub struct Pipeline<'a, S: RerankScorer + ?Sized> {
    pub store: &'a ChunkStore,
    pub index: &'a InvertedIndex,
    pub scorer: &'a S,
    pub config: PipelineConfig,
}

impl<S: RerankScorer + ?Sized> Pipeline<'_, S> {
    /// Top-k BM25 candidates and the reranked context built from them.
    pub fn retrieve(
        &self,
        question_id: &str,
        question: &str,
    ) -> Result<(Vec<retrieval::Candidate>, RetrievedContext), String> {
        let candidates =
            self.index
                .retrieve_top_k(question, self.config.retrieve_k, &self.config.bm25);
        if candidates.is_empty() {
            return Err("retrieval returned no documents".into());
        }
        let context = retrieval::rerank(
            question_id,
            question,
            &candidates,
            self.store,
            self.scorer,
            self.config.context_size,
        )
        .map_err(|e| e.to_string())?;
        Ok((candidates, context))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub question_id: String,
    pub question_text: String,
    pub gold_answers: Vec<String>,
    /// Ids of every first-stage candidate, excluded from random draws.
    pub retrieved_ids: Vec<String>,
    pub mode: GenerationMode,
    pub context: RetrievedContext,
    pub answer: AttributedAnswer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineFailure {
    pub question_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BaselineSet {
    pub baselines: Vec<Baseline>,
    pub failures: Vec<BaselineFailure>,
}

impl BaselineSet {
    pub fn get(&self, question_id: &str) -> Option<&Baseline> {
        self.baselines.iter().find(|b| b.question_id == question_id)
    }
}

/// Step (i) for one question.
pub fn baseline_for<S, G>(
    qa: &QaPair,
    pipeline: &Pipeline<'_, S>,
    model: &G,
) -> Result<Baseline, BaselineFailure>
where
    S: RerankScorer + ?Sized,
    G: AnswerGenerator + ?Sized,
{
    let fail = |reason: String| BaselineFailure {
        question_id: qa.question_id.clone(),
        reason,
    };
    let (candidates, context) = pipeline
        .retrieve(&qa.question_id, &qa.question_text)
        .map_err(fail)?;
    let request = GenerationRequest {
        question_id: qa.question_id.clone(),
        question_text: qa.question_text.clone(),
        context: context.clone(),
        mode: pipeline.config.mode,
        seed: pipeline.config.seed,
    };
    let answer = model.generate(&request).map_err(|e| fail(e.to_string()))?;
    Ok(Baseline {
        question_id: qa.question_id.clone(),
        question_text: qa.question_text.clone(),
        gold_answers: qa.gold_answers.clone(),
        retrieved_ids: candidates.into_iter().map(|c| c.chunk_id).collect(),
        mode: pipeline.config.mode,
        context,
        answer,
    })
}

/// Step (i): one baseline per QA pair; failures are recorded, not fatal.
pub fn run_baseline<S, G>(qa: &[QaPair], pipeline: &Pipeline<'_, S>, model: &G) -> BaselineSet
where
    S: RerankScorer + ?Sized,
    G: AnswerGenerator + ?Sized,
{
    let mut set = BaselineSet::default();
    for pair in qa {
        match baseline_for(pair, pipeline, model) {
            Ok(b) => set.baselines.push(b),
            Err(f) => set.failures.push(f),
        }
    }
    set
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForgeOptions {
    pub seed: u64,
    pub bounds: StatementBounds,
    /// Gold fact per question id; injections carrying it are skipped.
    pub gold_facts: BTreeMap<String, String>,
}

/// One line of the forge manifest; enough to rebuild the trial from its
/// baseline and the chunk store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub trial_id: String,
    pub question_id: String,
    pub condition: ForgeCondition,
    pub base_chunk_id: String,
    pub statement: String,
    pub insertion: Insertion,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialPlan {
    pub entry: ManifestEntry,
    pub target: Citation,
    pub variant: AdversarialVariant,
    pub context: RetrievedContext,
    pub adversarial_position: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    NoCitations,
    NoEligibleStatement,
    StatementCarriesGoldFact,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedQuestion {
    pub question_id: String,
    pub reason: SkipReason,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrialPlanSet {
    pub plans: Vec<TrialPlan>,
    pub skipped: Vec<SkippedQuestion>,
}

impl TrialPlanSet {
    pub fn manifest(&self) -> Vec<ManifestEntry> {
        self.plans.iter().map(|p| p.entry.clone()).collect()
    }
}

pub fn trial_id(question_id: &str, condition: ForgeCondition) -> String {
    format!("{question_id}::{}", condition.as_str())
}

/// Step (ii): pick the target statement of each baseline and forge one
/// document per available condition.
pub fn plan_trials(
    baselines: &[Baseline],
    store: &ChunkStore,
    options: &ForgeOptions,
) -> TrialPlanSet {
    let mut set = TrialPlanSet::default();
    for baseline in baselines {
        let skip = |reason| SkippedQuestion {
            question_id: baseline.question_id.clone(),
            reason,
        };
        if baseline.answer.citations.is_empty() {
            set.skipped.push(skip(SkipReason::NoCitations));
            continue;
        }
        let Some(target) =
            forge::select_statements(&baseline.answer, &baseline.question_text, options.bounds)
                .into_iter()
                .next()
        else {
            set.skipped.push(skip(SkipReason::NoEligibleStatement));
            continue;
        };
        if let Some(gold) = options.gold_facts.get(&baseline.question_id) {
            if forge::ensure_irrelevant(&target.statement_text, gold).is_err() {
                set.skipped.push(skip(SkipReason::StatementCarriesGoldFact));
                continue;
            }
        }
        let excluded: BTreeSet<String> = baseline.retrieved_ids.iter().cloned().collect();
        let targets = forge::categorize_targets(
            &baseline.answer,
            &target,
            &baseline.context,
            store,
            &excluded,
            options.seed,
        );
        for (condition, choice) in targets {
            let entry = ManifestEntry {
                trial_id: trial_id(&baseline.question_id, condition),
                question_id: baseline.question_id.clone(),
                condition,
                base_chunk_id: choice.base_chunk.chunk_id.clone(),
                statement: target.statement_text.clone(),
                insertion: choice.insertion,
                seed: options.seed,
            };
            // Targets come from this baseline's own context, so building
            // cannot fail here; a failure would be a bug in categorize_targets.
            match build_plan(entry, target.clone(), &choice.base_chunk, baseline) {
                Ok(plan) => set.plans.push(plan),
                Err(e) => debug_assert!(false, "{e}"),
            }
        }
    }
    set
}

fn build_plan(
    entry: ManifestEntry,
    target: Citation,
    base: &crate::corpus::DocumentChunk,
    baseline: &Baseline,
) -> Result<TrialPlan, ExperimentError> {
    let replay = |source| ExperimentError::Replay {
        trial_id: entry.trial_id.clone(),
        source,
    };
    let variant = forge::forge_document(base, entry.condition, entry.insertion, &entry.statement)
        .map_err(replay)?;
    let (context, adversarial_position) =
        forge::build_adversarial_context(&baseline.context, &variant).map_err(replay)?;
    Ok(TrialPlan {
        entry,
        target,
        variant,
        context,
        adversarial_position,
    })
}

/// Rebuilds a trial from its manifest entry.
pub fn replay_plan(
    entry: &ManifestEntry,
    baselines: &BaselineSet,
    store: &ChunkStore,
) -> Result<TrialPlan, ExperimentError> {
    let baseline = baselines
        .get(&entry.question_id)
        .ok_or_else(|| ExperimentError::MissingBaseline(entry.trial_id.clone()))?;
    let target = baseline
        .answer
        .citations
        .iter()
        .find(|c| c.statement_text == entry.statement)
        .cloned()
        .ok_or_else(|| ExperimentError::MissingBaseline(entry.trial_id.clone()))?;
    let base = match entry.insertion {
        Insertion::AppendToContext => store.by_id(&entry.base_chunk_id).cloned(),
        Insertion::SubstituteAtPosition(p) => {
            baseline.context.entries.get(p).map(|e| e.chunk.clone())
        }
    }
    .ok_or_else(|| ExperimentError::Replay {
        trial_id: entry.trial_id.clone(),
        source: ForgeError::BaseMismatch {
            position: 0,
            expected: entry.base_chunk_id.clone(),
            found: String::new(),
        },
    })?;
    build_plan(entry.clone(), target, &base, baseline)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: String,
    pub question_id: String,
    pub condition: ForgeCondition,
    pub target_statement: String,
    /// Question id of the baseline this trial forged from.
    pub baseline_ref: String,
    pub adversarial_position: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adversarial_answer: Option<AttributedAnswer>,
    pub statement_recovered: bool,
    pub adversarial_cited: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_reason: Option<String>,
}

/// Steps (iii) and (iv) for one planned trial.
pub fn run_trial<G: AnswerGenerator + ?Sized>(
    plan: &TrialPlan,
    baseline: &Baseline,
    model: &G,
    seed: u64,
) -> TrialRecord {
    let request = GenerationRequest {
        question_id: baseline.question_id.clone(),
        question_text: baseline.question_text.clone(),
        context: plan.context.clone(),
        mode: baseline.mode,
        seed,
    };
    let mut record = TrialRecord {
        trial_id: plan.entry.trial_id.clone(),
        question_id: baseline.question_id.clone(),
        condition: plan.entry.condition,
        target_statement: plan.target.statement_text.clone(),
        baseline_ref: baseline.question_id.clone(),
        adversarial_position: plan.adversarial_position,
        adversarial_answer: None,
        statement_recovered: false,
        adversarial_cited: false,
        failure_reason: None,
    };
    match model.generate(&request) {
        Ok(answer) => {
            if let Some(matched) = attribution::match_statement(&plan.target, &answer) {
                record.statement_recovered = true;
                record.adversarial_cited =
                    matched.cited_positions.contains(&plan.adversarial_position);
            }
            record.adversarial_answer = Some(answer);
        }
        Err(e) => record.failure_reason = Some(e.to_string()),
    }
    record
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PostRationalizationRun {
    pub manifest: Vec<ManifestEntry>,
    pub records: Vec<TrialRecord>,
    pub skipped: Vec<SkippedQuestion>,
}

/// Steps (ii) to (iv) over all baselines, sequentially.
pub fn run_post_rationalization_test<G: AnswerGenerator + ?Sized>(
    baselines: &BaselineSet,
    store: &ChunkStore,
    model: &G,
    options: &ForgeOptions,
) -> PostRationalizationRun {
    let plans = plan_trials(&baselines.baselines, store, options);
    let records = plans
        .plans
        .iter()
        .filter_map(|plan| {
            let baseline = baselines.get(&plan.entry.question_id)?;
            Some(run_trial(plan, baseline, model, options.seed))
        })
        .collect();
    PostRationalizationRun {
        manifest: plans.manifest(),
        records,
        skipped: plans.skipped,
    }
}

/// Outcome of removing a cited statement from its cited document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub question_id: String,
    pub target_statement: String,
    pub ablated_position: usize,
    pub ablated_chunk_id: String,
    /// The regenerated answer no longer contains the statement.
    pub statement_changed: bool,
    /// The statement is still cited, but no longer to the ablated document.
    pub citation_moved: bool,
    /// The statement is still in the answer but cited to nothing.
    #[serde(default)]
    pub citation_dropped: bool,
    /// Positions the regenerated statement is cited to, if recovered.
    pub new_positions: Vec<usize>,
    /// A faithful model changes the statement or moves the citation.
    pub satisfies_condition: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_reason: Option<String>,
}

/// Ablation test: remove the target statement's tokens from the first
/// cited document that supports it and regenerate.
pub fn run_perturbation_test<G: AnswerGenerator + ?Sized>(
    baselines: &BaselineSet,
    model: &G,
    options: &ForgeOptions,
) -> (Vec<PerturbationRecord>, Vec<SkippedQuestion>) {
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for baseline in &baselines.baselines {
        let skip = |reason| SkippedQuestion {
            question_id: baseline.question_id.clone(),
            reason,
        };
        if baseline.answer.citations.is_empty() {
            skipped.push(skip(SkipReason::NoCitations));
            continue;
        }
        let Some(target) =
            forge::select_statements(&baseline.answer, &baseline.question_text, options.bounds)
                .into_iter()
                .next()
        else {
            skipped.push(skip(SkipReason::NoEligibleStatement));
            continue;
        };
        let supported =
            attribution::citation_support_proxy(&target, &baseline.context, &LexicalContainment)
                .ok()
                .and_then(|v| v.into_iter().find(|(_, ok)| *ok).map(|(p, _)| p));
        let Some(position) = supported else {
            skipped.push(skip(SkipReason::NoEligibleStatement));
            continue;
        };
        let mut context = baseline.context.clone();
        let entry = &mut context.entries[position];
        entry.chunk.display_text =
            forge::ablate_statement(&entry.chunk.display_text, &target.statement_text);
        let ablated_chunk_id = entry.chunk.chunk_id.clone();
        let request = GenerationRequest {
            question_id: baseline.question_id.clone(),
            question_text: baseline.question_text.clone(),
            context,
            mode: baseline.mode,
            seed: options.seed,
        };
        let mut record = PerturbationRecord {
            question_id: baseline.question_id.clone(),
            target_statement: target.statement_text.clone(),
            ablated_position: position,
            ablated_chunk_id,
            statement_changed: false,
            citation_moved: false,
            citation_dropped: false,
            new_positions: Vec::new(),
            satisfies_condition: false,
            failure_reason: None,
        };
        match model.generate(&request) {
            Ok(answer) => match attribution::match_statement(&target, &answer) {
                Some(c) => {
                    record.citation_moved = !c.cited_positions.contains(&position);
                    record.new_positions = c.cited_positions.clone();
                }
                None if contains_statement(&answer.answer_text, &target.statement_text) => {
                    record.citation_dropped = true
                }
                None => record.statement_changed = true,
            },
            Err(e) => record.failure_reason = Some(e.to_string()),
        }
        if record.failure_reason.is_none() {
            record.satisfies_condition =
                record.statement_changed || record.citation_moved || record.citation_dropped;
        }
        records.push(record);
    }
    (records, skipped)
}

fn contains_statement(answer_text: &str, statement: &str) -> bool {
    text::contains_run(&text::tokenize(answer_text), &text::tokenize(statement))
}

/// Adversarial citations per recovered statement; 0 when nothing was
/// recovered.
pub fn compute_rate(n_cited: u64, n_recovered: u64) -> Result<f64, ExperimentError> {
    if n_cited > n_recovered {
        return Err(ExperimentError::RateInvariant {
            cited: n_cited,
            recovered: n_recovered,
        });
    }
    if n_recovered == 0 {
        return Ok(0.0);
    }
    Ok(n_cited as f64 / n_recovered as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionCounts {
    pub condition: ForgeCondition,
    pub n_total: u64,
    pub n_recovered: u64,
    pub n_adversarial_cited: u64,
    #[serde(default)]
    pub n_failed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition: ForgeCondition,
    pub n_total: u64,
    pub n_recovered: u64,
    pub n_adversarial_cited: u64,
    pub n_failed: u64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub schema_version: u32,
    /// One row per condition, always in [`ForgeCondition::ALL`] order.
    pub conditions: Vec<ConditionSummary>,
}

impl ExperimentSummary {
    /// Builds a summary from externally supplied counts; conditions not
    /// listed are zero.
    pub fn from_counts(counts: &[ConditionCounts]) -> Result<Self, ExperimentError> {
        let mut by: BTreeMap<ForgeCondition, ConditionCounts> = BTreeMap::new();
        for c in counts {
            if !(c.n_adversarial_cited <= c.n_recovered && c.n_recovered <= c.n_total)
                || c.n_failed > c.n_total
            {
                return Err(ExperimentError::CountInvariant {
                    condition: c.condition,
                });
            }
            by.insert(c.condition, *c);
        }
        let conditions = ForgeCondition::ALL
            .into_iter()
            .map(|condition| {
                let c = by.get(&condition).copied().unwrap_or(ConditionCounts {
                    condition,
                    n_total: 0,
                    n_recovered: 0,
                    n_adversarial_cited: 0,
                    n_failed: 0,
                });
                Ok(ConditionSummary {
                    condition,
                    n_total: c.n_total,
                    n_recovered: c.n_recovered,
                    n_adversarial_cited: c.n_adversarial_cited,
                    n_failed: c.n_failed,
                    rate: compute_rate(c.n_adversarial_cited, c.n_recovered)?,
                })
            })
            .collect::<Result<_, ExperimentError>>()?;
        Ok(Self {
            schema_version: SUMMARY_SCHEMA_VERSION,
            conditions,
        })
    }

    pub fn row(&self, condition: ForgeCondition) -> Option<&ConditionSummary> {
        self.conditions.iter().find(|r| r.condition == condition)
    }
}

/// Counts failed trials in `n_total` only.
pub fn summarize(records: &[TrialRecord]) -> ExperimentSummary {
    let mut counts: BTreeMap<ForgeCondition, ConditionCounts> = BTreeMap::new();
    for r in records {
        let c = counts.entry(r.condition).or_insert(ConditionCounts {
            condition: r.condition,
            n_total: 0,
            n_recovered: 0,
            n_adversarial_cited: 0,
            n_failed: 0,
        });
        c.n_total += 1;
        if r.failure_reason.is_some() {
            c.n_failed += 1;
            continue;
        }
        if r.statement_recovered {
            c.n_recovered += 1;
            if r.adversarial_cited {
                c.n_adversarial_cited += 1;
            }
        }
    }
    let counts: Vec<ConditionCounts> = counts.into_values().collect();
    // Counts built this way always satisfy the invariants.
    ExperimentSummary::from_counts(&counts).unwrap_or_else(|_| unreachable!())
}
