//! Commands behind the CLI: building the store, answering one question, and
//! running the post-rationalization experiment into a run directory.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use citeprobe_core::corpus::{chunk_document, ChunkOptions, ChunkStore, DEFAULT_TITLE_SEPARATOR};
use citeprobe_core::experiment::{
    self, Baseline, BaselineFailure, BaselineSet, ForgeOptions, ManifestEntry, Pipeline, PipelineConfig,
    SkippedQuestion, TrialPlan,
};
use citeprobe_core::model::{KnowledgeEntry, ScriptedModel, ScriptedOptions};
use citeprobe_core::retrieval::{IndexOptions, LexicalOverlapScorer, RerankScorer};
use citeprobe_core::{
    text, AnswerGenerator, AttributedAnswer, ExperimentSummary, GenerationMode, GenerationRequest, InvertedIndex,
    RetrievedContext, TrialRecord,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ModelKind, RerankerKind, RunConfig};
use crate::error::{DataError, HarnessError};
use crate::http::{Adapter, HttpModel, HttpReranker, Transport, UreqTransport};
use crate::io;
use crate::report::SUMMARY_FILE;

pub type Model = Box<dyn AnswerGenerator + Send + Sync>;
pub type Scorer = Box<dyn RerankScorer + Send + Sync>;

const RUN_FILE: &str = "run.json";
const BASELINES_FILE: &str = "baselines.jsonl";
const BASELINE_FAILURES_FILE: &str = "baseline_failures.jsonl";
const MANIFEST_FILE: &str = "forge_manifest.jsonl";
const SKIPPED_FILE: &str = "skipped.jsonl";
const TRIALS_FILE: &str = "trials.jsonl";
const PERTURBATION_FILE: &str = "perturbation.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndexReport {
    pub n_docs: usize,
    pub n_chunks: usize,
    pub vocabulary: usize,
    pub avg_len: f64,
}

impl std::fmt::Display for IndexReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "indexed n_docs={} n_chunks={} vocabulary={} avg_len={:.2}",
            self.n_docs, self.n_chunks, self.vocabulary, self.avg_len
        )
    }
}

fn pool(threads: usize) -> Result<rayon::ThreadPool, HarnessError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| HarnessError::Usage(format!("thread pool: {e}")))
}

/// Chunks and indexes the corpus into `store_dir`.
pub fn cmd_index(config: &RunConfig, force: bool) -> Result<IndexReport, HarnessError> {
    let corpus = config.require("corpus", &config.corpus)?;
    let (chunks_path, index_path) = (config.chunks_path(), config.index_path());
    if !force && (chunks_path.exists() || index_path.exists()) {
        return Err(HarnessError::Usage(format!(
            "{}: a chunk store already exists; pass --force to rebuild it",
            config.store_dir.display()
        )));
    }
    let docs = io::read_corpus(corpus)?;
    let options = ChunkOptions { chunk_size: config.chunk_size, title_separator: DEFAULT_TITLE_SEPARATOR.into() };
    let per_doc: Vec<_> = pool(config.parallelism)?
        .install(|| docs.par_iter().map(|d| chunk_document(d, &options)).collect::<Result<Vec<_>, _>>())
        .map_err(|e| DataError::Invalid(e.to_string()))?;
    let chunks: Vec<_> = per_doc.into_iter().flatten().collect();
    let store = ChunkStore::new(chunks).map_err(|e| DataError::Invalid(e.to_string()))?;
    let index = InvertedIndex::build(store.chunks(), IndexOptions { include_title: config.index_title })
        .map_err(|e| DataError::Invalid(e.to_string()))?;
    io::save_chunks(&chunks_path, store.chunks(), config.chunk_size)?;
    io::save_index(&index_path, &index)?;
    let stats = index.stats();
    Ok(IndexReport {
        n_docs: docs.len(),
        n_chunks: store.len(),
        vocabulary: stats.doc_freq.len(),
        avg_len: stats.avg_len,
    })
}

/// A sealed chunk store with its index.
pub struct Store {
    pub chunks: ChunkStore,
    pub index: InvertedIndex,
    pub chunk_size: usize,
    pub digest: String,
}

pub fn load_store(config: &RunConfig) -> Result<Store, HarnessError> {
    let chunks_path = config.chunks_path();
    if !chunks_path.exists() {
        return Err(DataError::Invalid(format!(
            "no chunk store at {}; run `citeprobe index` first",
            chunks_path.display()
        ))
        .into());
    }
    let (chunks, chunk_size) = io::load_chunks(&chunks_path)?;
    let index = io::load_index(&config.index_path())?;
    let chunks = ChunkStore::new(chunks).map_err(|e| DataError::Invalid(e.to_string()))?;
    index.check_store(&chunks).map_err(|e| DataError::Invalid(format!("index does not match chunk store: {e}")))?;
    if chunk_size != config.chunk_size {
        log::warn!("store was built with chunk_size {chunk_size}; configured value {} ignored", config.chunk_size);
    }
    if index.options().include_title != config.index_title {
        log::warn!("store was built with index_title = {}", index.options().include_title);
    }
    Ok(Store { digest: file_digest(&chunks_path)?, chunks, index, chunk_size })
}

fn file_digest(path: &Path) -> Result<String, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn load_knowledge(config: &RunConfig) -> Result<Vec<KnowledgeEntry>, HarnessError> {
    match &config.knowledge {
        Some(p) => Ok(io::read_knowledge(p)?),
        None => Ok(Vec::new()),
    }
}

/// The configured model. `transport` replaces the real HTTP client.
pub fn build_model(
    config: &RunConfig,
    knowledge: &[KnowledgeEntry],
    transport: Option<Arc<dyn Transport>>,
) -> Result<Model, HarnessError> {
    match (config.model.behavior(), &config.model_http) {
        (Some(behavior), _) => {
            if config.knowledge.is_none() {
                return Err(crate::config::ConfigError::Missing { field: "knowledge" }.into());
            }
            let options =
                ScriptedOptions { relevance_top_n: config.relevance_top_n, posthoc_threshold: config.posthoc_threshold };
            Ok(Box::new(ScriptedModel::new(behavior, knowledge.iter().cloned(), options)))
        }
        (None, Some(http)) => {
            let transport = transport.unwrap_or_else(|| Arc::new(UreqTransport));
            let adapter = Adapter::new(http.clone(), transport);
            Ok(Box::new(HttpModel::new(adapter, config.relevance_top_n, config.posthoc_threshold)))
        }
        (None, None) => Err(crate::config::ConfigError::Missing { field: "endpoint" }.into()),
    }
}

pub fn build_scorer(config: &RunConfig, transport: Option<Arc<dyn Transport>>) -> Scorer {
    match (config.reranker, &config.reranker_http) {
        (RerankerKind::Http, Some(http)) => {
            let transport = transport.unwrap_or_else(|| Arc::new(UreqTransport));
            Box::new(HttpReranker::new(Adapter::new(http.clone(), transport)))
        }
        _ => Box::new(LexicalOverlapScorer),
    }
}

fn pipeline_config(config: &RunConfig) -> PipelineConfig {
    PipelineConfig {
        retrieve_k: config.retrieve_k,
        context_size: config.context_size,
        bm25: config.bm25,
        mode: config.generation_mode(),
        seed: config.seed,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AskOutcome {
    pub context: RetrievedContext,
    pub answer: AttributedAnswer,
    pub warning: Option<String>,
}

impl AskOutcome {
    /// Answer with inline markers, then the context by position.
    pub fn render(&self) -> String {
        let mut out = String::new();
        if let Some(w) = &self.warning {
            let _ = writeln!(out, "warning: {w}");
        }
        let _ = writeln!(out, "{}", self.answer.render_inline());
        let _ = writeln!(out, "\ncontext:");
        let cited = self.answer.cited_positions();
        for e in &self.context.entries {
            let mark = if cited.contains(&e.context_position) { "*" } else { " " };
            let snippet: String = e.chunk.display_text.replace('\n', " | ").chars().take(160).collect();
            let _ = writeln!(
                out,
                "{mark}[{}] {} bm25={:.3} rerank={:.3}\n     {snippet}",
                e.context_position, e.chunk.chunk_id, e.bm25_score, e.rerank_score
            );
        }
        if self.context.is_empty() {
            let _ = writeln!(out, "  (empty)");
        }
        out
    }
}

pub fn cmd_ask(
    config: &RunConfig,
    question: &str,
    transport: Option<Arc<dyn Transport>>,
) -> Result<AskOutcome, HarnessError> {
    if question.trim().is_empty() {
        return Err(HarnessError::Usage("question is empty".into()));
    }
    let store = load_store(config)?;
    let knowledge = load_knowledge(config)?;
    let model = build_model(config, &knowledge, transport.clone())?;
    let scorer = build_scorer(config, transport);
    let pipeline =
        Pipeline { store: &store.chunks, index: &store.index, scorer: &*scorer, config: pipeline_config(config) };
    let qid = "ask";
    let no_hits = store.index.retrieve_top_k(question, config.retrieve_k, &config.bm25).is_empty();
    let (context, mode, warning) = if no_hits {
        (
            RetrievedContext { question_id: qid.into(), entries: Vec::new() },
            GenerationMode::NoAttribution,
            Some("retrieval returned no documents; answering without attribution".to_string()),
        )
    } else {
        let (_, ctx) = pipeline.retrieve(qid, question).map_err(HarnessError::Model)?;
        (ctx, config.generation_mode(), None)
    };
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    let request = GenerationRequest {
        question_id: qid.into(),
        question_text: question.into(),
        context: context.clone(),
        mode,
        seed: config.seed,
    };
    let answer = model.generate(&request).map_err(|e| HarnessError::Model(e.to_string()))?;
    Ok(AskOutcome { context, answer, warning })
}

/// Everything that determines a run's results.
#[derive(Debug, Serialize)]
struct HashedConfig<'a> {
    chunks_sha256: &'a str,
    qa_sha256: &'a str,
    knowledge_sha256: Option<&'a str>,
    chunk_size: usize,
    index_title: bool,
    retrieve_k: usize,
    context_size: usize,
    bm25_k1: f64,
    bm25_b: f64,
    model: ModelKind,
    mode: GenerationMode,
    endpoint: Option<&'a str>,
    reranker: RerankerKind,
    reranker_endpoint: Option<&'a str>,
    seed: u64,
    relevance_top_n: usize,
    posthoc_threshold: f64,
    statement_bounds: (usize, usize),
    perturbation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub config_hash: String,
    pub created: String,
    pub tool_version: String,
    pub inputs: BTreeMap<String, String>,
    pub config: RunConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExperimentOptions {
    /// Always start a new run directory.
    pub fresh: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub run_dir: PathBuf,
    pub config_hash: String,
    pub summary: ExperimentSummary,
    pub resumed: bool,
    /// Trials read back from an earlier, interrupted invocation.
    pub reused_trials: usize,
    pub executed_trials: usize,
    pub baseline_failures: usize,
    pub skipped_questions: usize,
}

pub fn config_hash(config: &RunConfig, store: &Store, qa_sha: &str, knowledge_sha: Option<&str>) -> String {
    let hashed = HashedConfig {
        chunks_sha256: &store.digest,
        qa_sha256: qa_sha,
        knowledge_sha256: knowledge_sha,
        chunk_size: store.chunk_size,
        index_title: store.index.options().include_title,
        retrieve_k: config.retrieve_k,
        context_size: config.context_size,
        bm25_k1: config.bm25.k1,
        bm25_b: config.bm25.b,
        model: config.model,
        mode: config.generation_mode(),
        endpoint: config.model_http.as_ref().map(|h| h.endpoint.as_str()),
        reranker: config.reranker,
        reranker_endpoint: config.reranker_http.as_ref().map(|h| h.endpoint.as_str()),
        seed: config.seed,
        relevance_top_n: config.relevance_top_n,
        posthoc_threshold: config.posthoc_threshold,
        statement_bounds: config.statement_bounds,
        perturbation: config.perturbation,
    };
    let json = serde_json::to_vec(&hashed).unwrap_or_default();
    hex(&Sha256::digest(&json))
}

fn timestamp() -> (String, String) {
    let now = time::OffsetDateTime::now_utc();
    let compact = format!(
        "{:04}{:02}{:02}T{:02}{:02}{:02}Z",
        now.year(),
        now.month() as u8,
        now.day(),
        now.hour(),
        now.minute(),
        now.second()
    );
    let full = now.format(&time::format_description::well_known::Rfc3339).unwrap_or_else(|_| compact.clone());
    (compact, full)
}

/// Latest unfinished run directory for this hash, if any.
fn unfinished_run(output_dir: &Path, prefix: &str) -> Result<Option<PathBuf>, DataError> {
    if !output_dir.exists() {
        return Ok(None);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(output_dir)
        .map_err(|e| DataError::io(output_dir, e))?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with(prefix)))
        .filter(|p| !p.join(SUMMARY_FILE).exists() && p.join(RUN_FILE).exists())
        .collect();
    dirs.sort();
    Ok(dirs.pop())
}

fn new_run_dir(output_dir: &Path, prefix: &str, stamp: &str) -> Result<PathBuf, DataError> {
    let mut dir = output_dir.join(format!("{prefix}-{stamp}"));
    let mut n = 1;
    while dir.exists() {
        dir = output_dir.join(format!("{prefix}-{stamp}-{n}"));
        n += 1;
    }
    fs::create_dir_all(&dir).map_err(|e| DataError::io(&dir, e))?;
    Ok(dir)
}

/// Records from an earlier invocation; a torn final line is dropped.
fn read_partial_trials(path: &Path) -> Result<HashMap<String, TrialRecord>, DataError> {
    if !path.exists() {
        return Ok(HashMap::new());
    }
    let raw = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let mut out = HashMap::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TrialRecord>(line) {
            Ok(r) => {
                out.insert(r.trial_id.clone(), r);
            }
            Err(e) => log::warn!("{}:{}: ignoring unreadable trial record ({e})", path.display(), i + 1),
        }
    }
    Ok(out)
}

fn gold_facts(qa: &[citeprobe_core::QaPair], knowledge: &[KnowledgeEntry]) -> BTreeMap<String, String> {
    let by_question: HashMap<String, &KnowledgeEntry> =
        knowledge.iter().map(|k| (text::normalize_statement(&k.question), k)).collect();
    qa.iter()
        .filter_map(|q| {
            by_question
                .get(&text::normalize_statement(&q.question_text))
                .map(|k| (q.question_id.clone(), k.gold_fact.clone()))
        })
        .collect()
}

/// Runs, or resumes, the full experiment.
pub fn cmd_experiment(
    config: &RunConfig,
    options: &ExperimentOptions,
    transport: Option<Arc<dyn Transport>>,
) -> Result<ExperimentOutcome, HarnessError> {
    let qa_path = config.require("qa", &config.qa)?;
    let store = load_store(config)?;
    let qa = io::read_qa(qa_path)?;
    let knowledge = load_knowledge(config)?;
    let model = build_model(config, &knowledge, transport.clone())?;
    let scorer = build_scorer(config, transport);

    let qa_sha = file_digest(qa_path)?;
    let knowledge_sha = config.knowledge.as_deref().map(file_digest).transpose()?;
    let hash = config_hash(config, &store, &qa_sha, knowledge_sha.as_deref());
    let prefix = &hash[..12];
    let resumable = if options.fresh { None } else { unfinished_run(&config.output_dir, prefix)? };
    let resumed = resumable.is_some();
    let run_dir = match resumable {
        Some(d) => {
            log::info!("resuming {}", d.display());
            d
        }
        None => {
            let (stamp, created) = timestamp();
            let dir = new_run_dir(&config.output_dir, prefix, &stamp)?;
            let mut inputs = BTreeMap::new();
            inputs.insert("chunks_sha256".into(), store.digest.clone());
            inputs.insert("qa_sha256".into(), qa_sha.clone());
            if let Some(k) = &knowledge_sha {
                inputs.insert("knowledge_sha256".into(), k.clone());
            }
            let info = RunInfo {
                config_hash: hash.clone(),
                created,
                tool_version: env!("CARGO_PKG_VERSION").into(),
                inputs,
                config: config.clone(),
            };
            io::write_json_atomic(&dir.join(RUN_FILE), &info)?;
            dir
        }
    };
    let workers = pool(config.parallelism)?;

    let baselines_path = run_dir.join(BASELINES_FILE);
    let failures_path = run_dir.join(BASELINE_FAILURES_FILE);
    let baselines = if baselines_path.exists() && failures_path.exists() {
        BaselineSet { baselines: io::read_jsonl(&baselines_path)?, failures: io::read_jsonl(&failures_path)? }
    } else {
        let pipeline =
            Pipeline { store: &store.chunks, index: &store.index, scorer: &*scorer, config: pipeline_config(config) };
        log::info!("generating {} baselines", qa.len());
        let results: Vec<Result<Baseline, BaselineFailure>> =
            workers.install(|| qa.par_iter().map(|q| experiment::baseline_for(q, &pipeline, &*model)).collect());
        let mut set = BaselineSet::default();
        for r in results {
            match r {
                Ok(b) => set.baselines.push(b),
                Err(f) => {
                    log::warn!("baseline {} failed: {}", f.question_id, f.reason);
                    set.failures.push(f);
                }
            }
        }
        io::write_jsonl_atomic(&failures_path, &set.failures)?;
        io::write_jsonl_atomic(&baselines_path, &set.baselines)?;
        set
    };

    let forge_options =
        ForgeOptions { seed: config.seed, bounds: config.statement_bounds(), gold_facts: gold_facts(&qa, &knowledge) };
    let manifest_path = run_dir.join(MANIFEST_FILE);
    let skipped_path = run_dir.join(SKIPPED_FILE);
    let (plans, skipped): (Vec<TrialPlan>, Vec<SkippedQuestion>) = if manifest_path.exists() && skipped_path.exists()
    {
        let manifest: Vec<ManifestEntry> = io::read_jsonl(&manifest_path)?;
        let plans = manifest
            .iter()
            .map(|e| experiment::replay_plan(e, &baselines, &store.chunks))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| DataError::Invalid(format!("{}: {e}", manifest_path.display())))?;
        (plans, io::read_jsonl(&skipped_path)?)
    } else {
        let set = experiment::plan_trials(&baselines.baselines, &store.chunks, &forge_options);
        io::write_jsonl_atomic(&skipped_path, &set.skipped)?;
        io::write_jsonl_atomic(&manifest_path, set.manifest())?;
        (set.plans, set.skipped)
    };

    let trials_path = run_dir.join(TRIALS_FILE);
    let mut done = read_partial_trials(&trials_path)?;
    done.retain(|id, _| plans.iter().any(|p| &p.entry.trial_id == id));
    let reused = done.len();
    if reused > 0 {
        log::info!("{reused} of {} trials already recorded", plans.len());
    }
    let pending: Vec<&TrialPlan> = plans.iter().filter(|p| !done.contains_key(&p.entry.trial_id)).collect();
    let by_qid: HashMap<&str, &Baseline> = baselines.baselines.iter().map(|b| (b.question_id.as_str(), b)).collect();
    {
        let mut log_file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&trials_path)
            .map_err(|e| DataError::io(&trials_path, e))?;
        // A torn last line must not swallow the next record.
        if fs::metadata(&trials_path).map(|m| m.len()).unwrap_or(0) > 0 {
            let raw = fs::read(&trials_path).map_err(|e| DataError::io(&trials_path, e))?;
            if raw.last() != Some(&b'\n') {
                log_file.write_all(b"\n").map_err(|e| DataError::io(&trials_path, e))?;
            }
        }
        let batch = (config.parallelism * 4).max(1);
        let mut completed = reused;
        for chunk in pending.chunks(batch) {
            let records: Vec<TrialRecord> = workers.install(|| {
                chunk
                    .par_iter()
                    .filter_map(|p| {
                        let baseline = by_qid.get(p.entry.question_id.as_str())?;
                        Some(experiment::run_trial(p, baseline, &*model, p.entry.seed))
                    })
                    .collect()
            });
            for r in records {
                if let Some(reason) = &r.failure_reason {
                    log::warn!("trial {} failed: {reason}", r.trial_id);
                }
                let mut line = serde_json::to_vec(&r).map_err(|e| DataError::Invalid(e.to_string()))?;
                line.push(b'\n');
                log_file.write_all(&line).map_err(|e| DataError::io(&trials_path, e))?;
                done.insert(r.trial_id.clone(), r);
            }
            log_file.flush().map_err(|e| DataError::io(&trials_path, e))?;
            completed += chunk.len();
            log::info!("trials {completed}/{}", plans.len());
        }
    }
    let ordered: Vec<TrialRecord> = plans.iter().filter_map(|p| done.remove(&p.entry.trial_id)).collect();
    io::write_jsonl_atomic(&trials_path, &ordered)?;

    if config.perturbation {
        let (records, _) = experiment::run_perturbation_test(&baselines, &*model, &forge_options);
        io::write_jsonl_atomic(&run_dir.join(PERTURBATION_FILE), &records)?;
    }

    let summary = experiment::summarize(&ordered);
    io::write_json_atomic(&run_dir.join(SUMMARY_FILE), &summary)?;
    Ok(ExperimentOutcome {
        run_dir,
        config_hash: hash,
        summary,
        resumed,
        reused_trials: reused,
        executed_trials: pending.len(),
        baseline_failures: baselines.failures.len(),
        skipped_questions: skipped.len(),
    })
}
