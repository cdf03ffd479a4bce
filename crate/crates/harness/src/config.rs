//! Run configuration: one flat TOML file, every key overridable from the
//! command line.
//!
//! ```toml
//! corpus = "data/corpus.jsonl"
//! qa = "data/qa.jsonl"
//! knowledge = "data/knowledge.jsonl"
//! model = "post_rationalizer"
//! seed = 7
//! ```

use std::path::{Path, PathBuf};

use citeprobe_core::corpus::DEFAULT_CHUNK_SIZE;
use citeprobe_core::forge::StatementBounds;
use citeprobe_core::model::{GenerationMode, ModelBehavior, DEFAULT_POSTHOC_THRESHOLD, DEFAULT_RELEVANCE_TOP_N};
use citeprobe_core::retrieval::{Bm25Params, DEFAULT_CONTEXT_SIZE, DEFAULT_RETRIEVE_K};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Syntax { path: PathBuf, message: String },
    #[error("`{field}`: {message}")]
    Invalid { field: &'static str, message: String },
    #[error("`{field}` is required for this command")]
    Missing { field: &'static str },
}

fn invalid(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field, message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ModelKind {
    PostRationalizer,
    FaithfulOracle,
    Parametric,
    Http,
}

impl ModelKind {
    pub fn behavior(self) -> Option<ModelBehavior> {
        match self {
            ModelKind::PostRationalizer => Some(ModelBehavior::PostRationalizer),
            ModelKind::FaithfulOracle => Some(ModelBehavior::FaithfulOracle),
            ModelKind::Parametric => Some(ModelBehavior::Parametric),
            ModelKind::Http => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ModeKind {
    Direct,
    Posthoc,
    None,
}

impl From<ModeKind> for GenerationMode {
    fn from(m: ModeKind) -> Self {
        match m {
            ModeKind::Direct => GenerationMode::DirectAttribution,
            ModeKind::Posthoc => GenerationMode::PostHocAttribution,
            ModeKind::None => GenerationMode::NoAttribution,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum RerankerKind {
    Lexical,
    Http,
}

/// Every key optional, as read from a file or the command line.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, clap::Args)]
#[serde(deny_unknown_fields)]
pub struct ConfigLayer {
    /// Corpus JSONL with `id`, `title`, `text`
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// QA JSONL with `id`, `question`, `answers`
    #[arg(long)]
    pub qa: Option<PathBuf>,
    /// Scripted-model knowledge JSONL
    #[arg(long)]
    pub knowledge: Option<PathBuf>,
    /// Directory holding the chunk store and index
    #[arg(long)]
    pub store_dir: Option<PathBuf>,
    /// Parent directory of run directories
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub chunk_size: Option<usize>,
    #[arg(long)]
    pub index_title: Option<bool>,
    #[arg(long)]
    pub retrieve_k: Option<usize>,
    #[arg(long)]
    pub context_size: Option<usize>,
    #[arg(long)]
    pub bm25_k1: Option<f64>,
    #[arg(long)]
    pub bm25_b: Option<f64>,
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeKind>,
    /// Grounded-generation endpoint URL
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the API key
    #[arg(long)]
    pub api_key_env: Option<String>,
    #[arg(long)]
    pub max_attempts: Option<u32>,
    #[arg(long)]
    pub timeout_secs: Option<u64>,
    #[arg(long)]
    pub backoff_ms: Option<u64>,
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    #[arg(long, value_enum)]
    pub reranker: Option<RerankerKind>,
    #[arg(long)]
    pub reranker_endpoint: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    #[arg(long)]
    pub relevance_top_n: Option<usize>,
    #[arg(long)]
    pub posthoc_threshold: Option<f64>,
    #[arg(long)]
    pub min_statement_terms: Option<usize>,
    #[arg(long)]
    pub max_statement_terms: Option<usize>,
    /// Also run the ablation test
    #[arg(long)]
    pub perturbation: Option<bool>,
}

macro_rules! overlay {
    ($base:ident, $top:ident, $($f:ident),*) => {
        $( if $top.$f.is_some() { $base.$f = $top.$f.clone(); } )*
    };
}

impl ConfigLayer {
    pub fn from_toml(path: &Path, raw: &str) -> Result<Self, ConfigError> {
        toml::from_str(raw).map_err(|e| ConfigError::Syntax { path: path.into(), message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::from_toml(path, &raw)
    }

    /// Keys set in `top` win.
    pub fn overlay(mut self, top: &ConfigLayer) -> Self {
        overlay!(
            self, top, corpus, qa, knowledge, store_dir, output_dir, chunk_size, index_title, retrieve_k,
            context_size, bm25_k1, bm25_b, model, mode, endpoint, api_key_env, max_attempts, timeout_secs,
            backoff_ms, max_in_flight, reranker, reranker_endpoint, seed, parallelism, relevance_top_n,
            posthoc_threshold, min_statement_terms, max_statement_terms, perturbation
        );
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpSettings {
    pub endpoint: String,
    pub api_key_env: Option<String>,
    pub max_attempts: u32,
    pub timeout_secs: u64,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
}

/// A validated configuration with defaults filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub qa: Option<PathBuf>,
    pub knowledge: Option<PathBuf>,
    pub store_dir: PathBuf,
    pub output_dir: PathBuf,
    pub chunk_size: usize,
    pub index_title: bool,
    pub retrieve_k: usize,
    pub context_size: usize,
    pub bm25: Bm25Params,
    pub model: ModelKind,
    pub mode: ModeKind,
    pub model_http: Option<HttpSettings>,
    pub reranker: RerankerKind,
    pub reranker_http: Option<HttpSettings>,
    pub seed: u64,
    pub parallelism: usize,
    pub relevance_top_n: usize,
    pub posthoc_threshold: f64,
    pub statement_bounds: (usize, usize),
    pub perturbation: bool,
}

fn positive(field: &'static str, v: Option<usize>, default: usize) -> Result<usize, ConfigError> {
    match v.unwrap_or(default) {
        0 => Err(invalid(field, "must be positive")),
        n => Ok(n),
    }
}

impl RunConfig {
    pub fn from_layer(layer: ConfigLayer) -> Result<Self, ConfigError> {
        let chunk_size = positive("chunk_size", layer.chunk_size, DEFAULT_CHUNK_SIZE)?;
        let retrieve_k = positive("retrieve_k", layer.retrieve_k, DEFAULT_RETRIEVE_K)?;
        let context_size = positive("context_size", layer.context_size, DEFAULT_CONTEXT_SIZE)?;
        if context_size > retrieve_k {
            return Err(invalid("context_size", format!("{context_size} exceeds retrieve_k {retrieve_k}")));
        }
        let defaults = Bm25Params::default();
        let k1 = layer.bm25_k1.unwrap_or(defaults.k1);
        if !(k1.is_finite() && k1 >= 0.0) {
            return Err(invalid("bm25_k1", "must be a finite non-negative number"));
        }
        let b = layer.bm25_b.unwrap_or(defaults.b);
        if !(0.0..=1.0).contains(&b) {
            return Err(invalid("bm25_b", "must lie in [0, 1]"));
        }
        let relevance_top_n = positive("relevance_top_n", layer.relevance_top_n, DEFAULT_RELEVANCE_TOP_N)?;
        let posthoc_threshold = layer.posthoc_threshold.unwrap_or(DEFAULT_POSTHOC_THRESHOLD);
        if !(posthoc_threshold > 0.0 && posthoc_threshold <= 1.0) {
            return Err(invalid("posthoc_threshold", "must lie in (0, 1]"));
        }
        let bounds = StatementBounds::default();
        let min_terms = positive("min_statement_terms", layer.min_statement_terms, bounds.min_terms)?;
        let max_terms = positive("max_statement_terms", layer.max_statement_terms, bounds.max_terms)?;
        if min_terms > max_terms {
            return Err(invalid("min_statement_terms", "exceeds max_statement_terms"));
        }
        let max_attempts = layer.max_attempts.unwrap_or(5);
        if max_attempts == 0 {
            return Err(invalid("max_attempts", "must be positive"));
        }
        let timeout_secs = layer.timeout_secs.unwrap_or(60);
        if timeout_secs == 0 {
            return Err(invalid("timeout_secs", "must be positive"));
        }
        let max_in_flight = positive("max_in_flight", layer.max_in_flight, 4)?;
        let http = |endpoint: String| HttpSettings {
            endpoint,
            api_key_env: layer.api_key_env.clone(),
            max_attempts,
            timeout_secs,
            backoff_ms: layer.backoff_ms.unwrap_or(500),
            max_in_flight,
        };
        let model = layer.model.unwrap_or(ModelKind::PostRationalizer);
        let model_http = match (model, &layer.endpoint) {
            (ModelKind::Http, Some(e)) => Some(http(check_url("endpoint", e)?)),
            (ModelKind::Http, None) => return Err(invalid("endpoint", "required when model = \"http\"")),
            _ => None,
        };
        let reranker = layer.reranker.unwrap_or(RerankerKind::Lexical);
        let reranker_http = match (reranker, &layer.reranker_endpoint) {
            (RerankerKind::Http, Some(e)) => Some(http(check_url("reranker_endpoint", e)?)),
            (RerankerKind::Http, None) => {
                return Err(invalid("reranker_endpoint", "required when reranker = \"http\""))
            }
            _ => None,
        };
        if let Some(name) = &layer.api_key_env {
            if name.is_empty() || name.contains('=') {
                return Err(invalid("api_key_env", "must be an environment variable name"));
            }
        }
        Ok(Self {
            corpus: layer.corpus,
            qa: layer.qa,
            knowledge: layer.knowledge,
            store_dir: layer.store_dir.unwrap_or_else(|| PathBuf::from("store")),
            output_dir: layer.output_dir.unwrap_or_else(|| PathBuf::from("runs")),
            chunk_size,
            index_title: layer.index_title.unwrap_or(true),
            retrieve_k,
            context_size,
            bm25: Bm25Params { k1, b },
            model,
            mode: layer.mode.unwrap_or(ModeKind::Direct),
            model_http,
            reranker,
            reranker_http,
            seed: layer.seed.unwrap_or(0),
            parallelism: positive("parallelism", layer.parallelism, 1)?,
            relevance_top_n,
            posthoc_threshold,
            statement_bounds: (min_terms, max_terms),
            perturbation: layer.perturbation.unwrap_or(false),
        })
    }

    /// Reads `path` if given, applies `overrides`, validates.
    pub fn resolve(path: Option<&Path>, overrides: &ConfigLayer) -> Result<Self, ConfigError> {
        let base = match path {
            Some(p) => ConfigLayer::load(p)?,
            None => ConfigLayer::default(),
        };
        Self::from_layer(base.overlay(overrides))
    }

    pub fn require<'a>(&self, field: &'static str, value: &'a Option<PathBuf>) -> Result<&'a Path, ConfigError> {
        value.as_deref().ok_or(ConfigError::Missing { field })
    }

    pub fn chunks_path(&self) -> PathBuf {
        self.store_dir.join("chunks.jsonl")
    }

    pub fn index_path(&self) -> PathBuf {
        self.store_dir.join("index.json")
    }

    pub fn generation_mode(&self) -> GenerationMode {
        self.mode.into()
    }

    pub fn statement_bounds(&self) -> StatementBounds {
        StatementBounds { min_terms: self.statement_bounds.0, max_terms: self.statement_bounds.1 }
    }
}

fn check_url(field: &'static str, url: &str) -> Result<String, ConfigError> {
    if url.starts_with("http://") || url.starts_with("https://") {
        Ok(url.to_string())
    } else {
        Err(invalid(field, format!("`{url}` is not an http(s) URL")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(raw: &str) -> Result<RunConfig, ConfigError> {
        RunConfig::from_layer(ConfigLayer::from_toml(Path::new("run.toml"), raw)?)
    }

    #[test]
    fn defaults() {
        let c = parse("").unwrap();
        assert_eq!((c.chunk_size, c.retrieve_k, c.context_size), (100, 30, 5));
        assert_eq!(c.bm25, Bm25Params { k1: 1.2, b: 0.75 });
        assert!(c.index_title);
        assert_eq!(c.model, ModelKind::PostRationalizer);
        assert_eq!(c.parallelism, 1);
    }

    #[test]
    fn unknown_key_named() {
        let err = parse("retreive_k = 3").unwrap_err().to_string();
        assert!(err.contains("retreive_k"), "{err}");
    }

    #[test]
    fn wrong_type_named() {
        let err = parse("chunk_size = \"big\"").unwrap_err().to_string();
        assert!(err.contains("chunk_size"), "{err}");
    }

    #[test]
    fn invariants_named() {
        for (raw, field) in [
            ("chunk_size = 0", "chunk_size"),
            ("retrieve_k = 3\ncontext_size = 5", "context_size"),
            ("bm25_b = 1.5", "bm25_b"),
            ("model = \"http\"", "endpoint"),
            ("model = \"http\"\nendpoint = \"ftp://x\"", "endpoint"),
            ("reranker = \"http\"", "reranker_endpoint"),
            ("parallelism = 0", "parallelism"),
            ("posthoc_threshold = 0.0", "posthoc_threshold"),
        ] {
            match parse(raw) {
                Err(ConfigError::Invalid { field: f, .. }) => assert_eq!(f, field, "{raw}"),
                other => panic!("{raw}: {other:?}"),
            }
        }
    }

    #[test]
    fn overrides_win() {
        let file = ConfigLayer::from_toml(Path::new("a"), "seed = 1\nretrieve_k = 10").unwrap();
        let cli = ConfigLayer { seed: Some(9), ..ConfigLayer::default() };
        let c = RunConfig::from_layer(file.overlay(&cli)).unwrap();
        assert_eq!((c.seed, c.retrieve_k), (9, 10));
    }

    #[test]
    fn http_settings() {
        let c = parse("model = \"http\"\nendpoint = \"http://localhost:1/chat\"\napi_key_env = \"KEY\"\nmax_attempts = 2")
            .unwrap();
        let h = c.model_http.unwrap();
        assert_eq!((h.max_attempts, h.api_key_env.as_deref()), (2, Some("KEY")));
    }
}
