//! HTTP adapters for a grounded-generation service and an external
//! reranker, with retry, backoff and a bound on in-flight requests.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use citeprobe_core::attribution::{self, ProviderResponse};
use citeprobe_core::corpus::DocumentChunk;
use citeprobe_core::model::{
    attach_posthoc_citations, AnswerGenerator, GenerationError, GenerationMode, GenerationRequest,
};
use citeprobe_core::retrieval::{RerankScorer, ScorerError};
use citeprobe_core::AttributedAnswer;
use serde::{Deserialize, Serialize};

use crate::config::HttpSettings;

const MAX_BACKOFF: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawReply {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportFailure {
    Timeout,
    Connection(String),
}

/// One POST of a JSON body.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        body: &str,
        bearer: Option<&str>,
        timeout: Duration,
    ) -> Result<RawReply, TransportFailure>;
}

#[derive(Debug, Default)]
pub struct UreqTransport;

impl Transport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        body: &str,
        bearer: Option<&str>,
        timeout: Duration,
    ) -> Result<RawReply, TransportFailure> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut req = agent.post(url).header("content-type", "application/json");
        if let Some(key) = bearer {
            req = req.header("authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(body).map_err(classify)?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(classify)?;
        Ok(RawReply { status, body })
    }
}

fn classify(e: ureq::Error) -> TransportFailure {
    match e {
        ureq::Error::Timeout(_) => TransportFailure::Timeout,
        ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => TransportFailure::Timeout,
        other => TransportFailure::Connection(other.to_string()),
    }
}

/// Counting semaphore.
#[derive(Debug)]
pub struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

pub struct Permit<'a>(&'a Limiter);

impl Limiter {
    pub fn new(slots: usize) -> Self {
        Self { free: Mutex::new(slots.max(1)), cv: Condvar::new() }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|p| p.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|p| p.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|p| p.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdapterResponse {
    pub body: String,
    pub attempts: u32,
}

/// Retrying JSON POST client for one endpoint.
pub struct Adapter {
    transport: Arc<dyn Transport>,
    settings: HttpSettings,
    limiter: Limiter,
    retries: AtomicU64,
}

impl Adapter {
    pub fn new(settings: HttpSettings, transport: Arc<dyn Transport>) -> Self {
        let limiter = Limiter::new(settings.max_in_flight);
        Self { transport, settings, limiter, retries: AtomicU64::new(0) }
    }

    /// Retries performed over the adapter's lifetime.
    pub fn retries(&self) -> u64 {
        self.retries.load(Ordering::Relaxed)
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let base = Duration::from_millis(self.settings.backoff_ms);
        base.saturating_mul(1 << (attempt - 1).min(16)).min(MAX_BACKOFF)
    }

    fn api_key(&self) -> Result<Option<String>, GenerationError> {
        match &self.settings.api_key_env {
            None => Ok(None),
            Some(name) => std::env::var(name)
                .map(Some)
                .map_err(|_| GenerationError::Auth(format!("environment variable {name} is not set"))),
        }
    }

    /// POSTs `body`, retrying timeouts, connection errors, 429 and 5xx.
    pub fn call(&self, body: &str) -> Result<AdapterResponse, GenerationError> {
        let key = self.api_key()?;
        let timeout = Duration::from_secs(self.settings.timeout_secs);
        let max = self.settings.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            let outcome = {
                let _permit = self.limiter.acquire();
                self.transport.post_json(&self.settings.endpoint, body, key.as_deref(), timeout)
            };
            let failure = match outcome {
                Ok(RawReply { status, body }) if (200..300).contains(&status) => {
                    return Ok(AdapterResponse { body, attempts: attempt })
                }
                Ok(RawReply { status: 401 | 403, body }) => {
                    return Err(GenerationError::Auth(snippet(&body)));
                }
                Ok(RawReply { status: 429, .. }) => GenerationError::RateLimited { attempts: attempt },
                Ok(RawReply { status, body }) if status >= 500 => GenerationError::Transport {
                    attempts: attempt,
                    message: format!("HTTP {status}: {}", snippet(&body)),
                },
                Ok(RawReply { status, body }) => {
                    return Err(GenerationError::Transport {
                        attempts: attempt,
                        message: format!("HTTP {status}: {}", snippet(&body)),
                    })
                }
                Err(TransportFailure::Timeout) => GenerationError::Timeout { attempts: attempt },
                Err(TransportFailure::Connection(message)) => {
                    GenerationError::Transport { attempts: attempt, message }
                }
            };
            if attempt >= max {
                return Err(failure);
            }
            let wait = self.backoff(attempt);
            log::warn!("attempt {attempt}/{max} failed ({failure}); retrying in {wait:?}");
            self.retries.fetch_add(1, Ordering::Relaxed);
            std::thread::sleep(wait);
        }
    }
}

fn snippet(body: &str) -> String {
    body.chars().take(200).collect()
}

/// Answers from a grounded-generation endpoint.
pub struct HttpModel {
    adapter: Adapter,
    relevance_top_n: usize,
    posthoc_threshold: f64,
}

impl HttpModel {
    pub fn new(adapter: Adapter, relevance_top_n: usize, posthoc_threshold: f64) -> Self {
        Self { adapter, relevance_top_n, posthoc_threshold }
    }

    pub fn adapter(&self) -> &Adapter {
        &self.adapter
    }
}

impl AnswerGenerator for HttpModel {
    fn generate(&self, request: &GenerationRequest) -> Result<AttributedAnswer, GenerationError> {
        request.validate()?;
        let mut wire = request.to_provider_request();
        if request.mode == GenerationMode::NoAttribution {
            wire.documents.clear();
        }
        let body = serde_json::to_string(&wire).map_err(|e| GenerationError::MalformedResponse(e.to_string()))?;
        let reply = self.adapter.call(&body)?;
        let mut response: ProviderResponse = serde_json::from_str(&reply.body)
            .map_err(|e| GenerationError::MalformedResponse(e.to_string()))?;
        if request.mode != GenerationMode::DirectAttribution {
            response.citations.clear();
            response.cited_document_ids = None;
        }
        let parsed = attribution::parse_citations(
            &response,
            &request.context,
            &request.question_id,
            self.relevance_top_n,
        )
        .map_err(|e| GenerationError::MalformedResponse(e.to_string()))?;
        for w in &parsed.warnings {
            log::warn!("{}: {w:?}", request.question_id);
        }
        Ok(match request.mode {
            GenerationMode::PostHocAttribution => {
                attach_posthoc_citations(parsed.answer, &request.context, self.posthoc_threshold)
            }
            _ => parsed.answer,
        })
    }
}

#[derive(Debug, Serialize)]
struct RerankRequest<'a> {
    query: &'a str,
    candidates: Vec<RerankCandidate<'a>>,
}

#[derive(Debug, Serialize)]
struct RerankCandidate<'a> {
    id: &'a str,
    text: &'a str,
}

#[derive(Debug, Deserialize)]
struct RerankResponse {
    scores: Vec<RerankScore>,
}

#[derive(Debug, Deserialize)]
struct RerankScore {
    id: String,
    score: f64,
}

/// Scores candidates through an external service:
/// `{query, candidates: [{id, text}]}` in, `{scores: [{id, score}]}` out.
pub struct HttpReranker {
    adapter: Adapter,
}

impl HttpReranker {
    pub fn new(adapter: Adapter) -> Self {
        Self { adapter }
    }
}

impl RerankScorer for HttpReranker {
    fn score(&self, query: &str, candidates: &[&DocumentChunk]) -> Result<Vec<f64>, ScorerError> {
        let err = |candidate_id: Option<String>, message: String| ScorerError { candidate_id, message };
        let request = RerankRequest {
            query,
            candidates: candidates
                .iter()
                .map(|c| RerankCandidate { id: &c.chunk_id, text: &c.display_text })
                .collect(),
        };
        let body = serde_json::to_string(&request).map_err(|e| err(None, e.to_string()))?;
        let reply = self.adapter.call(&body).map_err(|e| err(None, e.to_string()))?;
        let parsed: RerankResponse =
            serde_json::from_str(&reply.body).map_err(|e| err(None, format!("malformed response: {e}")))?;
        let by_id: std::collections::HashMap<&str, f64> =
            parsed.scores.iter().map(|s| (s.id.as_str(), s.score)).collect();
        candidates
            .iter()
            .map(|c| match by_id.get(c.chunk_id.as_str()) {
                Some(s) if s.is_finite() => Ok(*s),
                Some(_) => Err(err(Some(c.chunk_id.clone()), "non-finite score".into())),
                None => Err(err(Some(c.chunk_id.clone()), "no score returned".into())),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    struct Scripted {
        replies: Mutex<VecDeque<Result<RawReply, TransportFailure>>>,
        calls: AtomicU64,
    }

    impl Scripted {
        fn new(replies: Vec<Result<RawReply, TransportFailure>>) -> Arc<Self> {
            Arc::new(Self { replies: Mutex::new(replies.into()), calls: AtomicU64::new(0) })
        }
    }

    impl Transport for Scripted {
        fn post_json(&self, _: &str, _: &str, _: Option<&str>, _: Duration) -> Result<RawReply, TransportFailure> {
            self.calls.fetch_add(1, Ordering::Relaxed);
            self.replies.lock().unwrap().pop_front().expect("unexpected call")
        }
    }

    fn settings(max_attempts: u32) -> HttpSettings {
        HttpSettings {
            endpoint: "http://test/".into(),
            api_key_env: None,
            max_attempts,
            timeout_secs: 1,
            backoff_ms: 0,
            max_in_flight: 2,
        }
    }

    fn reply(status: u16, body: &str) -> Result<RawReply, TransportFailure> {
        Ok(RawReply { status, body: body.into() })
    }

    #[test]
    fn retries_429_once() {
        let t = Scripted::new(vec![reply(429, ""), reply(200, "{}")]);
        let a = Adapter::new(settings(3), t.clone());
        assert_eq!(a.call("{}").unwrap(), AdapterResponse { body: "{}".into(), attempts: 2 });
        assert_eq!(a.retries(), 1);
    }

    #[test]
    fn exhausted_rate_limit() {
        let t = Scripted::new(vec![reply(429, ""), reply(429, "")]);
        let a = Adapter::new(settings(2), t.clone());
        assert_eq!(a.call("{}"), Err(GenerationError::RateLimited { attempts: 2 }));
    }

    #[test]
    fn timeouts_and_server_errors() {
        let t = Scripted::new(vec![Err(TransportFailure::Timeout), Err(TransportFailure::Timeout)]);
        assert_eq!(Adapter::new(settings(2), t).call("{}"), Err(GenerationError::Timeout { attempts: 2 }));
        let t = Scripted::new(vec![reply(503, "busy")]);
        assert!(matches!(
            Adapter::new(settings(1), t).call("{}"),
            Err(GenerationError::Transport { attempts: 1, .. })
        ));
    }

    #[test]
    fn auth_not_retried() {
        let t = Scripted::new(vec![reply(401, "bad key")]);
        let a = Adapter::new(settings(5), t.clone());
        assert!(matches!(a.call("{}"), Err(GenerationError::Auth(_))));
        assert_eq!(t.calls.load(Ordering::Relaxed), 1);
    }

    #[test]
    fn missing_key_variable() {
        let t = Scripted::new(vec![]);
        let s = HttpSettings { api_key_env: Some("CITEPROBE_TEST_UNSET_KEY".into()), ..settings(1) };
        assert!(matches!(Adapter::new(s, t).call("{}"), Err(GenerationError::Auth(_))));
    }

    #[test]
    fn client_error_not_retried() {
        let t = Scripted::new(vec![reply(400, "nope")]);
        let a = Adapter::new(settings(5), t.clone());
        assert!(matches!(a.call("{}"), Err(GenerationError::Transport { attempts: 1, .. })));
    }

    #[test]
    fn backoff_doubles() {
        let a = Adapter::new(HttpSettings { backoff_ms: 100, ..settings(1) }, Scripted::new(vec![]));
        assert_eq!(a.backoff(1), Duration::from_millis(100));
        assert_eq!(a.backoff(3), Duration::from_millis(400));
        assert_eq!(a.backoff(40), MAX_BACKOFF);
    }

    #[test]
    fn limiter_bounds_in_flight() {
        let limiter = Arc::new(Limiter::new(2));
        let live = Arc::new(AtomicU64::new(0));
        let peak = Arc::new(AtomicU64::new(0));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let (limiter, live, peak) = (limiter.clone(), live.clone(), peak.clone());
                std::thread::spawn(move || {
                    let _p = limiter.acquire();
                    let now = live.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                    live.fetch_sub(1, Ordering::SeqCst);
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
