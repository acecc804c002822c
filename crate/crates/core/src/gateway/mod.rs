//! Chat-completion gateway with record/replay caching, plus the per-strategy
//! driver that ties prompt rendering, completion and parsing together.

mod cache;

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{ClinicalDocument, SampleSet};
use crate::prompt::{fit_prompt, trim_entity_samples, PromptArtifact, PromptError, PromptStrategy, PromptTemplate, TokenBudget};
use crate::response::{parse_response, strip_preamble, ParseReport};
use crate::transport::{HttpRequest, Transport};

pub use cache::CompletionCache;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub model_id: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_output_tokens: u32,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { model_id: "gpt-4o".into(), temperature: 0.2, top_p: 1.0, max_output_tokens: 4096 }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidConfig(format!("temperature {} outside [0, 2]", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(GatewayError::InvalidConfig(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if self.max_output_tokens == 0 {
            return Err(GatewayError::InvalidConfig("max_output_tokens must be positive".into()));
        }
        if self.model_id.trim().is_empty() {
            return Err(GatewayError::InvalidConfig("model_id is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub prompt_hash: String,
    pub response_text: String,
    pub latency_seconds: f64,
    /// As reported by the endpoint, or -1.
    pub request_tokens: i64,
    pub response_tokens: i64,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatewayMode {
    /// Serve from cache, request and persist on a miss.
    Record,
    /// Cache only; never touches the network.
    Replay,
    /// Always request; the fresh record overwrites any cached one.
    Live,
}

impl fmt::Display for GatewayMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GatewayMode::Record => "record",
            GatewayMode::Replay => "replay",
            GatewayMode::Live => "live",
        })
    }
}

impl FromStr for GatewayMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "record" => Ok(GatewayMode::Record),
            "replay" => Ok(GatewayMode::Replay),
            "live" => Ok(GatewayMode::Live),
            other => Err(format!("unknown mode `{other}` (expected record, replay or live)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("no cached completion for prompt {0}")]
    CacheMiss(String),
    #[error("transport failed after {attempts} attempt(s): {last}")]
    TransportFailure { attempts: u32, last: String },
    #[error("token limit exceeded: {0}")]
    TokenLimitExceeded(String),
    #[error("missing API key: set the {0} environment variable")]
    MissingCredentials(String),
    #[error("endpoint returned status {status}: {body}")]
    HttpStatus { status: u16, body: String },
    #[error("invalid completion response: {0}")]
    InvalidResponse(String),
    #[error("completion cache: {0}")]
    Cache(String),
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// Retries for connection failures and 5xx responses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub transport_retries: u32,
    pub base_delay_ms: u64,
    pub token_limit_retries: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { transport_retries: 3, base_delay_ms: 500, token_limit_retries: 1 }
    }
}

/// Stable content hash of the prompt text and generation settings.
pub fn prompt_hash(prompt_text: &str, config: &GenerationConfig) -> String {
    #[derive(Serialize)]
    struct HashInput<'a> {
        prompt: &'a str,
        model: &'a str,
        temperature: f64,
        top_p: f64,
        max_output_tokens: u32,
    }
    let input = HashInput {
        prompt: prompt_text,
        model: &config.model_id,
        temperature: config.temperature,
        top_p: config.top_p,
        max_output_tokens: config.max_output_tokens,
    };
    let canonical = serde_json::to_vec(&input).expect("hash input serializes");
    hex::encode(Sha256::digest(canonical))
}

pub struct Gateway {
    endpoint: String,
    api_key: Option<String>,
    api_key_env: String,
    transport: Arc<dyn Transport>,
    cache: Arc<CompletionCache>,
    retry: RetryPolicy,
    requests: AtomicUsize,
}

enum Attempt {
    Done(CompletionRecord),
    Retry(String),
}

impl Gateway {
    pub fn new(
        endpoint: impl Into<String>,
        api_key_env: impl Into<String>,
        api_key: Option<String>,
        transport: Arc<dyn Transport>,
        cache: Arc<CompletionCache>,
        retry: RetryPolicy,
    ) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key,
            api_key_env: api_key_env.into(),
            transport,
            cache,
            retry,
            requests: AtomicUsize::new(0),
        }
    }

    /// Network requests issued so far (retries included).
    pub fn requests_issued(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn cache(&self) -> &CompletionCache {
        &self.cache
    }

    pub fn has_credentials(&self) -> bool {
        self.api_key.is_some()
    }

    pub fn complete(
        &self,
        prompt: &PromptArtifact,
        config: &GenerationConfig,
        mode: GatewayMode,
    ) -> Result<CompletionRecord, GatewayError> {
        config.validate()?;
        let text = prompt.text();
        let hash = prompt_hash(&text, config);
        match mode {
            GatewayMode::Replay => self.cache.get(&hash)?.ok_or(GatewayError::CacheMiss(hash)),
            GatewayMode::Record => {
                if let Some(record) = self.cache.get(&hash)? {
                    return Ok(record);
                }
                let record = self.request(&text, &hash, config)?;
                self.cache.put(&record)?;
                Ok(record)
            }
            GatewayMode::Live => {
                let record = self.request(&text, &hash, config)?;
                self.cache.put(&record)?;
                Ok(record)
            }
        }
    }

    fn request(&self, prompt_text: &str, hash: &str, config: &GenerationConfig) -> Result<CompletionRecord, GatewayError> {
        let Some(key) = &self.api_key else {
            return Err(GatewayError::MissingCredentials(self.api_key_env.clone()));
        };
        let request = HttpRequest {
            url: self.endpoint.clone(),
            bearer: Some(key.clone()),
            body: json!({
                "model": config.model_id,
                "messages": [{ "role": "user", "content": prompt_text }],
                "temperature": config.temperature,
                "top_p": config.top_p,
                "max_tokens": config.max_output_tokens,
            }),
        };
        let attempts = self.retry.transport_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.retry.base_delay_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            match self.attempt(&request, hash)? {
                Attempt::Done(record) => return Ok(record),
                Attempt::Retry(reason) => last = reason,
            }
        }
        Err(GatewayError::TransportFailure { attempts, last })
    }

    fn attempt(&self, request: &HttpRequest, hash: &str) -> Result<Attempt, GatewayError> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        let timestamp = Utc::now();
        let started = Instant::now();
        let response = match self.transport.post_json(request) {
            Ok(response) => response,
            Err(e) => return Ok(Attempt::Retry(e.to_string())),
        };
        let latency_seconds = started.elapsed().as_secs_f64();

        if is_token_limit(response.status, &response.body) {
            return Err(GatewayError::TokenLimitExceeded(format!("status {}: {}", response.status, response.body)));
        }
        if response.status >= 500 || response.status == 408 {
            return Ok(Attempt::Retry(format!("status {}", response.status)));
        }
        if !(200..300).contains(&response.status) {
            return Err(GatewayError::HttpStatus { status: response.status, body: response.body });
        }
        let body: serde_json::Value =
            serde_json::from_str(&response.body).map_err(|e| GatewayError::InvalidResponse(e.to_string()))?;
        let response_text = body["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| GatewayError::InvalidResponse("missing choices[0].message.content".into()))?
            .to_string();
        Ok(Attempt::Done(CompletionRecord {
            prompt_hash: hash.to_string(),
            response_text,
            latency_seconds,
            request_tokens: body["usage"]["prompt_tokens"].as_i64().unwrap_or(-1),
            response_tokens: body["usage"]["completion_tokens"].as_i64().unwrap_or(-1),
            timestamp,
        }))
    }
}

fn is_token_limit(status: u16, body: &str) -> bool {
    if status == 429 || status == 413 {
        return true;
    }
    (400..500).contains(&status)
        && ["context_length_exceeded", "rate_limit_exceeded", "tokens_per_min", "token limit"]
            .iter()
            .any(|marker| body.contains(marker))
}

/// Everything [`run_strategy`] needs besides the strategy itself.
pub struct StrategyContext<'a> {
    pub samples: &'a SampleSet,
    pub test_document: &'a ClinicalDocument,
    pub template: &'a PromptTemplate,
    pub budget: TokenBudget,
    pub generation: &'a GenerationConfig,
    pub mode: GatewayMode,
    pub gateway: &'a Gateway,
    /// Trims to apply before the first render, as recorded by an earlier run.
    pub initial_trims: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRun {
    pub strategy: PromptStrategy,
    pub report: ParseReport,
    pub record: CompletionRecord,
    /// Entity-list trims behind the prompt that produced `record`.
    pub trims: u32,
    pub token_estimate: usize,
}

/// Renders, completes and parses one strategy. A token-limit error on the
/// entity-list strategy triggers a trim and a retry, up to the retry policy.
pub fn run_strategy(strategy: PromptStrategy, ctx: &StrategyContext<'_>) -> Result<StrategyRun, GatewayError> {
    let mut samples = ctx.samples.clone();
    let mut trims = 0;
    for _ in 0..ctx.initial_trims {
        samples = trim_entity_samples(&samples, ctx.budget.trim_fraction);
        trims += 1;
    }
    let mut token_retries = 0;
    loop {
        let (artifact, used) = fit_prompt(strategy, &samples, ctx.test_document, ctx.template, &ctx.budget)?;
        match ctx.gateway.complete(&artifact, ctx.generation, ctx.mode) {
            Ok(record) => {
                let report = parse_response(&strip_preamble(&record.response_text), strategy);
                return Ok(StrategyRun {
                    strategy,
                    report,
                    record,
                    trims: trims + artifact.trims_applied,
                    token_estimate: artifact.token_estimate,
                });
            }
            Err(GatewayError::TokenLimitExceeded(_))
                if strategy == PromptStrategy::FewShotEntities
                    && token_retries < ctx.gateway.retry.token_limit_retries =>
            {
                token_retries += 1;
                trims += artifact.trims_applied + 1;
                samples = trim_entity_samples(&used, ctx.budget.trim_fraction);
            }
            Err(e) => return Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{EntityLists, SampleSet};
    use crate::prompt::build_prompt;
    use crate::transport::{HttpResponse, OfflineTransport, TransportError};
    use std::collections::VecDeque;
    use std::sync::Mutex;

    /// Plays back scripted responses and records request bodies.
    struct Scripted {
        replies: Mutex<VecDeque<Result<HttpResponse, TransportError>>>,
        bodies: Mutex<Vec<serde_json::Value>>,
    }

    impl Scripted {
        fn new(replies: Vec<Result<HttpResponse, TransportError>>) -> Arc<Self> {
            Arc::new(Self { replies: Mutex::new(replies.into()), bodies: Mutex::new(Vec::new()) })
        }
    }

    impl Transport for Scripted {
        fn post_json(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError> {
            self.bodies.lock().unwrap().push(request.body.clone());
            self.replies.lock().unwrap().pop_front().expect("unexpected request")
        }
    }

    fn ok(content: &str) -> Result<HttpResponse, TransportError> {
        Ok(HttpResponse {
            status: 200,
            body: json!({
                "choices": [{ "message": { "role": "assistant", "content": content } }],
                "usage": { "prompt_tokens": 120, "completion_tokens": 7 }
            })
            .to_string(),
        })
    }

    fn status(code: u16, body: &str) -> Result<HttpResponse, TransportError> {
        Ok(HttpResponse { status: code, body: body.into() })
    }

    fn gateway(dir: &std::path::Path, transport: Arc<dyn Transport>) -> Gateway {
        let retry = RetryPolicy { base_delay_ms: 0, ..Default::default() };
        let cache = Arc::new(CompletionCache::open(dir).unwrap());
        Gateway::new("http://llm/v1/chat/completions", "TEST_KEY", Some("k".into()), transport, cache, retry)
    }

    fn test_doc() -> ClinicalDocument {
        ClinicalDocument::from_text("t", "Started aspirin for chest pain.")
    }

    fn zero_prompt() -> PromptArtifact {
        build_prompt(
            PromptStrategy::ZeroShot,
            &SampleSet::empty(PromptStrategy::ZeroShot),
            &test_doc(),
            &PromptTemplate::builtin(),
            &TokenBudget::default(),
        )
        .unwrap()
    }

    #[test]
    fn defaults_follow_generation_settings() {
        let g = GenerationConfig::default();
        assert_eq!((g.temperature, g.top_p), (0.2, 1.0));
        g.validate().unwrap();
        assert!(GenerationConfig { temperature: 2.5, ..g.clone() }.validate().is_err());
        assert!(GenerationConfig { top_p: 0.0, ..g }.validate().is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let g = GenerationConfig::default();
        let h = prompt_hash("abc", &g);
        assert_eq!(h, prompt_hash("abc", &g));
        assert_eq!(h.len(), 64);
        assert_ne!(h, prompt_hash("abd", &g));
        assert_ne!(h, prompt_hash("abc", &GenerationConfig { temperature: 0.3, ..g }));
    }

    #[test]
    fn record_then_cache_hit_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let transport = Scripted::new(vec![ok("aspirin | treatment")]);
        let gw = gateway(dir.path(), transport.clone());
        let p = zero_prompt();
        let g = GenerationConfig::default();
        let first = gw.complete(&p, &g, GatewayMode::Record).unwrap();
        let second = gw.complete(&p, &g, GatewayMode::Record).unwrap();
        assert_eq!(first, second);
        assert_eq!(gw.requests_issued(), 1);
        assert_eq!((first.request_tokens, first.response_tokens), (120, 7));

        let body = &transport.bodies.lock().unwrap()[0];
        assert_eq!(body["model"], "gpt-4o");
        assert_eq!(body["temperature"], 0.2);
        assert_eq!(body["top_p"], 1.0);
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(body["messages"][0]["content"], p.text());

        let offline = Arc::new(OfflineTransport::new());
        let replay = gateway(dir.path(), offline.clone());
        let replayed = replay.complete(&p, &g, GatewayMode::Replay).unwrap();
        assert_eq!(replayed, first);
        assert_eq!(replayed.latency_seconds, first.latency_seconds);
        assert_eq!(offline.attempts(), 0);
    }

    #[test]
    fn replay_miss_is_cache_miss() {
        let dir = tempfile::tempdir().unwrap();
        let offline = Arc::new(OfflineTransport::new());
        let gw = gateway(dir.path(), offline.clone());
        assert!(matches!(
            gw.complete(&zero_prompt(), &GenerationConfig::default(), GatewayMode::Replay),
            Err(GatewayError::CacheMiss(_))
        ));
        assert_eq!(offline.attempts(), 0);
    }

    #[test]
    fn rate_limit_surfaces_without_persisting() {
        let dir = tempfile::tempdir().unwrap();
        let gw = gateway(dir.path(), Scripted::new(vec![status(429, "{\"error\":{\"code\":\"rate_limit_exceeded\"}}")]));
        let p = zero_prompt();
        let g = GenerationConfig::default();
        assert!(matches!(gw.complete(&p, &g, GatewayMode::Live), Err(GatewayError::TokenLimitExceeded(_))));
        assert!(gw.cache().get(&prompt_hash(&p.text(), &g)).unwrap().is_none());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn transport_failures_retry_then_give_up() {
        let dir = tempfile::tempdir().unwrap();
        let err = || Err(TransportError("refused".into()));
        let gw = gateway(dir.path(), Scripted::new(vec![err(), status(503, ""), err(), ok("x | test")]));
        let rec = gw.complete(&zero_prompt(), &GenerationConfig::default(), GatewayMode::Live).unwrap();
        assert_eq!(rec.response_text, "x | test");
        assert_eq!(gw.requests_issued(), 4);

        let dir = tempfile::tempdir().unwrap();
        let gw = gateway(dir.path(), Scripted::new(vec![err(), err(), err(), err()]));
        assert!(matches!(
            gw.complete(&zero_prompt(), &GenerationConfig::default(), GatewayMode::Live),
            Err(GatewayError::TransportFailure { attempts: 4, .. })
        ));
    }

    #[test]
    fn client_errors_do_not_retry() {
        let dir = tempfile::tempdir().unwrap();
        let gw = gateway(dir.path(), Scripted::new(vec![status(401, "bad key")]));
        assert!(matches!(
            gw.complete(&zero_prompt(), &GenerationConfig::default(), GatewayMode::Live),
            Err(GatewayError::HttpStatus { status: 401, .. })
        ));
        assert_eq!(gw.requests_issued(), 1);
    }

    #[test]
    fn missing_key_fails_before_request() {
        let dir = tempfile::tempdir().unwrap();
        let offline = Arc::new(OfflineTransport::new());
        let cache = Arc::new(CompletionCache::open(dir.path()).unwrap());
        let gw = Gateway::new("http://x", "MY_KEY", None, offline.clone(), cache, RetryPolicy::default());
        let err = gw.complete(&zero_prompt(), &GenerationConfig::default(), GatewayMode::Live).unwrap_err();
        assert!(matches!(err, GatewayError::MissingCredentials(ref v) if v == "MY_KEY"));
        assert_eq!(offline.attempts(), 0);
    }

    fn entity_samples(n: usize) -> SampleSet {
        let make = |p: &str| (0..n).map(|i| format!("{p} {i}")).collect::<Vec<_>>();
        SampleSet {
            entities: EntityLists { problem: make("problem"), test: make("test"), treatment: make("treatment") },
            ..SampleSet::empty(PromptStrategy::FewShotEntities)
        }
    }

    #[test]
    fn token_limit_triggers_one_trim() {
        let dir = tempfile::tempdir().unwrap();
        let transport = Scripted::new(vec![status(429, "slow down"), ok("aspirin | treatment")]);
        let gw = gateway(dir.path(), transport.clone());
        let samples = entity_samples(100);
        let template = PromptTemplate::builtin();
        let doc = test_doc();
        let g = GenerationConfig::default();
        let ctx = StrategyContext {
            samples: &samples,
            test_document: &doc,
            template: &template,
            budget: TokenBudget::default(),
            generation: &g,
            mode: GatewayMode::Record,
            gateway: &gw,
            initial_trims: 0,
        };
        let run = run_strategy(PromptStrategy::FewShotEntities, &ctx).unwrap();
        assert_eq!(run.trims, 1);
        assert_eq!(run.report.entities.len(), 1);
        let bodies = transport.bodies.lock().unwrap();
        assert_eq!(bodies.len(), 2);
        let second = bodies[1]["messages"][0]["content"].as_str().unwrap();
        assert_eq!(second.matches("<problem>problem").count(), 90);
        assert_eq!(second.matches("<test>test").count(), 90);
        assert_eq!(second.matches("<treatment>treatment").count(), 90);
        drop(bodies);

        // Replaying with the recorded trim count reaches the cached prompt directly.
        let replay = gateway(dir.path(), Arc::new(OfflineTransport::new()));
        let ctx = StrategyContext { gateway: &replay, mode: GatewayMode::Replay, initial_trims: 1, ..ctx };
        let again = run_strategy(PromptStrategy::FewShotEntities, &ctx).unwrap();
        assert_eq!(again.record, run.record);
        assert_eq!(again.trims, 1);
    }

    #[test]
    fn token_limit_on_other_strategy_propagates() {
        let dir = tempfile::tempdir().unwrap();
        let gw = gateway(dir.path(), Scripted::new(vec![status(429, "")]));
        let samples = SampleSet::empty(PromptStrategy::ZeroShot);
        let template = PromptTemplate::builtin();
        let doc = test_doc();
        let g = GenerationConfig::default();
        let ctx = StrategyContext {
            samples: &samples,
            test_document: &doc,
            template: &template,
            budget: TokenBudget::default(),
            generation: &g,
            mode: GatewayMode::Live,
            gateway: &gw,
            initial_trims: 0,
        };
        assert!(matches!(run_strategy(PromptStrategy::ZeroShot, &ctx), Err(GatewayError::TokenLimitExceeded(_))));
    }
}
