//! The staged pipeline behind the command-line tool: ingest, run, ensemble,
//! evaluate and report. Every stage reads and writes plain files under
//! `<out_dir>/<run_id>/`, so each can be re-executed on its own.
//!
//! ```text
//! <out_dir>/<run_id>/
//!   entities/<strategy>.json   one per prompt strategy
//!   manifest.json              written after all strategies finish
//!   ensemble.json
//!   report.json  report.txt  matches.csv
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, EmbeddingKind, PipelineConfig};
use crate::corpus::{build_sample_set, load_corpus_dir, AnnotatedDocument, CorpusError, LabelCounts, SamplingConfig};
use crate::embedding::{CachedEmbedder, EmbeddingCache, EmbeddingError, EmbeddingProvider, LocalTrigramEmbedder, RemoteEmbedder};
use crate::ensemble::{run_ensemble, EnsembleError, EnsemblePrediction, PredictionSet};
use crate::evaluation::{
    classification_metrics, extraction_metrics, match_predictions, timing_report, write_match_csv, EvaluationError,
    EvaluationReport, MatchRecord, PredictedEntity, ReportRow, MATCHING_POLICY,
};
use crate::gateway::{
    run_strategy, CompletionCache, CompletionRecord, Gateway, GatewayError, GatewayMode, GenerationConfig, RetryPolicy,
    StrategyContext,
};
use crate::prompt::{PromptError, PromptStrategy, PromptTemplate, TokenBudget};
use crate::response::{ExtractedEntity, LabelWarning, MalformedLine};
use crate::transport::{HttpTransport, OfflineTransport, Transport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_GATEWAY: i32 = 3;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Evaluation(#[from] EvaluationError),
    #[error("cannot access {path}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Json { path: PathBuf, message: String },
    #[error("no completed run `{0}` (manifest missing)")]
    RunNotFound(String),
    #[error("run `{run_id}` has {} usable strategy output(s), the ensemble needs at least 2", found.len())]
    MissingRuns { run_id: String, found: Vec<PromptStrategy> },
    #[error("{path} belongs to run `{found}`, expected `{expected}`")]
    CrossRunMixing { path: PathBuf, expected: String, found: String },
    #[error("run `{0}` already exists with a different configuration")]
    ConfigChanged(String),
    #[error("run `{0}` has no outputs to evaluate")]
    NothingToEvaluate(String),
    #[error("run `{0}` has not been evaluated yet")]
    NotEvaluated(String),
    #[error("no strategies requested")]
    NoStrategies,
}

impl PipelineError {
    /// 3 for endpoint and provider failures, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        let provider_down = |e: &EmbeddingError| matches!(e, EmbeddingError::ProviderUnavailable(_));
        match self {
            PipelineError::Gateway(GatewayError::Prompt(_)) => EXIT_DATA,
            PipelineError::Gateway(_) => EXIT_GATEWAY,
            PipelineError::Embedding(e)
            | PipelineError::Ensemble(EnsembleError::Embedding(e))
            | PipelineError::Evaluation(EvaluationError::Embedding(e))
                if provider_down(e) =>
            {
                EXIT_GATEWAY
            }
            _ => EXIT_DATA,
        }
    }
}

/// The parsed training pool and the test document with its gold entities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadedCorpus {
    pub train: Vec<AnnotatedDocument>,
    pub test: AnnotatedDocument,
}

impl LoadedCorpus {
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("corpus serializes"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub strategy: PromptStrategy,
    pub documents: usize,
    pub sentences: usize,
    pub counts: LabelCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub train_documents: usize,
    pub train_counts: LabelCounts,
    pub test_doc_id: String,
    pub test_counts: LabelCounts,
    pub samples: Vec<SampleSummary>,
    pub corpus_cache: PathBuf,
}

impl IngestSummary {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "training pool: {} documents ({} problem, {} test, {} treatment)",
            self.train_documents, self.train_counts.problem, self.train_counts.test, self.train_counts.treatment
        );
        let _ = writeln!(
            out,
            "{:<12} {:>9} {:>9} {:>8} {:>8} {:>9}",
            "Prompt", "Documents", "Sentences", "Problem", "Test", "Treatment"
        );
        for s in &self.samples {
            let _ = writeln!(
                out,
                "{:<12} {:>9} {:>9} {:>8} {:>8} {:>9}",
                s.strategy.display_name(),
                s.documents,
                s.sentences,
                s.counts.problem,
                s.counts.test,
                s.counts.treatment
            );
        }
        let _ = writeln!(
            out,
            "{:<12} {:>9} {:>9} {:>8} {:>8} {:>9}",
            "Test Sample", 1, "-", self.test_counts.problem, self.test_counts.test, self.test_counts.treatment
        );
        let _ = writeln!(
            out,
            "test sample {}: {} Problem, {} Test, {} Treatment",
            self.test_doc_id, self.test_counts.problem, self.test_counts.test, self.test_counts.treatment
        );
        out
    }
}

/// Entities extracted by one prompt strategy in one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyOutput {
    pub run_id: String,
    pub template_version: String,
    pub strategy: PromptStrategy,
    pub model_id: String,
    pub trims: u32,
    pub token_estimate: usize,
    pub completion: CompletionRecord,
    pub entities: Vec<ExtractedEntity>,
    pub malformed: Vec<MalformedLine>,
    pub warnings: Vec<LabelWarning>,
    pub duplicate_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyStatus {
    pub strategy: PromptStrategy,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_hash: Option<String>,
    pub trims: u32,
    pub token_estimate: usize,
    pub entities: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_digest: Option<String>,
}

/// Everything needed to re-execute a run from the caches. Credentials are
/// referred to only by environment variable name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_digest: String,
    pub template_version: String,
    pub mode: GatewayMode,
    pub strategies: Vec<PromptStrategy>,
    pub generation: GenerationConfig,
    pub llm_endpoint: String,
    pub llm_api_key_env: String,
    pub budget: TokenBudget,
    pub tau: f64,
    pub sampling: SamplingConfig,
    pub embedding_provider: String,
    pub corpus_digest: String,
    pub completion_cache_digest: String,
    pub results: Vec<StrategyStatus>,
    /// Latest timestamp among the completions used.
    pub timestamp: Option<DateTime<Utc>>,
}

impl RunManifest {
    pub fn failures(&self) -> impl Iterator<Item = &StrategyStatus> {
        self.results.iter().filter(|r| !r.ok)
    }

    /// Worst exit code over the strategies.
    pub fn exit_code(&self) -> i32 {
        self.failures().filter_map(|r| r.exit_code).max().unwrap_or(EXIT_OK)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "run {}  template {}  mode {}", self.run_id, self.template_version, self.mode);
        for r in &self.results {
            if r.ok {
                let trims = if r.trims > 0 { format!(", trimmed {}x", r.trims) } else { String::new() };
                let _ = writeln!(
                    out,
                    "{:<12} {} entities, ~{} prompt tokens{trims}",
                    r.strategy.display_name(),
                    r.entities,
                    r.token_estimate
                );
            } else {
                let _ = writeln!(
                    out,
                    "{:<12} FAILED: {}",
                    r.strategy.display_name(),
                    r.error.as_deref().unwrap_or("unknown error")
                );
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleOutput {
    pub run_id: String,
    pub template_version: String,
    pub tau: f64,
    pub embedding_provider: String,
    pub strategies: Vec<PromptStrategy>,
    pub predictions: Vec<EnsemblePrediction>,
}

impl EnsembleOutput {
    pub fn unknown_count(&self) -> usize {
        self.predictions.iter().filter(|p| !p.label.is_gold()).count()
    }

    pub fn summary(&self) -> String {
        let clusters = self.predictions.len();
        let unknown = self.unknown_count();
        let rate = if clusters == 0 { 0.0 } else { unknown as f64 / clusters as f64 };
        let names: Vec<&str> = self.strategies.iter().map(|s| s.name()).collect();
        format!(
            "{clusters} clusters from {} at tau {}; {unknown} unknown ({:.1}%)",
            names.join(","),
            self.tau,
            rate * 100.0
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Text,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "text" => Ok(ReportFormat::Text),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!("unknown format `{other}` (expected json, text or csv)")),
        }
    }
}

pub struct Pipeline {
    config: PipelineConfig,
    transport: Arc<dyn Transport>,
    llm_api_key: Option<String>,
    embedding_api_key: Option<String>,
    retry: RetryPolicy,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let raw = fs::read_to_string(path).map_err(|source| PipelineError::Io { path: path.to_path_buf(), source })?;
    serde_json::from_str(&raw).map_err(|e| PipelineError::Json { path: path.to_path_buf(), message: e.to_string() })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let io = |source| PipelineError::Io { path: path.to_path_buf(), source };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).and_then(|_| fs::rename(&tmp, path)).map_err(io)
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("artifact serializes");
    out.push(b'\n');
    out
}

impl Pipeline {
    /// Uses the HTTP transport and reads API keys from the environment
    /// variables named in the config.
    pub fn from_env(config: PipelineConfig) -> Result<Self, PipelineError> {
        let transport = HttpTransport::new(Duration::from_secs(config.llm.timeout_seconds))
            .map_err(|e| GatewayError::TransportFailure { attempts: 0, last: e.0 })?;
        let llm_api_key = std::env::var(&config.llm.api_key_env).ok().filter(|k| !k.is_empty());
        let embedding_api_key = std::env::var(&config.embedding.api_key_env).ok().filter(|k| !k.is_empty());
        Ok(Self::new(config, Arc::new(transport), llm_api_key, embedding_api_key))
    }

    pub fn new(
        config: PipelineConfig,
        transport: Arc<dyn Transport>,
        llm_api_key: Option<String>,
        embedding_api_key: Option<String>,
    ) -> Self {
        Self { config, transport, llm_api_key, embedding_api_key, retry: RetryPolicy::default() }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.config.paths.out_dir.join(run_id)
    }

    pub fn template(&self) -> Result<PromptTemplate, PipelineError> {
        Ok(match &self.config.prompt.template {
            Some(path) => PromptTemplate::load(path)?,
            None => PromptTemplate::builtin(),
        })
    }

    pub fn load_corpus(&self) -> Result<LoadedCorpus, PipelineError> {
        let train = load_corpus_dir(&self.config.corpus.train_dir)?;
        let mut tests = load_corpus_dir(&self.config.corpus.test_dir)?;
        let wanted = &self.config.corpus.test_doc_id;
        let test = if wanted.is_empty() {
            if tests.len() != 1 {
                return Err(CorpusError::InsufficientCorpus(format!(
                    "corpus.test_doc_id is unset and the test directory holds {} documents",
                    tests.len()
                ))
                .into());
            }
            tests.remove(0)
        } else {
            let idx = tests.iter().position(|d| &d.document.doc_id == wanted).ok_or_else(|| {
                CorpusError::InsufficientCorpus(format!("test document `{wanted}` not found in the test directory"))
            })?;
            tests.swap_remove(idx)
        };
        if train.iter().any(|d| d.document.doc_id == test.document.doc_id) {
            return Err(CorpusError::TestLeakage(test.document.doc_id.clone()).into());
        }
        Ok(LoadedCorpus { train, test })
    }

    fn embedder(&self) -> Result<Box<dyn EmbeddingProvider>, PipelineError> {
        let cache = EmbeddingCache::open(self.config.embedding_cache_dir())?;
        let e = &self.config.embedding;
        Ok(match e.provider {
            EmbeddingKind::Local => Box::new(CachedEmbedder::new(LocalTrigramEmbedder::new(e.dimension), cache)),
            EmbeddingKind::Remote => {
                let transport: Arc<dyn Transport> = if self.config.llm.mode == GatewayMode::Replay {
                    Arc::new(OfflineTransport::new())
                } else {
                    self.transport.clone()
                };
                let endpoint = e.endpoint.clone().unwrap_or_default();
                let id = e.provider_id.clone().unwrap_or_else(|| format!("remote:{endpoint}"));
                let remote = RemoteEmbedder::new(id, endpoint, self.embedding_api_key.clone(), e.batch_size, transport);
                Box::new(CachedEmbedder::new(remote, cache))
            }
        })
    }

    fn embedding_provider_id(&self) -> String {
        let e = &self.config.embedding;
        match e.provider {
            EmbeddingKind::Local => LocalTrigramEmbedder::new(e.dimension).provider_id().to_string(),
            EmbeddingKind::Remote => e
                .provider_id
                .clone()
                .unwrap_or_else(|| format!("remote:{}", e.endpoint.clone().unwrap_or_default())),
        }
    }

    /// Parses the corpus, draws every strategy's sample and writes the parsed
    /// corpus to `<cache_dir>/corpus.json`.
    pub fn ingest(&self) -> Result<IngestSummary, PipelineError> {
        let corpus = self.load_corpus()?;
        let sampling = self.config.sampling(&corpus.test.document.doc_id);
        let mut samples = Vec::new();
        for strategy in PromptStrategy::ALL {
            let set = build_sample_set(strategy, &corpus.train, &sampling)?;
            let documents = match strategy {
                PromptStrategy::ZeroShot => 0,
                PromptStrategy::FewShotDocument => set.documents.len(),
                PromptStrategy::FewShotSentences => {
                    let mut ids: Vec<&str> = set.sentences.iter().map(|s| s.doc_id.as_str()).collect();
                    ids.sort_unstable();
                    ids.dedup();
                    ids.len()
                }
                PromptStrategy::FewShotEntities => {
                    sampling.entity_doc_ids.as_ref().map_or(corpus.train.len(), Vec::len)
                }
            };
            samples.push(SampleSummary {
                strategy,
                documents,
                sentences: set.sentences.len(),
                counts: set.label_counts(),
            });
        }
        let corpus_cache = self.config.paths.cache_dir.join("corpus.json");
        write_file(&corpus_cache, &to_json(&corpus))?;
        Ok(IngestSummary {
            train_documents: corpus.train.len(),
            train_counts: corpus.train.iter().fold(LabelCounts::default(), |acc, d| acc + d.label_counts()),
            test_doc_id: corpus.test.document.doc_id.clone(),
            test_counts: corpus.test.label_counts(),
            samples,
            corpus_cache,
        })
    }

    fn config_digest(
        &self,
        template: &PromptTemplate,
        strategies: &[PromptStrategy],
        sampling: &SamplingConfig,
        corpus_digest: &str,
    ) -> String {
        let input = serde_json::json!({
            "template": template,
            "strategies": strategies,
            "generation": self.config.generation(),
            "budget": self.config.budget(),
            "sampling": sampling,
            "corpus": corpus_digest,
        });
        sha256_hex(&serde_json::to_vec(&input).expect("digest input serializes"))
    }

    /// Runs the requested strategies concurrently and writes one entity file
    /// per successful strategy, then the manifest. A failing strategy is
    /// recorded in the manifest without stopping the others. Without
    /// `run_id` the id is derived from the configuration.
    pub fn run(
        &self,
        strategies: &[PromptStrategy],
        mode: GatewayMode,
        run_id: Option<&str>,
    ) -> Result<RunManifest, PipelineError> {
        let mut strategies = strategies.to_vec();
        strategies.sort();
        strategies.dedup();
        if strategies.is_empty() {
            return Err(PipelineError::NoStrategies);
        }
        if mode != GatewayMode::Replay && self.llm_api_key.is_none() {
            return Err(GatewayError::MissingCredentials(self.config.llm.api_key_env.clone()).into());
        }
        let generation = self.config.generation();
        generation.validate()?;

        let corpus = self.load_corpus()?;
        let template = self.template()?;
        let sampling = self.config.sampling(&corpus.test.document.doc_id);
        let corpus_digest = corpus.digest();
        let config_digest = self.config_digest(&template, &strategies, &sampling, &corpus_digest);
        let run_id = run_id.map_or_else(|| format!("run-{}", &config_digest[..12]), str::to_string);
        let run_dir = self.run_dir(&run_id);
        let manifest_path = run_dir.join("manifest.json");

        let mut prior_trims: BTreeMap<PromptStrategy, u32> = BTreeMap::new();
        if manifest_path.exists() {
            let prior: RunManifest = read_json(&manifest_path)?;
            if prior.config_digest != config_digest {
                return Err(PipelineError::ConfigChanged(run_id));
            }
            if mode != GatewayMode::Live {
                prior_trims = prior.results.iter().filter(|r| r.ok).map(|r| (r.strategy, r.trims)).collect();
            }
        }

        let cache = Arc::new(CompletionCache::open(self.config.completion_cache_dir())?);
        let gateway = Gateway::new(
            self.config.llm.endpoint.clone(),
            self.config.llm.api_key_env.clone(),
            self.llm_api_key.clone(),
            self.transport.clone(),
            cache.clone(),
            self.retry,
        );
        let budget = self.config.budget();

        let outcomes: BTreeMap<PromptStrategy, Result<crate::gateway::StrategyRun, PipelineError>> =
            thread::scope(|scope| {
                let handles: Vec<_> = strategies
                    .iter()
                    .map(|&strategy| {
                        let (corpus, sampling, template, gateway, generation) =
                            (&corpus, &sampling, &template, &gateway, &generation);
                        let initial_trims = prior_trims.get(&strategy).copied().unwrap_or(0);
                        let handle = scope.spawn(move || {
                            let samples = build_sample_set(strategy, &corpus.train, sampling)?;
                            let ctx = StrategyContext {
                                samples: &samples,
                                test_document: &corpus.test.document,
                                template,
                                budget,
                                generation,
                                mode,
                                gateway,
                                initial_trims,
                            };
                            run_strategy(strategy, &ctx).map_err(PipelineError::from)
                        });
                        (strategy, handle)
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|(s, h)| (s, h.join().expect("strategy worker panicked")))
                    .collect()
            });

        let entity_dir = run_dir.join("entities");
        let mut results = Vec::new();
        let mut cache_hasher = Sha256::new();
        let mut timestamp: Option<DateTime<Utc>> = None;
        for (strategy, outcome) in outcomes {
            let path = entity_dir.join(format!("{}.json", strategy.name()));
            match outcome {
                Ok(run) => {
                    let output = StrategyOutput {
                        run_id: run_id.clone(),
                        template_version: template.version.clone(),
                        strategy,
                        model_id: generation.model_id.clone(),
                        trims: run.trims,
                        token_estimate: run.token_estimate,
                        completion: run.record.clone(),
                        entities: run.report.entities,
                        malformed: run.report.malformed,
                        warnings: run.report.warnings,
                        duplicate_count: run.report.duplicate_count,
                    };
                    let bytes = to_json(&output);
                    write_file(&path, &bytes)?;
                    let cached = cache.path(&run.record.prompt_hash);
                    let cached_bytes =
                        fs::read(&cached).map_err(|source| PipelineError::Io { path: cached.clone(), source })?;
                    cache_hasher.update(run.record.prompt_hash.as_bytes());
                    cache_hasher.update(b"\n");
                    cache_hasher.update(&cached_bytes);
                    timestamp = timestamp.max(Some(run.record.timestamp));
                    results.push(StrategyStatus {
                        strategy,
                        ok: true,
                        error: None,
                        exit_code: None,
                        prompt_hash: Some(run.record.prompt_hash),
                        trims: run.trims,
                        token_estimate: run.token_estimate,
                        entities: output.entities.len(),
                        output_digest: Some(sha256_hex(&bytes)),
                    });
                }
                Err(e) => {
                    if path.exists() {
                        fs::remove_file(&path).map_err(|source| PipelineError::Io { path: path.clone(), source })?;
                    }
                    results.push(StrategyStatus {
                        strategy,
                        ok: false,
                        error: Some(e.to_string()),
                        exit_code: Some(e.exit_code()),
                        prompt_hash: None,
                        trims: 0,
                        token_estimate: 0,
                        entities: 0,
                        output_digest: None,
                    });
                }
            }
        }

        let manifest = RunManifest {
            run_id,
            config_digest,
            template_version: template.version.clone(),
            mode,
            strategies,
            generation,
            llm_endpoint: self.config.llm.endpoint.clone(),
            llm_api_key_env: self.config.llm.api_key_env.clone(),
            budget,
            tau: self.config.ensemble.tau,
            sampling,
            embedding_provider: self.embedding_provider_id(),
            corpus_digest,
            completion_cache_digest: hex::encode(cache_hasher.finalize()),
            results,
            timestamp,
        };
        write_file(&manifest_path, &to_json(&manifest))?;
        Ok(manifest)
    }

    pub fn load_manifest(&self, run_id: &str) -> Result<RunManifest, PipelineError> {
        let path = self.run_dir(run_id).join("manifest.json");
        if !path.exists() {
            return Err(PipelineError::RunNotFound(run_id.to_string()));
        }
        let manifest: RunManifest = read_json(&path)?;
        if manifest.run_id != run_id {
            return Err(PipelineError::CrossRunMixing { path, expected: run_id.into(), found: manifest.run_id });
        }
        Ok(manifest)
    }

    /// Strategy outputs present for the run, restricted to `only` when
    /// given, in strategy order.
    pub fn load_outputs(
        &self,
        manifest: &RunManifest,
        only: Option<&[PromptStrategy]>,
    ) -> Result<BTreeMap<PromptStrategy, StrategyOutput>, PipelineError> {
        let mut out = BTreeMap::new();
        for strategy in PromptStrategy::ALL {
            if only.is_some_and(|o| !o.contains(&strategy)) {
                continue;
            }
            let path = self.run_dir(&manifest.run_id).join("entities").join(format!("{}.json", strategy.name()));
            if !path.exists() {
                continue;
            }
            let output: StrategyOutput = read_json(&path)?;
            check_origin(&path, manifest, &output.run_id, &output.template_version)?;
            if output.strategy != strategy {
                return Err(PipelineError::Json {
                    path,
                    message: format!("holds strategy {} instead of {strategy}", output.strategy),
                });
            }
            out.insert(strategy, output);
        }
        Ok(out)
    }

    /// Clusters and votes over the run's configured ensemble strategies and
    /// writes `ensemble.json`.
    pub fn ensemble(&self, run_id: &str, tau: Option<f64>) -> Result<EnsembleOutput, PipelineError> {
        let tau = tau.unwrap_or(self.config.ensemble.tau);
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(ConfigError::Invalid(format!("tau must lie in (0, 1], got {tau}")).into());
        }
        let manifest = self.load_manifest(run_id)?;
        let outputs = self.load_outputs(&manifest, Some(&self.config.ensemble.strategies))?;
        if outputs.len() < 2 {
            return Err(PipelineError::MissingRuns { run_id: run_id.to_string(), found: outputs.keys().copied().collect() });
        }
        let strategies: Vec<PromptStrategy> = outputs.keys().copied().collect();
        let runs = outputs.into_iter().map(|(s, o)| (s, o.entities)).collect();
        let provider = self.embedder()?;
        let predictions = run_ensemble(&PredictionSet::new(runs)?, tau, provider.as_ref())?;
        let output = EnsembleOutput {
            run_id: manifest.run_id.clone(),
            template_version: manifest.template_version.clone(),
            tau,
            embedding_provider: provider.provider_id().to_string(),
            strategies,
            predictions,
        };
        write_file(&self.run_dir(run_id).join("ensemble.json"), &to_json(&output))?;
        Ok(output)
    }

    fn score_row(
        &self,
        key: String,
        name: String,
        predictions: &[PredictedEntity],
        corpus: &LoadedCorpus,
        provider: &dyn EmbeddingProvider,
    ) -> Result<(ReportRow, Vec<MatchRecord>), PipelineError> {
        let mut row = ReportRow { key, name, extraction: None, classification: None, errors: Vec::new() };
        let records = match match_predictions(predictions, &corpus.test.entities, self.config.ensemble.tau, provider) {
            Ok(records) => records,
            Err(EvaluationError::Embedding(e)) => return Err(EvaluationError::Embedding(e).into()),
            Err(e) => {
                row.errors.push(e.to_string());
                return Ok((row, Vec::new()));
            }
        };
        match extraction_metrics(&records, corpus.test.entities.len()) {
            Ok(m) => row.extraction = Some(m),
            Err(e) => row.errors.push(e.to_string()),
        }
        let matched: Vec<MatchRecord> = records.iter().filter(|r| r.is_matched()).cloned().collect();
        match classification_metrics(&matched) {
            Ok(m) => row.classification = Some(m),
            Err(e) => row.errors.push(e.to_string()),
        }
        Ok((row, records))
    }

    /// Scores every strategy output and the ensemble (when present) against
    /// the test document's gold entities and writes `report.json`,
    /// `report.txt` and `matches.csv`.
    pub fn evaluate(&self, run_id: &str) -> Result<EvaluationReport, PipelineError> {
        let manifest = self.load_manifest(run_id)?;
        let outputs = self.load_outputs(&manifest, None)?;
        let run_dir = self.run_dir(run_id);
        let ensemble_path = run_dir.join("ensemble.json");
        let ensemble: Option<EnsembleOutput> = if ensemble_path.exists() {
            let e: EnsembleOutput = read_json(&ensemble_path)?;
            check_origin(&ensemble_path, &manifest, &e.run_id, &e.template_version)?;
            Some(e)
        } else {
            None
        };
        if outputs.is_empty() && ensemble.is_none() {
            return Err(PipelineError::NothingToEvaluate(run_id.to_string()));
        }
        let corpus = self.load_corpus()?;
        if corpus.digest() != manifest.corpus_digest {
            return Err(CorpusError::InsufficientCorpus(format!(
                "corpus changed since run `{run_id}` was produced"
            ))
            .into());
        }
        let provider = self.embedder()?;

        let mut rows = Vec::new();
        let mut matches = Vec::new();
        for (strategy, output) in PromptStrategy::ALL.iter().filter_map(|s| outputs.get(s).map(|o| (s, o))) {
            let predictions: Vec<PredictedEntity> = output.entities.iter().map(PredictedEntity::from).collect();
            let (row, records) = self.score_row(
                strategy.name().to_string(),
                strategy.display_name().to_string(),
                &predictions,
                &corpus,
                provider.as_ref(),
            )?;
            rows.push(row);
            matches.push((strategy.name().to_string(), records));
        }
        if let Some(e) = &ensemble {
            let predictions: Vec<PredictedEntity> = e.predictions.iter().map(PredictedEntity::from).collect();
            let (row, records) =
                self.score_row("ensemble".into(), "Ensemble".into(), &predictions, &corpus, provider.as_ref())?;
            rows.push(row);
            matches.push(("ensemble".to_string(), records));
        }

        let timing_input: BTreeMap<PromptStrategy, Vec<CompletionRecord>> =
            outputs.iter().map(|(s, o)| (*s, vec![o.completion.clone()])).collect();
        let report = EvaluationReport {
            run_id: manifest.run_id.clone(),
            template_version: manifest.template_version.clone(),
            tau: self.config.ensemble.tau,
            embedding_provider: provider.provider_id().to_string(),
            matching_policy: MATCHING_POLICY.to_string(),
            gold_total: corpus.test.entities.len(),
            rows,
            timing: timing_report(&timing_input),
        };
        write_file(&run_dir.join("report.json"), report.to_json().as_bytes())?;
        write_file(&run_dir.join("report.txt"), report.to_text().as_bytes())?;
        let mut csv = Vec::new();
        write_match_csv(&mut csv, &matches)
            .map_err(|e| PipelineError::Json { path: run_dir.join("matches.csv"), message: e.to_string() })?;
        write_file(&run_dir.join("matches.csv"), &csv)?;
        Ok(report)
    }

    /// Contents of a report artifact written by [`Pipeline::evaluate`].
    pub fn report(&self, run_id: &str, format: ReportFormat) -> Result<String, PipelineError> {
        self.load_manifest(run_id)?;
        let name = match format {
            ReportFormat::Json => "report.json",
            ReportFormat::Text => "report.txt",
            ReportFormat::Csv => "matches.csv",
        };
        let path = self.run_dir(run_id).join(name);
        if !path.exists() {
            return Err(PipelineError::NotEvaluated(run_id.to_string()));
        }
        if format == ReportFormat::Json {
            let report: EvaluationReport = read_json(&path)?;
            if report.run_id != run_id {
                return Err(PipelineError::CrossRunMixing { path, expected: run_id.into(), found: report.run_id });
            }
        }
        fs::read_to_string(&path).map_err(|source| PipelineError::Io { path, source })
    }
}

fn check_origin(path: &Path, manifest: &RunManifest, run_id: &str, template_version: &str) -> Result<(), PipelineError> {
    if run_id != manifest.run_id {
        return Err(PipelineError::CrossRunMixing {
            path: path.to_path_buf(),
            expected: manifest.run_id.clone(),
            found: run_id.to_string(),
        });
    }
    if template_version != manifest.template_version {
        return Err(PipelineError::CrossRunMixing {
            path: path.to_path_buf(),
            expected: format!("{} (template {})", manifest.run_id, manifest.template_version),
            found: format!("{run_id} (template {template_version})"),
        });
    }
    Ok(())
}
