//! Pipeline configuration, read from a TOML file. Relative paths resolve
//! against the directory holding the file. Secrets never live here: the
//! file names the environment variables that hold them.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SamplingConfig;
use crate::embedding::{DEFAULT_TAU, LOCAL_DIMENSION};
use crate::gateway::{GatewayMode, GenerationConfig};
use crate::prompt::{PromptStrategy, TokenBudget, DEFAULT_TRIM_FRACTION};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot access {path}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{what} does not exist: {path}")]
    MissingPath { what: &'static str, path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub train_dir: PathBuf,
    pub test_dir: PathBuf,
    /// May be empty when `test_dir` holds exactly one document.
    #[serde(default)]
    pub test_doc_id: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub document_id: Option<String>,
    #[serde(default = "default_sentence_count")]
    pub sentence_count: usize,
    #[serde(default = "default_sentence_documents")]
    pub sentence_documents: usize,
    #[serde(default)]
    pub sentence_doc_ids: Option<Vec<String>>,
    #[serde(default)]
    pub entity_doc_ids: Option<Vec<String>>,
}

fn default_sentence_count() -> usize {
    100
}

fn default_sentence_documents() -> usize {
    5
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSection {
    /// Template file; the built-in template when absent.
    #[serde(default)]
    pub template: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSection {
    #[serde(default)]
    pub max_tokens: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrimSection {
    #[serde(default = "default_trim")]
    pub fraction: f64,
}

fn default_trim() -> f64 {
    DEFAULT_TRIM_FRACTION
}

impl Default for TrimSection {
    fn default() -> Self {
        Self { fraction: DEFAULT_TRIM_FRACTION }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmSection {
    pub endpoint: String,
    pub model_id: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_output_tokens: u32,
    pub api_key_env: String,
    pub mode: GatewayMode,
    pub timeout_seconds: u64,
}

impl Default for LlmSection {
    fn default() -> Self {
        let generation = GenerationConfig::default();
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model_id: generation.model_id,
            temperature: generation.temperature,
            top_p: generation.top_p,
            max_output_tokens: generation.max_output_tokens,
            api_key_env: "MEDNER_LLM_API_KEY".into(),
            mode: GatewayMode::Replay,
            timeout_seconds: 120,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Local,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingSection {
    pub provider: EmbeddingKind,
    pub endpoint: Option<String>,
    /// Identifier stamped on remote vectors and used as cache key.
    pub provider_id: Option<String>,
    pub api_key_env: String,
    pub batch_size: usize,
    pub dimension: usize,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        Self {
            provider: EmbeddingKind::Local,
            endpoint: None,
            provider_id: None,
            api_key_env: "MEDNER_EMBEDDING_API_KEY".into(),
            batch_size: 64,
            dimension: LOCAL_DIMENSION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSection {
    pub tau: f64,
    pub strategies: Vec<PromptStrategy>,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU, strategies: PromptStrategy::FEW_SHOT.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub cache_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self { cache_dir: "cache".into(), out_dir: "runs".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus: CorpusSection,
    #[serde(default)]
    pub prompt: PromptSection,
    #[serde(default)]
    pub budget: BudgetSection,
    #[serde(default)]
    pub trim: TrimSection,
    #[serde(default)]
    pub llm: LlmSection,
    #[serde(default)]
    pub embedding: EmbeddingSection,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    #[serde(default)]
    pub paths: PathsSection,
}

impl PipelineConfig {
    /// Reads, resolves relative paths against the file's directory and
    /// validates.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let config = Self::from_toml_str(&raw, base)
            .map_err(|e| match e {
                ConfigError::Parse { message, .. } => ConfigError::Parse { path: path.to_path_buf(), message },
                other => other,
            })?;
        config.validate()?;
        Ok(config)
    }

    /// Parses without validating; relative paths are joined onto `base`.
    pub fn from_toml_str(raw: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut config: PipelineConfig =
            toml::from_str(raw).map_err(|e| ConfigError::Parse { path: PathBuf::new(), message: e.to_string() })?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut config.corpus.train_dir);
        resolve(&mut config.corpus.test_dir);
        if let Some(t) = config.prompt.template.as_mut() {
            resolve(t);
        }
        resolve(&mut config.paths.cache_dir);
        resolve(&mut config.paths.out_dir);
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.ensemble.tau > 0.0 && self.ensemble.tau <= 1.0) {
            return Err(ConfigError::Invalid(format!("ensemble.tau must lie in (0, 1], got {}", self.ensemble.tau)));
        }
        if !(self.trim.fraction > 0.0 && self.trim.fraction < 1.0) {
            return Err(ConfigError::Invalid(format!("trim.fraction must lie in (0, 1), got {}", self.trim.fraction)));
        }
        if self.embedding.dimension == 0 {
            return Err(ConfigError::Invalid("embedding.dimension must be positive".into()));
        }
        if self.embedding.provider == EmbeddingKind::Remote && self.embedding.endpoint.is_none() {
            return Err(ConfigError::Invalid("embedding.endpoint is required for the remote provider".into()));
        }
        self.generation().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for (what, path) in [("corpus.train_dir", &self.corpus.train_dir), ("corpus.test_dir", &self.corpus.test_dir)] {
            if !path.is_dir() {
                return Err(ConfigError::MissingPath { what, path: path.clone() });
            }
        }
        if let Some(t) = &self.prompt.template {
            if !t.is_file() {
                return Err(ConfigError::MissingPath { what: "prompt.template", path: t.clone() });
            }
        }
        Ok(())
    }

    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            model_id: self.llm.model_id.clone(),
            temperature: self.llm.temperature,
            top_p: self.llm.top_p,
            max_output_tokens: self.llm.max_output_tokens,
        }
    }

    pub fn budget(&self) -> TokenBudget {
        TokenBudget { max_tokens: self.budget.max_tokens, trim_fraction: self.trim.fraction }
    }

    /// Sampling limits, with the resolved test document id.
    pub fn sampling(&self, test_doc_id: &str) -> SamplingConfig {
        SamplingConfig {
            test_doc_id: test_doc_id.to_string(),
            seed: self.corpus.seed,
            document_id: self.corpus.document_id.clone(),
            sentence_count: self.corpus.sentence_count,
            sentence_documents: self.corpus.sentence_documents,
            sentence_doc_ids: self.corpus.sentence_doc_ids.clone(),
            entity_doc_ids: self.corpus.entity_doc_ids.clone(),
        }
    }

    pub fn completion_cache_dir(&self) -> PathBuf {
        self.paths.cache_dir.join("completions")
    }

    pub fn embedding_cache_dir(&self) -> PathBuf {
        self.paths.cache_dir.join("embeddings")
    }
}
