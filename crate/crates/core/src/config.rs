//! Run configuration: TOML file, built-in defaults, validation.
//!
//! Every section and field is optional in the file; missing values take the
//! defaults below. Unknown keys are rejected. Command-line flags are applied
//! on top by the caller, after loading and before [`RunConfig::validate`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decontam::{DEFAULT_N, DEFAULT_THRESHOLD};
use crate::llm::{Endpoint, HashEmbedder, OpenAiEmbedder};
use crate::rag::SamplingConfig;
use crate::retrieval::{DEFAULT_CHUNK_LIMIT, DEFAULT_K};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid value for {key}: {reason}")]
    Invalid { key: String, reason: String },
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub prices: Option<PathBuf>,
    /// Root of the run directory; stage outputs default to fixed places
    /// beneath it. Defaults to [`DEFAULT_RUN_DIR`].
    pub run_dir: Option<PathBuf>,
}

pub const DEFAULT_RUN_DIR: &str = "runs/default";

impl Paths {
    pub fn run_dir(&self) -> PathBuf {
        self.run_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_RUN_DIR))
    }

    /// Makes relative paths relative to `base` instead of the working
    /// directory.
    fn rebase(&mut self, base: &Path) {
        for p in [&mut self.corpus, &mut self.queries, &mut self.prices, &mut self.run_dir]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecontamSection {
    pub n: usize,
    pub threshold: f64,
}

impl Default for DecontamSection {
    fn default() -> Self {
        Self {
            n: DEFAULT_N,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChunkSection {
    pub limit: usize,
    pub overlap: usize,
    /// `word-punct` or `whitespace`.
    pub tokenizer: String,
}

impl Default for ChunkSection {
    fn default() -> Self {
        Self {
            limit: DEFAULT_CHUNK_LIMIT,
            overlap: 0,
            tokenizer: "word-punct".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub k: usize,
    /// `hash` for the offline trigram embedder, or `openai:<model>` for an
    /// OpenAI-compatible `/embeddings` endpoint.
    pub embedder: String,
    /// Dimension of the hash embedder.
    pub dim: usize,
    /// Full-trace units start with the problem statement.
    pub include_problem: bool,
    pub batch_size: usize,
    /// Optional prompt token budget; lowest-ranked hits are dropped to fit.
    pub context_budget: Option<usize>,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            embedder: "hash".into(),
            dim: HashEmbedder::DEFAULT_DIM,
            include_problem: true,
            batch_size: 64,
            context_budget: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelsSection {
    pub transformer: String,
    pub solver: String,
    pub normalizer: Option<String>,
}

impl Default for ModelsSection {
    fn default() -> Self {
        Self {
            transformer: "google/gemini-2.0-flash-lite-001".into(),
            solver: "openai/gpt-5".into(),
            normalizer: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Deterministic offline responses.
    Mock,
    /// OpenAI-compatible HTTP endpoint from `OPENAI_BASE_URL`.
    Openai,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientSection {
    pub backend: Backend,
    /// Spend cap in US cents across all chat calls of one command.
    pub budget_cents: Option<f64>,
    pub max_attempts: u32,
    /// Requests in flight at once, shared by every client of the process.
    pub concurrency: usize,
    /// Whether the endpoint returns several choices per call.
    pub supports_n: bool,
    pub timeout_secs: u64,
    pub transform_temperature: f64,
    pub transform_max_tokens: u32,
}

impl Default for ClientSection {
    fn default() -> Self {
        Self {
            backend: Backend::Mock,
            budget_cents: None,
            max_attempts: 5,
            concurrency: 8,
            supports_n: true,
            timeout_secs: 600,
            transform_temperature: 0.3,
            transform_max_tokens: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecSection {
    /// Worker threads; 0 lets the pool decide.
    pub threads: usize,
    pub parallel: bool,
}

impl Default for ExecSection {
    fn default() -> Self {
        Self {
            threads: 0,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub decontam: DecontamSection,
    pub chunk: ChunkSection,
    pub retrieval: RetrievalSection,
    pub sampling: SamplingConfig,
    pub models: ModelsSection,
    pub client: ClientSection,
    pub exec: ExecSection,
}

/// Resolved snapshot written beside stage outputs.
pub const SNAPSHOT_NAME: &str = "config.resolved.toml";

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Reads a config file. Relative paths in its `[paths]` section are
    /// taken relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut cfg = Self::parse(&text, path)?;
        if let Some(dir) = path.parent() {
            cfg.paths.rebase(dir);
        }
        Ok(cfg)
    }

    /// Loads `path` if given, else the defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, ConfigError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.decontam.n == 0 {
            return Err(invalid("decontam.n", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.decontam.threshold) {
            return Err(invalid("decontam.threshold", "must lie in [0, 1]"));
        }
        if self.chunk.limit == 0 {
            return Err(invalid("chunk.limit", "must be >= 1"));
        }
        if self.chunk.overlap >= self.chunk.limit {
            return Err(invalid("chunk.overlap", "must be smaller than chunk.limit"));
        }
        if crate::tokenize::by_name(&self.chunk.tokenizer).is_none() {
            return Err(invalid("chunk.tokenizer", "expected word-punct or whitespace"));
        }
        if self.retrieval.k == 0 {
            return Err(invalid("retrieval.k", "must be >= 1"));
        }
        if self.retrieval.embedder != "hash" && !self.retrieval.embedder.starts_with("openai:") {
            return Err(invalid("retrieval.embedder", "expected hash or openai:<model>"));
        }
        if self.retrieval.dim == 0 {
            return Err(invalid("retrieval.dim", "must be >= 1"));
        }
        if self.retrieval.batch_size == 0 {
            return Err(invalid("retrieval.batch_size", "must be >= 1"));
        }
        if self.sampling.temperature.is_nan() || self.sampling.temperature < 0.0 {
            return Err(invalid("sampling.temperature", "must be >= 0"));
        }
        if self.sampling.max_tokens == 0 {
            return Err(invalid("sampling.max_tokens", "must be >= 1"));
        }
        if self.sampling.n_samples == 0 {
            return Err(invalid("sampling.n_samples", "must be >= 1"));
        }
        if self.client.max_attempts == 0 {
            return Err(invalid("client.max_attempts", "must be >= 1"));
        }
        if self.client.concurrency == 0 {
            return Err(invalid("client.concurrency", "must be >= 1"));
        }
        if let Some(b) = self.client.budget_cents {
            if b.is_nan() || b < 0.0 {
                return Err(invalid("client.budget_cents", "must be >= 0"));
            }
            if self.paths.prices.is_none() {
                return Err(invalid("client.budget_cents", "a budget needs paths.prices"));
            }
        }
        for (key, v) in [
            ("models.transformer", &self.models.transformer),
            ("models.solver", &self.models.solver),
        ] {
            if v.trim().is_empty() {
                return Err(invalid(key, "must not be empty"));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the resolved configuration into `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf, crate::corpus::CorpusError> {
        let path = dir.join(SNAPSHOT_NAME);
        crate::corpus::write_atomic(&path, self.to_toml().as_bytes())?;
        Ok(path)
    }

    pub fn embedder(&self) -> Box<dyn crate::llm::Embedder> {
        match self.retrieval.embedder.strip_prefix("openai:") {
            Some(model) => Box::new(OpenAiEmbedder::new(self.endpoint(), model)),
            None => Box::new(HashEmbedder::new(self.retrieval.dim)),
        }
    }

    pub fn endpoint(&self) -> Endpoint {
        let mut e = Endpoint::from_env();
        e.timeout = std::time::Duration::from_secs(self.client.timeout_secs);
        e
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!(c.decontam.n, 13);
        assert_eq!(c.chunk.limit, 512);
        assert_eq!(c.retrieval.k, 3);
        assert_eq!(c.sampling.temperature, 0.6);
        assert_eq!(c.sampling.max_tokens, 16384);
        assert_eq!(c.sampling.n_samples, 8);
        c.validate().unwrap();
    }

    #[test]
    fn partial_file_keeps_other_defaults() {
        let c = RunConfig::parse("[sampling]\ntemperature = 0.2\n", Path::new("x.toml")).unwrap();
        assert_eq!(c.sampling.temperature, 0.2);
        assert_eq!(c.sampling.n_samples, 8);
    }

    #[test]
    fn unknown_key_is_named() {
        let e = RunConfig::parse("[sampling]\ntemprature = 0.2\n", Path::new("x.toml")).unwrap_err();
        assert!(e.to_string().contains("temprature"), "{e}");
    }

    #[test]
    fn validation_names_the_key() {
        let mut c = RunConfig::default();
        c.chunk.overlap = 512;
        assert!(c.validate().unwrap_err().to_string().contains("chunk.overlap"));
    }

    #[test]
    fn file_paths_are_relative_to_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[paths]\ncorpus = \"data/t.jsonl\"\nprices = \"/abs/p.toml\"\n").unwrap();
        let c = RunConfig::load(&p).unwrap();
        assert_eq!(c.paths.corpus, Some(dir.path().join("data/t.jsonl")));
        assert_eq!(c.paths.prices, Some(PathBuf::from("/abs/p.toml")));
        assert_eq!(c.paths.run_dir(), PathBuf::from(DEFAULT_RUN_DIR));
    }

    #[test]
    fn snapshot_round_trips() {
        let mut c = RunConfig::default();
        c.models.normalizer = Some("n".into());
        c.retrieval.context_budget = Some(4000);
        assert_eq!(RunConfig::parse(&c.to_toml(), Path::new("s")).unwrap(), c);
    }
}
