//! Chat-completion and embedding access.
//!
//! A [`ChatBackend`] performs exactly one attempt against some endpoint.
//! [`ChatClient`] wraps a backend with retries, a spend cap, a shared
//! in-flight limit and an append-only JSONL ledger of every attempt.

mod embed;
mod mock;
mod openai;

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::eval::PriceTable;

pub use embed::{embed, hash_embed, l2_normalize, EmbedError, Embedder, HashEmbedder, Role};
pub use mock::{mock_complete, MockChat};
pub use openai::{Endpoint, OpenAiChat, OpenAiEmbedder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    pub user: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub n_samples: u32,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), ClientError> {
        if self.max_tokens < 1 || self.n_samples < 1 || self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(ClientError::new(
                ErrorKind::Config,
                format!(
                    "invalid request: max_tokens={} n_samples={} temperature={}",
                    self.max_tokens, self.n_samples, self.temperature
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    /// Billed input tokens, summed over every call made for the request.
    pub prompt_tokens: u64,
    /// Output tokens summed over all samples.
    pub completion_tokens: u64,
}

impl std::ops::AddAssign for Usage {
    fn add_assign(&mut self, rhs: Self) {
        self.prompt_tokens += rhs.prompt_tokens;
        self.completion_tokens += rhs.completion_tokens;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub samples: Vec<String>,
    pub usage: Usage,
    /// Completion tokens per sample, when the endpoint reports them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_completion_tokens: Option<Vec<u64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Timeout,
    RateLimited,
    Server,
    MalformedResponse,
    BudgetExceeded,
    /// Invalid request or configuration; never retried.
    Config,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error, Serialize, Deserialize)]
#[error("{kind:?}: {detail}")]
pub struct ClientError {
    pub kind: ErrorKind,
    pub retryable: bool,
    pub detail: String,
}

impl ClientError {
    pub fn new(kind: ErrorKind, detail: impl Into<String>) -> Self {
        let retryable = matches!(kind, ErrorKind::Timeout | ErrorKind::RateLimited | ErrorKind::Server);
        Self {
            kind,
            retryable,
            detail: detail.into(),
        }
    }

    /// Server-side failures that should not be retried (e.g. a 501).
    pub fn fatal(kind: ErrorKind, detail: impl Into<String>) -> Self {
        Self {
            kind,
            retryable: false,
            detail: detail.into(),
        }
    }
}

/// One attempt against a chat endpoint.
pub trait ChatBackend: Send + Sync {
    fn name(&self) -> &str;
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
            jitter: true,
        }
    }
}

impl RetryPolicy {
    /// No waiting between attempts; for tests and mocks.
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay_ms: 0,
            max_delay_ms: 0,
            jitter: false,
        }
    }

    /// Delay before retry number `retry` (1-based): exponential, capped, and
    /// scaled into [0.5, 1.0) of the nominal value when jitter is on.
    pub fn delay(&self, retry: u32) -> Duration {
        let exp = self
            .base_delay_ms
            .saturating_mul(1u64 << (retry.saturating_sub(1)).min(20));
        let nominal = exp.min(self.max_delay_ms);
        let ms = if self.jitter && nominal > 0 {
            let f: f64 = rand::thread_rng().gen_range(0.5..1.0);
            (nominal as f64 * f) as u64
        } else {
            nominal
        };
        Duration::from_millis(ms)
    }
}

/// Counting semaphore bounding concurrent requests across all clients that
/// share it.
#[derive(Debug)]
pub struct InFlight {
    cap: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    pub fn new(cap: usize) -> Arc<Self> {
        Arc::new(Self {
            cap: cap.max(1),
            used: Mutex::new(0),
            freed: Condvar::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.cap
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock().unwrap();
        while *used >= self.cap {
            used = self.freed.wait(used).unwrap();
        }
        *used += 1;
        Permit { owner: self }
    }
}

pub struct Permit<'a> {
    owner: &'a InFlight,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.owner.used.lock().unwrap() -= 1;
        self.owner.freed.notify_one();
    }
}

/// One ledger line: a single attempt and its outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub key: String,
    pub attempt: u32,
    pub backend: String,
    pub request: ChatRequest,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Ok {
        samples: Vec<String>,
        usage: Usage,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cost_cents: Option<f64>,
    },
    Error {
        error: ClientError,
    },
}

/// Append-only JSONL log of chat attempts. Writes are serialized and
/// flushed per entry.
pub struct Ledger {
    path: PathBuf,
    out: Mutex<BufWriter<File>>,
}

impl Ledger {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            out: Mutex::new(BufWriter::new(f)),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, entry: &LedgerEntry) -> std::io::Result<()> {
        let line = serde_json::to_string(entry).expect("ledger entries serialize");
        let mut out = self.out.lock().unwrap();
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
        out.flush()
    }

    pub fn read(path: &Path) -> std::io::Result<Vec<LedgerEntry>> {
        let f = File::open(path)?;
        let mut out = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e = serde_json::from_str(&line).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
            out.push(e);
        }
        Ok(out)
    }

    /// Rewrites the ledger sorted by (key, attempt). Concurrent workers
    /// append in nondeterministic order; sorting after a stage makes the
    /// file reproducible.
    pub fn canonicalize(path: &Path) -> std::io::Result<()> {
        let mut lines: Vec<(String, u32, String)> = Self::read(path)?
            .into_iter()
            .map(|e| {
                let line = serde_json::to_string(&e).expect("ledger entries serialize");
                (e.key, e.attempt, line)
            })
            .collect();
        // The full line breaks ties between identical keys.
        lines.sort();
        let mut buf = String::new();
        for (_, _, line) in &lines {
            buf.push_str(line);
            buf.push('\n');
        }
        crate::corpus::write_atomic(path, buf.as_bytes()).map_err(|e| std::io::Error::other(e.to_string()))
    }
}

impl fmt::Debug for Ledger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Ledger").field("path", &self.path).finish()
    }
}

/// Spend cap in US cents, priced with a [`PriceTable`].
#[derive(Debug)]
pub struct Budget {
    pub cap_cents: f64,
    pub prices: PriceTable,
    spent: Mutex<f64>,
}

impl Budget {
    pub fn new(cap_cents: f64, prices: PriceTable) -> Self {
        Self {
            cap_cents,
            prices,
            spent: Mutex::new(0.0),
        }
    }

    pub fn spent_cents(&self) -> f64 {
        *self.spent.lock().unwrap()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ClientStats {
    pub calls: u64,
    pub attempts: u64,
    pub failures: u64,
    pub usage: Usage,
}

/// Retrying, budgeted, throttled chat client. Shareable across threads.
pub struct ChatClient {
    backend: Box<dyn ChatBackend>,
    retry: RetryPolicy,
    inflight: Arc<InFlight>,
    budget: Option<Arc<Budget>>,
    ledger: Option<Arc<Ledger>>,
    stats: Mutex<ClientStats>,
}

impl fmt::Debug for ChatClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChatClient")
            .field("backend", &self.backend.name())
            .field("retry", &self.retry)
            .finish()
    }
}

impl ChatClient {
    pub fn new(backend: Box<dyn ChatBackend>) -> Self {
        Self {
            backend,
            retry: RetryPolicy::default(),
            inflight: InFlight::new(8),
            budget: None,
            ledger: None,
            stats: Mutex::new(ClientStats::default()),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_inflight(mut self, inflight: Arc<InFlight>) -> Self {
        self.inflight = inflight;
        self
    }

    pub fn with_budget(self, budget: Budget) -> Self {
        self.with_shared_budget(Arc::new(budget))
    }

    /// Shares one spend cap between several clients.
    pub fn with_shared_budget(mut self, budget: Arc<Budget>) -> Self {
        self.budget = Some(budget);
        self
    }

    pub fn with_ledger(mut self, ledger: Arc<Ledger>) -> Self {
        self.ledger = Some(ledger);
        self
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    pub fn stats(&self) -> ClientStats {
        *self.stats.lock().unwrap()
    }

    pub fn budget(&self) -> Option<&Budget> {
        self.budget.as_deref()
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        let key = format!(
            "{:016x}",
            crate::hash::fnv1a64_fields(&[request.model.as_bytes(), request.user.as_bytes()])
        );
        self.complete_keyed(&key, request)
    }

    /// Like [`complete`](Self::complete) but records `key` in the ledger so
    /// entries can be traced back to the record or query that caused them.
    pub fn complete_keyed(&self, key: &str, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        request.validate()?;
        self.stats.lock().unwrap().calls += 1;
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.check_budget(&request.model)?;
            let result = {
                let _permit = self.inflight.acquire();
                self.backend.send(request)
            };
            let result = result.and_then(|resp| check_sample_count(request, resp));
            let cost = match &result {
                Ok(resp) => self.charge(&request.model, resp.usage),
                Err(_) => None,
            };
            {
                let mut st = self.stats.lock().unwrap();
                st.attempts += 1;
                if let Ok(resp) = &result {
                    st.usage += resp.usage;
                }
            }
            self.log(key, attempt, request, &result, cost);
            match result {
                Ok(resp) => return Ok(resp),
                Err(err) if err.retryable && attempt < self.retry.max_attempts => {
                    log::debug!("attempt {attempt} for {key} failed ({err}); retrying");
                    let d = self.retry.delay(attempt);
                    if !d.is_zero() {
                        std::thread::sleep(d);
                    }
                }
                Err(err) => {
                    self.stats.lock().unwrap().failures += 1;
                    return Err(err);
                }
            }
        }
    }

    fn check_budget(&self, model: &str) -> Result<(), ClientError> {
        let Some(b) = &self.budget else { return Ok(()) };
        if b.prices.get(model).is_none() {
            return Err(ClientError::new(
                ErrorKind::Config,
                format!("model {model:?} has no price entry; the budget cannot be enforced"),
            ));
        }
        let spent = b.spent_cents();
        if spent >= b.cap_cents {
            return Err(ClientError::new(
                ErrorKind::BudgetExceeded,
                format!("spent {spent:.4} of {:.4} cents", b.cap_cents),
            ));
        }
        Ok(())
    }

    fn charge(&self, model: &str, usage: Usage) -> Option<f64> {
        let b = self.budget.as_ref()?;
        let price = b.prices.get(model)?;
        let cents = price.cost_cents(usage);
        *b.spent.lock().unwrap() += cents;
        Some(cents)
    }

    fn log(
        &self,
        key: &str,
        attempt: u32,
        request: &ChatRequest,
        result: &Result<ChatResponse, ClientError>,
        cost_cents: Option<f64>,
    ) {
        let Some(ledger) = &self.ledger else { return };
        let outcome = match result {
            Ok(r) => Outcome::Ok {
                samples: r.samples.clone(),
                usage: r.usage,
                cost_cents,
            },
            Err(e) => Outcome::Error { error: e.clone() },
        };
        let entry = LedgerEntry {
            key: key.to_string(),
            attempt,
            backend: self.backend.name().to_string(),
            request: request.clone(),
            outcome,
        };
        if let Err(e) = ledger.append(&entry) {
            log::warn!("could not append to ledger {}: {e}", ledger.path().display());
        }
    }
}

fn check_sample_count(request: &ChatRequest, resp: ChatResponse) -> Result<ChatResponse, ClientError> {
    if resp.samples.len() != request.n_samples as usize {
        return Err(ClientError::new(
            ErrorKind::MalformedResponse,
            format!(
                "requested {} samples, endpoint returned {}",
                request.n_samples,
                resp.samples.len()
            ),
        ));
    }
    Ok(resp)
}
