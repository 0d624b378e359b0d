//! Retrieval-augmented solving: prompt assembly and benchmark runs.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::corpus::{open_append, write_atomic, write_records, CorpusError, EvalQuery, Record, UnitMode};
use crate::eval::BASELINE_MODE;
use crate::exec::Exec;
use crate::llm::{ChatClient, ChatRequest, ClientError, Embedder, ErrorKind, Usage};
use crate::retrieval::{Hit, Index, IndexError};
use crate::tokenize::Tokenizer;

pub const INSTRUCTION: &str =
    "Instruction. Solve the main problem by using useful hints and strategies from the retrieved examples.";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub max_tokens: u32,
    pub n_samples: u32,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            temperature: 0.6,
            max_tokens: 16384,
            n_samples: 8,
        }
    }
}

/// The solver prompt. Without examples it is the bare question.
pub fn assemble_prompt(question: &str, examples: &[&str]) -> String {
    if examples.is_empty() {
        return question.to_string();
    }
    let mut s = String::from(INSTRUCTION);
    for (i, ex) in examples.iter().enumerate() {
        s.push_str(&format!("\n\nExample {}: {ex}", i + 1));
    }
    s.push_str(&format!("\n\nMain problem: {question}"));
    s
}

/// Drops the lowest-ranked hits until the prompt fits `budget` tokens. The
/// bare question is always kept even when it alone exceeds the budget.
pub fn fit_context<'a>(question: &str, hits: &'a [Hit], budget: usize, tokenizer: &dyn Tokenizer) -> &'a [Hit] {
    let mut n = hits.len();
    while n > 0 {
        let texts: Vec<&str> = hits[..n].iter().map(|h| h.text.as_str()).collect();
        if tokenizer.count(&assemble_prompt(question, &texts)) <= budget {
            break;
        }
        n -= 1;
    }
    &hits[..n]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedRef {
    pub unit_id: String,
    pub score: f64,
}

/// Everything needed to grade one query without re-running retrieval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub query_id: String,
    pub benchmark: String,
    pub gold_answer: String,
    pub model: String,
    /// `None` for the no-retrieval baseline.
    pub corpus_mode: Option<UnitMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedder_id: Option<String>,
    pub k: usize,
    pub retrieved: Vec<RetrievedRef>,
    pub prompt: String,
    pub samples: Vec<String>,
    pub usage: Usage,
    pub sampling: SamplingConfig,
}

impl RunRecord {
    pub fn mode_tag(&self) -> String {
        self.corpus_mode
            .map_or(BASELINE_MODE.to_string(), |m| m.tag().to_string())
    }
}

impl Record for RunRecord {
    fn key(&self) -> &str {
        &self.query_id
    }

    fn validate(&self) -> Result<(), String> {
        if self.samples.len() != self.sampling.n_samples as usize {
            return Err(format!(
                "{} samples but n_samples = {}",
                self.samples.len(),
                self.sampling.n_samples
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub query_id: String,
    pub error: ClientError,
}

pub struct Retrieval<'a> {
    pub index: &'a Index,
    pub embedder: &'a dyn Embedder,
    pub k: usize,
    /// Prompt token budget; hits are dropped from the bottom to fit.
    pub context_budget: Option<(usize, &'a dyn Tokenizer)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    /// Sorted by query id.
    pub records: Vec<RunRecord>,
    pub failures: Vec<RunFailure>,
    pub resumed: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("budget exhausted after {completed} queries; rerun to resume: {source}")]
    BudgetExceeded { completed: usize, source: ClientError },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Checkpoint of finished records kept beside the output.
pub fn part_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".part");
    PathBuf::from(s)
}

pub fn failures_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".failures.jsonl");
    PathBuf::from(s)
}

fn read_part(path: &Path) -> Result<Vec<RunRecord>, RunError> {
    let err = |e: std::io::Error| RunError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(err(e)),
    };
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(err)?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(r) => out.push(r),
            Err(e) => log::warn!("{}: dropping unreadable checkpoint line ({e})", path.display()),
        }
    }
    Ok(out)
}

/// Answers every query, persisting each record to `<out>.part` as soon as
/// it is complete. Queries already there are skipped, so an interrupted run
/// resumes where it stopped. Client failures are reported per query; an
/// exhausted budget stops the run. On success `out` holds the records
/// sorted by query id and `<out>.failures.jsonl` any failures.
pub fn run_benchmark(
    queries: &[EvalQuery],
    retrieval: Option<&Retrieval<'_>>,
    client: &ChatClient,
    model: &str,
    sampling: SamplingConfig,
    out: &Path,
    exec: Exec,
) -> Result<RunOutput, RunError> {
    if let Some(r) = retrieval {
        r.index.check_embedder(r.embedder)?;
        if r.k == 0 {
            return Err(IndexError::ZeroK.into());
        }
    }
    let part = part_path(out);
    let query_ids: HashSet<&str> = queries.iter().map(|q| q.id.as_str()).collect();
    let mut done: BTreeMap<String, RunRecord> = BTreeMap::new();
    for r in read_part(&part)? {
        if query_ids.contains(r.query_id.as_str()) && r.model == model {
            done.insert(r.query_id.clone(), r);
        }
    }
    let todo: Vec<&EvalQuery> = queries.iter().filter(|q| !done.contains_key(&q.id)).collect();
    let resumed = queries.len() - todo.len();
    if resumed > 0 {
        log::info!("resuming run: {resumed} queries done, {} to go", todo.len());
    }
    let sink = Mutex::new(open_append(&part).map_err(|e| RunError::Io {
        path: part.clone(),
        message: e.to_string(),
    })?);
    let stop = AtomicBool::new(false);
    let budget_error: Mutex<Option<ClientError>> = Mutex::new(None);

    let results: Vec<Option<Result<RunRecord, RunFailure>>> = exec.map(&todo, |q| {
        if stop.load(Ordering::SeqCst) {
            return None;
        }
        let hits: Vec<Hit> = match retrieval {
            Some(r) => match r.index.search(&q.id, &q.question, r.k, r.embedder) {
                Ok(ctx) => match r.context_budget {
                    Some((budget, tok)) => fit_context(&q.question, &ctx.hits, budget, tok).to_vec(),
                    None => ctx.hits,
                },
                Err(e) => {
                    return Some(Err(RunFailure {
                        query_id: q.id.clone(),
                        error: ClientError::new(ErrorKind::Config, e.to_string()),
                    }))
                }
            },
            None => Vec::new(),
        };
        let texts: Vec<&str> = hits.iter().map(|h| h.text.as_str()).collect();
        let prompt = assemble_prompt(&q.question, &texts);
        let req = ChatRequest {
            model: model.to_string(),
            system: None,
            user: prompt.clone(),
            temperature: sampling.temperature,
            max_tokens: sampling.max_tokens,
            n_samples: sampling.n_samples,
        };
        let key = format!(
            "run:{model}:{}:{}",
            retrieval.map_or(BASELINE_MODE, |r| r.index.mode().tag()),
            q.id
        );
        match client.complete_keyed(&key, &req) {
            Ok(resp) => {
                let rec = RunRecord {
                    query_id: q.id.clone(),
                    benchmark: q.benchmark.clone(),
                    gold_answer: q.gold_answer.clone(),
                    model: model.to_string(),
                    corpus_mode: retrieval.map(|r| r.index.mode()),
                    embedder_id: retrieval.map(|r| r.index.embedder_id().to_string()),
                    k: retrieval.map_or(0, |r| r.k),
                    retrieved: hits
                        .iter()
                        .map(|h| RetrievedRef {
                            unit_id: h.unit_id.clone(),
                            score: h.score,
                        })
                        .collect(),
                    prompt,
                    samples: resp.samples,
                    usage: resp.usage,
                    sampling,
                };
                let mut line = serde_json::to_string(&rec).expect("records serialize");
                line.push('\n');
                let mut f = sink.lock().unwrap();
                if let Err(e) = f.write_all(line.as_bytes()).and_then(|_| f.flush()) {
                    log::warn!("could not checkpoint {}: {e}", q.id);
                }
                Some(Ok(rec))
            }
            Err(e) if e.kind == ErrorKind::BudgetExceeded => {
                stop.store(true, Ordering::SeqCst);
                budget_error.lock().unwrap().get_or_insert(e);
                None
            }
            Err(error) => Some(Err(RunFailure {
                query_id: q.id.clone(),
                error,
            })),
        }
    });
    drop(sink);

    let mut failures = Vec::new();
    for r in results.into_iter().flatten() {
        match r {
            Ok(rec) => {
                done.insert(rec.query_id.clone(), rec);
            }
            Err(f) => failures.push(f),
        }
    }
    failures.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    let records: Vec<RunRecord> = done.into_values().collect();

    // Rewrite the checkpoint in canonical order so reruns are byte-stable.
    write_atomic(&part, crate::corpus::to_jsonl(&records).as_bytes())?;
    if let Some(source) = budget_error.into_inner().unwrap() {
        return Err(RunError::BudgetExceeded {
            completed: records.len(),
            source,
        });
    }
    write_records(out, &records)?;
    let fpath = failures_path(out);
    if failures.is_empty() {
        let _ = std::fs::remove_file(&fpath);
    } else {
        write_atomic(&fpath, crate::corpus::to_jsonl(&failures).as_bytes())?;
    }
    Ok(RunOutput {
        records,
        failures,
        resumed,
    })
}
