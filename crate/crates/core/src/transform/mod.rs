//! Offline rewriting of reasoning traces into compact retrieval units.
//!
//! Each [`TransformKind`] owns one prompt template. The chat model's output
//! is parsed into named sections, validated, and rendered back into unit
//! text. Structural outputs with several `Approach:` blocks are split into
//! one unit per block.

mod parse;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::corpus::{open_append, CorpusUnit, Domain, TraceRecord, UnitMode};
use crate::exec::Exec;
use crate::llm::{ChatClient, ChatRequest, ClientError, ErrorKind};

pub use parse::{parse_transform_output, ApproachBlock, NamedSection, ParseError, ParsedOutput, MAX_STEPS};

const STRUCTURAL_TEMPLATE: &str = include_str!("../../templates/structural.txt");
const SEMANTIC_TEMPLATE: &str = include_str!("../../templates/semantic.txt");
const REFLECT_TEMPLATE: &str = include_str!("../../templates/reflect.txt");

const PLACEHOLDER: &str = "{trace}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    StructuralNorm,
    SemanticDistill,
    Reflection,
}

impl TransformKind {
    pub const ALL: [TransformKind; 3] = [
        TransformKind::StructuralNorm,
        TransformKind::SemanticDistill,
        TransformKind::Reflection,
    ];

    /// Short CLI name.
    pub fn tag(self) -> &'static str {
        match self {
            TransformKind::StructuralNorm => "structural",
            TransformKind::SemanticDistill => "semantic",
            TransformKind::Reflection => "reflect",
        }
    }

    pub fn template(self) -> &'static str {
        match self {
            TransformKind::StructuralNorm => STRUCTURAL_TEMPLATE,
            TransformKind::SemanticDistill => SEMANTIC_TEMPLATE,
            TransformKind::Reflection => REFLECT_TEMPLATE,
        }
    }

    pub fn unit_mode(self) -> UnitMode {
        match self {
            TransformKind::StructuralNorm => UnitMode::TransformedStructural,
            TransformKind::SemanticDistill => UnitMode::TransformedSemantic,
            TransformKind::Reflection => UnitMode::TransformedReflect,
        }
    }
}

impl FromStr for TransformKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "structural" | "structural_norm" => Ok(TransformKind::StructuralNorm),
            "semantic" | "semantic_distill" => Ok(TransformKind::SemanticDistill),
            "reflect" | "reflection" => Ok(TransformKind::Reflection),
            _ => Err(format!(
                "unknown transform kind {s:?} (expected structural|semantic|reflect)"
            )),
        }
    }
}

impl std::fmt::Display for TransformKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// The kind's template with the trace substituted for its placeholder.
pub fn render_prompt(kind: TransformKind, trace: &str) -> String {
    kind.template().replacen(PLACEHOLDER, trace, 1)
}

/// Recovers (kind, trace) from a rendered transformation prompt.
pub fn detect_transform_prompt(prompt: &str) -> Option<(TransformKind, &str)> {
    TransformKind::ALL.into_iter().find_map(|kind| {
        let (pre, post) = kind.template().split_once(PLACEHOLDER)?;
        let rest = prompt.strip_prefix(pre)?;
        let trace = rest.strip_suffix(post)?;
        Some((kind, trace))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformedUnit {
    pub source_id: String,
    pub kind: TransformKind,
    pub seq: u32,
    #[serde(default)]
    pub domain: Domain,
    pub sections: Vec<NamedSection>,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxed_answer: Option<String>,
}

impl TransformedUnit {
    pub fn to_corpus_unit(&self) -> CorpusUnit {
        let mode = self.kind.unit_mode();
        CorpusUnit {
            unit_id: CorpusUnit::make_id(&self.source_id, mode, self.seq),
            source_id: self.source_id.clone(),
            mode,
            seq: self.seq,
            domain: self.domain,
            text: self.text.clone(),
        }
    }
}

fn render_sections(sections: &[NamedSection]) -> String {
    let mut s = String::new();
    for sec in sections {
        if !s.is_empty() {
            s.push('\n');
        }
        s.push_str(&sec.name);
        s.push_str(": ");
        s.push_str(&sec.body);
    }
    s
}

/// Turns a parse into units. Semantic and reflection parses give one unit;
/// structural parses give one unit per approach block, each repeating the
/// problem and answer so it stands alone.
pub fn units_from_parse(parsed: &ParsedOutput, source_id: &str, domain: Domain) -> Vec<TransformedUnit> {
    let head: Vec<NamedSection> = parsed
        .problem
        .iter()
        .map(|p| NamedSection {
            name: "Problem".into(),
            body: p.clone(),
        })
        .collect();
    let tail: Vec<NamedSection> = parsed
        .answer
        .iter()
        .map(|a| NamedSection {
            name: "Answer".into(),
            body: a.clone(),
        })
        .collect();
    let bodies: Vec<Vec<NamedSection>> = match parsed.kind {
        TransformKind::StructuralNorm => parsed
            .blocks
            .iter()
            .map(|b| {
                let mut v: Vec<NamedSection> = b
                    .approach
                    .iter()
                    .map(|a| NamedSection {
                        name: "Approach".into(),
                        body: a.clone(),
                    })
                    .collect();
                v.extend(b.steps.iter().map(|(n, body)| NamedSection {
                    name: format!("Step {n}"),
                    body: body.clone(),
                }));
                v
            })
            .collect(),
        _ => vec![parsed.sections.clone()],
    };
    bodies
        .into_iter()
        .enumerate()
        .map(|(seq, body)| {
            let sections: Vec<NamedSection> = head.iter().cloned().chain(body).chain(tail.iter().cloned()).collect();
            TransformedUnit {
                source_id: source_id.to_string(),
                kind: parsed.kind,
                seq: seq as u32,
                domain,
                text: render_sections(&sections),
                sections,
                boxed_answer: parsed.boxed_answer.clone(),
            }
        })
        .collect()
}

/// Splits a structural parse at its `Approach:` blocks.
pub fn split_structural(parsed: &ParsedOutput, source_id: &str, domain: Domain) -> Vec<TransformedUnit> {
    debug_assert_eq!(parsed.kind, TransformKind::StructuralNorm);
    units_from_parse(parsed, source_id, domain)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformOptions {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for TransformOptions {
    fn default() -> Self {
        Self {
            model: "google/gemini-2.0-flash-lite-001".into(),
            temperature: 0.3,
            max_tokens: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformFailure {
    pub record_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformOutput {
    /// Sorted by (source_id, seq).
    pub units: Vec<TransformedUnit>,
    /// Sorted by record id.
    pub failures: Vec<TransformFailure>,
    /// Records skipped because an earlier run had already finished them.
    pub resumed: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum TransformError {
    #[error("budget exhausted after {completed} records; rerun with the same checkpoint to resume: {source}")]
    BudgetExceeded { completed: usize, source: ClientError },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointLine {
    record_id: String,
    kind: TransformKind,
    outcome: CheckpointOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reason: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum CheckpointOutcome {
    Ok,
    Failed,
}

/// Path of the unit parts file kept next to a checkpoint.
pub fn parts_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".units.jsonl");
    PathBuf::from(s)
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, TransformError> {
    let err = |message: String| TransformError::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(err(e.to_string())),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(v) => out.push(v),
            // A torn final line from a crash mid-write is dropped.
            Err(e) => log::warn!("{}:{}: skipping unreadable line ({e})", path.display(), i + 1),
        }
    }
    Ok(out)
}

/// Rewrites the checkpoint and parts file in sorted order, dropping
/// duplicate and orphaned lines, so the files do not depend on completion
/// order.
fn compact(checkpoint: &Path) -> Result<(), TransformError> {
    let write = |path: &Path, text: String| {
        crate::corpus::write_atomic(path, text.as_bytes()).map_err(|e| TransformError::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    };
    let mut lines: BTreeMap<(String, String), CheckpointLine> = BTreeMap::new();
    for l in read_jsonl::<CheckpointLine>(checkpoint)? {
        lines.insert((l.kind.tag().to_string(), l.record_id.clone()), l);
    }
    let parts = parts_path(checkpoint);
    let mut units: BTreeMap<(String, String, u32), TransformedUnit> = BTreeMap::new();
    for u in read_jsonl::<TransformedUnit>(&parts)? {
        let key = (u.kind.tag().to_string(), u.source_id.clone());
        if lines.get(&key).is_some_and(|l| l.outcome == CheckpointOutcome::Ok) {
            units.insert((key.0, key.1, u.seq), u);
        }
    }
    let lines: Vec<CheckpointLine> = lines.into_values().collect();
    let units: Vec<TransformedUnit> = units.into_values().collect();
    write(checkpoint, crate::corpus::to_jsonl(&lines))?;
    write(&parts, crate::corpus::to_jsonl(&units))
}

struct Appender {
    checkpoint: File,
    parts: File,
}

fn append_line<T: Serialize>(f: &mut File, v: &T) -> std::io::Result<()> {
    let mut line = serde_json::to_string(v).expect("checkpoint lines serialize");
    line.push('\n');
    f.write_all(line.as_bytes())?;
    f.flush()
}

enum RecordResult {
    Units(Vec<TransformedUnit>),
    ParseFailed(String),
    ClientFailed(ClientError),
}

fn transform_one(client: &ChatClient, kind: TransformKind, rec: &TraceRecord, opts: &TransformOptions) -> RecordResult {
    let request = ChatRequest {
        model: opts.model.clone(),
        system: None,
        user: render_prompt(kind, &rec.trace),
        temperature: opts.temperature,
        max_tokens: opts.max_tokens,
        n_samples: 1,
    };
    let key = format!("{}:{}", kind.tag(), rec.id);
    let mut last_err = String::new();
    for _ in 0..2 {
        let resp = match client.complete_keyed(&key, &request) {
            Ok(r) => r,
            Err(e) => return RecordResult::ClientFailed(e),
        };
        match parse_transform_output(kind, &resp.samples[0]) {
            Ok(parsed) => {
                for w in &parsed.warnings {
                    log::warn!("{}: {w}", rec.id);
                }
                return RecordResult::Units(units_from_parse(&parsed, &rec.id, rec.domain));
            }
            Err(e) => last_err = e.to_string(),
        }
    }
    RecordResult::ParseFailed(last_err)
}

/// Transforms every record of `corpus` with `kind`, resuming from
/// `checkpoint`.
///
/// Each record's result is appended to the checkpoint (and its units to the
/// parts file beside it) as soon as it is known, so an interrupted run loses
/// at most the records in flight. Records already in the checkpoint are not
/// sent again. A parse failure is retried once with the same prompt and then
/// recorded. Client errors other than an exhausted budget are reported but
/// not checkpointed, so a later run retries them. An exhausted budget stops
/// the run.
pub fn transform_corpus(
    client: &ChatClient,
    kind: TransformKind,
    corpus: &[TraceRecord],
    checkpoint: &Path,
    opts: &TransformOptions,
    exec: Exec,
) -> Result<TransformOutput, TransformError> {
    let io_err = |e: std::io::Error| TransformError::Checkpoint {
        path: checkpoint.to_path_buf(),
        message: e.to_string(),
    };
    let parts = parts_path(checkpoint);
    let done: HashMap<String, CheckpointLine> = read_jsonl::<CheckpointLine>(checkpoint)?
        .into_iter()
        .filter(|l| l.kind == kind)
        .map(|l| (l.record_id.clone(), l))
        .collect();
    let ok_ids: HashSet<&str> = done
        .values()
        .filter(|l| l.outcome == CheckpointOutcome::Ok)
        .map(|l| l.record_id.as_str())
        .collect();
    // Units whose record never reached the checkpoint are orphans of a crash
    // and get regenerated.
    let mut prior: BTreeMap<(String, u32), TransformedUnit> = BTreeMap::new();
    for u in read_jsonl::<TransformedUnit>(&parts)? {
        if u.kind == kind && ok_ids.contains(u.source_id.as_str()) {
            prior.insert((u.source_id.clone(), u.seq), u);
        }
    }

    let todo: Vec<&TraceRecord> = corpus.iter().filter(|r| !done.contains_key(&r.id)).collect();
    let resumed = corpus.len() - todo.len();
    if resumed > 0 {
        log::info!("resuming {kind}: {resumed} records already done, {} to go", todo.len());
    }

    let appender = Mutex::new(Appender {
        checkpoint: open_append(checkpoint).map_err(io_err)?,
        parts: open_append(&parts).map_err(io_err)?,
    });
    let stop = AtomicBool::new(false);
    let budget_error: Mutex<Option<ClientError>> = Mutex::new(None);

    let results: Vec<Option<Result<Vec<TransformedUnit>, String>>> = exec.map(&todo, |rec| {
        if stop.load(Ordering::SeqCst) {
            return None;
        }
        match transform_one(client, kind, rec, opts) {
            RecordResult::Units(units) => {
                let mut a = appender.lock().unwrap();
                let written = units
                    .iter()
                    .try_for_each(|u| append_line(&mut a.parts, u))
                    .and_then(|_| {
                        append_line(
                            &mut a.checkpoint,
                            &CheckpointLine {
                                record_id: rec.id.clone(),
                                kind,
                                outcome: CheckpointOutcome::Ok,
                                reason: None,
                            },
                        )
                    });
                if let Err(e) = written {
                    log::warn!("could not checkpoint {}: {e}", rec.id);
                }
                Some(Ok(units))
            }
            RecordResult::ParseFailed(reason) => {
                let mut a = appender.lock().unwrap();
                let line = CheckpointLine {
                    record_id: rec.id.clone(),
                    kind,
                    outcome: CheckpointOutcome::Failed,
                    reason: Some(reason.clone()),
                };
                if let Err(e) = append_line(&mut a.checkpoint, &line) {
                    log::warn!("could not checkpoint {}: {e}", rec.id);
                }
                Some(Err(reason))
            }
            RecordResult::ClientFailed(err) => {
                if err.kind == ErrorKind::BudgetExceeded {
                    stop.store(true, Ordering::SeqCst);
                    budget_error.lock().unwrap().get_or_insert(err);
                    return None;
                }
                Some(Err(err.to_string()))
            }
        }
    });
    drop(appender);
    compact(checkpoint)?;

    if let Some(source) = budget_error.into_inner().unwrap() {
        let completed = resumed + results.iter().filter(|r| r.is_some()).count();
        return Err(TransformError::BudgetExceeded { completed, source });
    }

    let mut failures: Vec<TransformFailure> = done
        .values()
        .filter(|l| l.outcome == CheckpointOutcome::Failed)
        .map(|l| TransformFailure {
            record_id: l.record_id.clone(),
            reason: l.reason.clone().unwrap_or_default(),
        })
        .collect();
    for (rec, r) in todo.iter().zip(results) {
        match r {
            Some(Ok(units)) => {
                for u in units {
                    prior.insert((u.source_id.clone(), u.seq), u);
                }
            }
            Some(Err(reason)) => failures.push(TransformFailure {
                record_id: rec.id.clone(),
                reason,
            }),
            None => {}
        }
    }
    failures.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    Ok(TransformOutput {
        units: prior.into_values().collect(),
        failures,
        resumed,
    })
}
