//! Record types and JSONL persistence for traces, evaluation queries and
//! retrieval units, plus corpus length statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::tokenize::Tokenizer;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: file not found")]
    NotFound { path: PathBuf },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: duplicate id {id:?} (first seen on line {first_line})")]
    Duplicate {
        path: PathBuf,
        id: String,
        line: usize,
        first_line: usize,
    },
    #[error("{path}: {} malformed line(s): {}", .errors.len(), summarize(.errors))]
    Schema { path: PathBuf, errors: Vec<LineError> },
    #[error("record {id:?} violates an invariant: {reason}")]
    Invalid { id: String, reason: String },
    #[error("statistics need at least one unit")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

fn summarize(errors: &[LineError]) -> String {
    let shown: Vec<String> = errors
        .iter()
        .take(5)
        .map(|e| format!("line {}: {}", e.line, e.message))
        .collect();
    let mut s = shown.join("; ");
    if errors.len() > 5 {
        s.push_str(&format!("; ... {} more", errors.len() - 5));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Math,
    Code,
    Science,
    Puzzle,
    #[default]
    Other,
}

impl Domain {
    pub const ALL: [Domain; 5] = [
        Domain::Math,
        Domain::Code,
        Domain::Science,
        Domain::Puzzle,
        Domain::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Math => "math",
            Domain::Code => "code",
            Domain::Science => "science",
            Domain::Puzzle => "puzzle",
            Domain::Other => "other",
        }
    }
}

/// One auxiliary problem with the raw reasoning trace a thinker produced for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub id: String,
    pub problem: String,
    pub trace: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_output: Option<String>,
    pub domain: Domain,
    pub source_model: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl TraceRecord {
    /// Text compared against evaluation queries: problem followed by trace.
    pub fn comparison_text(&self) -> String {
        format!("{}\n\n{}", self.problem, self.trace)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalQuery {
    pub id: String,
    pub question: String,
    pub gold_answer: String,
    pub benchmark: String,
    pub samples_required: u32,
}

/// Which representation a retrieval unit carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitMode {
    Full,
    Chunk,
    TransformedStructural,
    TransformedSemantic,
    TransformedReflect,
    FinalOutput,
}

impl UnitMode {
    pub const ALL: [UnitMode; 6] = [
        UnitMode::Full,
        UnitMode::Chunk,
        UnitMode::TransformedStructural,
        UnitMode::TransformedSemantic,
        UnitMode::TransformedReflect,
        UnitMode::FinalOutput,
    ];

    /// Short command-line tag.
    pub fn tag(self) -> &'static str {
        match self {
            UnitMode::Full => "full",
            UnitMode::Chunk => "chunked",
            UnitMode::TransformedStructural => "structural",
            UnitMode::TransformedSemantic => "semantic",
            UnitMode::TransformedReflect => "reflect",
            UnitMode::FinalOutput => "output",
        }
    }

    pub fn serde_name(self) -> &'static str {
        match self {
            UnitMode::Full => "full",
            UnitMode::Chunk => "chunk",
            UnitMode::TransformedStructural => "transformed_structural",
            UnitMode::TransformedSemantic => "transformed_semantic",
            UnitMode::TransformedReflect => "transformed_reflect",
            UnitMode::FinalOutput => "final_output",
        }
    }

    pub fn is_transformed(self) -> bool {
        matches!(
            self,
            UnitMode::TransformedStructural | UnitMode::TransformedSemantic | UnitMode::TransformedReflect
        )
    }
}

impl fmt::Display for UnitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for UnitMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        UnitMode::ALL
            .into_iter()
            .find(|m| m.tag() == s || m.serde_name() == s)
            .ok_or_else(|| {
                format!("unknown unit mode {s:?} (expected full|chunked|structural|semantic|reflect|output)")
            })
    }
}

/// One indexed retrieval document with provenance back to its trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusUnit {
    pub unit_id: String,
    pub source_id: String,
    pub mode: UnitMode,
    pub seq: u32,
    #[serde(default)]
    pub domain: Domain,
    pub text: String,
}

impl CorpusUnit {
    pub fn make_id(source_id: &str, mode: UnitMode, seq: u32) -> String {
        format!("{source_id}#{}#{seq}", mode.tag())
    }
}

/// Anything stored one-per-line in a JSONL file with a unique key.
pub trait Record: Serialize + DeserializeOwned {
    fn key(&self) -> &str;

    fn validate(&self) -> Result<(), String> {
        Ok(())
    }
}

impl Record for TraceRecord {
    fn key(&self) -> &str {
        &self.id
    }

    fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("id is empty".into());
        }
        if self.trace.trim().is_empty() {
            return Err("trace is empty".into());
        }
        Ok(())
    }
}

impl Record for EvalQuery {
    fn key(&self) -> &str {
        &self.id
    }

    fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("id is empty".into());
        }
        if self.samples_required < 1 {
            return Err("samples_required must be >= 1".into());
        }
        if self.gold_answer.trim().is_empty() {
            return Err("gold_answer is empty".into());
        }
        Ok(())
    }
}

impl Record for CorpusUnit {
    fn key(&self) -> &str {
        &self.unit_id
    }

    fn validate(&self) -> Result<(), String> {
        if self.unit_id.is_empty() {
            return Err("unit_id is empty".into());
        }
        if self.text.is_empty() {
            return Err("text is empty".into());
        }
        Ok(())
    }
}

/// Reads a JSONL file of records in file order.
///
/// Blank lines are skipped. Every malformed line is collected and reported
/// together; a duplicate key fails immediately naming both lines.
pub fn load_records<T: Record>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut errors = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                errors.push(LineError {
                    line: lineno,
                    message: e.to_string(),
                });
                continue;
            }
        };
        if let Err(msg) = rec.validate() {
            errors.push(LineError {
                line: lineno,
                message: msg,
            });
            continue;
        }
        if let Some(&first_line) = seen.get(rec.key()) {
            return Err(CorpusError::Duplicate {
                path: path.to_path_buf(),
                id: rec.key().to_string(),
                line: lineno,
                first_line,
            });
        }
        seen.insert(rec.key().to_string(), lineno);
        out.push(rec);
    }
    if !errors.is_empty() {
        return Err(CorpusError::Schema {
            path: path.to_path_buf(),
            errors,
        });
    }
    Ok(out)
}

/// Serializes records one per line with struct field order.
pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r).expect("records serialize to JSON"));
        buf.push('\n');
    }
    buf
}

/// Validates and writes records, replacing `path` atomically.
pub fn write_records<T: Record>(path: &Path, records: &[T]) -> Result<usize, CorpusError> {
    let mut seen = BTreeSet::new();
    for r in records {
        r.validate().map_err(|reason| CorpusError::Invalid {
            id: r.key().to_string(),
            reason,
        })?;
        if !seen.insert(r.key()) {
            return Err(CorpusError::Invalid {
                id: r.key().to_string(),
                reason: "duplicate id".into(),
            });
        }
    }
    write_atomic(path, to_jsonl(records).as_bytes())?;
    Ok(records.len())
}

/// Writes `bytes` to a sibling temp file then renames it over `path`.
/// Opens `path` for appending, creating parent directories. A torn last
/// line from an interrupted writer is terminated first so the next line
/// starts clean.
pub fn open_append(path: &Path) -> std::io::Result<std::fs::File> {
    use std::io::{Read, Seek, SeekFrom, Write};
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .read(true)
        .append(true)
        .open(path)?;
    if f.metadata()?.len() > 0 {
        let mut last = [0u8];
        f.seek(SeekFrom::End(-1))?;
        f.read_exact(&mut last)?;
        if last[0] != b'\n' {
            f.write_all(b"\n")?;
        }
    }
    Ok(f)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CorpusError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
    f.sync_all().map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

pub(crate) fn io_err(path: &Path, e: std::io::Error) -> CorpusError {
    if e.kind() == std::io::ErrorKind::NotFound {
        CorpusError::NotFound {
            path: path.to_path_buf(),
        }
    } else {
        CorpusError::Io {
            path: path.to_path_buf(),
            source: e,
        }
    }
}

/// Checks the cross-record unit invariants: `(source_id, mode, seq)` is
/// unique, and, when the source corpus is given, every source resolves.
pub fn check_units(units: &[CorpusUnit], sources: Option<&[TraceRecord]>) -> Result<(), CorpusError> {
    let mut keys = BTreeSet::new();
    for u in units {
        if !keys.insert((&u.source_id, u.mode, u.seq)) {
            return Err(CorpusError::Invalid {
                id: u.unit_id.clone(),
                reason: format!(
                    "duplicate (source_id, mode, seq) = ({}, {}, {})",
                    u.source_id, u.mode, u.seq
                ),
            });
        }
    }
    if let Some(sources) = sources {
        let ids: BTreeSet<&str> = sources.iter().map(|r| r.id.as_str()).collect();
        if let Some(u) = units.iter().find(|u| !ids.contains(u.source_id.as_str())) {
            return Err(CorpusError::Invalid {
                id: u.unit_id.clone(),
                reason: format!("source {:?} not present in the corpus", u.source_id),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub tokenizer: String,
    pub unit_count: usize,
    pub source_count: usize,
    pub mean_length: f64,
    pub p50: usize,
    pub p90: usize,
    pub p99: usize,
    pub domain_histogram: BTreeMap<Domain, usize>,
    /// Units per distinct source trace.
    pub passage_inflation: f64,
}

/// Nearest-rank percentile of an ascending slice: the value at rank
/// `ceil(p/100 * n)` (1-based), clamped to the first element.
pub fn nearest_rank(sorted: &[usize], pct: usize) -> usize {
    assert!(!sorted.is_empty() && pct <= 100);
    let rank = (pct * sorted.len()).div_ceil(100).max(1);
    sorted[rank - 1]
}

pub fn compute_stats(units: &[CorpusUnit], tokenizer: &dyn Tokenizer) -> Result<CorpusStats, CorpusError> {
    if units.is_empty() {
        return Err(CorpusError::Empty);
    }
    let mut lengths: Vec<usize> = units.iter().map(|u| tokenizer.count(&u.text)).collect();
    lengths.sort_unstable();
    let total: usize = lengths.iter().sum();
    let mut domain_histogram = BTreeMap::new();
    for u in units {
        *domain_histogram.entry(u.domain).or_insert(0) += 1;
    }
    let sources: BTreeSet<&str> = units.iter().map(|u| u.source_id.as_str()).collect();
    Ok(CorpusStats {
        tokenizer: tokenizer.name().to_string(),
        unit_count: units.len(),
        source_count: sources.len(),
        mean_length: total as f64 / units.len() as f64,
        p50: nearest_rank(&lengths, 50),
        p90: nearest_rank(&lengths, 90),
        p99: nearest_rank(&lengths, 99),
        domain_histogram,
        passage_inflation: units.len() as f64 / sources.len() as f64,
    })
}

impl CorpusStats {
    pub const CSV_HEADER: &'static str =
        "tokenizer,unit_count,source_count,mean_length,p50,p90,p99,passage_inflation,math,code,science,puzzle,other";

    pub fn csv_row(&self) -> String {
        let mut row = format!(
            "{},{},{},{},{},{},{},{}",
            self.tokenizer,
            self.unit_count,
            self.source_count,
            self.mean_length,
            self.p50,
            self.p90,
            self.p99,
            self.passage_inflation
        );
        for d in Domain::ALL {
            row.push_str(&format!(",{}", self.domain_histogram.get(&d).copied().unwrap_or(0)));
        }
        row
    }

    pub fn summary(&self) -> String {
        let hist: Vec<String> = self
            .domain_histogram
            .iter()
            .map(|(d, n)| format!("{}={n}", d.as_str()))
            .collect();
        format!(
            "{} units from {} sources (inflation {:.2}x)\nlength [{}]: mean {:.1}, p50 {}, p90 {}, p99 {}\ndomains: {}",
            self.unit_count,
            self.source_count,
            self.passage_inflation,
            self.tokenizer,
            self.mean_length,
            self.p50,
            self.p90,
            self.p99,
            hist.join(", ")
        )
    }
}
