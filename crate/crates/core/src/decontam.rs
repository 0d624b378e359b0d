//! N-gram Jaccard decontamination of a trace corpus against evaluation
//! queries.
//!
//! Record text (problem followed by trace) and query text are normalized,
//! cut into contiguous word n-grams, and compared by Jaccard similarity. A
//! record is dropped when its best similarity over all queries is strictly
//! greater than the threshold.
//!
//! Scoring goes through an inverted index from query n-grams to query ids,
//! so only shared n-grams are touched; the result is identical to comparing
//! every record with every query.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{EvalQuery, TraceRecord};
use crate::exec::Exec;

pub const DEFAULT_N: usize = 13;
pub const DEFAULT_THRESHOLD: f64 = 0.8;

/// Separator between tokens inside an [`Ngram`]. Normalized tokens are
/// alphanumeric runs, so it never occurs inside one.
const SEP: char = '\u{1F}';

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DecontamError {
    #[error("decontamination needs at least one query")]
    NoQueries,
    #[error("threshold {0} is outside [0, 1]")]
    Threshold(f64),
    #[error("n-gram size must be >= 1")]
    ZeroN,
}

/// Turns text into the token sequence n-grams are built from.
pub trait Normalizer: Send + Sync {
    fn tokens(&self, text: &str) -> Vec<String>;
}

/// Lowercases and splits on runs of non-alphanumeric characters.
#[derive(Debug, Default, Clone, Copy)]
pub struct DefaultNormalizer;

impl Normalizer for DefaultNormalizer {
    fn tokens(&self, text: &str) -> Vec<String> {
        text.to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_owned)
            .collect()
    }
}

/// A contiguous window of normalized tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Ngram(Box<str>);

impl Ngram {
    pub fn new<S: AsRef<str>>(tokens: &[S]) -> Self {
        let mut s = String::new();
        for (i, t) in tokens.iter().enumerate() {
            if i > 0 {
                s.push(SEP);
            }
            s.push_str(t.as_ref());
        }
        Ngram(s.into_boxed_str())
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.0.split(SEP)
    }
}

pub type NgramSet = HashSet<Ngram>;

/// All contiguous `n`-token windows of the normalized text. Texts with fewer
/// than `n` tokens yield the empty set. `n` must be at least 1.
pub fn ngram_set(text: &str, n: usize, normalizer: &dyn Normalizer) -> NgramSet {
    assert!(n >= 1, "n-gram size must be >= 1");
    let toks = normalizer.tokens(text);
    if toks.len() < n {
        return NgramSet::new();
    }
    toks.windows(n).map(Ngram::new).collect()
}

/// |a ∩ b| / |a ∪ b|, and 0 when both are empty.
pub fn jaccard(a: &NgramSet, b: &NgramSet) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let inter = small.iter().filter(|g| large.contains(*g)).count();
    ratio(inter, a.len(), b.len())
}

fn ratio(inter: usize, a: usize, b: usize) -> f64 {
    let union = a + b - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecontamConfig {
    pub n: usize,
    pub threshold: f64,
}

impl Default for DecontamConfig {
    fn default() -> Self {
        Self {
            n: DEFAULT_N,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

/// A record removed for overlapping an evaluation query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovedRecord {
    pub record_id: String,
    pub query_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecontamReport {
    pub removed: Vec<RemovedRecord>,
    pub input_count: usize,
    pub kept_count: usize,
    pub removed_fraction: f64,
}

impl DecontamReport {
    pub fn summary(&self) -> String {
        format!(
            "removed {} of {} ({:.2}%)",
            self.removed.len(),
            self.input_count,
            self.removed_fraction * 100.0
        )
    }
}

/// Best match of one record over all queries. `best_query` is the first
/// query (in input order) reaching the maximum, or `None` when the maximum
/// is 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordScore {
    pub record_id: String,
    pub best_query: Option<String>,
    pub max_score: f64,
}

#[derive(Debug, Clone)]
pub struct Decontamination {
    pub kept: Vec<TraceRecord>,
    pub report: DecontamReport,
    /// One entry per input record, in input order.
    pub scores: Vec<RecordScore>,
}

pub fn decontaminate(
    corpus: &[TraceRecord],
    queries: &[EvalQuery],
    config: &DecontamConfig,
    normalizer: &dyn Normalizer,
    exec: Exec,
) -> Result<Decontamination, DecontamError> {
    if queries.is_empty() {
        return Err(DecontamError::NoQueries);
    }
    if !(0.0..=1.0).contains(&config.threshold) {
        return Err(DecontamError::Threshold(config.threshold));
    }
    if config.n == 0 {
        return Err(DecontamError::ZeroN);
    }

    let query_sets: Vec<NgramSet> = exec.map(queries, |q| ngram_set(&q.question, config.n, normalizer));
    let mut postings: HashMap<&Ngram, Vec<u32>> = HashMap::new();
    for (qi, set) in query_sets.iter().enumerate() {
        for g in set {
            postings.entry(g).or_default().push(qi as u32);
        }
    }

    let scores: Vec<RecordScore> = exec.map(corpus, |rec| {
        let set = ngram_set(&rec.comparison_text(), config.n, normalizer);
        let mut inter = vec![0usize; queries.len()];
        for g in &set {
            if let Some(qs) = postings.get(g) {
                for &qi in qs {
                    inter[qi as usize] += 1;
                }
            }
        }
        let mut best: Option<usize> = None;
        let mut max_score = 0.0f64;
        for (qi, &shared) in inter.iter().enumerate() {
            let s = ratio(shared, set.len(), query_sets[qi].len());
            if s > max_score {
                max_score = s;
                best = Some(qi);
            }
        }
        RecordScore {
            record_id: rec.id.clone(),
            best_query: best.map(|qi| queries[qi].id.clone()),
            max_score,
        }
    });

    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for (rec, s) in corpus.iter().zip(&scores) {
        if s.max_score > config.threshold {
            removed.push(RemovedRecord {
                record_id: rec.id.clone(),
                query_id: s.best_query.clone().expect("a positive score has a query"),
                score: s.max_score,
            });
        } else {
            kept.push(rec.clone());
        }
    }
    let input_count = corpus.len();
    let report = DecontamReport {
        removed_fraction: if input_count == 0 {
            0.0
        } else {
            removed.len() as f64 / input_count as f64
        },
        input_count,
        kept_count: kept.len(),
        removed,
    };
    Ok(Decontamination { kept, report, scores })
}
