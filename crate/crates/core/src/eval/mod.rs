//! Grading, Average@k, per-query cost and metrics reporting.

mod answer;
mod report;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::exec::Exec;
use crate::llm::{ChatClient, ChatRequest, ClientError, Usage};
use crate::rag::RunRecord;

pub use answer::{answers_match, boxed_contents, canonicalize, extract_answer, last_boxed};
pub use report::{
    frontier_csv, frontier_svg, metrics_rows, parse_frontier_csv, parse_metrics_csv, write_metrics_csv, FrontierPoint,
    MetricsRow, BASELINE_MODE, METRICS_HEADER,
};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("model {0:?} is not in the price table")]
    UnknownModel(String),
    #[error("price for {model:?} is invalid: {reason}")]
    InvalidPrice { model: String, reason: String },
    #[error("price table {path}: {message}")]
    PriceFile { path: String, message: String },
    #[error("gold answer for query {0:?} is empty")]
    EmptyGold(String),
}

/// USD per one million tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Price {
    pub input: f64,
    pub output: f64,
}

impl Price {
    /// Cost in US cents. Dollars per million tokens equal cents per 10⁴
    /// tokens, hence the single division.
    pub fn cost_cents(&self, usage: Usage) -> f64 {
        (usage.prompt_tokens as f64 * self.input + usage.completion_tokens as f64 * self.output) / 10_000.0
    }
}

/// Model id to price. Lookups of unknown models are errors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceTable {
    #[serde(default)]
    pub models: BTreeMap<String, Price>,
}

impl PriceTable {
    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let t: PriceTable = toml::from_str(text).map_err(|e| EvalError::PriceFile {
            path: "<inline>".into(),
            message: e.to_string(),
        })?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let err = |message: String| EvalError::PriceFile {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let t: PriceTable = toml::from_str(&text).map_err(|e| err(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<(), EvalError> {
        for (model, p) in &self.models {
            for (name, v) in [("input", p.input), ("output", p.output)] {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(EvalError::InvalidPrice {
                        model: model.clone(),
                        reason: format!("{name} price {v} must be a finite number >= 0"),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn insert(&mut self, model: &str, price: Price) {
        self.models.insert(model.to_string(), price);
    }

    pub fn get(&self, model: &str) -> Option<&Price> {
        self.models.get(model)
    }

    pub fn price(&self, model: &str) -> Result<&Price, EvalError> {
        self.get(model)
            .ok_or_else(|| EvalError::UnknownModel(model.to_string()))
    }
}

/// Total spend for one query in cents: all input tokens billed plus all
/// completion tokens over every sample.
pub fn cost_per_query(usage: Usage, prices: &PriceTable, model: &str) -> Result<f64, EvalError> {
    Ok(prices.price(model)?.cost_cents(usage))
}

/// Decides answer equivalence when strict matching says no.
pub trait AnswerNormalizer: Send + Sync {
    fn equivalent(&self, sample: &str, gold: &str) -> Result<bool, ClientError>;
}

const EQUIV_PREFIX: &str = "Decide whether the final answer in the response is mathematically equivalent to the \
reference answer. Reply with YES or NO only.\n\nResponse:\n";
const EQUIV_GOLD: &str = "\n\nReference answer: ";

pub fn equivalence_prompt(sample: &str, gold: &str) -> String {
    format!("{EQUIV_PREFIX}{sample}{EQUIV_GOLD}{gold}")
}

/// Inverse of [`equivalence_prompt`]: (response, gold).
pub fn parse_equivalence_prompt(prompt: &str) -> Option<(&str, &str)> {
    prompt.strip_prefix(EQUIV_PREFIX)?.rsplit_once(EQUIV_GOLD)
}

/// Asks a chat model whether a sample's answer matches the gold answer.
pub struct LlmNormalizer<'a> {
    pub client: &'a ChatClient,
    pub model: String,
}

impl AnswerNormalizer for LlmNormalizer<'_> {
    fn equivalent(&self, sample: &str, gold: &str) -> Result<bool, ClientError> {
        let req = ChatRequest {
            model: self.model.clone(),
            system: None,
            user: equivalence_prompt(sample, gold),
            temperature: 0.0,
            max_tokens: 8,
            n_samples: 1,
        };
        let resp = self.client.complete(&req)?;
        Ok(resp.samples[0].trim().to_ascii_uppercase().starts_with("YES"))
    }
}

/// Strict grading: a candidate must exist and match after canonicalization.
pub fn grade(candidate: Option<&str>, gold: &str) -> bool {
    candidate.is_some_and(|c| answers_match(c, gold))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictMethod {
    /// Decided by canonical matching alone.
    Strict,
    /// Strict matching failed and the normalizer decided.
    Normalizer,
    /// The normalizer failed; the strict verdict stands.
    StrictFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleGrade {
    pub extracted: Option<String>,
    pub correct: bool,
    pub method: VerdictMethod,
}

/// Grades one sample. The normalizer is consulted only when strict matching
/// fails, and its failures fall back to the strict verdict.
pub fn grade_sample(sample: &str, gold: &str, normalizer: Option<&dyn AnswerNormalizer>) -> SampleGrade {
    let extracted = extract_answer(sample);
    let strict = grade(extracted.as_deref(), gold);
    let (correct, method) = match normalizer {
        Some(n) if !strict => match n.equivalent(sample, gold) {
            Ok(v) => {
                log::info!("normalizer verdict {v} for candidate {extracted:?} vs gold {gold:?}");
                (v, VerdictMethod::Normalizer)
            }
            Err(e) => {
                log::warn!("normalizer failed ({e}); keeping strict verdict");
                (strict, VerdictMethod::StrictFallback)
            }
        },
        _ => (strict, VerdictMethod::Strict),
    };
    SampleGrade {
        extracted,
        correct,
        method,
    }
}

/// Per-query mean correctness; `None` for zero samples.
pub fn average_at_k(correct: &[bool]) -> Option<f64> {
    if correct.is_empty() {
        return None;
    }
    Some(correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64)
}

/// Scored form of a [`RunRecord`], self-contained for reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeOutcome {
    pub query_id: String,
    pub benchmark: String,
    pub model: String,
    /// Retrieval corpus mode tag, or [`BASELINE_MODE`] without retrieval.
    pub mode: String,
    pub per_sample: Vec<SampleGrade>,
    pub average: f64,
    pub usage: Usage,
    pub cost_cents: f64,
}

/// Benchmark accuracy in percent: mean over queries of their averages.
pub fn aggregate(outcomes: &[GradeOutcome]) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    100.0 * outcomes.iter().map(|o| o.average).sum::<f64>() / outcomes.len() as f64
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct VerdictCounts {
    pub strict: usize,
    pub normalizer: usize,
    pub fallback: usize,
}

impl VerdictCounts {
    pub fn of(outcomes: &[GradeOutcome]) -> Self {
        let mut c = Self::default();
        for s in outcomes.iter().flat_map(|o| &o.per_sample) {
            match s.method {
                VerdictMethod::Strict => c.strict += 1,
                VerdictMethod::Normalizer => c.normalizer += 1,
                VerdictMethod::StrictFallback => c.fallback += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.strict + self.normalizer + self.fallback
    }
}

/// Grades every record. A sample count differing from `expected_samples`
/// only warns.
pub fn score_records(
    records: &[RunRecord],
    prices: &PriceTable,
    normalizer: Option<&dyn AnswerNormalizer>,
    expected_samples: Option<u32>,
    exec: Exec,
) -> Result<Vec<GradeOutcome>, EvalError> {
    for r in records {
        if r.gold_answer.trim().is_empty() {
            return Err(EvalError::EmptyGold(r.query_id.clone()));
        }
        prices.price(&r.model)?;
    }
    Ok(exec.map(records, |r| {
        if let Some(n) = expected_samples {
            if r.samples.len() != n as usize {
                log::warn!("{}: {} samples, expected {n}", r.query_id, r.samples.len());
            }
        }
        let per_sample: Vec<SampleGrade> = r
            .samples
            .iter()
            .map(|s| grade_sample(s, &r.gold_answer, normalizer))
            .collect();
        let flags: Vec<bool> = per_sample.iter().map(|g| g.correct).collect();
        GradeOutcome {
            query_id: r.query_id.clone(),
            benchmark: r.benchmark.clone(),
            model: r.model.clone(),
            mode: r.mode_tag(),
            average: average_at_k(&flags).unwrap_or(0.0),
            per_sample,
            usage: r.usage,
            cost_cents: prices.price(&r.model).expect("checked above").cost_cents(r.usage),
        }
    }))
}
