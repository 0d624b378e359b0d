//! Stage functions shared by the command-line tool and the end-to-end
//! tests, plus the fixed layout of a run directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::{Backend, ConfigError, RunConfig};
use crate::corpus::{
    load_records, to_jsonl, write_atomic, write_records, CorpusError, CorpusUnit, EvalQuery, TraceRecord, UnitMode,
};
use crate::decontam::{decontaminate, DecontamConfig, DecontamError, DecontamReport, DefaultNormalizer};
use crate::eval::{
    frontier_csv, frontier_svg, metrics_rows, score_records, write_metrics_csv, AnswerNormalizer, EvalError,
    FrontierPoint, GradeOutcome, LlmNormalizer, MetricsRow, PriceTable, BASELINE_MODE,
};
use crate::exec::Exec;
use crate::llm::{Budget, ChatBackend, ChatClient, InFlight, Ledger, MockChat, OpenAiChat, RetryPolicy};
use crate::rag::{run_benchmark, Retrieval, RunError, RunOutput, RunRecord};
use crate::retrieval::{build_units, ChunkConfig, Index, IndexError, UnitError};
use crate::tokenize::{by_name, Tokenizer};
use crate::transform::{transform_corpus, TransformError, TransformKind, TransformOptions, TransformOutput};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Decontam(#[from] DecontamError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Units(#[from] UnitError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("missing setting: {0}")]
    Missing(&'static str),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Fixed places of every artifact under a run directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

/// File-name-safe form of a model id (`openai/gpt-5` → `openai_gpt-5`).
pub fn slug(model: &str) -> String {
    model
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn decontam_corpus(&self) -> PathBuf {
        self.root.join("decontam/corpus.jsonl")
    }

    pub fn decontam_report(&self) -> PathBuf {
        self.root.join("decontam/report.json")
    }

    pub fn units(&self, mode: UnitMode) -> PathBuf {
        self.root.join(format!("units/{}.jsonl", mode.tag()))
    }

    pub fn transform_checkpoint(&self, kind: TransformKind) -> PathBuf {
        self.root.join(format!("units/{}.checkpoint.jsonl", kind.tag()))
    }

    pub fn index(&self, mode: UnitMode) -> PathBuf {
        self.root.join(format!("index/{}.idx", mode.tag()))
    }

    pub fn run(&self, model: &str, mode_tag: &str) -> PathBuf {
        self.root.join(format!("runs/{}/{mode_tag}.jsonl", slug(model)))
    }

    pub fn scores(&self) -> PathBuf {
        self.root.join("scores.jsonl")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn ledger(&self) -> PathBuf {
        self.root.join("ledger.jsonl")
    }
}

/// Sibling path with `suffix` appended to the file name.
pub fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::Io {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), PipelineError> {
    Ok(write_atomic(path, to_jsonl(items).as_bytes())?)
}

/// Writes `items` to `path`, or removes a stale file when there are none.
fn write_or_remove<T: Serialize>(path: &Path, items: &[T]) -> Result<(), PipelineError> {
    if items.is_empty() {
        let _ = std::fs::remove_file(path);
        Ok(())
    } else {
        write_jsonl(path, items)
    }
}

pub fn tokenizer(cfg: &RunConfig) -> Result<Box<dyn Tokenizer>, PipelineError> {
    by_name(&cfg.chunk.tokenizer).ok_or_else(|| {
        ConfigError::Invalid {
            key: "chunk.tokenizer".into(),
            reason: format!("unknown tokenizer {:?}", cfg.chunk.tokenizer),
        }
        .into()
    })
}

pub fn exec_of(cfg: &RunConfig) -> Exec {
    if cfg.exec.parallel {
        Exec::default()
    } else {
        Exec::Sequential
    }
}

/// One chat client for the whole process: every stage shares its in-flight
/// cap, spend cap and ledger.
pub fn make_client(cfg: &RunConfig, ledger: Option<&Path>) -> Result<ChatClient, PipelineError> {
    let backend: Box<dyn ChatBackend> = match cfg.client.backend {
        Backend::Mock => Box::new(MockChat::new("mock")),
        Backend::Openai => Box::new(OpenAiChat::new(cfg.endpoint()).with_supports_n(cfg.client.supports_n)),
    };
    let retry = match cfg.client.backend {
        Backend::Mock => RetryPolicy::immediate(cfg.client.max_attempts),
        Backend::Openai => RetryPolicy {
            max_attempts: cfg.client.max_attempts,
            ..RetryPolicy::default()
        },
    };
    let mut client = ChatClient::new(backend)
        .with_retry(retry)
        .with_inflight(InFlight::new(cfg.client.concurrency));
    if let Some(cap) = cfg.client.budget_cents {
        let prices_path = cfg
            .paths
            .prices
            .as_deref()
            .ok_or(PipelineError::Missing("paths.prices"))?;
        let prices = PriceTable::load(prices_path)?;
        client = client.with_shared_budget(Arc::new(Budget::new(cap, prices)));
    }
    if let Some(p) = ledger {
        client = client.with_ledger(Arc::new(Ledger::open(p).map_err(io_err(p))?));
    }
    Ok(client)
}

pub fn decontam_stage(
    cfg: &RunConfig,
    corpus: &Path,
    queries: &Path,
    out_corpus: &Path,
    out_report: &Path,
    exec: Exec,
) -> Result<DecontamReport, PipelineError> {
    let records: Vec<TraceRecord> = load_records(corpus)?;
    let queries: Vec<EvalQuery> = load_records(queries)?;
    let dc = DecontamConfig {
        n: cfg.decontam.n,
        threshold: cfg.decontam.threshold,
    };
    let out = decontaminate(&records, &queries, &dc, &DefaultNormalizer, exec)?;
    write_records(out_corpus, &out.kept)?;
    let mut json = serde_json::to_string_pretty(&out.report).expect("report serializes");
    json.push('\n');
    write_atomic(out_report, json.as_bytes())?;
    Ok(out.report)
}

pub fn transform_stage(
    cfg: &RunConfig,
    client: &ChatClient,
    kind: TransformKind,
    corpus: &Path,
    out_units: &Path,
    checkpoint: &Path,
    exec: Exec,
) -> Result<TransformOutput, PipelineError> {
    let records: Vec<TraceRecord> = load_records(corpus)?;
    let opts = TransformOptions {
        model: cfg.models.transformer.clone(),
        temperature: cfg.client.transform_temperature,
        max_tokens: cfg.client.transform_max_tokens,
    };
    let out = transform_corpus(client, kind, &records, checkpoint, &opts, exec)?;
    let units: Vec<CorpusUnit> = out.units.iter().map(|u| u.to_corpus_unit()).collect();
    write_records(out_units, &units)?;
    write_or_remove(&with_suffix(out_units, ".failures.jsonl"), &out.failures)?;
    Ok(out)
}

/// Builds and saves the index for `mode`. Transformed modes read units from
/// `input`; the others build units from the trace records in `input`.
pub fn index_stage(
    cfg: &RunConfig,
    mode: UnitMode,
    input: &Path,
    out: &Path,
    exec: Exec,
) -> Result<Index, PipelineError> {
    let units: Vec<CorpusUnit> = if mode.is_transformed() {
        let units: Vec<CorpusUnit> = load_records(input)?;
        if let Some(u) = units.iter().find(|u| u.mode != mode) {
            return Err(IndexError::MixedModes(mode, u.mode).into());
        }
        units
    } else {
        let records: Vec<TraceRecord> = load_records(input)?;
        let chunk = ChunkConfig {
            limit: cfg.chunk.limit,
            overlap: cfg.chunk.overlap,
        };
        build_units(
            &records,
            mode,
            chunk,
            cfg.retrieval.include_problem,
            tokenizer(cfg)?.as_ref(),
        )?
    };
    let embedder = cfg.embedder();
    let index = Index::build(units, embedder.as_ref(), cfg.retrieval.batch_size, exec)?;
    index.save(out)?;
    Ok(index)
}

pub fn run_stage(
    cfg: &RunConfig,
    client: &ChatClient,
    queries: &Path,
    index: Option<&Path>,
    out: &Path,
    exec: Exec,
) -> Result<RunOutput, PipelineError> {
    let queries: Vec<EvalQuery> = load_records(queries)?;
    let embedder = cfg.embedder();
    let tok = tokenizer(cfg)?;
    let loaded = index.map(Index::load).transpose()?;
    let retrieval = loaded.as_ref().map(|idx| Retrieval {
        index: idx,
        embedder: embedder.as_ref(),
        k: cfg.retrieval.k,
        context_budget: cfg.retrieval.context_budget.map(|b| (b, tok.as_ref())),
    });
    Ok(run_benchmark(
        &queries,
        retrieval.as_ref(),
        client,
        &cfg.models.solver,
        cfg.sampling,
        out,
        exec,
    )?)
}

/// Grades run files into one score file, sorted by (benchmark, model,
/// mode, query id).
pub fn score_stage(
    cfg: &RunConfig,
    client: Option<&ChatClient>,
    prices: &PriceTable,
    runs: &[PathBuf],
    out: &Path,
    exec: Exec,
) -> Result<Vec<GradeOutcome>, PipelineError> {
    let mut records: Vec<RunRecord> = Vec::new();
    for p in runs {
        records.extend(load_records::<RunRecord>(p)?);
    }
    let llm = match (&cfg.models.normalizer, client) {
        (Some(model), Some(client)) => Some(LlmNormalizer {
            client,
            model: model.clone(),
        }),
        _ => None,
    };
    let normalizer = llm.as_ref().map(|n| n as &dyn AnswerNormalizer);
    let mut outcomes = score_records(&records, prices, normalizer, None, exec)?;
    outcomes.sort_by(|a, b| {
        (&a.benchmark, &a.model, &a.mode, &a.query_id).cmp(&(&b.benchmark, &b.model, &b.mode, &b.query_id))
    });
    write_jsonl(out, &outcomes)?;
    Ok(outcomes)
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const FRONTIER_CSV: &str = "frontier.csv";
pub const FRONTIER_SVG: &str = "frontier.svg";

/// Writes the metrics table and the cost/accuracy frontier (CSV and SVG,
/// one point per model and mode averaged over benchmarks).
pub fn report_stage(scores: &[PathBuf], out_dir: &Path) -> Result<Vec<MetricsRow>, PipelineError> {
    let mut outcomes: Vec<GradeOutcome> = Vec::new();
    for p in scores {
        outcomes.extend(read_jsonl::<GradeOutcome>(p)?);
    }
    let rows = metrics_rows(&outcomes);
    write_atomic(&out_dir.join(METRICS_FILE), write_metrics_csv(&rows).as_bytes())?;
    let points = frontier_points(&rows);
    write_atomic(&out_dir.join(FRONTIER_CSV), frontier_csv(&points).as_bytes())?;
    write_atomic(
        &out_dir.join(FRONTIER_SVG),
        frontier_svg(&points, "Average cost vs accuracy").as_bytes(),
    )?;
    Ok(rows)
}

/// Averages metrics rows over benchmarks into one point per (model, mode).
pub fn frontier_points(rows: &[MetricsRow]) -> Vec<FrontierPoint> {
    let mut groups: std::collections::BTreeMap<(&str, &str), Vec<&MetricsRow>> = Default::default();
    for r in rows {
        groups.entry((&r.model, &r.mode)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((model, mode), rs)| FrontierPoint {
            model: model.to_string(),
            mode: mode.to_string(),
            accuracy_pct: rs.iter().map(|r| r.accuracy_pct).sum::<f64>() / rs.len() as f64,
            cost_cents: rs.iter().map(|r| r.cost_cents).sum::<f64>() / rs.len() as f64,
        })
        .collect()
}

/// What [`run_all`] did.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSummary {
    pub decontam: DecontamReport,
    pub transform_failures: usize,
    pub run_failures: usize,
    pub metrics: Vec<MetricsRow>,
}

impl PipelineSummary {
    pub fn is_partial(&self) -> bool {
        self.transform_failures > 0 || self.run_failures > 0
    }
}

pub const INDEXED_MODES: [UnitMode; 6] = [
    UnitMode::Full,
    UnitMode::FinalOutput,
    UnitMode::Chunk,
    UnitMode::TransformedStructural,
    UnitMode::TransformedSemantic,
    UnitMode::TransformedReflect,
];

/// decontam → transform (all kinds) → index (all modes) → run (baseline and
/// each mode) → score → report, everything under `cfg.paths.run_dir`.
pub fn run_all(cfg: &RunConfig, exec: Exec) -> Result<PipelineSummary, PipelineError> {
    cfg.validate()?;
    let corpus = cfg
        .paths
        .corpus
        .as_deref()
        .ok_or(PipelineError::Missing("paths.corpus"))?;
    let queries = cfg
        .paths
        .queries
        .as_deref()
        .ok_or(PipelineError::Missing("paths.queries"))?;
    let prices_path = cfg
        .paths
        .prices
        .as_deref()
        .ok_or(PipelineError::Missing("paths.prices"))?;
    let prices = PriceTable::load(prices_path)?;
    let layout = Layout::new(cfg.paths.run_dir());
    cfg.write_snapshot(&layout.root)?;
    let client = make_client(cfg, Some(&layout.ledger()))?;

    let decontam = decontam_stage(
        cfg,
        corpus,
        queries,
        &layout.decontam_corpus(),
        &layout.decontam_report(),
        exec,
    )?;
    let mut transform_failures = 0;
    for kind in TransformKind::ALL {
        let out = transform_stage(
            cfg,
            &client,
            kind,
            &layout.decontam_corpus(),
            &layout.units(kind.unit_mode()),
            &layout.transform_checkpoint(kind),
            exec,
        )?;
        transform_failures += out.failures.len();
    }
    let mut run_files = Vec::new();
    let baseline = layout.run(&cfg.models.solver, BASELINE_MODE);
    let mut run_failures = run_stage(cfg, &client, queries, None, &baseline, exec)?.failures.len();
    run_files.push(baseline);
    for mode in INDEXED_MODES {
        let input = if mode.is_transformed() {
            layout.units(mode)
        } else {
            layout.decontam_corpus()
        };
        index_stage(cfg, mode, &input, &layout.index(mode), exec)?;
        let out = layout.run(&cfg.models.solver, mode.tag());
        run_failures += run_stage(cfg, &client, queries, Some(&layout.index(mode)), &out, exec)?
            .failures
            .len();
        run_files.push(out);
    }
    score_stage(cfg, Some(&client), &prices, &run_files, &layout.scores(), exec)?;
    let metrics = report_stage(&[layout.scores()], &layout.report_dir())?;
    Ledger::canonicalize(&layout.ledger()).map_err(io_err(&layout.ledger()))?;
    Ok(PipelineSummary {
        decontam,
        transform_failures,
        run_failures,
        metrics,
    })
}
