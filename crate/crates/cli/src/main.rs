//! `tracerag`: run the retrieval-augmented reasoning pipeline stage by stage.
//!
//! Settings come from built-in defaults, then `--config`, then flags. Every
//! stage writes `config.resolved.toml` beside its outputs. Exit status is 0
//! on success, 3 when a stage finished with per-item failures or stopped on
//! its spend cap (rerunning resumes), and 1 on a fatal error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tracerag::config::{Backend, RunConfig};
use tracerag::corpus::{compute_stats, load_records, CorpusStats, CorpusUnit, UnitMode};
use tracerag::eval::PriceTable;
use tracerag::exec::with_threads;
use tracerag::llm::{ChatClient, Ledger};
use tracerag::pipeline::{self, Layout, PipelineError};
use tracerag::rag::RunError;
use tracerag::retrieval::Index;
use tracerag::tokenize::by_name;
use tracerag::transform::{TransformError, TransformKind};

const EXIT_PARTIAL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "tracerag",
    version,
    about = "Retrieval over reasoning traces: decontaminate, transform, index, run, score, report"
)]
struct Cli {
    /// TOML configuration file; relative paths inside it are resolved
    /// against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root of the run directory (default outputs live beneath it).
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Worker threads for data-parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run every stage on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// Chat backend.
    #[arg(long, global = true, value_parser = parse_backend)]
    backend: Option<Backend>,
    /// Spend cap in US cents for all chat calls of this command.
    #[arg(long, global = true)]
    budget_cents: Option<f64>,
    /// Price table (TOML, USD per million tokens).
    #[arg(long, global = true)]
    prices: Option<PathBuf>,
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

fn parse_backend(s: &str) -> Result<Backend, String> {
    match s {
        "mock" => Ok(Backend::Mock),
        "openai" => Ok(Backend::Openai),
        _ => Err(format!("unknown backend {s:?} (expected mock or openai)")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Drop corpus records that overlap an evaluation query.
    Decontam(DecontamArgs),
    /// Rewrite traces with a transformation template.
    Transform(TransformArgs),
    /// Build or query an embedding index.
    Index {
        #[command(subcommand)]
        command: IndexCommand,
    },
    /// Answer evaluation queries, with or without retrieval.
    Run(RunArgs),
    /// Grade run files into per-query scores.
    Score(ScoreArgs),
    /// Write the metrics table and cost/accuracy frontier.
    Report(ReportArgs),
    /// Length and domain statistics of a unit file.
    Stats(StatsArgs),
    /// Every stage in order, with default locations under the run directory.
    All,
}

#[derive(Args)]
struct DecontamArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    queries: Option<PathBuf>,
    /// N-gram length.
    #[arg(long)]
    n: Option<usize>,
    /// Records scoring strictly above this are removed.
    #[arg(long)]
    threshold: Option<f64>,
    /// Filtered corpus.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct TransformArgs {
    /// structural, semantic or reflect.
    #[arg(long)]
    kind: TransformKind,
    /// Trace records (default: the decontaminated corpus).
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
}

#[derive(Subcommand)]
enum IndexCommand {
    /// Build units for a mode, embed them and save the index.
    Build(IndexBuildArgs),
    /// Print the top-k units for a query as JSON lines.
    Query(IndexQueryArgs),
}

#[derive(Args)]
struct IndexBuildArgs {
    /// full, chunked, output, structural, semantic or reflect.
    #[arg(long)]
    mode: UnitMode,
    /// Trace records, or transformed units for transformed modes.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    chunk_limit: Option<usize>,
    #[arg(long)]
    chunk_overlap: Option<usize>,
    /// hash or openai:<model>.
    #[arg(long)]
    embedder: Option<String>,
}

#[derive(Args)]
struct IndexQueryArgs {
    /// Index file; defaults to the run directory's index for `--mode`.
    #[arg(long, required_unless_present = "mode")]
    index: Option<PathBuf>,
    #[arg(long)]
    mode: Option<UnitMode>,
    #[arg(long)]
    query: String,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Index file, or `none` for the no-retrieval baseline.
    #[arg(long, conflicts_with = "mode")]
    index: Option<String>,
    /// Use the run directory's index for this mode.
    #[arg(long)]
    mode: Option<UnitMode>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    samples: Option<u32>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_tokens: Option<u32>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Run files (default: every run under the run directory).
    #[arg(long, num_args = 1..)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Model consulted when strict matching fails.
    #[arg(long)]
    normalizer: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, num_args = 1..)]
    scores: Vec<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    units: PathBuf,
    /// word-punct or whitespace.
    #[arg(long)]
    tokenizer: Option<String>,
}

enum Status {
    Done,
    Partial,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli) {
        Ok(Status::Done) => ExitCode::SUCCESS,
        Ok(Status::Partial) => ExitCode::from(EXIT_PARTIAL),
        Err(e) if is_budget_stop(&e) => {
            eprintln!("stopped: {e:#}");
            ExitCode::from(EXIT_PARTIAL)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn is_budget_stop(e: &anyhow::Error) -> bool {
    matches!(
        e.downcast_ref::<PipelineError>(),
        Some(PipelineError::Transform(TransformError::BudgetExceeded { .. }))
            | Some(PipelineError::Run(RunError::BudgetExceeded { .. }))
    )
}

/// Defaults, then the config file, then global flags.
fn base_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(cli.config.as_deref())?;
    if let Some(d) = &cli.run_dir {
        cfg.paths.run_dir = Some(d.clone());
    }
    if let Some(t) = cli.threads {
        cfg.exec.threads = t;
    }
    if cli.sequential {
        cfg.exec.parallel = false;
    }
    if let Some(b) = cli.backend {
        cfg.client.backend = b;
    }
    if let Some(b) = cli.budget_cents {
        cfg.client.budget_cents = Some(b);
    }
    if let Some(p) = &cli.prices {
        cfg.paths.prices = Some(p.clone());
    }
    Ok(cfg)
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn required(p: &Option<PathBuf>, key: &'static str) -> Result<PathBuf> {
    p.clone()
        .with_context(|| format!("no {key} given (set it in the config or pass the flag)"))
}

fn snapshot_beside(cfg: &RunConfig, out: &Path) -> Result<()> {
    let dir = out
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    cfg.write_snapshot(dir)?;
    Ok(())
}

fn client(cfg: &RunConfig, layout: &Layout) -> Result<ChatClient> {
    std::fs::create_dir_all(&layout.root).with_context(|| format!("creating {}", layout.root.display()))?;
    Ok(pipeline::make_client(cfg, Some(&layout.ledger()))?)
}

fn finish_ledger(layout: &Layout) -> Result<()> {
    let p = layout.ledger();
    if p.exists() {
        Ledger::canonicalize(&p).with_context(|| format!("canonicalizing {}", p.display()))?;
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<Status> {
    let cfg = base_config(&cli)?;
    match cfg.exec.threads {
        0 => dispatch(cli.command, cfg),
        t => with_threads(t, || dispatch(cli.command, cfg)),
    }
}

fn dispatch(command: Command, mut cfg: RunConfig) -> Result<Status> {
    let exec = pipeline::exec_of(&cfg);
    let layout = Layout::new(cfg.paths.run_dir());
    match command {
        Command::Decontam(a) => {
            set(&mut cfg.decontam.n, a.n);
            set(&mut cfg.decontam.threshold, a.threshold);
            if a.corpus.is_some() {
                cfg.paths.corpus = a.corpus;
            }
            if a.queries.is_some() {
                cfg.paths.queries = a.queries;
            }
            cfg.validate()?;
            let corpus = required(&cfg.paths.corpus, "paths.corpus")?;
            let queries = required(&cfg.paths.queries, "paths.queries")?;
            let out = a.out.unwrap_or_else(|| layout.decontam_corpus());
            let report = a.report.unwrap_or_else(|| layout.decontam_report());
            let r = pipeline::decontam_stage(&cfg, &corpus, &queries, &out, &report, exec)?;
            snapshot_beside(&cfg, &out)?;
            eprintln!("{}", r.summary());
            Ok(Status::Done)
        }
        Command::Transform(a) => {
            set(&mut cfg.models.transformer, a.model);
            cfg.validate()?;
            let corpus = a.corpus.unwrap_or_else(|| layout.decontam_corpus());
            let out = a.out.unwrap_or_else(|| layout.units(a.kind.unit_mode()));
            let checkpoint = a.checkpoint.unwrap_or_else(|| layout.transform_checkpoint(a.kind));
            let client = client(&cfg, &layout)?;
            let r = pipeline::transform_stage(&cfg, &client, a.kind, &corpus, &out, &checkpoint, exec);
            finish_ledger(&layout)?;
            let r = r?;
            snapshot_beside(&cfg, &out)?;
            eprintln!(
                "{}: {} units, {} failed records, {} resumed",
                a.kind,
                r.units.len(),
                r.failures.len(),
                r.resumed
            );
            Ok(if r.failures.is_empty() {
                Status::Done
            } else {
                Status::Partial
            })
        }
        Command::Index {
            command: IndexCommand::Build(a),
        } => {
            set(&mut cfg.chunk.limit, a.chunk_limit);
            set(&mut cfg.chunk.overlap, a.chunk_overlap);
            set(&mut cfg.retrieval.embedder, a.embedder);
            cfg.validate()?;
            let input = a.input.unwrap_or_else(|| {
                if a.mode.is_transformed() {
                    layout.units(a.mode)
                } else {
                    layout.decontam_corpus()
                }
            });
            let out = a.out.unwrap_or_else(|| layout.index(a.mode));
            let idx = pipeline::index_stage(&cfg, a.mode, &input, &out, exec)?;
            snapshot_beside(&cfg, &out)?;
            eprintln!("{}: {} units, dimension {}", out.display(), idx.len(), idx.dimension());
            Ok(Status::Done)
        }
        Command::Index {
            command: IndexCommand::Query(a),
        } => {
            set(&mut cfg.retrieval.k, a.k);
            cfg.validate()?;
            let path = match (a.index, a.mode) {
                (Some(p), _) => p,
                (None, Some(m)) => layout.index(m),
                (None, None) => unreachable!("clap requires one of them"),
            };
            let idx = Index::load(&path)?;
            let embedder = cfg.embedder();
            let ctx = idx.search("query", &a.query, cfg.retrieval.k, embedder.as_ref())?;
            for h in &ctx.hits {
                println!("{}", serde_json::to_string(h)?);
            }
            Ok(Status::Done)
        }
        Command::Run(a) => {
            set(&mut cfg.models.solver, a.model);
            set(&mut cfg.retrieval.k, a.k);
            set(&mut cfg.sampling.n_samples, a.samples);
            set(&mut cfg.sampling.temperature, a.temperature);
            set(&mut cfg.sampling.max_tokens, a.max_tokens);
            if a.queries.is_some() {
                cfg.paths.queries = a.queries;
            }
            cfg.validate()?;
            let queries = required(&cfg.paths.queries, "paths.queries")?;
            let index: Option<PathBuf> = match (a.index.as_deref(), a.mode) {
                (Some("none"), _) | (None, None) => None,
                (Some(p), _) => Some(PathBuf::from(p)),
                (None, Some(m)) => Some(layout.index(m)),
            };
            let mode_tag = match &index {
                None => tracerag::eval::BASELINE_MODE.to_string(),
                Some(p) => Index::read_header(p)?.mode.tag().to_string(),
            };
            let out = a.out.unwrap_or_else(|| layout.run(&cfg.models.solver, &mode_tag));
            let client = client(&cfg, &layout)?;
            let r = pipeline::run_stage(&cfg, &client, &queries, index.as_deref(), &out, exec);
            finish_ledger(&layout)?;
            let r = r?;
            snapshot_beside(&cfg, &out)?;
            eprintln!(
                "{}: {} records, {} failures, {} resumed",
                out.display(),
                r.records.len(),
                r.failures.len(),
                r.resumed
            );
            Ok(if r.failures.is_empty() {
                Status::Done
            } else {
                Status::Partial
            })
        }
        Command::Score(a) => {
            if a.normalizer.is_some() {
                cfg.models.normalizer = a.normalizer;
            }
            cfg.validate()?;
            let prices_path = required(&cfg.paths.prices, "paths.prices")?;
            let prices = PriceTable::load(&prices_path)?;
            let runs = if a.runs.is_empty() {
                discover_runs(&layout)?
            } else {
                a.runs
            };
            if runs.is_empty() {
                bail!("no run files found under {}", layout.root.join("runs").display());
            }
            let out = a.out.unwrap_or_else(|| layout.scores());
            let client = match cfg.models.normalizer {
                Some(_) => Some(client(&cfg, &layout)?),
                None => None,
            };
            let r = pipeline::score_stage(&cfg, client.as_ref(), &prices, &runs, &out, exec);
            finish_ledger(&layout)?;
            let r = r?;
            snapshot_beside(&cfg, &out)?;
            eprintln!("{}: {} graded queries", out.display(), r.len());
            Ok(Status::Done)
        }
        Command::Report(a) => {
            let scores = if a.scores.is_empty() {
                vec![layout.scores()]
            } else {
                a.scores
            };
            let out_dir = a.out_dir.unwrap_or_else(|| layout.report_dir());
            let rows = pipeline::report_stage(&scores, &out_dir)?;
            cfg.write_snapshot(&out_dir)?;
            print!("{}", tracerag::eval::write_metrics_csv(&rows));
            Ok(Status::Done)
        }
        Command::Stats(a) => {
            set(&mut cfg.chunk.tokenizer, a.tokenizer);
            let tok = by_name(&cfg.chunk.tokenizer)
                .with_context(|| format!("unknown tokenizer {:?}", cfg.chunk.tokenizer))?;
            let units: Vec<CorpusUnit> = load_records(&a.units)?;
            let stats = compute_stats(&units, tok.as_ref())?;
            println!("{}", CorpusStats::CSV_HEADER);
            println!("{}", stats.csv_row());
            eprintln!("{}", stats.summary());
            Ok(Status::Done)
        }
        Command::All => {
            let summary = pipeline::run_all(&cfg, exec)?;
            eprintln!("decontamination: {}", summary.decontam.summary());
            print!("{}", tracerag::eval::write_metrics_csv(&summary.metrics));
            if summary.is_partial() {
                eprintln!(
                    "finished with {} transform and {} run failures",
                    summary.transform_failures, summary.run_failures
                );
                return Ok(Status::Partial);
            }
            Ok(Status::Done)
        }
    }
}

/// `runs/<model>/<mode>.jsonl` files under the run directory, sorted.
fn discover_runs(layout: &Layout) -> Result<Vec<PathBuf>> {
    let root = layout.root.join("runs");
    let mut out = Vec::new();
    let Ok(models) = std::fs::read_dir(&root) else {
        return Ok(out);
    };
    for m in models {
        let m = m?.path();
        if !m.is_dir() {
            continue;
        }
        for f in std::fs::read_dir(&m)? {
            let f = f?.path();
            let name = f.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if name.ends_with(".jsonl") && !name.ends_with(".failures.jsonl") {
                out.push(f);
            }
        }
    }
    out.sort();
    Ok(out)
}
