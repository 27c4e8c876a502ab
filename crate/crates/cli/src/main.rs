//! `grape`: pool, score, and select SFT responses by base-model likelihood.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use grape_core::corpus::{self, CandidatePool, RoleTag};
use grape_core::costmodel::{self, CostParams};
use grape_core::klanalysis;
use grape_core::pipeline::{self, BackendSpec, RunConfig, RunStatus, CACHE_DIR_ENV};
use grape_core::report;
use grape_core::scoring::{self, ScoredResponse, Scorer, Template};
use grape_core::selection::{self, SelectOptions, SelectionStrategy, StrategyKind};

#[derive(Parser)]
#[command(name = "grape", version, about)]
struct Cli {
    /// Run configuration (JSON). Validated before any work starts.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// error, warn, info, debug or trace. RUST_LOG takes precedence.
    #[arg(long, global = true)]
    log_level: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pool source files into per-instruction candidate sets.
    Ingest(IngestArgs),
    /// Score every candidate of every pool.
    Score(ScoreArgs),
    /// Pick responses per pool and write an SFT export.
    Select(SelectArgs),
    /// Offline analyses.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Compare the data-selection cost of methods.
    Cost(CostArgs),
    /// Per-source breakdown of top-1 choices across scorers.
    Report(ReportArgs),
    /// Run every stage from a config file.
    Run,
}

#[derive(Args)]
struct IngestArgs {
    /// Source JSONL files, merged in the order given.
    sources: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    min_candidates: Option<usize>,
    /// Comma-separated role tags to keep.
    #[arg(long, value_delimiter = ',')]
    keep_roles: Option<Vec<String>>,
    /// Keep preference losers instead of dropping them.
    #[arg(long)]
    keep_losers: bool,
    /// Write overlap statistics as JSON.
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Http,
    File,
    Bigram,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    pools: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    #[arg(long)]
    endpoint: Option<String>,
    /// Model id the HTTP server must report; also enables the score cache.
    #[arg(long)]
    scorer_id: Option<String>,
    #[arg(long, default_value_t = 60_000)]
    timeout_ms: u64,
    #[arg(long)]
    logprob_file: Option<PathBuf>,
    #[arg(long)]
    bigram_corpus: Option<PathBuf>,
    #[arg(long)]
    template: Option<PathBuf>,
    #[arg(long)]
    max_inflight: Option<usize>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    pools: PathBuf,
    /// Required by grape and reverse.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// grape, reverse, random, reward or sft-only.
    #[arg(long)]
    strategy: Option<StrategyKind>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    emit_token_weights: bool,
    /// JSON object mapping instruction_id to k.
    #[arg(long)]
    k_map: Option<PathBuf>,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Check top-k subset KL optimality on scored pools or random bases.
    Kl(KlArgs),
}

#[derive(Args)]
struct KlArgs {
    #[arg(long, requires = "scores")]
    pools: Option<PathBuf>,
    #[arg(long, requires = "pools")]
    scores: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Verify on this many Dirichlet-sampled bases instead of scored pools.
    #[arg(long, conflicts_with_all = ["pools", "scores"])]
    dirichlet: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    max_n: usize,
    #[arg(long, default_value_t = 5)]
    max_k: usize,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct CostArgs {
    #[arg(long)]
    params: PathBuf,
    /// `all` or a comma-separated list of method names.
    #[arg(long, default_value = "all")]
    methods: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    pools: PathBuf,
    /// One score file per scorer; repeat the flag.
    #[arg(long = "scores", required = true)]
    scores: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    summary: Option<PathBuf>,
}

enum Outcome {
    Done,
    Partial,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match cli.config.as_deref().map(pipeline::validate_config) {
        None => None,
        Some(Ok(c)) => Some(c),
        Some(Err(e)) => {
            init_logging(cli.log_level.as_deref().unwrap_or("info"));
            log::error!("{e}");
            return ExitCode::from(1);
        }
    };
    let level = cli
        .log_level
        .clone()
        .or_else(|| config.as_ref().map(|c| c.log_level.clone()))
        .unwrap_or_else(|| "info".into());
    init_logging(&level);

    match dispatch(cli.command, config.as_ref()) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(2),
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(1)
        }
    }
}

fn init_logging(level: &str) {
    let env = env_logger::Env::default().default_filter_or(level);
    let _ = env_logger::Builder::from_env(env)
        .target(env_logger::Target::Stderr)
        .try_init();
}

fn dispatch(command: Command, config: Option<&RunConfig>) -> Result<Outcome> {
    match command {
        Command::Ingest(a) => ingest(a, config),
        Command::Score(a) => score(a, config),
        Command::Select(a) => select(a, config),
        Command::Analyze(AnalyzeCommand::Kl(a)) => analyze_kl(a),
        Command::Cost(a) => cost(a),
        Command::Report(a) => report_cmd(a),
        Command::Run => {
            let config = config.context("run needs --config")?;
            let outcome = pipeline::run(config)?;
            log::info!(
                "wrote {} selections to {}",
                outcome.manifest.counts.selected,
                outcome.output_dir.display()
            );
            Ok(match outcome.status {
                RunStatus::Complete => Outcome::Done,
                RunStatus::Partial => Outcome::Partial,
            })
        }
    }
}

fn errors_sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".errors.jsonl");
    out.with_file_name(name)
}

fn write_errors(out: &Path, stage: &str, errors: &[(String, String)]) -> Result<()> {
    let path = errors_sidecar(out);
    let mut body = Vec::new();
    for (instruction_id, error) in errors {
        serde_json::to_writer(
            &mut body,
            &json!({"stage": stage, "instruction_id": instruction_id, "error": error}),
        )?;
        body.push(b'\n');
    }
    grape_core::io::write_atomic(&path, &body)
        .with_context(|| format!("writing {}", path.display()))?;
    log::warn!("{} pool(s) failed; see {}", errors.len(), path.display());
    Ok(())
}

fn ingest(a: IngestArgs, config: Option<&RunConfig>) -> Result<Outcome> {
    let mut filter = config.map(|c| c.filter.clone()).unwrap_or_default();
    if let Some(n) = a.min_candidates {
        filter.min_candidates = n;
    }
    if let Some(roles) = a.keep_roles {
        filter.keep_roles = roles
            .iter()
            .map(|r| {
                serde_json::from_value::<RoleTag>(json!(r))
                    .with_context(|| format!("unknown role tag {r:?}"))
            })
            .collect::<Result<_>>()?;
    }
    if a.keep_losers {
        filter.drop_losers = false;
    }
    let sources = if a.sources.is_empty() {
        config.map(|c| c.sources.clone()).unwrap_or_default()
    } else {
        a.sources
    };
    if sources.is_empty() {
        bail!("no source files given");
    }
    let pools = corpus::ingest(&sources, &filter)?;
    corpus::write_pools(&a.out, &pools).with_context(|| format!("writing {}", a.out.display()))?;
    let stats = corpus::overlap_stats(&pools);
    log::info!(
        "{} pools, {} pairs written to {}",
        stats.unique_instructions,
        stats.total_pairs,
        a.out.display()
    );
    if let Some(path) = a.stats {
        grape_core::io::write_atomic(&path, &serde_json::to_vec_pretty(&stats)?)?;
    }
    Ok(Outcome::Done)
}

fn score(a: ScoreArgs, config: Option<&RunConfig>) -> Result<Outcome> {
    let pools = corpus::read_pools(&a.pools)?;
    let template = match (&a.template, config) {
        (Some(p), _) => Template::from_file(p)?,
        (None, Some(c)) => c.template()?,
        (None, None) => Template::default(),
    };
    let spec = match a.backend {
        Some(BackendKind::Bigram) => BackendSpec::Bigram {
            corpus: a
                .bigram_corpus
                .context("--backend bigram needs --bigram-corpus")?,
        },
        Some(BackendKind::File) => BackendSpec::File {
            path: a
                .logprob_file
                .context("--backend file needs --logprob-file")?,
        },
        Some(BackendKind::Http) => BackendSpec::Http {
            endpoint: a.endpoint.context("--backend http needs --endpoint")?,
            scorer_id: a.scorer_id,
            timeout_ms: a.timeout_ms,
        },
        None => config
            .map(|c| c.backend.clone())
            .context("--backend is required without --config")?,
    };
    let backend = spec.build(&template)?;
    let cache_dir = a
        .cache_dir
        .or_else(|| std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from))
        .or_else(|| config.and_then(|c| c.cache_dir.clone()));
    let max_inflight = a
        .max_inflight
        .or(config.map(|c| c.max_inflight))
        .unwrap_or(8);
    if max_inflight == 0 {
        bail!("--max-inflight must be at least 1");
    }
    let retry = config.map(RunConfig::retry_policy).unwrap_or_default();

    let scorer = Scorer::new(backend.as_ref(), template)
        .max_inflight(max_inflight)
        .retry(retry)
        .cache_dir(cache_dir);
    let result = scorer.score_pools(&pools)?;
    let mut scores: Vec<ScoredResponse> = Vec::new();
    let mut errors = Vec::new();
    for (pool, r) in pools.iter().zip(result.pools) {
        match r {
            Ok(s) => scores.extend(s),
            Err(e) => errors.push((pool.instruction_id.clone(), e.to_string())),
        }
    }
    scoring::write_logprob_file(&a.out, &scores)
        .with_context(|| format!("writing {}", a.out.display()))?;
    log::info!(
        "{} scores written ({} requests, {} cache hits)",
        scores.len(),
        result.stats.requests,
        result.stats.cache_hits
    );
    if errors.is_empty() {
        Ok(Outcome::Done)
    } else {
        write_errors(&a.out, "score", &errors)?;
        Ok(Outcome::Partial)
    }
}

fn select(a: SelectArgs, config: Option<&RunConfig>) -> Result<Outcome> {
    let mut strategy = config.map(|c| c.strategy).unwrap_or_default();
    if let Some(kind) = a.strategy {
        strategy.kind = kind;
    }
    if let Some(k) = a.k {
        strategy.k = k;
    }
    if let Some(seed) = a.seed {
        strategy.seed = seed;
    }
    let pools = corpus::read_pools(&a.pools)?;
    let scores = match &a.scores {
        Some(p) => scoring::read_logprob_file(p)?,
        None if strategy.kind.needs_scores() => {
            bail!("--strategy {} needs --scores", strategy.kind.as_str())
        }
        None => Vec::new(),
    };
    let k_map_path = a.k_map.or_else(|| config.and_then(|c| c.k_map.clone()));
    let options = SelectOptions {
        emit_token_weights: a.emit_token_weights || config.is_some_and(|c| c.emit_token_weights),
        k_map: match k_map_path {
            Some(p) => pipeline::read_k_map(&p)?,
            None => HashMap::new(),
        },
    };
    let run = selection::select_all(&pools, &scores, &strategy, &options)?;
    let written = selection::export_sft(&run.results, &pools, &a.out)?;
    log::info!("{written} export lines written to {}", a.out.display());
    if run.failures.is_empty() {
        return Ok(Outcome::Done);
    }
    let errors: Vec<(String, String)> = run
        .failures
        .iter()
        .map(|(id, e)| (id.clone(), e.to_string()))
        .collect();
    write_errors(&a.out, "select", &errors)?;
    Ok(Outcome::Partial)
}

fn analyze_kl(a: KlArgs) -> Result<Outcome> {
    let (body, ok) = if let Some(count) = a.dirichlet {
        let trials = klanalysis::dirichlet_trials(a.seed, count, a.max_n, a.max_k)?;
        let r = klanalysis::verify_theorem1(&trials);
        (serde_json::to_vec_pretty(&r)?, r.all_passed())
    } else {
        let (Some(pools), Some(scores)) = (a.pools, a.scores) else {
            bail!("give either --pools and --scores, or --dirichlet");
        };
        let pools = corpus::read_pools(&pools)?;
        let scores = scoring::read_logprob_file(&scores)?;
        let r = klanalysis::analyze_scored_pools(&pools, &scores, a.k);
        log::info!("{} pools checked, {} skipped", r.trials, r.skipped);
        let ok = r.passes == r.trials && r.bridge_mismatches.is_empty();
        (serde_json::to_vec_pretty(&r)?, ok)
    };
    grape_core::io::write_atomic(&a.report, &body)
        .with_context(|| format!("writing {}", a.report.display()))?;
    if !ok {
        bail!("verification failed; see {}", a.report.display());
    }
    Ok(Outcome::Done)
}

fn cost(a: CostArgs) -> Result<Outcome> {
    let text =
        fs::read_to_string(&a.params).with_context(|| format!("reading {}", a.params.display()))?;
    let params: CostParams =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", a.params.display()))?;
    let methods = costmodel::parse_methods(&a.methods)?;
    let rows = costmodel::compare(&methods, &params)?;
    for r in rows.iter().filter(|r| r.cheaper_than_grape) {
        log::warn!(
            "{} is cheaper than grape under these parameters",
            r.method.as_str()
        );
    }
    grape_core::io::write_atomic(&a.out, costmodel::rows_to_csv(&rows).as_bytes())
        .with_context(|| format!("writing {}", a.out.display()))?;
    Ok(Outcome::Done)
}

fn report_cmd(a: ReportArgs) -> Result<Outcome> {
    let pools: Vec<CandidatePool> = corpus::read_pools(&a.pools)?;
    let strategy = SelectionStrategy::new(StrategyKind::Grape);
    let mut by_scorer = BTreeMap::new();
    for path in &a.scores {
        let scores = scoring::read_logprob_file(path)?;
        let Some(scorer_id) = scores.first().map(|s| s.scorer_id.clone()) else {
            bail!("{} holds no scores", path.display());
        };
        let run = selection::select_all(&pools, &scores, &strategy, &SelectOptions::default())?;
        if let Some((id, e)) = run.failures.first() {
            bail!("{}: instruction {id}: {e}", path.display());
        }
        if by_scorer.insert(scorer_id.clone(), run.results).is_some() {
            bail!("scorer {scorer_id:?} appears in more than one score file");
        }
    }
    let (matrix, summary) = report::summarize(&by_scorer, &pools)?;
    grape_core::io::write_atomic(&a.out, matrix.to_csv().as_bytes())
        .with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(path) = a.summary {
        grape_core::io::write_atomic(&path, &serde_json::to_vec_pretty(&summary)?)?;
    }
    Ok(Outcome::Done)
}
