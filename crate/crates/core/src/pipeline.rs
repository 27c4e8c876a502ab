//! End-to-end runs driven by a JSON config file.
//!
//! Stages: ingest, score, select, analyze. Every artifact is first written
//! with a `.partial` suffix and only renamed once the whole run has
//! finished, so an interrupted or failed run never leaves files that look
//! complete.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::corpus::{self, CandidatePool, IngestError, OverlapReport, PoolFilterConfig};
use crate::hash::content_id;
use crate::io::write_atomic;
use crate::klanalysis::{self, KlPoolReport};
use crate::report::{self, ReportError};
use crate::scoring::{
    self, BigramModel, FileBackend, HttpBackend, HttpBackendConfig, RetryPolicy, ScoreError,
    ScoreStats, ScoredResponse, Scorer, ScorerBackend, Template,
};
use crate::selection::{self, ExportError, SelectError, SelectOptions, SelectionStrategy};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const CACHE_DIR_ENV: &str = "GRAPE_CACHE_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Export(#[from] ExportError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("thread pool: {0}")]
    Threads(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    Bigram {
        corpus: PathBuf,
    },
    Http {
        endpoint: String,
        #[serde(default)]
        scorer_id: Option<String>,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
    },
    File {
        path: PathBuf,
    },
}

fn default_timeout_ms() -> u64 {
    60_000
}

impl BackendSpec {
    pub fn build(&self, template: &Template) -> Result<Box<dyn ScorerBackend>, ScoreError> {
        Ok(match self {
            BackendSpec::Bigram { corpus } => {
                let file = fs::File::open(corpus).map_err(|source| ScoreError::Io {
                    path: corpus.clone(),
                    source,
                })?;
                Box::new(BigramModel::train_reader(std::io::BufReader::new(file))?)
            }
            BackendSpec::Http {
                endpoint,
                scorer_id,
                timeout_ms,
            } => Box::new(HttpBackend::new(HttpBackendConfig {
                endpoint: endpoint.clone(),
                timeout: Duration::from_millis(*timeout_ms),
                expected_model_id: scorer_id.clone(),
            })?),
            BackendSpec::File { path } => Box::new(FileBackend::open(path, &template.hash())?),
        })
    }

    fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        match self {
            BackendSpec::Bigram { corpus } => vec![corpus],
            BackendSpec::File { path } => vec![path],
            BackendSpec::Http { .. } => vec![],
        }
    }
}

/// A fully resolved run configuration. Relative paths in the file are
/// resolved against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub sources: Vec<PathBuf>,
    #[serde(default)]
    pub filter: PoolFilterConfig,
    pub backend: BackendSpec,
    #[serde(default)]
    pub template: Option<PathBuf>,
    #[serde(default)]
    pub strategy: SelectionStrategy,
    #[serde(default)]
    pub emit_token_weights: bool,
    #[serde(default)]
    pub k_map: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_max_inflight")]
    pub max_inflight: usize,
    /// Worker threads for ingestion and selection; defaults to rayon's choice.
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default = "default_log_level")]
    pub log_level: String,
    /// Retry backoff base in milliseconds.
    #[serde(default = "default_backoff_ms")]
    pub retry_base_ms: u64,
}

fn default_max_inflight() -> usize {
    8
}

fn default_log_level() -> String {
    "info".into()
}

fn default_backoff_ms() -> u64 {
    500
}

impl RunConfig {
    pub fn template(&self) -> Result<Template, ScoreError> {
        match &self.template {
            Some(p) => Template::from_file(p),
            None => Ok(Template::default()),
        }
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(self.retry_base_ms),
        }
    }

    pub fn hash(&self) -> String {
        content_id(&serde_json::to_vec(self).expect("config serializes"))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.sources.iter_mut().for_each(fix);
        self.backend.paths_mut().into_iter().for_each(fix);
        self.template.iter_mut().for_each(fix);
        self.k_map.iter_mut().for_each(fix);
        fix(&mut self.output_dir);
        self.cache_dir.iter_mut().for_each(fix);
    }

    /// Every violation found, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.sources.is_empty() {
            v.push("sources: at least one source file is required".into());
        }
        for s in &self.sources {
            if !s.is_file() {
                v.push(format!("sources: {} does not exist", s.display()));
            }
        }
        if self.filter.min_candidates == 0 {
            v.push("filter.min_candidates must be at least 1".into());
        }
        if self.strategy.k == 0 {
            v.push("strategy.k must be at least 1".into());
        }
        if self.max_inflight == 0 {
            v.push("max_inflight must be at least 1".into());
        }
        if self.threads == Some(0) {
            v.push("threads must be at least 1".into());
        }
        match &self.backend {
            BackendSpec::Bigram { corpus } if !corpus.is_file() => v.push(format!(
                "backend.corpus: {} does not exist",
                corpus.display()
            )),
            BackendSpec::File { path } if !path.is_file() => {
                v.push(format!("backend.path: {} does not exist", path.display()))
            }
            BackendSpec::Http { endpoint, .. } if endpoint.trim().is_empty() => {
                v.push("backend.endpoint is empty".into())
            }
            _ => {}
        }
        if let Some(t) = &self.template {
            if !t.is_file() {
                v.push(format!("template: {} does not exist", t.display()));
            } else if let Err(e) = Template::from_file(t) {
                v.push(format!("template: {e}"));
            }
        }
        if let Some(k) = &self.k_map {
            if !k.is_file() {
                v.push(format!("k_map: {} does not exist", k.display()));
            }
        }
        if !dir_is_writable(&self.output_dir) {
            v.push(format!(
                "output_dir: {} is not writable",
                self.output_dir.display()
            ));
        }
        if !["error", "warn", "info", "debug", "trace"].contains(&self.log_level.as_str()) {
            v.push(format!("log_level: unknown level {:?}", self.log_level));
        }
        v
    }
}

fn dir_is_writable(dir: &Path) -> bool {
    let mut probe = Some(dir);
    while let Some(p) = probe {
        if p.exists() {
            return p.is_dir()
                && fs::metadata(p)
                    .map(|m| !m.permissions().readonly())
                    .unwrap_or(false);
        }
        probe = p.parent().filter(|q| !q.as_os_str().is_empty());
    }
    true
}

/// Parses and validates a config. `cache_override` replaces `cache_dir`
/// (the CLI passes the `GRAPE_CACHE_DIR` environment variable here).
pub fn validate_config_str(
    text: &str,
    base_dir: &Path,
    cache_override: Option<PathBuf>,
) -> Result<RunConfig, ConfigError> {
    let mut config: RunConfig =
        serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    if let Some(dir) = cache_override {
        config.cache_dir = Some(dir);
    }
    config.resolve_paths(base_dir);
    let violations = config.violations();
    if violations.is_empty() {
        Ok(config)
    } else {
        Err(ConfigError::Invalid(violations))
    }
}

pub fn validate_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let cache = std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from);
    validate_config_str(&text, base, cache)
}

pub fn read_k_map(path: &Path) -> Result<HashMap<String, usize>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text)
        .map_err(|e| PipelineError::Config(ConfigError::Parse(format!("{}: {e}", path.display()))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCounts {
    pub pools: usize,
    pub pairs: usize,
    pub scored_pools: usize,
    pub selected: usize,
    pub score_failures: usize,
    pub select_failures: usize,
    pub requests: usize,
    pub cache_hits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub config_hash: String,
    pub scorer_id: Option<String>,
    pub template_hash: String,
    pub strategy: SelectionStrategy,
    pub counts: RunCounts,
    pub overlap: OverlapReport,
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Complete,
    /// Some pools failed to score or select; see the error sidecars.
    Partial,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub status: RunStatus,
    pub manifest: Manifest,
    pub output_dir: PathBuf,
}

/// Names of the files a run produces inside `output_dir`.
pub mod artifacts {
    pub const POOLS: &str = "pools.jsonl";
    pub const SCORES: &str = "scores.jsonl";
    pub const EXPORT: &str = "sft.jsonl";
    pub const ERRORS: &str = "errors.jsonl";
    pub const KL_REPORT: &str = "kl_report.json";
    pub const BREAKDOWN: &str = "breakdown.csv";
    pub const SUMMARY: &str = "report.json";
    pub const MANIFEST: &str = "manifest.json";
}

struct Staging {
    dir: PathBuf,
    written: Vec<String>,
}

impl Staging {
    fn partial(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{name}.partial"))
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let path = self.partial(name);
        write_atomic(&path, bytes).map_err(io_err(&path))?;
        self.written.push(name.to_owned());
        Ok(())
    }

    fn with_path<T, E>(
        &mut self,
        name: &str,
        f: impl FnOnce(&Path) -> Result<T, E>,
    ) -> Result<T, PipelineError>
    where
        PipelineError: From<E>,
    {
        let path = self.partial(name);
        let out = f(&path)?;
        self.written.push(name.to_owned());
        Ok(out)
    }

    fn finish(self) -> Result<(), PipelineError> {
        for name in &self.written {
            let from = self.partial(name);
            let to = self.dir.join(name);
            fs::rename(&from, &to).map_err(io_err(&to))?;
        }
        Ok(())
    }
}

fn jsonl(values: &[Value]) -> Vec<u8> {
    let mut out = Vec::new();
    for v in values {
        serde_json::to_writer(&mut out, v).expect("json value serializes");
        out.push(b'\n');
    }
    out
}

/// Runs every stage. Stage errors abort the run and leave `.partial` files
/// behind; per-pool failures are recorded in `errors.jsonl` and yield
/// [`RunStatus::Partial`].
pub fn run(config: &RunConfig) -> Result<RunOutcome, PipelineError> {
    let violations = config.violations();
    if !violations.is_empty() {
        return Err(ConfigError::Invalid(violations).into());
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = config.threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| PipelineError::Threads(e.to_string()))?;
    pool.install(|| run_stages(config))
}

fn run_stages(config: &RunConfig) -> Result<RunOutcome, PipelineError> {
    fs::create_dir_all(&config.output_dir).map_err(io_err(&config.output_dir))?;
    let mut staging = Staging {
        dir: config.output_dir.clone(),
        written: Vec::new(),
    };

    log::info!("ingesting {} source(s)", config.sources.len());
    let pools = corpus::ingest(&config.sources, &config.filter)?;
    let overlap = corpus::overlap_stats(&pools);
    staging.with_path(artifacts::POOLS, |p| {
        corpus::write_pools(p, &pools).map_err(io_err(p))
    })?;

    let template = config.template()?;
    let backend = config.backend.build(&template)?;
    let scorer = Scorer::new(backend.as_ref(), template.clone())
        .max_inflight(config.max_inflight)
        .retry(config.retry_policy())
        .cache_dir(config.cache_dir.clone());
    log::info!(
        "scoring {} pairs in {} pools",
        overlap.total_pairs,
        pools.len()
    );
    let scored = scorer.score_pools(&pools)?;

    let mut errors = Vec::new();
    let mut scored_pools = Vec::new();
    let mut scores: Vec<ScoredResponse> = Vec::new();
    for (pool, result) in pools.iter().zip(scored.pools) {
        match result {
            Ok(s) => {
                scored_pools.push(pool.clone());
                scores.extend(s);
            }
            Err(e) => errors.push(json!({
                "stage": "score",
                "instruction_id": pool.instruction_id,
                "error": e.to_string(),
            })),
        }
    }
    let score_failures = errors.len();
    staging.with_path(artifacts::SCORES, |p| {
        scoring::write_logprob_file(p, &scores).map_err(io_err(p))
    })?;

    let k_map = match &config.k_map {
        Some(p) => read_k_map(p)?,
        None => HashMap::new(),
    };
    let options = SelectOptions {
        emit_token_weights: config.emit_token_weights,
        k_map,
    };
    let selection = selection::select_all(&scored_pools, &scores, &config.strategy, &options)?;
    for (instruction_id, e) in &selection.failures {
        errors.push(json!({
            "stage": "select",
            "instruction_id": instruction_id,
            "error": e.to_string(),
        }));
    }
    let selected = staging.with_path(artifacts::EXPORT, |p| {
        selection::export_sft(&selection.results, &scored_pools, p)
    })?;
    staging.write(artifacts::ERRORS, &jsonl(&errors))?;

    let kl_k = config.strategy.k;
    let kl_report: KlPoolReport = klanalysis::analyze_scored_pools(&scored_pools, &scores, kl_k);
    staging.write(
        artifacts::KL_REPORT,
        &serde_json::to_vec_pretty(&kl_report).expect("report serializes"),
    )?;

    if config.strategy.k == 1 {
        let scorer_name = scored.scorer_id.clone().unwrap_or_else(|| "unknown".into());
        let by_scorer: BTreeMap<String, _> = [(scorer_name, selection.results.clone())]
            .into_iter()
            .collect();
        let selected_ids: std::collections::HashSet<&str> = selection
            .results
            .iter()
            .map(|r| r.instruction_id.as_str())
            .collect();
        let report_pools: Vec<CandidatePool> = scored_pools
            .iter()
            .filter(|p| selected_ids.contains(p.instruction_id.as_str()))
            .cloned()
            .collect();
        let (matrix, summary) = report::summarize(&by_scorer, &report_pools)?;
        staging.write(artifacts::BREAKDOWN, matrix.to_csv().as_bytes())?;
        staging.write(
            artifacts::SUMMARY,
            &serde_json::to_vec_pretty(&summary).expect("summary serializes"),
        )?;
    }

    let ScoreStats {
        requests,
        cache_hits,
        ..
    } = scored.stats;
    let manifest = Manifest {
        tool_version: TOOL_VERSION.to_owned(),
        config_hash: config.hash(),
        scorer_id: scored.scorer_id,
        template_hash: template.hash(),
        strategy: config.strategy,
        counts: RunCounts {
            pools: pools.len(),
            pairs: overlap.total_pairs,
            scored_pools: scored_pools.len(),
            selected,
            score_failures,
            select_failures: selection.failures.len(),
            requests,
            cache_hits,
        },
        overlap,
        timestamp: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    let mut manifest_bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    manifest_bytes.write_all(b"\n").expect("vec write");
    staging.write(artifacts::MANIFEST, &manifest_bytes)?;
    staging.finish()?;

    let status = if errors.is_empty() {
        RunStatus::Complete
    } else {
        RunStatus::Partial
    };
    Ok(RunOutcome {
        status,
        manifest,
        output_dir: config.output_dir.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("a.jsonl");
        fs::write(
            &src,
            concat!(
                r#"{"source_id":"a","record_id":"1","instruction":"Q","response":"x","role_tag":"sft","reward":null}"#,
                "\n",
                r#"{"source_id":"a","record_id":"2","instruction":"Q","response":"yy","role_tag":"generated","reward":null}"#,
                "\n"
            ),
        )
        .unwrap();
        fs::write(dir.path().join("corpus.txt"), "xyxyxy").unwrap();
        (dir, src)
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let (dir, _) = setup();
        let text = r#"{"sources":["a.jsonl"],"backend":{"kind":"bigram","corpus":"corpus.txt"},"output_dir":"out"}"#;
        let c = validate_config_str(text, dir.path(), None).unwrap();
        assert_eq!(c.strategy.k, 1);
        assert_eq!(c.filter.min_candidates, 2);
        assert_eq!(c.max_inflight, 8);
        assert_eq!(c.sources[0], dir.path().join("a.jsonl"));
    }

    #[test]
    fn all_violations_are_reported() {
        let (dir, _) = setup();
        let text = r#"{"sources":["missing.jsonl"],"backend":{"kind":"bigram","corpus":"nope.txt"},"output_dir":"out","max_inflight":0}"#;
        match validate_config_str(text, dir.path(), None) {
            Err(ConfigError::Invalid(v)) => {
                assert_eq!(v.len(), 3, "{v:?}");
                assert!(v.iter().any(|m| m.contains("missing.jsonl")));
                assert!(v.iter().any(|m| m.contains("nope.txt")));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn reward_strategy_is_accepted_without_data_checks() {
        let (dir, _) = setup();
        let text = r#"{"sources":["a.jsonl"],"backend":{"kind":"bigram","corpus":"corpus.txt"},"output_dir":"out","strategy":{"kind":"reward"}}"#;
        assert!(validate_config_str(text, dir.path(), None).is_ok());
    }

    #[test]
    fn parse_errors_and_unknown_fields() {
        let (dir, _) = setup();
        assert!(matches!(
            validate_config_str("{", dir.path(), None),
            Err(ConfigError::Parse(_))
        ));
        let text = r#"{"sources":["a.jsonl"],"backend":{"kind":"bigram","corpus":"corpus.txt"},"output_dir":"out","colour":"red"}"#;
        assert!(matches!(
            validate_config_str(text, dir.path(), None),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn cache_override_wins() {
        let (dir, _) = setup();
        let text = r#"{"sources":["a.jsonl"],"backend":{"kind":"bigram","corpus":"corpus.txt"},"output_dir":"out","cache_dir":"c1"}"#;
        let c = validate_config_str(text, dir.path(), Some(dir.path().join("c2"))).unwrap();
        assert_eq!(c.cache_dir, Some(dir.path().join("c2")));
    }

    #[test]
    fn failed_stage_leaves_partial_artifacts() {
        let (dir, src) = setup();
        let text = r#"{"sources":["a.jsonl"],"backend":{"kind":"bigram","corpus":"corpus.txt"},"output_dir":"out","strategy":{"kind":"reward"}}"#;
        let config = validate_config_str(text, dir.path(), None).unwrap();
        // reward strategy fails per pool (no rewards): a partial run, not an abort
        let outcome = run(&config).unwrap();
        assert_eq!(outcome.status, RunStatus::Partial);
        let errors = fs::read_to_string(dir.path().join("out").join(artifacts::ERRORS)).unwrap();
        assert!(errors.contains("no reward"));

        // a malformed source discovered mid-run aborts and keeps .partial files
        fs::write(&src, "{oops\n").unwrap();
        let out2 = dir.path().join("out2");
        let mut config = config;
        config.output_dir = out2.clone();
        assert!(matches!(run(&config), Err(PipelineError::Ingest(_))));
        assert!(!out2.join(artifacts::MANIFEST).exists());
    }
}
