//! Response scoring under a target base model.
//!
//! A [`ScorerBackend`] turns a rendered prompt plus a completion into
//! per-token natural-log probabilities. The [`Scorer`] owns request fan-out,
//! retries, the on-disk cache and deterministic reassembly: results always
//! come back in pool candidate order no matter which request finished first.

mod bigram;
mod cache;
mod http;
mod logprob_file;

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CandidatePool;
use crate::hash::content_id;

pub use bigram::{BigramModel, ALPHABET};
pub use cache::ScoreCache;
pub use http::{HttpBackend, HttpBackendConfig, ScoreRequestBody, ScoreResponseBody};
pub use logprob_file::{
    read_logprob_file, write_logprob_file, FileBackend, FormatError, LogprobRecord,
};

/// Absolute tolerance between a stored total and the sum of its token logprobs.
pub const TOTAL_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("no answer tokens")]
    NoAnswerTokens,
    #[error("non-finite logprob at answer token {index}")]
    NonFiniteLogprob { index: usize },
    #[error("perplexity overflows f64 (normalized logprob {normalized})")]
    PerplexityOverflow { normalized: f64 },
    #[error("response {response_id}: backend failed after {attempts} attempt(s): {message}")]
    Backend {
        response_id: String,
        attempts: usize,
        message: String,
    },
    #[error("response {response_id}: {source}")]
    Invalid {
        response_id: String,
        #[source]
        source: Box<ScoreError>,
    },
    #[error("mixed scorer ids in one run: {expected:?} and {found:?}")]
    ScorerMismatch { expected: String, found: String },
    #[error("invalid template: {0}")]
    Template(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("backend configuration: {0}")]
    Config(String),
}

/// Identifiers attached to a finalized score.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ScoreIds {
    pub instruction_id: String,
    pub response_id: String,
    pub scorer_id: String,
    pub template_hash: String,
}

/// Per-response log-likelihood summary. Only completion tokens are counted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredResponse {
    pub instruction_id: String,
    pub response_id: String,
    pub scorer_id: String,
    pub template_hash: String,
    pub answer_token_logprobs: Vec<f64>,
    pub n_tokens: usize,
    pub total_logprob: f64,
    pub normalized_logprob: f64,
    pub perplexity: f64,
}

pub fn finalize_score(raw: Vec<f64>, ids: ScoreIds) -> Result<ScoredResponse, ScoreError> {
    let total = raw.iter().sum();
    finalize_with_total(raw, total, ids)
}

fn finalize_with_total(
    raw: Vec<f64>,
    total_logprob: f64,
    ids: ScoreIds,
) -> Result<ScoredResponse, ScoreError> {
    if raw.is_empty() {
        return Err(ScoreError::NoAnswerTokens);
    }
    if let Some(index) = raw.iter().position(|v| !v.is_finite()) {
        return Err(ScoreError::NonFiniteLogprob { index });
    }
    let n_tokens = raw.len();
    let normalized_logprob = total_logprob / n_tokens as f64;
    let perplexity = (-normalized_logprob).exp();
    if !perplexity.is_finite() {
        return Err(ScoreError::PerplexityOverflow {
            normalized: normalized_logprob,
        });
    }
    Ok(ScoredResponse {
        instruction_id: ids.instruction_id,
        response_id: ids.response_id,
        scorer_id: ids.scorer_id,
        template_hash: ids.template_hash,
        answer_token_logprobs: raw,
        n_tokens,
        total_logprob,
        normalized_logprob,
        perplexity,
    })
}

/// Prompt template with a single `{instruction}` placeholder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    text: String,
}

impl Template {
    pub const PLACEHOLDER: &'static str = "{instruction}";
    pub const DEFAULT: &'static str = "Question: {instruction}\nAnswer: ";

    pub fn new(text: impl Into<String>) -> Result<Self, ScoreError> {
        let text = text.into();
        match text.matches(Self::PLACEHOLDER).count() {
            1 => Ok(Self { text }),
            n => Err(ScoreError::Template(format!(
                "expected exactly one {} placeholder, found {n}",
                Self::PLACEHOLDER
            ))),
        }
    }

    /// Reads a template file verbatim (no trimming; trailing newlines matter).
    pub fn from_file(path: &Path) -> Result<Self, ScoreError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::new(text)
    }

    pub fn render(&self, instruction: &str) -> String {
        self.text.replacen(Self::PLACEHOLDER, instruction, 1)
    }

    pub fn hash(&self) -> String {
        content_id(self.text.as_bytes())
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }
}

impl Default for Template {
    fn default() -> Self {
        Self {
            text: Self::DEFAULT.to_owned(),
        }
    }
}

pub fn render_prompt(instruction: &str) -> String {
    Template::default().render(instruction)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub prompt: String,
    pub completion: String,
}

/// Which candidate a request belongs to. Offline backends look scores up by it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CandidateKey {
    pub instruction_id: String,
    pub response_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendScore {
    pub scorer_id: String,
    /// Logprobs returned by the backend. Entries before `answer_start` belong
    /// to the prompt and are discarded.
    pub token_logprobs: Vec<f64>,
    pub answer_start: usize,
    /// A precomputed total to keep instead of re-summing (offline scores).
    pub total_logprob: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendError {
    pub message: String,
    pub retryable: bool,
}

impl BackendError {
    pub fn retryable(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            retryable: true,
        }
    }

    pub fn fatal(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            retryable: false,
        }
    }
}

impl fmt::Display for BackendError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub trait ScorerBackend: Send + Sync {
    /// The scorer identity, when it is known before any request is made.
    fn scorer_id(&self) -> Option<String>;

    fn score(
        &self,
        key: &CandidateKey,
        request: &ScoreRequest,
    ) -> Result<BackendScore, BackendError>;

    /// Backends that must not be called concurrently return `false`; the
    /// scorer then issues one request at a time.
    fn concurrent(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: usize,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    fn delay_before(&self, attempt: usize) -> Duration {
        // attempt is 1-based; no delay before the first try
        self.base_delay * 2u32.saturating_pow(attempt.saturating_sub(2) as u32)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ScoreStats {
    pub requests: usize,
    pub cache_hits: usize,
    pub failed_pools: usize,
}

#[derive(Debug)]
pub struct PoolScores {
    /// One entry per input pool, in input order.
    pub pools: Vec<Result<Vec<ScoredResponse>, ScoreError>>,
    pub scorer_id: Option<String>,
    pub stats: ScoreStats,
}

pub struct Scorer<'a> {
    backend: &'a dyn ScorerBackend,
    template: Template,
    max_inflight: usize,
    retry: RetryPolicy,
    cache_dir: Option<PathBuf>,
}

impl<'a> Scorer<'a> {
    pub fn new(backend: &'a dyn ScorerBackend, template: Template) -> Self {
        Self {
            backend,
            template,
            max_inflight: 8,
            retry: RetryPolicy::default(),
            cache_dir: None,
        }
    }

    pub fn max_inflight(mut self, n: usize) -> Self {
        self.max_inflight = n.max(1);
        self
    }

    pub fn retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn cache_dir(mut self, dir: Option<PathBuf>) -> Self {
        self.cache_dir = dir;
        self
    }

    pub fn template(&self) -> &Template {
        &self.template
    }

    pub fn score_pool(&self, pool: &CandidatePool) -> Result<Vec<ScoredResponse>, ScoreError> {
        let mut out = self.score_pools(std::slice::from_ref(pool))?;
        out.pools.pop().expect("one pool in, one result out")
    }

    /// Scores every candidate of every pool. A failing candidate fails its
    /// pool; other pools are unaffected. The outer error is reserved for
    /// cache and setup failures.
    pub fn score_pools(&self, pools: &[CandidatePool]) -> Result<PoolScores, ScoreError> {
        let template_hash = self.template.hash();
        let known_id = self.backend.scorer_id();
        let cache = match (&self.cache_dir, &known_id) {
            (Some(dir), Some(id)) => Some(ScoreCache::open(dir, id, &template_hash)?),
            _ => None,
        };

        let jobs: Vec<(usize, usize)> = pools
            .iter()
            .enumerate()
            .flat_map(|(p, pool)| (0..pool.candidates.len()).map(move |c| (p, c)))
            .collect();

        let scorer_id = Mutex::new(known_id);
        let requests = AtomicUsize::new(0);
        let cache_hits = AtomicUsize::new(0);
        let fresh = Mutex::new(Vec::new());

        let run_job = |&(p, c): &(usize, usize)| -> Result<ScoredResponse, ScoreError> {
            let pool = &pools[p];
            let candidate = &pool.candidates[c];
            if let Some(hit) = cache
                .as_ref()
                .and_then(|cache| cache.get(&pool.instruction_id, &candidate.response_id))
            {
                cache_hits.fetch_add(1, Ordering::Relaxed);
                return Ok(hit.clone());
            }
            let key = CandidateKey {
                instruction_id: pool.instruction_id.clone(),
                response_id: candidate.response_id.clone(),
            };
            let request = ScoreRequest {
                prompt: self.template.render(&pool.instruction),
                completion: candidate.response.clone(),
            };
            let raw = self.request_with_retry(&key, &request, &requests)?;
            {
                let mut id = scorer_id.lock().expect("scorer id lock");
                match id.as_deref() {
                    Some(expected) if expected != raw.scorer_id => {
                        return Err(ScoreError::ScorerMismatch {
                            expected: expected.to_owned(),
                            found: raw.scorer_id,
                        })
                    }
                    Some(_) => {}
                    None => *id = Some(raw.scorer_id.clone()),
                }
            }
            let answer = raw
                .token_logprobs
                .get(raw.answer_start..)
                .map(<[f64]>::to_vec)
                .unwrap_or_default();
            let ids = ScoreIds {
                instruction_id: key.instruction_id,
                response_id: key.response_id.clone(),
                scorer_id: raw.scorer_id,
                template_hash: template_hash.clone(),
            };
            let scored = match raw.total_logprob {
                Some(total) if within_total_tolerance(&answer, total) => {
                    finalize_with_total(answer, total, ids)
                }
                _ => finalize_score(answer, ids),
            }
            .map_err(|e| ScoreError::Invalid {
                response_id: key.response_id,
                source: Box::new(e),
            })?;
            fresh.lock().expect("fresh lock").push(scored.clone());
            Ok(scored)
        };

        let threads = if self.backend.concurrent() {
            self.max_inflight
        } else {
            1
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| ScoreError::Config(e.to_string()))?;
        let mut results: Vec<Result<ScoredResponse, ScoreError>> =
            pool.install(|| jobs.par_iter().map(run_job).collect());

        // reassemble per pool in candidate order
        let mut per_pool = Vec::with_capacity(pools.len());
        let mut drained = results.drain(..);
        let mut failed = 0;
        for pool in pools {
            let mut scores = Vec::with_capacity(pool.candidates.len());
            let mut error = None;
            for r in drained.by_ref().take(pool.candidates.len()) {
                match r {
                    Ok(s) => scores.push(s),
                    Err(e) => {
                        if error.is_none() {
                            error = Some(e);
                        }
                    }
                }
            }
            per_pool.push(match error {
                Some(e) => {
                    failed += 1;
                    log::warn!("pool {} failed: {e}", pool.instruction_id);
                    Err(e)
                }
                None => Ok(scores),
            });
        }

        let scorer_id = scorer_id.into_inner().expect("scorer id lock");
        let fresh = fresh.into_inner().expect("fresh lock");
        if let (Some(dir), Some(id)) = (&self.cache_dir, &scorer_id) {
            if !fresh.is_empty() {
                let mut cache = match cache {
                    Some(c) => c,
                    None => ScoreCache::open(dir, id, &template_hash)?,
                };
                cache.extend(fresh);
                cache.persist()?;
            }
        }

        Ok(PoolScores {
            pools: per_pool,
            scorer_id,
            stats: ScoreStats {
                requests: requests.into_inner(),
                cache_hits: cache_hits.into_inner(),
                failed_pools: failed,
            },
        })
    }

    fn request_with_retry(
        &self,
        key: &CandidateKey,
        request: &ScoreRequest,
        requests: &AtomicUsize,
    ) -> Result<BackendScore, ScoreError> {
        let attempts = self.retry.attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            if attempt > 1 {
                std::thread::sleep(self.retry.delay_before(attempt));
            }
            requests.fetch_add(1, Ordering::Relaxed);
            match self.backend.score(key, request) {
                Ok(score) => return Ok(score),
                Err(e) => {
                    log::debug!(
                        "response {} attempt {attempt}/{attempts}: {e}",
                        key.response_id
                    );
                    if !e.retryable {
                        return Err(ScoreError::Backend {
                            response_id: key.response_id.clone(),
                            attempts: attempt,
                            message: e.message,
                        });
                    }
                    last = e.message;
                }
            }
        }
        Err(ScoreError::Backend {
            response_id: key.response_id.clone(),
            attempts,
            message: last,
        })
    }
}

fn within_total_tolerance(values: &[f64], total: f64) -> bool {
    (values.iter().sum::<f64>() - total).abs() <= TOTAL_TOLERANCE
}

/// Scores one pool with default fan-out and retry settings.
pub fn score_pool(
    pool: &CandidatePool,
    backend: &dyn ScorerBackend,
    template: &Template,
) -> Result<Vec<ScoredResponse>, ScoreError> {
    Scorer::new(backend, template.clone()).score_pool(pool)
}
