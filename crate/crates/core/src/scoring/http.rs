//! Client for the `/v1/score` protocol.
//!
//! ```text
//! POST /v1/score   {"prompt": str, "completion": str}
//! 200              {"token_logprobs": [float], "n_prompt_tokens": int, "model_id": str}
//! ```
//!
//! `token_logprobs` covers completion tokens only. Any non-200 status and any
//! transport failure (including timeouts) is retryable.

use std::time::Duration;

use reqwest::blocking::Client;
use serde::{Deserialize, Serialize};

use super::{BackendError, BackendScore, CandidateKey, ScoreError, ScoreRequest, ScorerBackend};

pub const SCORE_PATH: &str = "/v1/score";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequestBody {
    pub prompt: String,
    pub completion: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponseBody {
    pub token_logprobs: Vec<f64>,
    pub n_prompt_tokens: usize,
    pub model_id: String,
}

#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    /// Base URL (`http://host:port`) or the full `/v1/score` URL.
    pub endpoint: String,
    pub timeout: Duration,
    /// When set, responses from any other model are rejected and the score
    /// cache can be consulted before the first request.
    pub expected_model_id: Option<String>,
}

impl HttpBackendConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout: Duration::from_secs(60),
            expected_model_id: None,
        }
    }
}

#[derive(Debug)]
pub struct HttpBackend {
    client: Client,
    url: String,
    expected_model_id: Option<String>,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, ScoreError> {
        let client = Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| ScoreError::Config(format!("http client: {e}")))?;
        let base = config.endpoint.trim_end_matches('/');
        let url = if base.ends_with(SCORE_PATH) {
            base.to_owned()
        } else {
            format!("{base}{SCORE_PATH}")
        };
        Ok(Self {
            client,
            url,
            expected_model_id: config.expected_model_id,
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

impl ScorerBackend for HttpBackend {
    fn scorer_id(&self) -> Option<String> {
        self.expected_model_id.clone()
    }

    fn score(
        &self,
        _: &CandidateKey,
        request: &ScoreRequest,
    ) -> Result<BackendScore, BackendError> {
        let body = ScoreRequestBody {
            prompt: request.prompt.clone(),
            completion: request.completion.clone(),
        };
        let response = self
            .client
            .post(&self.url)
            .json(&body)
            .send()
            .map_err(|e| BackendError::retryable(format!("request failed: {e}")))?;
        let status = response.status();
        if !status.is_success() {
            let text = response.text().unwrap_or_default();
            return Err(BackendError::retryable(format!("HTTP {status}: {text}")));
        }
        let parsed: ScoreResponseBody = response
            .json()
            .map_err(|e| BackendError::retryable(format!("bad response body: {e}")))?;
        Ok(BackendScore {
            scorer_id: parsed.model_id,
            token_logprobs: parsed.token_logprobs,
            answer_start: 0,
            total_logprob: None,
        })
    }
}
