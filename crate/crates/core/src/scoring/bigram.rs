//! Byte-level bigram model with add-one smoothing.
//!
//! A small deterministic stand-in for a real base model: one token per byte,
//! `P(b | a) = (count(a, b) + 1) / (count(a) + 256)` where `count(a)` counts
//! occurrences of `a` as the left byte of a bigram. The first completion byte
//! is conditioned on the last prompt byte.

use std::io::Read;

use super::{BackendError, BackendScore, CandidateKey, ScoreError, ScoreRequest, ScorerBackend};
use crate::hash::Fnv1a64;

pub const ALPHABET: usize = 256;

#[derive(Clone)]
pub struct BigramModel {
    pairs: Vec<u64>,
    left: [u64; ALPHABET],
    scorer_id: String,
}

impl std::fmt::Debug for BigramModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BigramModel")
            .field("scorer_id", &self.scorer_id)
            .field("bigrams", &self.left.iter().sum::<u64>())
            .finish()
    }
}

impl BigramModel {
    /// All counts zero: every byte has probability 1/256.
    pub fn untrained() -> Self {
        Self {
            pairs: vec![0; ALPHABET * ALPHABET],
            left: [0; ALPHABET],
            scorer_id: "bigram-untrained".into(),
        }
    }

    pub fn train(corpus: &[u8]) -> Result<Self, ScoreError> {
        Self::train_reader(corpus)
    }

    /// Streams the corpus; memory use is independent of its size.
    pub fn train_reader<R: Read>(mut reader: R) -> Result<Self, ScoreError> {
        let mut model = Self::untrained();
        let mut hasher = Fnv1a64::new();
        let mut buf = [0u8; 64 * 1024];
        let mut prev: Option<u8> = None;
        let mut total = 0usize;
        loop {
            let n = reader.read(&mut buf).map_err(|source| ScoreError::Io {
                path: "<bigram corpus>".into(),
                source,
            })?;
            if n == 0 {
                break;
            }
            total += n;
            hasher.update(&buf[..n]);
            for &b in &buf[..n] {
                if let Some(a) = prev {
                    model.pairs[usize::from(a) * ALPHABET + usize::from(b)] += 1;
                    model.left[usize::from(a)] += 1;
                }
                prev = Some(b);
            }
        }
        if total == 0 {
            return Err(ScoreError::Config("bigram corpus is empty".into()));
        }
        model.scorer_id = format!("bigram-{:016x}", hasher.finish());
        Ok(model)
    }

    pub fn pair_count(&self, prev: u8, next: u8) -> u64 {
        self.pairs[usize::from(prev) * ALPHABET + usize::from(next)]
    }

    pub fn left_count(&self, prev: u8) -> u64 {
        self.left[usize::from(prev)]
    }

    /// `P(next | prev)`; with no preceding byte the distribution is uniform.
    pub fn prob(&self, prev: Option<u8>, next: u8) -> f64 {
        match prev {
            Some(a) => {
                (self.pair_count(a, next) + 1) as f64
                    / (self.left_count(a) + ALPHABET as u64) as f64
            }
            None => 1.0 / ALPHABET as f64,
        }
    }

    pub fn log_prob(&self, prev: Option<u8>, next: u8) -> f64 {
        self.prob(prev, next).ln()
    }

    pub fn completion_logprobs(&self, prompt: &[u8], completion: &[u8]) -> Vec<f64> {
        let mut prev = prompt.last().copied();
        completion
            .iter()
            .map(|&b| {
                let lp = self.log_prob(prev, b);
                prev = Some(b);
                lp
            })
            .collect()
    }

    pub fn id(&self) -> &str {
        &self.scorer_id
    }
}

impl ScorerBackend for BigramModel {
    fn scorer_id(&self) -> Option<String> {
        Some(self.scorer_id.clone())
    }

    fn score(
        &self,
        _: &CandidateKey,
        request: &ScoreRequest,
    ) -> Result<BackendScore, BackendError> {
        Ok(BackendScore {
            scorer_id: self.scorer_id.clone(),
            token_logprobs: self
                .completion_logprobs(request.prompt.as_bytes(), request.completion.as_bytes()),
            answer_start: 0,
            total_logprob: None,
        })
    }
}
