//! On-disk score cache.
//!
//! One Logprob File per `(scorer_id, template_hash)` under the cache
//! directory, keyed in memory by `(instruction_id, response_id)`. Rewrites go
//! through a temporary file and a rename.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::{read_logprob_file, write_logprob_file, ScoreError, ScoredResponse};
use crate::hash::content_id;

#[derive(Debug)]
pub struct ScoreCache {
    path: PathBuf,
    entries: BTreeMap<(String, String), ScoredResponse>,
}

impl ScoreCache {
    pub fn path_for(dir: &Path, scorer_id: &str, template_hash: &str) -> PathBuf {
        dir.join(format!(
            "scores-{}-{template_hash}.jsonl",
            content_id(scorer_id.as_bytes())
        ))
    }

    pub fn open(dir: &Path, scorer_id: &str, template_hash: &str) -> Result<Self, ScoreError> {
        let path = Self::path_for(dir, scorer_id, template_hash);
        let mut entries = BTreeMap::new();
        if path.exists() {
            for s in read_logprob_file(&path)? {
                if s.scorer_id == scorer_id && s.template_hash == template_hash {
                    entries.insert((s.instruction_id.clone(), s.response_id.clone()), s);
                }
            }
        }
        Ok(Self { path, entries })
    }

    pub fn get(&self, instruction_id: &str, response_id: &str) -> Option<&ScoredResponse> {
        self.entries
            .get(&(instruction_id.to_owned(), response_id.to_owned()))
    }

    pub fn extend(&mut self, scores: impl IntoIterator<Item = ScoredResponse>) {
        for s in scores {
            self.entries
                .insert((s.instruction_id.clone(), s.response_id.clone()), s);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn persist(&self) -> Result<(), ScoreError> {
        let scores: Vec<ScoredResponse> = self.entries.values().cloned().collect();
        write_logprob_file(&self.path, &scores).map_err(|source| ScoreError::Io {
            path: self.path.clone(),
            source,
        })
    }
}
