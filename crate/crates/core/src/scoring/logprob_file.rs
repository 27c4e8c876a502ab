//! The Logprob File: one JSON record per scored response, natural-log values.
//!
//! ```text
//! {"scorer_id": str, "instruction_id": str, "response_id": str,
//!  "template_hash": str, "answer_token_logprobs": [float, ...],
//!  "total_logprob": float}
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    finalize_with_total, within_total_tolerance, BackendError, BackendScore, CandidateKey,
    ScoreIds, ScoreRequest, ScoredResponse, ScorerBackend,
};
use crate::io::AtomicFile;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogprobRecord {
    pub scorer_id: String,
    pub instruction_id: String,
    pub response_id: String,
    pub template_hash: String,
    pub answer_token_logprobs: Vec<f64>,
    pub total_logprob: f64,
}

impl From<&ScoredResponse> for LogprobRecord {
    fn from(s: &ScoredResponse) -> Self {
        Self {
            scorer_id: s.scorer_id.clone(),
            instruction_id: s.instruction_id.clone(),
            response_id: s.response_id.clone(),
            template_hash: s.template_hash.clone(),
            answer_token_logprobs: s.answer_token_logprobs.clone(),
            total_logprob: s.total_logprob,
        }
    }
}

impl LogprobRecord {
    /// Checks the record against the score invariants. The stored total is
    /// kept as-is so that re-writing the file reproduces the same values.
    pub fn into_scored(self) -> Result<ScoredResponse, String> {
        if !self.total_logprob.is_finite() {
            return Err("total_logprob is not finite".into());
        }
        if !within_total_tolerance(&self.answer_token_logprobs, self.total_logprob) {
            let sum: f64 = self.answer_token_logprobs.iter().sum();
            return Err(format!(
                "total_logprob {} differs from token sum {sum}",
                self.total_logprob
            ));
        }
        let ids = ScoreIds {
            instruction_id: self.instruction_id,
            response_id: self.response_id,
            scorer_id: self.scorer_id,
            template_hash: self.template_hash,
        };
        finalize_with_total(self.answer_token_logprobs, self.total_logprob, ids)
            .map_err(|e| e.to_string())
    }
}

pub fn read_logprob_file(path: &Path) -> Result<Vec<ScoredResponse>, FormatError> {
    let io_err = |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| FormatError::Record {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let record: LogprobRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        out.push(record.into_scored().map_err(bad)?);
    }
    Ok(out)
}

pub fn write_logprob_file(path: &Path, scores: &[ScoredResponse]) -> std::io::Result<()> {
    let mut out = BufWriter::new(AtomicFile::create(path)?);
    for s in scores {
        serde_json::to_writer(&mut out, &LogprobRecord::from(s))?;
        out.write_all(b"\n")?;
    }
    out.into_inner().map_err(|e| e.into_error())?.commit()
}

/// Offline backend serving scores from a Logprob File produced elsewhere.
#[derive(Debug)]
pub struct FileBackend {
    scorer_id: String,
    template_hash: String,
    records: HashMap<(String, String), ScoredResponse>,
}

impl FileBackend {
    /// Loads `path`, keeping the records written for `template_hash`. All
    /// records must share one scorer id.
    pub fn open(path: &Path, template_hash: &str) -> Result<Self, FormatError> {
        let scores = read_logprob_file(path)?;
        Self::from_scores(scores, template_hash).map_err(|message| FormatError::File {
            path: path.to_path_buf(),
            message,
        })
    }

    pub fn from_scores(scores: Vec<ScoredResponse>, template_hash: &str) -> Result<Self, String> {
        let mut scorer_id: Option<String> = None;
        let mut records = HashMap::new();
        for s in scores {
            match &scorer_id {
                Some(id) if *id != s.scorer_id => {
                    return Err(format!("mixed scorer ids {id:?} and {:?}", s.scorer_id))
                }
                Some(_) => {}
                None => scorer_id = Some(s.scorer_id.clone()),
            }
            if s.template_hash == template_hash {
                records.insert((s.instruction_id.clone(), s.response_id.clone()), s);
            }
        }
        let scorer_id = scorer_id.ok_or_else(|| "logprob file has no records".to_string())?;
        Ok(Self {
            scorer_id,
            template_hash: template_hash.to_owned(),
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl ScorerBackend for FileBackend {
    fn scorer_id(&self) -> Option<String> {
        Some(self.scorer_id.clone())
    }

    fn score(&self, key: &CandidateKey, _: &ScoreRequest) -> Result<BackendScore, BackendError> {
        let record = self
            .records
            .get(&(key.instruction_id.clone(), key.response_id.clone()))
            .ok_or_else(|| {
                BackendError::fatal(format!(
                    "no record for instruction {} response {} under template {}",
                    key.instruction_id, key.response_id, self.template_hash
                ))
            })?;
        Ok(BackendScore {
            scorer_id: record.scorer_id.clone(),
            token_logprobs: record.answer_token_logprobs.clone(),
            answer_start: 0,
            total_logprob: Some(record.total_logprob),
        })
    }
}
