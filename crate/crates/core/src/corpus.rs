//! Multi-source ingestion and candidate pooling.
//!
//! Records from every source file are grouped by the hash of their canonical
//! instruction. Within a group, exact-duplicate responses collapse to their
//! first occurrence, and groups with fewer than `min_candidates` distinct
//! responses are dropped. Candidate order is ingestion order (file order,
//! then line order); selection tie-breaking relies on it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::hash::content_id;
use crate::io::AtomicFile;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid UTF-8: {0}")]
    Utf8(#[from] std::str::Utf8Error),
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: duplicate record_id {record_id:?} in source {source_id:?}")]
    DuplicateRecordId {
        path: PathBuf,
        line: usize,
        source_id: String,
        record_id: String,
    },
    #[error("FNV-1a-64 collision on id {id}: {first:?} vs {second:?}")]
    HashCollision {
        id: String,
        first: String,
        second: String,
    },
    #[error("invalid pool filter: {0}")]
    InvalidFilter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleTag {
    Sft,
    PreferenceWinner,
    PreferenceLoser,
    Generated,
}

impl RoleTag {
    pub fn as_str(self) -> &'static str {
        match self {
            RoleTag::Sft => "sft",
            RoleTag::PreferenceWinner => "preference_winner",
            RoleTag::PreferenceLoser => "preference_loser",
            RoleTag::Generated => "generated",
        }
    }
}

impl fmt::Display for RoleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One instruction/response pair as it appears in a source file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRecord {
    pub source_id: String,
    pub record_id: String,
    pub instruction: String,
    pub response: String,
    pub role_tag: RoleTag,
    #[serde(default)]
    pub reward: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub response_id: String,
    pub response: String,
    pub source_id: String,
    pub role_tag: RoleTag,
    pub reward: Option<f64>,
}

/// An instruction together with every distinct response collected for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub instruction_id: String,
    pub instruction: String,
    pub candidates: Vec<Candidate>,
}

impl CandidatePool {
    pub fn candidate(&self, response_id: &str) -> Option<&Candidate> {
        self.candidates
            .iter()
            .find(|c| c.response_id == response_id)
    }

    pub fn position(&self, response_id: &str) -> Option<usize> {
        self.candidates
            .iter()
            .position(|c| c.response_id == response_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolFilterConfig {
    pub min_candidates: usize,
    pub keep_roles: BTreeSet<RoleTag>,
    pub drop_losers: bool,
}

impl Default for PoolFilterConfig {
    fn default() -> Self {
        Self {
            min_candidates: 2,
            keep_roles: [RoleTag::Sft, RoleTag::PreferenceWinner, RoleTag::Generated]
                .into_iter()
                .collect(),
            drop_losers: true,
        }
    }
}

impl PoolFilterConfig {
    pub fn validate(&self) -> Result<(), IngestError> {
        if self.min_candidates == 0 {
            return Err(IngestError::InvalidFilter(
                "min_candidates must be at least 1".into(),
            ));
        }
        Ok(())
    }

    fn admits(&self, role: RoleTag) -> bool {
        if self.drop_losers && role == RoleTag::PreferenceLoser {
            return false;
        }
        self.keep_roles.contains(&role)
    }
}

/// Strips surrounding whitespace and normalizes CRLF / CR line endings to LF.
pub fn canonicalize(text: &str) -> String {
    let normalized = if text.contains('\r') {
        text.replace("\r\n", "\n").replace('\r', "\n")
    } else {
        text.to_owned()
    };
    normalized.trim().to_owned()
}

pub fn canonicalize_bytes(bytes: &[u8]) -> Result<String, IngestError> {
    Ok(canonicalize(std::str::from_utf8(bytes)?))
}

#[derive(Debug, Default)]
struct PartialPool {
    instruction: String,
    candidates: Vec<Candidate>,
    seen: HashMap<String, usize>,
}

impl PartialPool {
    fn push(&mut self, candidate: Candidate) -> Result<(), IngestError> {
        if let Some(&idx) = self.seen.get(&candidate.response_id) {
            let existing = &self.candidates[idx];
            if existing.response != candidate.response {
                return Err(IngestError::HashCollision {
                    id: candidate.response_id,
                    first: existing.response.clone(),
                    second: candidate.response,
                });
            }
            return Ok(());
        }
        self.seen
            .insert(candidate.response_id.clone(), self.candidates.len());
        self.candidates.push(candidate);
        Ok(())
    }
}

/// Everything one source file contributes, in line order.
#[derive(Debug, Default)]
struct FileContribution {
    path: PathBuf,
    order: Vec<String>,
    pools: HashMap<String, PartialPool>,
    record_ids: HashMap<(String, String), usize>,
}

impl FileContribution {
    fn add(&mut self, record: SourceRecord, filter: &PoolFilterConfig) -> Result<(), IngestError> {
        if !filter.admits(record.role_tag) {
            return Ok(());
        }
        let instruction_id = content_id(record.instruction.as_bytes());
        let candidate = Candidate {
            response_id: content_id(record.response.as_bytes()),
            response: record.response,
            source_id: record.source_id,
            role_tag: record.role_tag,
            reward: record.reward,
        };
        let pool = match self.pools.get_mut(&instruction_id) {
            Some(pool) => {
                if pool.instruction != record.instruction {
                    return Err(IngestError::HashCollision {
                        id: instruction_id,
                        first: pool.instruction.clone(),
                        second: record.instruction,
                    });
                }
                pool
            }
            None => {
                self.order.push(instruction_id.clone());
                self.pools.entry(instruction_id).or_insert(PartialPool {
                    instruction: record.instruction,
                    ..PartialPool::default()
                })
            }
        };
        pool.push(candidate)
    }
}

fn parse_file(path: &Path, filter: &PoolFilterConfig) -> Result<FileContribution, IngestError> {
    let io_err = |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut contribution = FileContribution {
        path: path.to_path_buf(),
        ..FileContribution::default()
    };
    let mut buf = Vec::new();
    let mut line_no = 0usize;
    loop {
        buf.clear();
        if reader.read_until(b'\n', &mut buf).map_err(io_err)? == 0 {
            break;
        }
        line_no += 1;
        let malformed = |message: String| IngestError::Malformed {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let text =
            std::str::from_utf8(&buf).map_err(|e| malformed(format!("invalid UTF-8: {e}")))?;
        if text.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
        for record in records_from_line(value).map_err(malformed)? {
            let record = validate_record(record).map_err(malformed)?;
            let key = (record.source_id.clone(), record.record_id.clone());
            if contribution.record_ids.contains_key(&key) {
                return Err(IngestError::DuplicateRecordId {
                    path: path.to_path_buf(),
                    line: line_no,
                    source_id: key.0,
                    record_id: key.1,
                });
            }
            contribution.record_ids.insert(key, line_no);
            contribution.add(record, filter)?;
        }
    }
    Ok(contribution)
}

/// Accepts source records, pool-export lines and SFT-export lines so that the
/// tool's own outputs can be fed back in as sources.
fn records_from_line(value: Value) -> Result<Vec<SourceRecord>, String> {
    let obj = value.as_object().ok_or("expected a JSON object")?;
    if obj.contains_key("candidates") {
        let pool: CandidatePool = serde_json::from_value(value).map_err(|e| e.to_string())?;
        let instruction_id = content_id(pool.instruction.as_bytes());
        return Ok(pool
            .candidates
            .into_iter()
            .map(|c| SourceRecord {
                source_id: c.source_id,
                record_id: format!("{instruction_id}:{}", c.response_id),
                instruction: pool.instruction.clone(),
                response: c.response,
                role_tag: c.role_tag,
                reward: c.reward,
            })
            .collect());
    }
    if obj.contains_key("strategy") && !obj.contains_key("record_id") {
        #[derive(Deserialize)]
        struct ExportLine {
            instruction: String,
            response: String,
            source_id: String,
        }
        let line: ExportLine = serde_json::from_value(value).map_err(|e| e.to_string())?;
        let record_id = format!(
            "{}:{}",
            content_id(line.instruction.as_bytes()),
            content_id(line.response.as_bytes())
        );
        return Ok(vec![SourceRecord {
            source_id: line.source_id,
            record_id,
            instruction: line.instruction,
            response: line.response,
            role_tag: RoleTag::Sft,
            reward: None,
        }]);
    }
    let record: SourceRecord = serde_json::from_value(value).map_err(|e| e.to_string())?;
    Ok(vec![record])
}

fn validate_record(mut record: SourceRecord) -> Result<SourceRecord, String> {
    record.instruction = canonicalize(&record.instruction);
    record.response = canonicalize(&record.response);
    if record.instruction.is_empty() {
        return Err("instruction is empty after canonicalization".into());
    }
    if record.response.is_empty() {
        return Err("response is empty after canonicalization".into());
    }
    if matches!(record.reward, Some(r) if !r.is_finite()) {
        return Err("reward is not finite".into());
    }
    Ok(record)
}

/// Reads every source, pools responses by instruction and applies `filter`.
///
/// Files are parsed in parallel; the merge walks them in the given order so
/// the result does not depend on scheduling. Pools come back sorted by
/// `instruction_id`.
pub fn ingest<P: AsRef<Path> + Sync>(
    sources: &[P],
    filter: &PoolFilterConfig,
) -> Result<Vec<CandidatePool>, IngestError> {
    filter.validate()?;
    let contributions: Vec<FileContribution> = sources
        .par_iter()
        .map(|p| parse_file(p.as_ref(), filter))
        .collect::<Result<_, _>>()?;

    let mut pools: BTreeMap<String, PartialPool> = BTreeMap::new();
    let mut record_ids: HashMap<(String, String), PathBuf> = HashMap::new();
    for mut contribution in contributions {
        for (key, line) in contribution.record_ids.drain() {
            if let Some(first) = record_ids.get(&key) {
                log::debug!("record {key:?} first seen in {}", first.display());
                return Err(IngestError::DuplicateRecordId {
                    path: contribution.path.clone(),
                    line,
                    source_id: key.0,
                    record_id: key.1,
                });
            }
            record_ids.insert(key, contribution.path.clone());
        }
        for instruction_id in contribution.order {
            let partial = contribution
                .pools
                .remove(&instruction_id)
                .expect("order lists only known pools");
            match pools.get_mut(&instruction_id) {
                Some(pool) => {
                    if pool.instruction != partial.instruction {
                        return Err(IngestError::HashCollision {
                            id: instruction_id,
                            first: pool.instruction.clone(),
                            second: partial.instruction,
                        });
                    }
                    for candidate in partial.candidates {
                        pool.push(candidate)?;
                    }
                }
                None => {
                    pools.insert(instruction_id, partial);
                }
            }
        }
    }

    Ok(pools
        .into_iter()
        .filter(|(_, p)| p.candidates.len() >= filter.min_candidates)
        .map(|(instruction_id, p)| CandidatePool {
            instruction_id,
            instruction: p.instruction,
            candidates: p.candidates,
        })
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub unique_instructions: usize,
    pub total_pairs: usize,
    /// pool size -> number of pools of that size
    pub pool_size_histogram: BTreeMap<usize, usize>,
    /// source_id -> number of candidates it contributed
    pub per_source: BTreeMap<String, usize>,
}

pub fn overlap_stats(pools: &[CandidatePool]) -> OverlapReport {
    let mut report = OverlapReport {
        unique_instructions: pools.len(),
        ..OverlapReport::default()
    };
    for pool in pools {
        report.total_pairs += pool.candidates.len();
        *report
            .pool_size_histogram
            .entry(pool.candidates.len())
            .or_default() += 1;
        for c in &pool.candidates {
            *report.per_source.entry(c.source_id.clone()).or_default() += 1;
        }
    }
    report
}

pub fn write_pools(path: &Path, pools: &[CandidatePool]) -> std::io::Result<()> {
    let file = AtomicFile::create(path)?;
    let mut out = BufWriter::new(file);
    for pool in pools {
        serde_json::to_writer(&mut out, pool)?;
        out.write_all(b"\n")?;
    }
    out.into_inner().map_err(|e| e.into_error())?.commit()
}

/// Loads a pool export, checking that stored ids match their content.
pub fn read_pools(path: &Path) -> Result<Vec<CandidatePool>, IngestError> {
    let io_err = |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut pools = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| IngestError::Malformed {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let pool: CandidatePool =
            serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if pool.instruction_id != content_id(pool.instruction.as_bytes()) {
            return Err(malformed(
                "instruction_id does not match instruction".into(),
            ));
        }
        if let Some(c) = pool
            .candidates
            .iter()
            .find(|c| c.response_id != content_id(c.response.as_bytes()))
        {
            return Err(malformed(format!(
                "response_id {} does not match response",
                c.response_id
            )));
        }
        pools.push(pool);
    }
    Ok(pools)
}
