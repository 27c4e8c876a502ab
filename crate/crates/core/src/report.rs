//! Cross-scorer selection breakdowns.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CandidatePool;
use crate::selection::SelectionResult;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReportError {
    #[error("scorers {a:?} and {b:?} cover different pool sets")]
    PoolMismatch { a: String, b: String },
    #[error("scorer {scorer:?}: instruction {instruction_id} has {chosen} choices, expected 1")]
    NotTopOne {
        scorer: String,
        instruction_id: String,
        chosen: usize,
    },
    #[error("instruction {0} is not in the pool set")]
    UnknownInstruction(String),
    #[error("response {response_id} is not a candidate of instruction {instruction_id}")]
    UnknownResponse {
        instruction_id: String,
        response_id: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BreakdownMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    /// `counts[row][col]`: pools where that scorer's choice came from that source.
    pub counts: Vec<Vec<u64>>,
}

impl BreakdownMatrix {
    pub fn row_sum(&self, row: usize) -> u64 {
        self.counts[row].iter().sum()
    }

    pub fn get(&self, scorer: &str, source: &str) -> Option<u64> {
        let r = self.rows.iter().position(|s| s == scorer)?;
        let c = self.cols.iter().position(|s| s == source)?;
        Some(self.counts[r][c])
    }

    /// Long-format CSV, one line per (scorer, source) cell including zeros.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scorer_id,source_id,count\n");
        for (r, scorer) in self.rows.iter().enumerate() {
            for (c, source) in self.cols.iter().enumerate() {
                let _ = writeln!(out, "{scorer},{source},{}", self.counts[r][c]);
            }
        }
        out
    }
}

fn top_one<'a>(
    scorer: &str,
    results: &'a [SelectionResult],
) -> Result<BTreeMap<&'a str, &'a str>, ReportError> {
    results
        .iter()
        .map(|r| match r.chosen.as_slice() {
            [only] => Ok((r.instruction_id.as_str(), only.response_id.as_str())),
            other => Err(ReportError::NotTopOne {
                scorer: scorer.to_owned(),
                instruction_id: r.instruction_id.clone(),
                chosen: other.len(),
            }),
        })
        .collect()
}

fn same_pools(
    a: (&str, &BTreeMap<&str, &str>),
    b: (&str, &BTreeMap<&str, &str>),
) -> Result<(), ReportError> {
    if a.1.len() != b.1.len() || a.1.keys().zip(b.1.keys()).any(|(x, y)| x != y) {
        return Err(ReportError::PoolMismatch {
            a: a.0.to_owned(),
            b: b.0.to_owned(),
        });
    }
    Ok(())
}

/// Counts, per scorer, how often its top-1 choice came from each source.
/// Columns are every source present in `pools`.
pub fn breakdown(
    results_by_scorer: &BTreeMap<String, Vec<SelectionResult>>,
    pools: &[CandidatePool],
) -> Result<BreakdownMatrix, ReportError> {
    let by_id: HashMap<&str, &CandidatePool> = pools
        .iter()
        .map(|p| (p.instruction_id.as_str(), p))
        .collect();
    let cols: Vec<String> = pools
        .iter()
        .flat_map(|p| p.candidates.iter().map(|c| c.source_id.clone()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let col_index: HashMap<&str, usize> = cols
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();

    let mut reference: Option<(&str, BTreeMap<&str, &str>)> = None;
    let mut rows = Vec::new();
    let mut counts = Vec::new();
    for (scorer, results) in results_by_scorer {
        let picks = top_one(scorer, results)?;
        if let Some((ref_name, ref_picks)) = &reference {
            same_pools((ref_name, ref_picks), (scorer, &picks))?;
        }
        let mut row = vec![0u64; cols.len()];
        for (&instruction_id, &response_id) in &picks {
            let pool = by_id
                .get(instruction_id)
                .ok_or_else(|| ReportError::UnknownInstruction(instruction_id.to_owned()))?;
            let candidate =
                pool.candidate(response_id)
                    .ok_or_else(|| ReportError::UnknownResponse {
                        instruction_id: instruction_id.to_owned(),
                        response_id: response_id.to_owned(),
                    })?;
            row[col_index[candidate.source_id.as_str()]] += 1;
        }
        rows.push(scorer.clone());
        counts.push(row);
        if reference.is_none() {
            reference = Some((scorer, picks));
        }
    }
    Ok(BreakdownMatrix { rows, cols, counts })
}

/// Fraction of pools on which both runs chose the same response. Two empty
/// runs agree trivially.
pub fn agreement(a: &[SelectionResult], b: &[SelectionResult]) -> Result<f64, ReportError> {
    let pa = top_one("a", a)?;
    let pb = top_one("b", b)?;
    same_pools(("a", &pa), ("b", &pb))?;
    if pa.is_empty() {
        return Ok(1.0);
    }
    let same = pa
        .iter()
        .filter(|(id, resp)| pb.get(*id) == Some(*resp))
        .count();
    Ok(same as f64 / pa.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub pools: usize,
    pub pairs: usize,
    /// scorer -> source -> count
    pub per_scorer: BTreeMap<String, BTreeMap<String, u64>>,
    /// scorer -> scorer -> agreement
    pub pairwise_agreement: BTreeMap<String, BTreeMap<String, f64>>,
}

pub fn summarize(
    results_by_scorer: &BTreeMap<String, Vec<SelectionResult>>,
    pools: &[CandidatePool],
) -> Result<(BreakdownMatrix, ReportSummary), ReportError> {
    let matrix = breakdown(results_by_scorer, pools)?;
    let per_scorer = matrix
        .rows
        .iter()
        .zip(&matrix.counts)
        .map(|(scorer, row)| {
            let cells = matrix
                .cols
                .iter()
                .cloned()
                .zip(row.iter().copied())
                .collect();
            (scorer.clone(), cells)
        })
        .collect();
    let mut pairwise: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for (a, ra) in results_by_scorer {
        for (b, rb) in results_by_scorer {
            pairwise
                .entry(a.clone())
                .or_default()
                .insert(b.clone(), agreement(ra, rb)?);
        }
    }
    let summary = ReportSummary {
        pools: pools.len(),
        pairs: pools.iter().map(|p| p.candidates.len()).sum(),
        per_scorer,
        pairwise_agreement: pairwise,
    };
    Ok((matrix, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Candidate, RoleTag};
    use crate::selection::{ChosenResponse, SelectionStrategy};

    fn pools(n: usize) -> Vec<CandidatePool> {
        (0..n)
            .map(|i| CandidatePool {
                instruction_id: format!("i{i}"),
                instruction: format!("q{i}"),
                candidates: ["tulu", "wizard"]
                    .iter()
                    .map(|s| Candidate {
                        response_id: format!("{s}{i}"),
                        response: format!("{s} says {i}"),
                        source_id: s.to_string(),
                        role_tag: RoleTag::Sft,
                        reward: None,
                    })
                    .collect(),
            })
            .collect()
    }

    fn pick(instruction_id: &str, response_id: &str) -> SelectionResult {
        SelectionResult {
            instruction_id: instruction_id.into(),
            scorer_id: None,
            chosen: vec![ChosenResponse {
                response_id: response_id.into(),
                rank_key: 1.0,
                source_id: String::new(),
                token_weights: None,
            }],
            strategy: SelectionStrategy::default(),
            tiebreak_applied: false,
        }
    }

    #[test]
    fn single_source_row() {
        let p = pools(3);
        let results: Vec<_> = (0..3)
            .map(|i| pick(&format!("i{i}"), &format!("tulu{i}")))
            .collect();
        let m = breakdown(&[("m1".to_string(), results)].into_iter().collect(), &p).unwrap();
        assert_eq!(m.row_sum(0), 3);
        assert_eq!(m.get("m1", "tulu"), Some(3));
        assert_eq!(m.get("m1", "wizard"), Some(0));
        assert_eq!(
            m.to_csv(),
            "scorer_id,source_id,count\nm1,tulu,3\nm1,wizard,0\n"
        );
    }

    #[test]
    fn identical_scorers_identical_rows() {
        let p = pools(4);
        let results: Vec<_> = (0..4)
            .map(|i| {
                pick(
                    &format!("i{i}"),
                    &format!("{}{i}", if i % 2 == 0 { "tulu" } else { "wizard" }),
                )
            })
            .collect();
        let by: BTreeMap<_, _> = [
            ("a".to_string(), results.clone()),
            ("b".to_string(), results),
        ]
        .into_iter()
        .collect();
        let m = breakdown(&by, &p).unwrap();
        assert_eq!(m.counts[0], m.counts[1]);
        let (_, summary) = summarize(&by, &p).unwrap();
        assert_eq!(summary.pairwise_agreement["a"]["b"], 1.0);
        assert_eq!(summary.pairs, 8);
    }

    #[test]
    fn mismatched_pool_sets_fail() {
        let p = pools(2);
        let by: BTreeMap<_, _> = [
            (
                "a".to_string(),
                vec![pick("i0", "tulu0"), pick("i1", "tulu1")],
            ),
            ("b".to_string(), vec![pick("i0", "tulu0")]),
        ]
        .into_iter()
        .collect();
        assert!(matches!(
            breakdown(&by, &p),
            Err(ReportError::PoolMismatch { .. })
        ));
        assert!(agreement(&by["a"], &by["b"]).is_err());
    }

    #[test]
    fn agreement_extremes() {
        let a = vec![pick("i0", "tulu0"), pick("i1", "tulu1")];
        let b = vec![pick("i0", "wizard0"), pick("i1", "wizard1")];
        assert_eq!(agreement(&a, &a).unwrap(), 1.0);
        assert_eq!(agreement(&a, &b).unwrap(), 0.0);
        let c = vec![pick("i1", "tulu1"), pick("i0", "wizard0")];
        assert_eq!(agreement(&a, &c).unwrap(), 0.5);
        assert_eq!(agreement(&c, &a).unwrap(), 0.5);
    }

    #[test]
    fn top_k_results_are_rejected() {
        let mut r = pick("i0", "tulu0");
        r.chosen.push(r.chosen[0].clone());
        let by: BTreeMap<_, _> = [("a".to_string(), vec![r])].into_iter().collect();
        assert!(matches!(
            breakdown(&by, &pools(1)),
            Err(ReportError::NotTopOne { chosen: 2, .. })
        ));
    }
}
