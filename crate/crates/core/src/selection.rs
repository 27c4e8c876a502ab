//! Per-instruction response selection and SFT export.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CandidatePool, RoleTag};
use crate::hash::Fnv1a64;
use crate::io::AtomicFile;
use crate::scoring::ScoredResponse;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectError {
    #[error("instruction {instruction_id}: no score for response {response_id}")]
    MissingScore {
        instruction_id: String,
        response_id: String,
    },
    #[error("instruction {instruction_id}: score for {response_id} does not belong to this pool")]
    ForeignScore {
        instruction_id: String,
        response_id: String,
    },
    #[error("mixed scorer ids {first:?} and {second:?}")]
    MixedScorers { first: String, second: String },
    #[error("instruction {instruction_id}: response {response_id} has no reward")]
    MissingReward {
        instruction_id: String,
        response_id: String,
    },
    #[error("instruction {instruction_id}: no sft candidate")]
    NoSftCandidate { instruction_id: String },
    #[error("instruction {instruction_id}: empty pool")]
    EmptyPool { instruction_id: String },
    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("instruction {0} is not in the pool set")]
    UnknownInstruction(String),
    #[error("instruction {instruction_id}: dangling response_id {response_id}")]
    DanglingResponse {
        instruction_id: String,
        response_id: String,
    },
    #[error("failed to write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Grape,
    ReverseGrape,
    Random,
    Reward,
    SftOnly,
}

impl StrategyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Grape => "grape",
            StrategyKind::ReverseGrape => "reverse_grape",
            StrategyKind::Random => "random",
            StrategyKind::Reward => "reward",
            StrategyKind::SftOnly => "sft_only",
        }
    }

    pub fn needs_scores(self) -> bool {
        matches!(self, StrategyKind::Grape | StrategyKind::ReverseGrape)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = SelectError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "grape" => StrategyKind::Grape,
            "reverse" | "reverse_grape" | "reverse-grape" => StrategyKind::ReverseGrape,
            "random" => StrategyKind::Random,
            "reward" => StrategyKind::Reward,
            "sft-only" | "sft_only" => StrategyKind::SftOnly,
            other => {
                return Err(SelectError::InvalidStrategy(format!(
                    "unknown kind {other:?}"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionStrategy {
    pub kind: StrategyKind,
    pub k: usize,
    pub seed: u64,
}

impl Default for SelectionStrategy {
    fn default() -> Self {
        Self {
            kind: StrategyKind::Grape,
            k: 1,
            seed: 0,
        }
    }
}

impl SelectionStrategy {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), SelectError> {
        if self.k == 0 {
            return Err(SelectError::InvalidStrategy("k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChosenResponse {
    pub response_id: String,
    pub rank_key: f64,
    pub source_id: String,
    /// Per answer-token probabilities, when requested.
    pub token_weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub instruction_id: String,
    pub scorer_id: Option<String>,
    pub chosen: Vec<ChosenResponse>,
    pub strategy: SelectionStrategy,
    pub tiebreak_applied: bool,
}

/// Token probabilities `exp(logprob)`, clamped into `(0, 1]`.
pub fn token_weights(score: &ScoredResponse) -> Vec<f64> {
    score
        .answer_token_logprobs
        .iter()
        .map(|lp| lp.min(0.0).exp().max(f64::MIN_POSITIVE))
        .collect()
}

/// Index drawn by the seeded hash selector for the `draw`-th attempt.
///
/// Draw 0 hashes `seed (u64 LE) ‖ instruction_id`; later draws append the
/// draw counter as a u64 LE suffix.
pub fn random_index(seed: u64, instruction_id: &str, draw: u64, pool_size: usize) -> usize {
    let mut h = Fnv1a64::new();
    h.update(&seed.to_le_bytes())
        .update(instruction_id.as_bytes());
    if draw > 0 {
        h.update(&draw.to_le_bytes());
    }
    (h.finish() % pool_size as u64) as usize
}

fn random_picks(seed: u64, instruction_id: &str, pool_size: usize, k: usize) -> Vec<usize> {
    let want = k.min(pool_size);
    let mut taken = vec![false; pool_size];
    let mut picks = Vec::with_capacity(want);
    let mut draw = 0u64;
    // hashing is re-tried with fresh counters until an unused index turns up;
    // past the attempt budget the lowest unused index is taken instead
    let budget = 64 * pool_size as u64 + 64;
    while picks.len() < want {
        let idx = if draw < budget {
            random_index(seed, instruction_id, draw, pool_size)
        } else {
            taken
                .iter()
                .position(|t| !t)
                .expect("fewer picks than pool size")
        };
        draw += 1;
        if !taken[idx] {
            taken[idx] = true;
            picks.push(idx);
        }
    }
    picks
}

/// Stable ordering of `keys` (one per candidate, in pool order): ascending or
/// descending, earlier candidates first on equal keys. Returns the chosen
/// indices and whether an equal-key comparison decided anything.
fn rank(keys: &[f64], descending: bool, k: usize) -> (Vec<usize>, bool) {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| {
        let ord = keys[a].total_cmp(&keys[b]);
        let ord = if descending { ord.reverse() } else { ord };
        ord.then(a.cmp(&b))
    });
    let take = k.min(order.len());
    let tie = (0..take).any(|i| {
        order
            .get(i + 1)
            .is_some_and(|&next| keys[next] == keys[order[i]])
    });
    order.truncate(take);
    (order, tie)
}

fn scores_for_pool<'a>(
    pool: &CandidatePool,
    scores: &'a [ScoredResponse],
) -> Result<(Vec<&'a ScoredResponse>, Option<String>), SelectError> {
    let mut by_id: HashMap<&str, &ScoredResponse> = HashMap::with_capacity(scores.len());
    let mut scorer: Option<&str> = None;
    for s in scores {
        if s.instruction_id != pool.instruction_id || pool.candidate(&s.response_id).is_none() {
            return Err(SelectError::ForeignScore {
                instruction_id: pool.instruction_id.clone(),
                response_id: s.response_id.clone(),
            });
        }
        match scorer {
            Some(id) if id != s.scorer_id => {
                return Err(SelectError::MixedScorers {
                    first: id.to_owned(),
                    second: s.scorer_id.clone(),
                })
            }
            Some(_) => {}
            None => scorer = Some(&s.scorer_id),
        }
        by_id.insert(&s.response_id, s);
    }
    let ordered =
        pool.candidates
            .iter()
            .map(|c| {
                by_id.get(c.response_id.as_str()).copied().ok_or_else(|| {
                    SelectError::MissingScore {
                        instruction_id: pool.instruction_id.clone(),
                        response_id: c.response_id.clone(),
                    }
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
    Ok((ordered, scorer.map(str::to_owned)))
}

/// Applies `strategy` to one pool.
///
/// Likelihood strategies rank by normalized log-probability, which orders
/// candidates exactly as perplexity does; `rank_key` reports perplexity.
pub fn select(
    pool: &CandidatePool,
    scores: &[ScoredResponse],
    strategy: &SelectionStrategy,
) -> Result<SelectionResult, SelectError> {
    strategy.validate()?;
    if pool.candidates.is_empty() {
        return Err(SelectError::EmptyPool {
            instruction_id: pool.instruction_id.clone(),
        });
    }
    let (ordered, scorer_id) = if strategy.kind.needs_scores() || !scores.is_empty() {
        scores_for_pool(pool, scores)?
    } else {
        (Vec::new(), None)
    };

    let (picks, rank_keys, tiebreak_applied): (Vec<usize>, Vec<f64>, bool) = match strategy.kind {
        StrategyKind::Grape | StrategyKind::ReverseGrape => {
            let normalized: Vec<f64> = ordered.iter().map(|s| s.normalized_logprob).collect();
            let descending = strategy.kind == StrategyKind::Grape;
            let (picks, tie) = rank(&normalized, descending, strategy.k);
            let keys = picks.iter().map(|&i| ordered[i].perplexity).collect();
            (picks, keys, tie)
        }
        StrategyKind::Reward => {
            let rewards = pool
                .candidates
                .iter()
                .map(|c| {
                    c.reward.ok_or_else(|| SelectError::MissingReward {
                        instruction_id: pool.instruction_id.clone(),
                        response_id: c.response_id.clone(),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            let (picks, tie) = rank(&rewards, true, strategy.k);
            let keys = picks.iter().map(|&i| rewards[i]).collect();
            (picks, keys, tie)
        }
        StrategyKind::Random => {
            let picks = random_picks(
                strategy.seed,
                &pool.instruction_id,
                pool.candidates.len(),
                strategy.k,
            );
            let keys = picks.iter().map(|&i| i as f64).collect();
            (picks, keys, false)
        }
        StrategyKind::SftOnly => {
            let picks: Vec<usize> = pool
                .candidates
                .iter()
                .enumerate()
                .filter(|(_, c)| c.role_tag == RoleTag::Sft)
                .map(|(i, _)| i)
                .take(strategy.k)
                .collect();
            if picks.is_empty() {
                return Err(SelectError::NoSftCandidate {
                    instruction_id: pool.instruction_id.clone(),
                });
            }
            let keys = picks.iter().map(|&i| i as f64).collect();
            (picks, keys, false)
        }
    };

    let chosen = picks
        .iter()
        .zip(rank_keys)
        .map(|(&i, rank_key)| ChosenResponse {
            response_id: pool.candidates[i].response_id.clone(),
            rank_key,
            source_id: pool.candidates[i].source_id.clone(),
            token_weights: None,
        })
        .collect();

    Ok(SelectionResult {
        instruction_id: pool.instruction_id.clone(),
        scorer_id,
        chosen,
        strategy: *strategy,
        tiebreak_applied,
    })
}

/// Fills `token_weights` for every chosen response that has a score.
pub fn attach_token_weights(result: &mut SelectionResult, scores: &[ScoredResponse]) {
    for chosen in &mut result.chosen {
        chosen.token_weights = scores
            .iter()
            .find(|s| {
                s.response_id == chosen.response_id && s.instruction_id == result.instruction_id
            })
            .map(token_weights);
    }
}

#[derive(Debug, Clone, Default)]
pub struct SelectOptions {
    pub emit_token_weights: bool,
    /// Per-instruction overrides of `k`.
    pub k_map: HashMap<String, usize>,
}

#[derive(Debug, Default)]
pub struct SelectionRun {
    pub results: Vec<SelectionResult>,
    pub failures: Vec<(String, SelectError)>,
}

/// Selects over every pool in parallel. Results and failures come back in
/// pool order regardless of scheduling. Scores from more than one scorer id
/// fail the whole run.
pub fn select_all(
    pools: &[CandidatePool],
    scores: &[ScoredResponse],
    strategy: &SelectionStrategy,
    options: &SelectOptions,
) -> Result<SelectionRun, SelectError> {
    strategy.validate()?;
    if let Some(first) = scores.first() {
        if let Some(other) = scores.iter().find(|s| s.scorer_id != first.scorer_id) {
            return Err(SelectError::MixedScorers {
                first: first.scorer_id.clone(),
                second: other.scorer_id.clone(),
            });
        }
    }
    let mut grouped: HashMap<&str, Vec<ScoredResponse>> = HashMap::new();
    for s in scores {
        grouped
            .entry(&s.instruction_id)
            .or_default()
            .push(s.clone());
    }
    let empty = Vec::new();
    let outcomes: Vec<Result<SelectionResult, SelectError>> = pools
        .par_iter()
        .map(|pool| {
            let pool_scores = grouped.get(pool.instruction_id.as_str()).unwrap_or(&empty);
            let mut strat = *strategy;
            if let Some(&k) = options.k_map.get(&pool.instruction_id) {
                strat.k = k;
            }
            let mut result = select(pool, pool_scores, &strat)?;
            if options.emit_token_weights {
                attach_token_weights(&mut result, pool_scores);
            }
            Ok(result)
        })
        .collect();
    let mut run = SelectionRun::default();
    for (pool, outcome) in pools.iter().zip(outcomes) {
        match outcome {
            Ok(r) => run.results.push(r),
            Err(e) => run.failures.push((pool.instruction_id.clone(), e)),
        }
    }
    Ok(run)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportLine {
    pub instruction: String,
    pub response: String,
    pub source_id: String,
    pub rank_key: f64,
    pub strategy: String,
    pub token_weights: Option<Vec<f64>>,
}

/// Resolves results against their pools into export lines ordered by
/// instruction_id, then by choice order.
pub fn export_lines(
    results: &[SelectionResult],
    pools: &[CandidatePool],
) -> Result<Vec<ExportLine>, ExportError> {
    let by_id: HashMap<&str, &CandidatePool> = pools
        .iter()
        .map(|p| (p.instruction_id.as_str(), p))
        .collect();
    let mut sorted: BTreeMap<&str, &SelectionResult> = BTreeMap::new();
    for r in results {
        sorted.insert(&r.instruction_id, r);
    }
    let mut lines = Vec::new();
    for (instruction_id, result) in sorted {
        let pool = by_id
            .get(instruction_id)
            .ok_or_else(|| ExportError::UnknownInstruction(instruction_id.to_owned()))?;
        for chosen in &result.chosen {
            let candidate = pool.candidate(&chosen.response_id).ok_or_else(|| {
                ExportError::DanglingResponse {
                    instruction_id: instruction_id.to_owned(),
                    response_id: chosen.response_id.clone(),
                }
            })?;
            lines.push(ExportLine {
                instruction: pool.instruction.clone(),
                response: candidate.response.clone(),
                source_id: candidate.source_id.clone(),
                rank_key: chosen.rank_key,
                strategy: result.strategy.kind.as_str().to_owned(),
                token_weights: chosen.token_weights.clone(),
            });
        }
    }
    Ok(lines)
}

pub fn export_sft(
    results: &[SelectionResult],
    pools: &[CandidatePool],
    path: &Path,
) -> Result<usize, ExportError> {
    let lines = export_lines(results, pools)?;
    let io_err = |source| ExportError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(AtomicFile::create(path).map_err(io_err)?);
    for line in &lines {
        serde_json::to_writer(&mut out, line).map_err(|e| io_err(e.into()))?;
        out.write_all(b"\n").map_err(io_err)?;
    }
    out.into_inner()
        .map_err(|e| io_err(e.into_error()))?
        .commit()
        .map_err(io_err)?;
    Ok(lines.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Candidate;
    use crate::hash::content_id;
    use crate::scoring::{finalize_score, ScoreIds};

    fn pool_with(names: &[&str]) -> CandidatePool {
        CandidatePool {
            instruction_id: content_id(b"Q"),
            instruction: "Q".into(),
            candidates: names
                .iter()
                .map(|n| Candidate {
                    response_id: content_id(n.as_bytes()),
                    response: n.to_string(),
                    source_id: format!("src-{n}"),
                    role_tag: RoleTag::Generated,
                    reward: None,
                })
                .collect(),
        }
    }

    fn score_with_ppl(pool: &CandidatePool, idx: usize, ppl: f64) -> ScoredResponse {
        finalize_score(
            vec![-ppl.ln()],
            ScoreIds {
                instruction_id: pool.instruction_id.clone(),
                response_id: pool.candidates[idx].response_id.clone(),
                scorer_id: "m".into(),
                template_hash: "t".into(),
            },
        )
        .unwrap()
    }

    #[test]
    fn singleton_pool() {
        let pool = pool_with(&["A"]);
        let scores = vec![score_with_ppl(&pool, 0, 3.0)];
        let r = select(&pool, &scores, &SelectionStrategy::default()).unwrap();
        assert_eq!(r.chosen.len(), 1);
        assert_eq!(r.chosen[0].response_id, pool.candidates[0].response_id);
        assert!(!r.tiebreak_applied);
    }

    #[test]
    fn grape_and_reverse_pick_extremes() {
        let pool = pool_with(&["A", "B", "C"]);
        let scores: Vec<_> = [7.39, 4.00, 12.18]
            .iter()
            .enumerate()
            .map(|(i, &p)| score_with_ppl(&pool, i, p))
            .collect();
        let g = select(&pool, &scores, &SelectionStrategy::default()).unwrap();
        assert_eq!(g.chosen[0].source_id, "src-B");
        assert!((g.chosen[0].rank_key - 4.0).abs() < 1e-12);
        let r = select(
            &pool,
            &scores,
            &SelectionStrategy::new(StrategyKind::ReverseGrape),
        )
        .unwrap();
        assert_eq!(r.chosen[0].source_id, "src-C");

        let top2 = select(&pool, &scores, &SelectionStrategy::default().with_k(2)).unwrap();
        let ids: Vec<_> = top2.chosen.iter().map(|c| c.source_id.as_str()).collect();
        assert_eq!(ids, ["src-B", "src-A"]);
        // k larger than the pool returns the whole pool
        let all = select(&pool, &scores, &SelectionStrategy::default().with_k(10)).unwrap();
        assert_eq!(all.chosen.len(), 3);
    }

    #[test]
    fn ties_go_to_the_earlier_candidate() {
        let pool = pool_with(&["A", "B"]);
        let scores = vec![score_with_ppl(&pool, 0, 4.0), score_with_ppl(&pool, 1, 4.0)];
        let r = select(&pool, &scores, &SelectionStrategy::default()).unwrap();
        assert_eq!(r.chosen[0].source_id, "src-A");
        assert!(r.tiebreak_applied);
        let r = select(
            &pool,
            &scores,
            &SelectionStrategy::new(StrategyKind::ReverseGrape),
        )
        .unwrap();
        assert_eq!(r.chosen[0].source_id, "src-A");
    }

    #[test]
    fn missing_and_foreign_scores() {
        let pool = pool_with(&["A", "B"]);
        let scores = vec![score_with_ppl(&pool, 0, 2.0)];
        assert!(matches!(
            select(&pool, &scores, &SelectionStrategy::default()),
            Err(SelectError::MissingScore { .. })
        ));
        let other = pool_with(&["Z"]);
        let mut foreign = score_with_ppl(&other, 0, 2.0);
        foreign.instruction_id = "elsewhere".into();
        assert!(matches!(
            select(&pool, &[foreign], &SelectionStrategy::default()),
            Err(SelectError::ForeignScore { .. })
        ));
    }

    #[test]
    fn mixed_scorers_are_rejected() {
        let pool = pool_with(&["A", "B"]);
        let a = score_with_ppl(&pool, 0, 2.0);
        let mut b = score_with_ppl(&pool, 1, 3.0);
        b.scorer_id = "other".into();
        assert!(matches!(
            select(&pool, &[a, b], &SelectionStrategy::default()),
            Err(SelectError::MixedScorers { .. })
        ));
    }

    #[test]
    fn reward_strategy() {
        let mut pool = pool_with(&["A", "B", "C"]);
        for (c, r) in pool.candidates.iter_mut().zip([0.2, 0.9, 0.5]) {
            c.reward = Some(r);
        }
        let r = select(
            &pool,
            &[],
            &SelectionStrategy::new(StrategyKind::Reward).with_k(2),
        )
        .unwrap();
        let keys: Vec<_> = r.chosen.iter().map(|c| c.rank_key).collect();
        assert_eq!(keys, [0.9, 0.5]);
        pool.candidates[2].reward = None;
        assert!(matches!(
            select(&pool, &[], &SelectionStrategy::new(StrategyKind::Reward)),
            Err(SelectError::MissingReward { .. })
        ));
    }

    #[test]
    fn sft_only_passes_through() {
        let mut pool = pool_with(&["A", "B", "C"]);
        let strat = SelectionStrategy::new(StrategyKind::SftOnly);
        assert!(matches!(
            select(&pool, &[], &strat),
            Err(SelectError::NoSftCandidate { .. })
        ));
        pool.candidates[1].role_tag = RoleTag::Sft;
        let r = select(&pool, &[], &strat).unwrap();
        assert_eq!(r.chosen[0].source_id, "src-B");
    }

    #[test]
    fn random_is_hash_based() {
        let pool = pool_with(&["A", "B", "C", "D"]);
        let strat = SelectionStrategy::new(StrategyKind::Random).with_seed(42);
        let r = select(&pool, &[], &strat).unwrap();
        // independent evaluation of the first draw
        let mut bytes = 42u64.to_le_bytes().to_vec();
        bytes.extend_from_slice(pool.instruction_id.as_bytes());
        let expected = (crate::hash::fnv1a64(&bytes) % 4) as usize;
        assert_eq!(
            r.chosen[0].response_id,
            pool.candidates[expected].response_id
        );

        let all = select(&pool, &[], &strat.with_k(4)).unwrap();
        let mut seen: Vec<_> = all.chosen.iter().map(|c| c.response_id.clone()).collect();
        assert_eq!(all.chosen[0], r.chosen[0]);
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 4);
    }

    #[test]
    fn zero_k_is_invalid() {
        let pool = pool_with(&["A"]);
        assert!(matches!(
            select(
                &pool,
                &[],
                &SelectionStrategy::new(StrategyKind::Random).with_k(0)
            ),
            Err(SelectError::InvalidStrategy(_))
        ));
    }

    #[test]
    fn token_weight_examples() {
        let pool = pool_with(&["A"]);
        let ids = ScoreIds {
            instruction_id: pool.instruction_id.clone(),
            response_id: pool.candidates[0].response_id.clone(),
            scorer_id: "m".into(),
            template_hash: "t".into(),
        };
        assert_eq!(
            token_weights(&finalize_score(vec![0.0], ids.clone()).unwrap()),
            vec![1.0]
        );
        let w =
            token_weights(&finalize_score(vec![0.5f64.ln(), 0.25f64.ln()], ids.clone()).unwrap());
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.25).abs() < 1e-15);
        let w = token_weights(&finalize_score(vec![-1000.0, 0.5], ids).unwrap());
        assert!(w[0] > 0.0 && w[1] == 1.0);
    }

    #[test]
    fn strategy_names_parse() {
        assert_eq!(
            "reverse".parse::<StrategyKind>().unwrap(),
            StrategyKind::ReverseGrape
        );
        assert_eq!(
            "sft-only".parse::<StrategyKind>().unwrap(),
            StrategyKind::SftOnly
        );
        assert!("best".parse::<StrategyKind>().is_err());
    }

    #[test]
    fn export_detects_dangling_ids() {
        let pool = pool_with(&["A", "B"]);
        let scores = vec![score_with_ppl(&pool, 0, 2.0), score_with_ppl(&pool, 1, 3.0)];
        let mut r = select(&pool, &scores, &SelectionStrategy::default()).unwrap();
        let lines = export_lines(std::slice::from_ref(&r), std::slice::from_ref(&pool)).unwrap();
        assert_eq!(lines[0].response, "A");
        assert_eq!(lines[0].strategy, "grape");
        r.chosen[0].response_id = "nope".into();
        assert!(matches!(
            export_lines(&[r], &[pool]),
            Err(ExportError::DanglingResponse { .. })
        ));
    }
}
