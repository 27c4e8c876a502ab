//! KL divergence of subset-restricted distributions.
//!
//! Restricting a base distribution to a subset `S` and renormalizing gives a
//! distribution whose KL divergence to the base is `-ln Z_S`, with `Z_S` the
//! base mass of `S`. Among all subsets of a fixed size the one with the most
//! mass, i.e. the top-k outcomes, therefore has the smallest divergence. This
//! module computes both routes and checks the optimality claim by exhaustive
//! enumeration.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use std::collections::HashMap;

use crate::corpus::CandidatePool;
use crate::scoring::ScoredResponse;
use crate::selection::{select, SelectionStrategy, StrategyKind};

/// Tolerance for a probability vector summing to one.
pub const SUM_TOLERANCE: f64 = 1e-12;
/// Agreement required between the closed form and the direct KL sum.
pub const CLOSED_FORM_TOLERANCE: f64 = 1e-10;
/// Slack when comparing KL values of different subsets.
const COMPARE_SLACK: f64 = 1e-12;
/// Largest support the verifier will enumerate.
pub const MAX_ENUMERATION_SUPPORT: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistError {
    #[error("support and probabilities differ in length ({support} vs {probs})")]
    LengthMismatch { support: usize, probs: usize },
    #[error("probability {value} at index {index} is negative or not finite")]
    InvalidProbability { index: usize, value: f64 },
    #[error("probabilities sum to {0}, not 1")]
    NotNormalized(f64),
    #[error("empty distribution")]
    Empty,
    #[error("empty subset")]
    EmptySubset,
    #[error("subset has zero base mass")]
    ZeroMass,
    #[error("index {0} is outside the support")]
    OutOfSupport(usize),
    #[error("index {0} appears twice in the subset")]
    DuplicateIndex(usize),
    #[error("distributions have different supports")]
    SupportMismatch,
    #[error("p puts mass {p} on outcome {index} where q has none")]
    NotAbsolutelyContinuous { index: usize, p: f64 },
    #[error("k = {k} is outside 1..={n}")]
    KOutOfRange { k: usize, n: usize },
    #[error("support of {0} outcomes is too large to enumerate")]
    SupportTooLarge(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteDistribution {
    support: Vec<String>,
    probs: Vec<f64>,
}

impl FiniteDistribution {
    pub fn new(support: Vec<String>, probs: Vec<f64>) -> Result<Self, DistError> {
        if support.len() != probs.len() {
            return Err(DistError::LengthMismatch {
                support: support.len(),
                probs: probs.len(),
            });
        }
        if probs.is_empty() {
            return Err(DistError::Empty);
        }
        if let Some((index, &value)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0)
        {
            return Err(DistError::InvalidProbability { index, value });
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(DistError::NotNormalized(sum));
        }
        Ok(Self { support, probs })
    }

    /// Outcomes named by their index.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self, DistError> {
        let support = (0..probs.len()).map(|i| i.to_string()).collect();
        Self::new(support, probs)
    }

    /// Softmax over log-weights, computed with the max subtracted.
    pub fn softmax(support: Vec<String>, logits: &[f64]) -> Result<Self, DistError> {
        if logits.is_empty() {
            return Err(DistError::Empty);
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        Self::new(support, exps.into_iter().map(|e| e / z).collect())
    }

    pub fn support(&self) -> &[String] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestrictedDistribution {
    pub base: FiniteDistribution,
    /// Subset indices in ascending order.
    pub subset: Vec<usize>,
    pub z: f64,
    /// `base[i] / z` for each index of `subset`, in the same order.
    pub probs_on_subset: Vec<f64>,
}

impl RestrictedDistribution {
    /// The restricted distribution over the full base support (zeros outside
    /// the subset).
    pub fn to_full(&self) -> FiniteDistribution {
        let mut probs = vec![0.0; self.base.len()];
        for (&i, &p) in self.subset.iter().zip(&self.probs_on_subset) {
            probs[i] = p;
        }
        FiniteDistribution {
            support: self.base.support.clone(),
            probs,
        }
    }

    pub fn k(&self) -> usize {
        self.subset.len()
    }
}

fn normalize_subset(n: usize, subset: &[usize]) -> Result<Vec<usize>, DistError> {
    if subset.is_empty() {
        return Err(DistError::EmptySubset);
    }
    let mut sorted = subset.to_vec();
    sorted.sort_unstable();
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            return Err(DistError::DuplicateIndex(w[0]));
        }
    }
    if let Some(&bad) = sorted.iter().find(|&&i| i >= n) {
        return Err(DistError::OutOfSupport(bad));
    }
    Ok(sorted)
}

fn subset_mass(base: &FiniteDistribution, subset: &[usize]) -> f64 {
    subset.iter().map(|&i| base.probs[i]).sum()
}

pub fn restrict(
    base: &FiniteDistribution,
    subset: &[usize],
) -> Result<RestrictedDistribution, DistError> {
    let subset = normalize_subset(base.len(), subset)?;
    let z = subset_mass(base, &subset);
    if z <= 0.0 {
        return Err(DistError::ZeroMass);
    }
    let probs_on_subset = subset.iter().map(|&i| base.probs[i] / z).collect();
    Ok(RestrictedDistribution {
        base: base.clone(),
        subset,
        z: z.min(1.0),
        probs_on_subset,
    })
}

/// `sum p ln(p/q)`, skipping outcomes where `p` is zero.
pub fn kl(p: &FiniteDistribution, q: &FiniteDistribution) -> Result<f64, DistError> {
    if p.support != q.support {
        return Err(DistError::SupportMismatch);
    }
    let mut total = 0.0;
    for (index, (&pi, &qi)) in p.probs.iter().zip(&q.probs).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(DistError::NotAbsolutelyContinuous { index, p: pi });
        }
        total += pi * (pi / qi).ln();
    }
    Ok(total)
}

/// `-ln Z_S` for the base restricted to `subset`.
pub fn kl_restricted_closed_form(
    base: &FiniteDistribution,
    subset: &[usize],
) -> Result<f64, DistError> {
    let subset = normalize_subset(base.len(), subset)?;
    let z = subset_mass(base, &subset);
    if z <= 0.0 {
        return Err(DistError::ZeroMass);
    }
    Ok(-z.min(1.0).ln())
}

/// The `k` most probable outcomes, earlier support positions winning ties.
/// Returned in ascending index order.
pub fn optimal_subset(base: &FiniteDistribution, k: usize) -> Result<Vec<usize>, DistError> {
    let n = base.len();
    if k == 0 || k > n {
        return Err(DistError::KOutOfRange { k, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| base.probs[b].total_cmp(&base.probs[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

/// Calls `f` with every `k`-subset of `0..n` in lexicographic order.
pub fn for_each_subset(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    if k == 0 || k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx);
        let mut i = k;
        while i > 0 {
            i -= 1;
            if idx[i] != i + n - k {
                idx[i] += 1;
                for j in i + 1..k {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
            if i == 0 {
                return;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub passed: bool,
    /// Largest |direct KL - closed form| over all enumerated subsets.
    pub max_abs_error: f64,
    /// Smallest KL excess of a subset that is not a tie of the optimum.
    /// `None` when every subset ties.
    pub min_gap: Option<f64>,
    pub subsets: usize,
}

/// Enumerates every `k`-subset of `base` and checks that the closed form
/// matches the direct KL, that `optimal_subset` attains the minimum, and that
/// every other subset is strictly worse unless it carries the same multiset
/// of probabilities.
pub fn verify_base(base: &FiniteDistribution, k: usize) -> Result<TrialOutcome, DistError> {
    let n = base.len();
    if n > MAX_ENUMERATION_SUPPORT {
        return Err(DistError::SupportTooLarge(n));
    }
    let best = optimal_subset(base, k)?;
    let best_kl = kl_restricted_closed_form(base, &best)?;
    let mut best_multiset: Vec<f64> = best.iter().map(|&i| base.probs[i]).collect();
    best_multiset.sort_by(f64::total_cmp);

    let mut outcome = TrialOutcome {
        passed: true,
        max_abs_error: 0.0,
        min_gap: None,
        subsets: 0,
    };
    for_each_subset(n, k, |subset| {
        outcome.subsets += 1;
        let closed = match kl_restricted_closed_form(base, subset) {
            Ok(v) => v,
            // zero-mass subsets have infinite divergence
            Err(_) => return,
        };
        let direct = restrict(base, subset)
            .and_then(|r| kl(&r.to_full(), base))
            .unwrap_or(f64::INFINITY);
        let err = (direct - closed).abs();
        outcome.max_abs_error = outcome.max_abs_error.max(err);
        if err > CLOSED_FORM_TOLERANCE {
            outcome.passed = false;
        }
        if subset == best.as_slice() {
            return;
        }
        let mut multiset: Vec<f64> = subset.iter().map(|&i| base.probs[i]).collect();
        multiset.sort_by(f64::total_cmp);
        if multiset == best_multiset {
            // a tie at the k-th probability: same mass, same divergence
            if (closed - best_kl).abs() > COMPARE_SLACK {
                outcome.passed = false;
            }
            return;
        }
        // a different multiset has strictly less mass than the top-k one
        let gap = closed - best_kl;
        if gap <= 0.0 {
            log::debug!("subset {subset:?} does not beat the optimum strictly (gap {gap:e})");
            outcome.passed = false;
        }
        outcome.min_gap = Some(outcome.min_gap.map_or(gap, |g: f64| g.min(gap)));
    });
    Ok(outcome)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub trials: usize,
    pub passes: usize,
    pub max_abs_error: f64,
    /// Smallest strict KL excess of a non-optimal subset seen in any trial.
    pub worst_subset_gap: Option<f64>,
}

impl VerificationReport {
    fn absorb(&mut self, outcome: &TrialOutcome) {
        self.trials += 1;
        if outcome.passed {
            self.passes += 1;
        }
        self.max_abs_error = self.max_abs_error.max(outcome.max_abs_error);
        if let Some(g) = outcome.min_gap {
            self.worst_subset_gap = Some(self.worst_subset_gap.map_or(g, |w| w.min(g)));
        }
    }

    pub fn all_passed(&self) -> bool {
        self.trials == self.passes
    }
}

/// Runs [`verify_base`] over every `(base, k)` trial. A trial whose inputs
/// are invalid counts as a failure rather than aborting the run.
pub fn verify_theorem1(trials: &[(FiniteDistribution, usize)]) -> VerificationReport {
    let outcomes: Vec<TrialOutcome> = trials
        .par_iter()
        .map(|(base, k)| {
            verify_base(base, *k).unwrap_or(TrialOutcome {
                passed: false,
                max_abs_error: 0.0,
                min_gap: None,
                subsets: 0,
            })
        })
        .collect();
    let mut report = VerificationReport::default();
    for o in &outcomes {
        report.absorb(o);
    }
    report
}

/// Samples from the symmetric Dirichlet(alpha) on `n` outcomes.
pub fn sample_dirichlet<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    alpha: f64,
) -> Result<FiniteDistribution, DistError> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|_| DistError::InvalidProbability {
        index: 0,
        value: alpha,
    })?;
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 {
            let mut probs: Vec<f64> = draws.iter().map(|d| d / total).collect();
            // fold the rounding residue into the largest entry
            let residue = 1.0 - probs.iter().sum::<f64>();
            let argmax = (0..n)
                .max_by(|&a, &b| probs[a].total_cmp(&probs[b]))
                .expect("n >= 1");
            probs[argmax] += residue;
            return FiniteDistribution::from_probs(probs);
        }
    }
}

/// Random `(base, k)` trials: support size uniform in `2..=max_n`, `k`
/// uniform in `1..=min(max_k, n)`, bases from a symmetric Dirichlet(1).
pub fn dirichlet_trials(
    seed: u64,
    count: usize,
    max_n: usize,
    max_k: usize,
) -> Result<Vec<(FiniteDistribution, usize)>, DistError> {
    if max_n < 2 || max_k == 0 {
        return Err(DistError::KOutOfRange { k: max_k, n: max_n });
    }
    let mut rng = StdRng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n = rng.gen_range(2..=max_n);
            let k = rng.gen_range(1..=max_k.min(n));
            Ok((sample_dirichlet(&mut rng, n, 1.0)?, k))
        })
        .collect()
}

/// Base distribution for a scored pool: softmax of the normalized
/// log-probabilities, in pool order. An analysis convention used to relate
/// top-k subsets to likelihood selection.
pub fn pool_distribution(scores: &[ScoredResponse]) -> Result<FiniteDistribution, DistError> {
    let support = scores.iter().map(|s| s.response_id.clone()).collect();
    let logits: Vec<f64> = scores.iter().map(|s| s.normalized_logprob).collect();
    FiniteDistribution::softmax(support, &logits)
}

/// Exhaustive check over real scored pools, plus a cross-check that the
/// optimal subset of each pool distribution equals the grape top-k set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KlPoolReport {
    pub k: usize,
    pub trials: usize,
    pub passes: usize,
    pub max_abs_error: f64,
    pub worst_subset_gap: Option<f64>,
    /// Pools without complete scores, with fewer than `k` candidates, or too
    /// large to enumerate.
    pub skipped: usize,
    /// Instruction ids where the top-k subset differs from the grape choice.
    pub bridge_mismatches: Vec<String>,
}

pub fn analyze_scored_pools(
    pools: &[CandidatePool],
    scores: &[ScoredResponse],
    k: usize,
) -> KlPoolReport {
    let mut grouped: HashMap<&str, Vec<ScoredResponse>> = HashMap::new();
    for s in scores {
        grouped
            .entry(&s.instruction_id)
            .or_default()
            .push(s.clone());
    }
    let strategy = SelectionStrategy::new(StrategyKind::Grape).with_k(k.max(1));
    let per_pool: Vec<Option<(TrialOutcome, bool)>> = pools
        .par_iter()
        .map(|pool| {
            let pool_scores = grouped.get(pool.instruction_id.as_str())?;
            let n = pool.candidates.len();
            if k == 0 || n < k || n > MAX_ENUMERATION_SUPPORT || pool_scores.len() != n {
                return None;
            }
            let ordered: Vec<ScoredResponse> = pool
                .candidates
                .iter()
                .map(|c| {
                    pool_scores
                        .iter()
                        .find(|s| s.response_id == c.response_id)
                        .cloned()
                })
                .collect::<Option<_>>()?;
            let base = pool_distribution(&ordered).ok()?;
            let outcome = verify_base(&base, k).ok()?;
            let optimal = optimal_subset(&base, k).ok()?;
            let chosen = select(pool, &ordered, &strategy).ok()?;
            let mut grape: Vec<usize> = chosen
                .chosen
                .iter()
                .filter_map(|c| pool.position(&c.response_id))
                .collect();
            grape.sort_unstable();
            Some((outcome, grape == optimal))
        })
        .collect();

    let mut report = KlPoolReport {
        k,
        ..Default::default()
    };
    let mut summary = VerificationReport::default();
    for (pool, result) in pools.iter().zip(per_pool) {
        match result {
            None => report.skipped += 1,
            Some((outcome, bridged)) => {
                summary.absorb(&outcome);
                if !bridged {
                    report.bridge_mismatches.push(pool.instruction_id.clone());
                }
            }
        }
    }
    report.trials = summary.trials;
    report.passes = summary.passes;
    report.max_abs_error = summary.max_abs_error;
    report.worst_subset_gap = summary.worst_subset_gap;
    report
}
