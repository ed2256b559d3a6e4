//! Sample-size planning.
//!
//! [`estimate`] turns a condition plus a reliability requirement into a
//! [`SamplePlan`]: how many test examples are needed, how the error tolerance
//! and failure probability are split across the variables of each clause,
//! and, for the recognised condition shapes, a cheaper staged plan.
//!
//! The failure budget `delta` is first adjusted for reuse of the testset over
//! `H` commits (union bound over `H` verdicts, or over all `2^H` signal
//! histories when every verdict is released), then split evenly across
//! clauses and, within a clause, evenly across its variables.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::{
    bennett_bound, bennett_h, exact_binomial_n, hoeffding_n, BennettQuery, BoundError, FailureProb, HoeffdingQuery,
};
use crate::dsl::{
    match_pattern, AdaptivityKind, CiScript, Clause, Formula, Mode, PatternTag, Variable, LARGE_LOWER_BOUND,
};
use crate::evaluator::StatEstimates;

/// Variance-bound rows of the deferred Pattern 2 table.
pub const DIFF_TABLE_STEP: f64 = 0.05;

/// Rows `1 - lower bound` of the deferred lower-bound table.
pub const LOWER_TABLE_STEP: f64 = 0.01;

/// The exact binomial scan is skipped when the Bennett plan already needs
/// more samples than this; the scan cost grows with `n^1.5`.
pub const EXACT_PLAN_CAP: u64 = 200_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimateError {
    #[error("invalid reliability requirement: {0}")]
    InvalidSpec(String),
    #[error("clause {clause} (`{text}`): {source}")]
    Clause { clause: usize, text: String, source: BoundError },
    #[error(transparent)]
    Bound(#[from] BoundError),
    #[error("exact binomial plan not applicable: {0}")]
    ExactNotApplicable(String),
}

/// What the caller asks of the CI process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilitySpec {
    pub delta: f64,
    pub mode: Mode,
    pub adaptivity: AdaptivityKind,
    pub steps: u32,
}

impl ReliabilitySpec {
    pub fn new(delta: f64, mode: Mode, adaptivity: AdaptivityKind, steps: u32) -> Result<Self, EstimateError> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(EstimateError::InvalidSpec(format!("delta must lie in (0, 1), got {delta}")));
        }
        if steps == 0 {
            return Err(EstimateError::InvalidSpec("steps must be at least 1".into()));
        }
        Ok(Self { delta, mode, adaptivity, steps })
    }

    pub fn from_script(script: &CiScript) -> Result<Self, EstimateError> {
        Self::new(script.delta, script.mode, script.adaptivity.kind(), script.steps)
    }

    fn base(&self) -> FailureProb {
        FailureProb::new(self.delta).expect("validated at construction")
    }

    /// `delta / share`, then adjusted for testset reuse.
    pub fn adjusted_share(&self, share: f64) -> FailureProb {
        adjust(self, self.base().split(share))
    }
}

fn adjust(spec: &ReliabilitySpec, d: FailureProb) -> FailureProb {
    match spec.adaptivity {
        AdaptivityKind::Full => d.split_pow2(spec.steps),
        AdaptivityKind::None | AdaptivityKind::FirstChange => d.split(f64::from(spec.steps)),
    }
}

/// Failure probability each single verdict may use: `delta / H` when
/// verdicts are withheld or released only until the first change, and
/// `delta / 2^H` when every verdict is released.
pub fn adjusted_delta(spec: &ReliabilitySpec) -> FailureProb {
    adjust(spec, spec.base())
}

/// Tolerance and failure share of one variable in one clause.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeafAllocation {
    pub variable: Variable,
    pub coefficient: f64,
    pub tolerance: f64,
    #[serde(rename = "ln_delta")]
    pub delta: FailureProb,
    pub samples: u64,
}

/// How a clause is estimated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClauseEstimate {
    /// Each variable is estimated separately; the clause interval is built
    /// from the per-variable intervals.
    Leaves { leaves: Vec<LeafAllocation> },
    /// The whole left-hand side is estimated as one random variable
    /// (`n - o` per example, in `[-1, 1]`).
    Joint {
        tolerance: f64,
        #[serde(rename = "ln_delta")]
        delta: FailureProb,
        samples: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClauseAllocation {
    pub clause: usize,
    pub estimate: ClauseEstimate,
}

/// Allocation of tolerance and failure probability over a formula.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Allocation {
    pub clauses: Vec<ClauseAllocation>,
}

impl Allocation {
    pub fn clause(&self, index: usize) -> Option<&ClauseEstimate> {
        self.clauses.iter().find(|c| c.clause == index).map(|c| &c.estimate)
    }

    /// Tolerance used for `v` inside clause `index`.
    pub fn tolerance(&self, index: usize, v: Variable) -> Option<f64> {
        match self.clause(index)? {
            ClauseEstimate::Leaves { leaves } => leaves.iter().find(|l| l.variable == v).map(|l| l.tolerance),
            ClauseEstimate::Joint { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "bound", rename_all = "snake_case")]
pub enum BoundKind {
    Hoeffding,
    Bennett { p: f64 },
    ExactBinomial,
}

/// One row of a deferred plan: if the observed variance bound is at most
/// `p`, the test needs `n` examples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeferredRow {
    pub p: f64,
    pub n: u64,
}

/// Testset sizes that depend on a quantity observed at commit time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeferredTable {
    pub rows: Vec<DeferredRow>,
    /// Size used when the observed bound exceeds every row.
    pub fallback: u64,
}

impl DeferredTable {
    /// Smallest row covering `p`.
    pub fn resolve(&self, p: f64) -> u64 {
        self.rows.iter().find(|r| r.p >= p - 1e-12).map_or(self.fallback, |r| r.n)
    }

    pub fn min_n(&self) -> u64 {
        self.rows.iter().map(|r| r.n).min().unwrap_or(self.fallback).min(self.fallback)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePlan {
    /// Labeled examples the test needs. For deferred plans this is the
    /// upper bound reached when the observed quantity is uninformative.
    pub testset_size: u64,
    pub allocation: Allocation,
    pub bound: BoundKind,
    pub pattern: PatternTag,
    /// Pattern 1: examples needed, predictions only, to filter on `d`.
    pub unlabeled_size: u64,
    /// Most labels a single commit may request.
    pub per_commit_labels: u64,
    /// Size of the set estimating `d` (Pattern 2) or the coarse lower
    /// bound (large lower bound); disjoint from the main test portion.
    pub secondary_testset_size: u64,
    pub deferred: Option<DeferredTable>,
    /// `ln` of the per-verdict failure probability after reuse adjustment.
    pub ln_adjusted_delta: f64,
}

impl SamplePlan {
    /// Examples the testset manifest must hold before a session can open.
    pub fn required_manifest_size(&self) -> u64 {
        match self.pattern {
            PatternTag::Pattern1 { .. } => self.testset_size.max(self.unlabeled_size),
            PatternTag::Pattern2Diff { .. } | PatternTag::Pattern2Lower { .. } => {
                let main = self.deferred.as_ref().map_or(self.testset_size, DeferredTable::min_n);
                self.secondary_testset_size + main
            }
            PatternTag::Generic => self.testset_size,
        }
    }

    /// Size of the main test portion once the estimate from the secondary
    /// set is known. Plans without a secondary set return `testset_size`.
    pub fn resolve_main_size(&self, secondary: &StatEstimates) -> u64 {
        let key = match self.pattern {
            PatternTag::Pattern2Diff { d, .. } => secondary.diff.unwrap_or(1.0) + 4.0 * d,
            PatternTag::Pattern2Lower { b, .. } => 1.0 - (secondary.new_accuracy.unwrap_or(0.0) - 2.0 * b),
            _ => return self.testset_size,
        };
        self.deferred.as_ref().map_or(self.testset_size, |t| t.resolve(key))
    }

    /// True when the plan only needs labels where the two models disagree.
    pub fn labels_only_differing(&self) -> bool {
        matches!(self.pattern, PatternTag::Pattern1 { .. } | PatternTag::Pattern2Diff { .. })
    }
}

/// Which family of plans [`estimate`] may return.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStrategy {
    /// Pattern-specific plan when one applies and is cheaper, else Hoeffding.
    #[default]
    Auto,
    /// Always the Hoeffding plan.
    Baseline,
    /// Exact binomial inversion per variable; single-variable clauses only.
    Exact,
}

pub fn estimate(f: &Formula, spec: &ReliabilitySpec, strategy: PlanStrategy) -> Result<SamplePlan, EstimateError> {
    match strategy {
        PlanStrategy::Baseline => estimate_formula(f, spec),
        PlanStrategy::Exact => estimate_exact(f, spec),
        PlanStrategy::Auto => match match_pattern(f) {
            PatternTag::Generic => estimate_formula(f, spec),
            PatternTag::Pattern1 { .. } => estimate_pattern1(f, spec),
            PatternTag::Pattern2Diff { .. } => estimate_pattern2(f, spec),
            PatternTag::Pattern2Lower { .. } => estimate_pattern2_lower(f, spec),
        },
    }
}

/// Hoeffding plan for one clause at failure budget `delta`.
///
/// The budget is split evenly over the `k` variables. With equal shares,
/// `max_i c_i^2 / eps_i^2` subject to `sum eps_i = eps` is minimised by
/// `eps_i = eps |c_i| / sum |c_j|`, which equalises every leaf's count.
pub fn estimate_clause(cl: &Clause, delta: FailureProb) -> Result<(u64, Vec<LeafAllocation>), BoundError> {
    let terms = cl.lhs.terms();
    let leaf_delta = delta.split(terms.len() as f64);
    let weight: f64 = terms.iter().map(|t| t.coefficient.abs()).sum();
    let mut leaves = Vec::with_capacity(terms.len());
    let mut n = 0;
    for t in terms {
        let tolerance = cl.tolerance * t.coefficient.abs() / weight;
        let samples = hoeffding_n(&HoeffdingQuery {
            range: t.coefficient.abs() * t.variable.range(),
            tolerance,
            delta: leaf_delta,
        })?;
        n = n.max(samples);
        leaves.push(LeafAllocation {
            variable: t.variable,
            coefficient: t.coefficient,
            tolerance,
            delta: leaf_delta,
            samples,
        });
    }
    Ok((n, leaves))
}

fn clause_error(f: &Formula, i: usize) -> impl FnOnce(BoundError) -> EstimateError + '_ {
    move |source| EstimateError::Clause { clause: i, text: f.clauses()[i].to_string(), source }
}

/// The baseline plan: Hoeffding for every variable of every clause.
pub fn estimate_formula(f: &Formula, spec: &ReliabilitySpec) -> Result<SamplePlan, EstimateError> {
    let adjusted = adjusted_delta(spec);
    let clause_delta = adjusted.split(f.clauses().len() as f64);
    let mut n = 0;
    let mut allocation = Allocation::default();
    for (i, cl) in f.clauses().iter().enumerate() {
        let (count, leaves) = estimate_clause(cl, clause_delta).map_err(clause_error(f, i))?;
        n = n.max(count);
        allocation.clauses.push(ClauseAllocation { clause: i, estimate: ClauseEstimate::Leaves { leaves } });
    }
    Ok(SamplePlan {
        testset_size: n,
        allocation,
        bound: BoundKind::Hoeffding,
        pattern: PatternTag::Generic,
        unlabeled_size: 0,
        per_commit_labels: n,
        secondary_testset_size: 0,
        deferred: None,
        ln_adjusted_delta: adjusted.ln(),
    })
}

/// Like [`estimate_formula`] but each variable's count comes from inverting
/// the binomial distribution exactly around the clause threshold. Needs
/// every clause to be a single variable with coefficient 1 and a threshold
/// inside `(0, 1)`.
pub fn estimate_exact(f: &Formula, spec: &ReliabilitySpec) -> Result<SamplePlan, EstimateError> {
    let mut plan = estimate_formula(f, spec)?;
    let clause_delta = adjusted_delta(spec).split(f.clauses().len() as f64);
    let mut n = 0;
    for (i, cl) in f.clauses().iter().enumerate() {
        let terms = cl.lhs.terms();
        if terms.len() != 1 || terms[0].coefficient != 1.0 {
            return Err(EstimateError::ExactNotApplicable(format!("clause `{cl}` is not a single variable")));
        }
        if !(cl.threshold > 0.0 && cl.threshold < 1.0) {
            return Err(EstimateError::ExactNotApplicable(format!("clause `{cl}` has a threshold outside (0, 1)")));
        }
        let count = exact_binomial_n(cl.threshold, cl.tolerance, clause_delta).map_err(clause_error(f, i))?;
        if let ClauseEstimate::Leaves { leaves } = &mut plan.allocation.clauses[i].estimate {
            leaves[0].samples = count;
        }
        n = n.max(count);
    }
    plan.testset_size = n;
    plan.per_commit_labels = n;
    plan.bound = BoundKind::ExactBinomial;
    Ok(plan)
}

/// `ceil(-ln(delta/4) / (p h(eps/p)) * p)`: labels one commit needs when
/// only the examples where the models disagree (a fraction `p`) are labeled.
pub fn active_label_count(p: f64, tolerance: f64, delta: f64) -> u64 {
    let single_step = -(delta / 4.0).ln() / (p * bennett_h(tolerance / p));
    (single_step * p).ceil() as u64
}

/// Per-commit label budget of a Bennett plan with variance bound `p`,
/// never more than the plan's testset.
pub fn active_label_schedule(plan: &SamplePlan, p: f64, tolerance: f64, spec: &ReliabilitySpec) -> u64 {
    active_label_count(p, tolerance, spec.delta).min(plan.testset_size)
}

/// Hierarchical plan for `d < A +/- B /\ n - o > C +/- D`.
///
/// Filter: estimate `d` to within `B` on unlabeled data (predictions only).
/// If the filter does not reject, `d < A + 2B` with high probability, which
/// bounds the variance of `n_i - o_i` by `p = A + 2B` and lets Bennett test
/// the gain clause with far fewer labels.
pub fn estimate_pattern1(f: &Formula, spec: &ReliabilitySpec) -> Result<SamplePlan, EstimateError> {
    let generic = estimate_formula(f, spec)?;
    let PatternTag::Pattern1 { a, b, d, diff_clause, gain_clause, .. } = match_pattern(f) else {
        return Ok(generic);
    };
    let p = a + 2.0 * b;
    if p >= 1.0 - 1e-12 {
        return Ok(generic);
    }
    let filter_delta = spec.adjusted_share(2.0);
    let test_delta = spec.adjusted_share(4.0);
    let bennett = bennett_bound(&BennettQuery::unit(p, d, test_delta)).ceil();
    if bennett.is_nan() || bennett >= generic.testset_size as f64 {
        return Ok(generic);
    }
    let n = bennett as u64;
    let unlabeled = hoeffding_n(&HoeffdingQuery { range: 1.0, tolerance: b, delta: filter_delta })
        .map_err(clause_error(f, diff_clause))?;
    let mut clauses = vec![
        ClauseAllocation {
            clause: diff_clause,
            estimate: ClauseEstimate::Leaves {
                leaves: vec![LeafAllocation {
                    variable: Variable::Diff,
                    coefficient: 1.0,
                    tolerance: b,
                    delta: filter_delta,
                    samples: unlabeled,
                }],
            },
        },
        ClauseAllocation {
            clause: gain_clause,
            estimate: ClauseEstimate::Joint { tolerance: d, delta: test_delta, samples: n },
        },
    ];
    clauses.sort_by_key(|c| c.clause);
    let mut plan = SamplePlan {
        testset_size: n,
        allocation: Allocation { clauses },
        bound: BoundKind::Bennett { p },
        pattern: match_pattern(f),
        unlabeled_size: unlabeled,
        per_commit_labels: 0,
        secondary_testset_size: 0,
        deferred: None,
        ln_adjusted_delta: generic.ln_adjusted_delta,
    };
    plan.per_commit_labels = active_label_schedule(&plan, p, d, spec);
    Ok(plan)
}

fn table_ps(step: f64, last: f64) -> impl Iterator<Item = f64> {
    let per_unit = (1.0 / step).round();
    let rows = (last * per_unit).round() as usize;
    (1..=rows).map(move |i| i as f64 / per_unit)
}

/// Plan for `n - o > C +/- D` alone.
///
/// A secondary set, disjoint from the main one, estimates `d` to within `2D`
/// (a quarter of the tolerance and half of the range of `n - o`, hence
/// sixteen times fewer examples than the Hoeffding test). After observing
/// `d_hat`, the variance of `n_i - o_i` is bounded by `p = d_hat + 4D`, and
/// the main set size is read off a precomputed Bennett table.
pub fn estimate_pattern2(f: &Formula, spec: &ReliabilitySpec) -> Result<SamplePlan, EstimateError> {
    let generic = estimate_formula(f, spec)?;
    let PatternTag::Pattern2Diff { d, .. } = match_pattern(f) else {
        return Ok(generic);
    };
    let secondary_delta = spec.adjusted_share(2.0);
    let test_delta = spec.adjusted_share(4.0);
    let secondary = hoeffding_n(&HoeffdingQuery { range: 1.0, tolerance: 2.0 * d, delta: secondary_delta })
        .map_err(clause_error(f, 0))?;
    let rows: Vec<DeferredRow> = table_ps(DIFF_TABLE_STEP, 1.0)
        .map(|p| {
            let n = bennett_bound(&BennettQuery::unit(p, d, test_delta)).ceil();
            let n = if n < generic.testset_size as f64 { n as u64 } else { generic.testset_size };
            DeferredRow { p, n }
        })
        .collect();
    if rows.iter().all(|r| r.n >= generic.testset_size) {
        return Ok(generic);
    }
    Ok(SamplePlan {
        testset_size: generic.testset_size,
        allocation: Allocation {
            clauses: vec![ClauseAllocation {
                clause: 0,
                estimate: ClauseEstimate::Joint { tolerance: d, delta: test_delta, samples: generic.testset_size },
            }],
        },
        bound: BoundKind::Bennett { p: 1.0 },
        pattern: match_pattern(f),
        unlabeled_size: 0,
        per_commit_labels: generic.testset_size,
        secondary_testset_size: secondary,
        deferred: Some(DeferredTable { rows, fallback: generic.testset_size }),
        ln_adjusted_delta: generic.ln_adjusted_delta,
    })
}

/// Plan for `n > A +/- B` with `A >= 0.9`.
///
/// A coarse stage estimates `n` to within `2B` on a first set. If the
/// resulting lower bound `lb` is at least 0.9, the error indicator
/// `1 - correct_i` has variance at most `p = 1 - lb`, and the fine stage on
/// a disjoint set uses the smaller of the Bennett count and the exact
/// binomial count. Otherwise the fine stage falls back to Hoeffding.
pub fn estimate_pattern2_lower(f: &Formula, spec: &ReliabilitySpec) -> Result<SamplePlan, EstimateError> {
    let generic = estimate_formula(f, spec)?;
    let PatternTag::Pattern2Lower { a, b } = match_pattern(f) else {
        return Ok(generic);
    };
    let coarse_delta = spec.adjusted_share(2.0);
    let bennett_delta = spec.adjusted_share(4.0);
    let coarse = hoeffding_n(&HoeffdingQuery { range: 1.0, tolerance: 2.0 * b, delta: coarse_delta })
        .map_err(clause_error(f, 0))?;
    let bennett_rows: Vec<(f64, f64)> = table_ps(LOWER_TABLE_STEP, 1.0 - LARGE_LOWER_BOUND)
        .map(|p| (p, bennett_bound(&BennettQuery::unit(p, b, bennett_delta)).ceil()))
        .collect();
    let cheapest = bennett_rows.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let exact =
        if cheapest <= EXACT_PLAN_CAP as f64 && a < 1.0 { exact_binomial_n(a, b, coarse_delta).ok() } else { None };
    let rows: Vec<DeferredRow> = bennett_rows
        .into_iter()
        .map(|(p, n)| {
            let mut best = generic.testset_size;
            if n < best as f64 {
                best = n as u64;
            }
            if let Some(e) = exact {
                best = best.min(e);
            }
            DeferredRow { p, n: best }
        })
        .collect();
    if rows.iter().all(|r| r.n >= generic.testset_size) {
        return Ok(generic);
    }
    let fine_delta = coarse_delta;
    Ok(SamplePlan {
        testset_size: generic.testset_size,
        allocation: Allocation {
            clauses: vec![ClauseAllocation {
                clause: 0,
                estimate: ClauseEstimate::Leaves {
                    leaves: vec![LeafAllocation {
                        variable: Variable::New,
                        coefficient: 1.0,
                        tolerance: b,
                        delta: fine_delta,
                        samples: generic.testset_size,
                    }],
                },
            }],
        },
        bound: if exact.is_some() {
            BoundKind::ExactBinomial
        } else {
            BoundKind::Bennett { p: 1.0 - LARGE_LOWER_BOUND }
        },
        pattern: match_pattern(f),
        unlabeled_size: 0,
        per_commit_labels: generic.testset_size,
        secondary_testset_size: coarse,
        deferred: Some(DeferredTable { rows, fallback: generic.testset_size }),
        ln_adjusted_delta: generic.ln_adjusted_delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse_condition;
    use proptest::prelude::*;

    fn spec(reliability: f64, adaptivity: AdaptivityKind, steps: u32) -> ReliabilitySpec {
        ReliabilitySpec::new(1.0 - reliability, Mode::FpFree, adaptivity, steps).unwrap()
    }

    fn spec_delta(delta: f64, adaptivity: AdaptivityKind, steps: u32) -> ReliabilitySpec {
        ReliabilitySpec::new(delta, Mode::FpFree, adaptivity, steps).unwrap()
    }

    fn n(cond: &str, s: &ReliabilitySpec) -> u64 {
        estimate_formula(&parse_condition(cond).unwrap(), s).unwrap().testset_size
    }

    /// `ceil(-r^2 ln(delta) / (2 eps^2))` written out independently.
    fn hoeffding_oracle(r: f64, eps: f64, ln_delta: f64) -> u64 {
        (-r * r * ln_delta / (2.0 * eps * eps)).ceil() as u64
    }

    #[test]
    fn adjusted_delta_modes() {
        let full = adjusted_delta(&spec_delta(0.0001, AdaptivityKind::Full, 32));
        assert!((full.ln() - (0.0001f64.ln() - 32.0 * 2f64.ln())).abs() < 1e-12);
        let none = adjusted_delta(&spec_delta(0.0001, AdaptivityKind::None, 32));
        assert!((none.value() - 3.125e-6).abs() < 1e-18);
        let first = adjusted_delta(&spec_delta(0.002, AdaptivityKind::FirstChange, 7));
        let none7 = adjusted_delta(&spec_delta(0.002, AdaptivityKind::None, 7));
        assert_eq!(first, none7);
        assert!((first.value() - 0.002 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn spec_validation() {
        assert!(ReliabilitySpec::new(0.0, Mode::FpFree, AdaptivityKind::Full, 1).is_err());
        assert!(ReliabilitySpec::new(0.1, Mode::FpFree, AdaptivityKind::Full, 0).is_err());
    }

    const FIG2: [(f64, f64, [u64; 4]); 16] = [
        (0.99, 0.1, [404, 1340, 1753, 5496]),
        (0.99, 0.05, [1615, 5358, 7012, 21984]),
        (0.99, 0.025, [6457, 21429, 28045, 87933]),
        (0.99, 0.01, [40355, 133930, 175282, 549581]),
        (0.999, 0.1, [519, 1455, 2214, 5957]),
        (0.999, 0.05, [2075, 5818, 8854, 23826]),
        (0.999, 0.025, [8299, 23271, 35414, 95302]),
        (0.999, 0.01, [51868, 145443, 221333, 595633]),
        (0.9999, 0.1, [634, 1570, 2674, 6417]),
        (0.9999, 0.05, [2536, 6279, 10696, 25668]),
        (0.9999, 0.025, [10141, 25113, 42782, 102670]),
        (0.9999, 0.01, [63381, 156956, 267385, 641684]),
        (0.99999, 0.1, [749, 1685, 3135, 6878]),
        (0.99999, 0.05, [2996, 6739, 12538, 27510]),
        (0.99999, 0.025, [11983, 26955, 50150, 110038]),
        (0.99999, 0.01, [74894, 168469, 313437, 687736]),
    ];

    #[test]
    fn reference_table_for_h32() {
        for (rel, eps, expected) in FIG2 {
            let f1 = format!("n > 0.8 +/- {eps}");
            let f2 = format!("n - o > 0.02 +/- {eps}");
            let f4 = format!("d < 0.1 +/- {eps}");
            let none = spec(rel, AdaptivityKind::None, 32);
            let full = spec(rel, AdaptivityKind::Full, 32);
            let got = [n(&f1, &none), n(&f1, &full), n(&f2, &none), n(&f2, &full)];
            assert_eq!(got, expected, "1-delta={rel} eps={eps}");
            assert_eq!(n(&f4, &none), expected[0]);
            assert_eq!(n(&f4, &full), expected[1]);
        }
    }

    #[test]
    fn spot_values() {
        let full = spec_delta(0.0001, AdaptivityKind::Full, 32);
        assert_eq!(n("n > 0.8 +/- 0.05", &full), 6279);
        assert_eq!(n("n > 0.8 +/- 0.01", &full), 156956);
        let none = spec_delta(0.0001, AdaptivityKind::None, 32);
        let plan = estimate_formula(&parse_condition("n - o > 0.02 +/- 0.01").unwrap(), &none).unwrap();
        assert_eq!(plan.testset_size, 267385);
        let ClauseEstimate::Leaves { leaves } = plan.allocation.clause(0).unwrap() else { panic!() };
        for leaf in leaves {
            assert!((leaf.tolerance - 0.005).abs() < 1e-15);
            assert!((leaf.delta.value() - 0.0001 / 64.0).abs() < 1e-18);
        }
    }

    #[test]
    fn conjunction_is_max_of_clauses_at_half_budget() {
        let s = spec(0.9999, AdaptivityKind::Full, 32);
        let f5 = "d < 0.1 +/- 0.05 /\\ n - o > 0.02 +/- 0.05";
        let ln_half = adjusted_delta(&s).ln() - 2f64.ln();
        let f4 = hoeffding_oracle(1.0, 0.05, ln_half);
        let f2 = hoeffding_oracle(1.0, 0.025, ln_half - 2f64.ln());
        assert_eq!(n(f5, &s), f4.max(f2));
    }

    /// Brute force over eps_1 on a 1e-5 grid with equal delta shares.
    fn grid_minimum(c1: f64, c2: f64, eps: f64, ln_leaf: f64) -> u64 {
        let steps = (eps / 1e-5).round() as u64;
        (1..steps)
            .map(|i| {
                let e1 = i as f64 * 1e-5;
                hoeffding_oracle(c1, e1, ln_leaf).max(hoeffding_oracle(c2, eps - e1, ln_leaf))
            })
            .min()
            .unwrap()
    }

    /// The closed form solves the continuous problem, so it is never worse
    /// than any grid point and at most one grid step's worth better.
    #[test]
    fn allocation_matches_grid_search() {
        let f = parse_condition("n - 1.1 * o > 0.01 +/- 0.01 /\\ d < 0.1 +/- 0.01").unwrap();
        for adaptivity in [AdaptivityKind::None, AdaptivityKind::Full] {
            let s = spec(0.9999, adaptivity, 32);
            let plan = estimate_formula(&f, &s).unwrap();
            let ClauseEstimate::Leaves { leaves } = plan.allocation.clause(0).unwrap() else { panic!() };
            assert!((leaves[0].tolerance - 0.01 / 2.1).abs() < 1e-15);
            assert!((leaves[1].tolerance - 0.011 / 2.1).abs() < 1e-15);
            let ln_leaf = adjusted_delta(&s).ln() - 4f64.ln();
            let brute = grid_minimum(1.0, 1.1, 0.01, ln_leaf);
            let ours = leaves.iter().map(|l| l.samples).max().unwrap();
            assert!(ours <= brute, "{ours} vs {brute}");
            let e1 = 0.01 / 2.1;
            let step_worse = hoeffding_oracle(1.0, e1 - 1e-5, ln_leaf);
            assert!(brute <= step_worse, "{brute} vs {step_worse}");
            // a grid that contains the optimum reproduces it exactly
            let exact_grid = hoeffding_oracle(1.0, e1, ln_leaf).max(hoeffding_oracle(1.1, 0.01 - e1, ln_leaf));
            assert!(ours.abs_diff(exact_grid) <= 1);
        }
    }

    #[test]
    fn pattern1_bennett_counts() {
        let f = parse_condition("d < 0.08 +/- 0.01 /\\ n - o > 0.02 +/- 0.01").unwrap();
        let none = spec_delta(0.0001, AdaptivityKind::None, 32);
        let plan = estimate_pattern1(&f, &none).unwrap();
        assert_eq!(plan.bound, BoundKind::Bennett { p: 0.1 });
        assert!(plan.testset_size.abs_diff(29047) <= 1, "{}", plan.testset_size);
        assert_eq!(plan.per_commit_labels, 2189);
        assert_eq!(plan.unlabeled_size, hoeffding_oracle(1.0, 0.01, (0.0001f64 / 2.0).ln() - 32f64.ln()));

        let full = spec_delta(0.0001, AdaptivityKind::Full, 32);
        let plan = estimate_pattern1(&f, &full).unwrap();
        // -(ln(1e-4 / 4) - 32 ln 2) / (0.1 h(0.1)) = 67705.03
        assert_eq!(plan.testset_size, 67706);
        assert!(plan.testset_size < estimate_formula(&f, &full).unwrap().testset_size);
    }

    #[test]
    fn pattern1_vacuous_variance_is_generic() {
        let f = parse_condition("d < 0.9 +/- 0.05 /\\ n - o > 0.02 +/- 0.01").unwrap();
        let s = spec(0.9999, AdaptivityKind::None, 32);
        assert_eq!(estimate_pattern1(&f, &s).unwrap(), estimate_formula(&f, &s).unwrap());
        let f = parse_condition("d < 0.98 +/- 0.01 /\\ n - o > 0.02 +/- 0.01").unwrap();
        assert_eq!(estimate_pattern1(&f, &s).unwrap(), estimate_formula(&f, &s).unwrap());
    }

    #[test]
    fn active_labels() {
        assert_eq!(active_label_count(0.1, 0.01, 0.0001), 2189);
        let single = -(0.0001f64 / 4.0).ln() / (0.1 * bennett_h(0.1));
        assert_eq!(active_label_count(0.1, 0.01, 0.0001), (single * 0.1).ceil() as u64);
        let f = parse_condition("d < 0.08 +/- 0.01 /\\ n - o > 0.02 +/- 0.01").unwrap();
        let plan = estimate_pattern1(&f, &spec(0.9999, AdaptivityKind::None, 32)).unwrap();
        assert_eq!(active_label_schedule(&plan, 1.0, 0.01, &spec(0.9999, AdaptivityKind::None, 32)), plan.testset_size);
    }

    #[test]
    fn pattern2_secondary_is_sixteen_times_smaller() {
        let s = spec_delta(0.002, AdaptivityKind::None, 7);
        let ln_half = s.adjusted_share(2.0).ln();
        let secondary = -ln_half / (2.0 * 0.04 * 0.04);
        let primary = -4.0 * ln_half / (2.0 * 0.02 * 0.02);
        assert!((primary / secondary - 16.0).abs() < 1e-12);
        let f = parse_condition("n - o > 0.02 +/- 0.02").unwrap();
        let plan = estimate_pattern2(&f, &s).unwrap();
        assert_eq!(plan.secondary_testset_size, secondary.ceil() as u64);
    }

    #[test]
    fn pattern2_semeval_arithmetic() {
        let f = parse_condition("n - o > 0.02 +/- 0.02").unwrap();
        let none = spec_delta(0.002, AdaptivityKind::None, 7);
        let generic = estimate_formula(&f, &none).unwrap();
        assert_eq!(generic.testset_size, 44269);
        let full = spec_delta(0.002, AdaptivityKind::Full, 7);
        let big = estimate_formula(&f, &full).unwrap().testset_size as f64;
        assert!((big / 58800.0 - 1.0).abs() < 0.01, "{big}");

        let plan = estimate_pattern2(&f, &none).unwrap();
        assert_eq!(plan.testset_size, 44269);
        let table = plan.deferred.as_ref().unwrap();
        assert_eq!(table.rows.len(), 20);
        let at_p10 = table.resolve(0.1);
        assert!(at_p10 <= 5509, "{at_p10}");
        let oracle = ((7f64.ln() - (0.002f64 / 4.0).ln()) / (0.1 * bennett_h(0.2))).ceil() as u64;
        assert_eq!(at_p10, oracle);
        assert_eq!(table.resolve(0.07), at_p10);
        assert_eq!(table.resolve(1.0), 44269);
        assert_eq!(table.resolve(1.2), 44269);
    }

    #[test]
    fn pattern2_table_monotone_and_capped() {
        let f = parse_condition("n - o > 0.01 +/- 0.01").unwrap();
        let plan = estimate_pattern2(&f, &spec(0.9999, AdaptivityKind::Full, 32)).unwrap();
        let t = plan.deferred.unwrap();
        for w in t.rows.windows(2) {
            assert!(w[0].n <= w[1].n);
        }
        assert!(t.rows.iter().all(|r| r.n <= plan.testset_size));
    }

    #[test]
    fn pattern2_lower_two_stage() {
        let f = parse_condition("n > 0.95 +/- 0.01").unwrap();
        let s = spec(0.9999, AdaptivityKind::None, 32);
        let generic = estimate_formula(&f, &s).unwrap();
        let plan = estimate_pattern2_lower(&f, &s).unwrap();
        assert_eq!(plan.secondary_testset_size, hoeffding_oracle(1.0, 0.02, (0.0001f64 / 2.0).ln() - 32f64.ln()));
        let t = plan.deferred.as_ref().unwrap();
        let fine = t.resolve(1.0 - 0.93);
        assert!(fine < generic.testset_size, "{fine} vs {}", generic.testset_size);
        let bennett = ((32f64.ln() - (0.0001f64 / 4.0).ln()) / (0.07 * bennett_h(0.01 / 0.07))).ceil() as u64;
        assert!(fine <= bennett);
        assert_eq!(t.resolve(0.2), generic.testset_size);
    }

    #[test]
    fn low_lower_bound_is_generic() {
        let f = parse_condition("n > 0.5 +/- 0.05").unwrap();
        let s = spec(0.999, AdaptivityKind::None, 8);
        assert_eq!(estimate(&f, &s, PlanStrategy::Auto).unwrap(), estimate_formula(&f, &s).unwrap());
    }

    #[test]
    fn exact_plan_beats_hoeffding() {
        let f = parse_condition("n > 0.9 +/- 0.05").unwrap();
        let s = spec_delta(0.05, AdaptivityKind::None, 8);
        let exact = estimate_exact(&f, &s).unwrap();
        let baseline = estimate_formula(&f, &s).unwrap();
        assert_eq!(exact.bound, BoundKind::ExactBinomial);
        assert!(exact.testset_size < baseline.testset_size);
        assert!(estimate_exact(&parse_condition("n - o > 0.1 +/- 0.05").unwrap(), &s).is_err());
    }

    #[test]
    fn mode_does_not_change_size() {
        let f = parse_condition("n - o > 0.02 +/- 0.05").unwrap();
        let fp = ReliabilitySpec::new(0.01, Mode::FpFree, AdaptivityKind::Full, 8).unwrap();
        let fnf = ReliabilitySpec::new(0.01, Mode::FnFree, AdaptivityKind::Full, 8).unwrap();
        assert_eq!(estimate(&f, &fp, PlanStrategy::Auto).unwrap(), estimate(&f, &fnf, PlanStrategy::Auto).unwrap());
    }

    #[test]
    fn plan_json_roundtrip() {
        for cond in [
            "d < 0.08 +/- 0.01 /\\ n - o > 0.02 +/- 0.01",
            "n - o > 0.02 +/- 0.02",
            "n > 0.95 +/- 0.01",
            "n - 1.1 * o > 0.01 +/- 0.01 /\\ d < 0.1 +/- 0.01",
        ] {
            let plan =
                estimate(&parse_condition(cond).unwrap(), &spec(0.999, AdaptivityKind::Full, 16), PlanStrategy::Auto)
                    .unwrap();
            let json = serde_json::to_string(&plan).unwrap();
            let back: SamplePlan = serde_json::from_str(&json).unwrap();
            assert_eq!(back, plan);
        }
    }

    fn adaptivity() -> impl Strategy<Value = AdaptivityKind> {
        prop_oneof![Just(AdaptivityKind::Full), Just(AdaptivityKind::None), Just(AdaptivityKind::FirstChange)]
    }

    proptest! {
        #[test]
        fn plan_monotonicity(
            eps in 0.01f64..0.2, de in 0.0f64..0.1,
            delta in 1e-6f64..0.2, dd in 0.0f64..0.5,
            steps in 1u32..64, ds in 0u32..16,
            kind in adaptivity(),
            cond in prop_oneof![
                Just("n > 0.7 +/- {}"),
                Just("n - o > 0.01 +/- {}"),
                Just("d < 0.1 +/- {} /\\ n - 1.1 * o > 0 +/- {}"),
            ],
        ) {
            let text = |e: f64| cond.replace("{}", &e.to_string());
            let at = |e: f64, d: f64, h: u32, k| n(&text(e), &spec_delta(d.min(0.9), k, h));
            let base = at(eps, delta, steps, kind);
            prop_assert!(at(eps + de, delta, steps, kind) <= base);
            prop_assert!(at(eps, delta + dd, steps, kind) <= base);
            prop_assert!(at(eps, delta, steps + ds, kind) >= base);
            let none = at(eps, delta, steps, AdaptivityKind::None);
            prop_assert_eq!(at(eps, delta, steps, AdaptivityKind::FirstChange), none);
            prop_assert!(at(eps, delta, steps, AdaptivityKind::Full) >= none);
        }

        #[test]
        fn patterns_never_exceed_generic(
            a in 0.01f64..0.9, b in 0.002f64..0.05, c in -0.1f64..0.1, d in 0.005f64..0.1,
            delta in 1e-5f64..0.1, steps in 1u32..40, kind in adaptivity(),
        ) {
            let s = spec_delta(delta, kind, steps);
            for cond in [
                format!("d < {a} +/- {b} /\\ n - o > {c} +/- {d}"),
                format!("n - o > {c} +/- {d}"),
            ] {
                let f = parse_condition(&cond).unwrap();
                let generic = estimate_formula(&f, &s).unwrap();
                let plan = estimate(&f, &s, PlanStrategy::Auto).unwrap();
                prop_assert!(plan.testset_size <= generic.testset_size);
                prop_assert!(plan.per_commit_labels <= plan.testset_size);
                if let Some(t) = &plan.deferred {
                    prop_assert!(t.rows.iter().all(|r| r.n <= generic.testset_size));
                }
            }
        }
    }
}
