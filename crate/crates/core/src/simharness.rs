//! Monte Carlo validation.
//!
//! A [`SyntheticWorld`] fixes the true accuracies of two models and how often
//! they disagree. Each trial draws a testset of the planned size, evaluates
//! up to `H` commits exactly as a session would, and compares every released
//! verdict against the verdict on the true parameters. The fraction of
//! trials with at least one wrong verdict must stay within `delta`.
//!
//! The simulated developers never look at individual test examples, so a
//! commit's per-example outcomes are i.i.d. draws from the world's joint
//! distribution and the simulation works on cell counts directly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::{bennett_bound, BennettQuery};
use crate::dsl::{Adaptivity, CiScript, Comparison, FirstChangeOn, Formula, Mode, PatternTag, Variable};
use crate::estimator::{
    active_label_count, estimate, estimate_formula, EstimateError, PlanStrategy, ReliabilitySpec, SamplePlan,
};
use crate::evaluator::{eval_formula, EvalError, LabelSet, PredictionSet, StatEstimates, Verdict};

/// Feasibility slack for floating-point inputs.
const FEASIBILITY_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("infeasible world: {0}")]
    InfeasibleWorld(String),
    #[error("at least {min} trials are required, got {got}")]
    TooFewTrials { min: u64, got: u64 },
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("grid must be non-empty and inside its domain: {0}")]
    BadGrid(String),
}

/// Fewest trials [`run_coverage`] accepts.
pub const MIN_TRIALS: u64 = 1000;

/// True accuracies `n*` and `o*` and disagreement rate `d*`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub new_accuracy: f64,
    pub old_accuracy: f64,
    pub diff: f64,
}

/// Probabilities of the five per-example outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cells {
    /// Both models correct.
    pub both: f64,
    /// Old correct, new wrong.
    pub old_only: f64,
    /// New correct, old wrong.
    pub new_only: f64,
    /// Both wrong with the same prediction.
    pub neither_same: f64,
    /// Both wrong with different predictions.
    pub neither_differ: f64,
}

impl Cells {
    fn as_array(&self) -> [f64; 5] {
        [self.both, self.old_only, self.new_only, self.neither_same, self.neither_differ]
    }
}

impl SyntheticWorld {
    /// Requires `|n - o| <= d <= min(n + o, 2 - n - o)`, which guarantees a
    /// joint distribution with these marginals exists.
    pub fn new(new_accuracy: f64, old_accuracy: f64, diff: f64) -> Result<Self, SimError> {
        let (n, o, d) = (new_accuracy, old_accuracy, diff);
        for (name, v) in [("n", n), ("o", o), ("d", d)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SimError::InfeasibleWorld(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if d + FEASIBILITY_EPS < (n - o).abs() || d > (n + o).min(2.0 - n - o) + FEASIBILITY_EPS {
            return Err(SimError::InfeasibleWorld(format!(
                "d = {d} must lie in [|n - o|, min(n + o, 2 - n - o)] for n = {n}, o = {o}"
            )));
        }
        Ok(Self { new_accuracy: n, old_accuracy: o, diff: d })
    }

    /// The joint distribution with the least mass on "old correct, new
    /// wrong" that matches the three marginals.
    pub fn cells(&self) -> Cells {
        let (n, o, d) = (self.new_accuracy, self.old_accuracy, self.diff);
        let old_only = 0f64.max(o - n).max(d + o - 1.0);
        let new_only = (old_only + n - o).max(0.0);
        let both = (o - old_only).max(0.0);
        let neither_differ = (d - old_only - new_only).max(0.0);
        let neither_same = (1.0 - both - old_only - new_only - neither_differ).max(0.0);
        Cells { both, old_only, new_only, neither_same, neither_differ }
    }

    /// True value of each clause, in order.
    pub fn clause_values(&self, f: &Formula) -> Vec<f64> {
        f.clauses().iter().map(|c| c.lhs.terms().iter().map(|t| t.coefficient * self.value(t.variable)).sum()).collect()
    }

    pub fn value(&self, v: Variable) -> f64 {
        match v {
            Variable::New => self.new_accuracy,
            Variable::Old => self.old_accuracy,
            Variable::Diff => self.diff,
        }
    }

    /// Whether the formula holds on the true parameters.
    pub fn truth(&self, f: &Formula) -> bool {
        f.clauses().iter().zip(self.clause_values(f)).all(|(c, v)| match c.cmp {
            Comparison::Gt => v > c.threshold,
            Comparison::Lt => v < c.threshold,
        })
    }
}

/// Draws `size` examples: the true label is always `"0"`; a correct model
/// predicts `"0"`, wrong models predict `"1"`, or `"1"` and `"2"` when they
/// disagree while both wrong.
pub fn sample_world<R: Rng>(
    world: &SyntheticWorld,
    size: usize,
    rng: &mut R,
) -> (PredictionSet, PredictionSet, LabelSet) {
    let cells = world.cells().as_array();
    let mut old = Vec::with_capacity(size);
    let mut new = Vec::with_capacity(size);
    let mut labels = Vec::with_capacity(size);
    for i in 0..size {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut cell = 4;
        for (k, p) in cells.iter().enumerate() {
            acc += p;
            if u < acc {
                cell = k;
                break;
            }
        }
        let (o, n) = match cell {
            0 => ("0", "0"),
            1 => ("0", "1"),
            2 => ("1", "0"),
            3 => ("1", "1"),
            _ => ("1", "2"),
        };
        let id = format!("x{i:07}");
        old.push((id.clone(), o.to_string()));
        new.push((id.clone(), n.to_string()));
        labels.push((id, "0".to_string()));
    }
    (
        PredictionSet::new("old", old).expect("generated ids are unique"),
        PredictionSet::new("new", new).expect("generated ids are unique"),
        LabelSet::from_pairs(labels),
    )
}

/// Cell counts of a sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CellCounts(pub [u64; 5]);

impl std::ops::Add for CellCounts {
    type Output = CellCounts;

    fn add(self, o: CellCounts) -> CellCounts {
        let mut out = self.0;
        for (a, b) in out.iter_mut().zip(o.0) {
            *a += b;
        }
        CellCounts(out)
    }
}

impl CellCounts {
    pub fn draw<R: Rng>(cells: &Cells, size: u64, rng: &mut R) -> Self {
        let p = cells.as_array();
        let mut out = [0u64; 5];
        let mut left = size;
        let mut mass = 1.0;
        for k in 0..4 {
            if left == 0 {
                break;
            }
            let q = if mass > 0.0 { (p[k] / mass).clamp(0.0, 1.0) } else { 0.0 };
            let x = Binomial::new(left, q).expect("probability clamped to [0, 1]").sample(rng);
            out[k] = x;
            left -= x;
            mass -= p[k];
        }
        out[4] = left;
        CellCounts(out)
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    /// Estimates as the evaluator would compute them on fully labeled data.
    pub fn stats(&self) -> StatEstimates {
        let [both, old_only, new_only, _, neither_differ] = self.0;
        let total = self.total();
        if total == 0 {
            return StatEstimates::default();
        }
        let t = total as f64;
        let differing = old_only + new_only + neither_differ;
        StatEstimates {
            new_accuracy: Some((both + new_only) as f64 / t),
            old_accuracy: Some((both + old_only) as f64 / t),
            diff: Some(differing as f64 / t),
            diff_accuracy: Some((new_only as f64 - old_only as f64) / t),
            total,
            differing,
            labeled: total,
        }
    }
}

/// Statistics one commit is evaluated on, drawn the way a session splits its
/// manifest for `plan`. Returns the estimates and the test portion size.
pub fn simulate_commit<R: Rng>(plan: &SamplePlan, world: &SyntheticWorld, rng: &mut R) -> (StatEstimates, u64) {
    let cells = world.cells();
    match plan.pattern {
        PatternTag::Pattern1 { .. } => {
            let (u, n) = (plan.unlabeled_size, plan.testset_size);
            let shared = CellCounts::draw(&cells, u.min(n), rng);
            let extra = CellCounts::draw(&cells, u.max(n) - u.min(n), rng);
            let (filter, test) = if u > n { (shared + extra, shared) } else { (shared, shared + extra) };
            let stats = StatEstimates { diff: filter.stats().diff, ..test.stats() };
            (stats, n)
        }
        PatternTag::Pattern2Diff { .. } | PatternTag::Pattern2Lower { .. } => {
            let secondary = CellCounts::draw(&cells, plan.secondary_testset_size, rng).stats();
            let n = plan.resolve_main_size(&secondary);
            (CellCounts::draw(&cells, n, rng).stats(), n)
        }
        PatternTag::Generic => {
            let n = plan.testset_size;
            (CellCounts::draw(&cells, n, rng).stats(), n)
        }
    }
}

/// How the simulated developer picks the next model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Developer {
    /// Every commit comes from the same world.
    Fixed,
    /// Moves `n*` by `step` after each released signal: down after a pass,
    /// up after a fail, so the model hovers around the decision boundary.
    ThresholdChaser { step: f64 },
}

impl Developer {
    fn next(&self, world: SyntheticWorld, released: Option<Verdict>) -> SyntheticWorld {
        let (Developer::ThresholdChaser { step }, Some(v)) = (self, released) else {
            return world;
        };
        let delta = if v == Verdict::Pass { -step } else { *step };
        let n = (world.new_accuracy + delta).clamp(0.0, 1.0);
        let o = world.old_accuracy;
        let d = world.diff.clamp((n - o).abs(), (n + o).min(2.0 - n - o));
        SyntheticWorld { new_accuracy: n, old_accuracy: o, diff: d }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageConfig {
    pub script: CiScript,
    pub strategy: PlanStrategy,
    pub world: SyntheticWorld,
    pub developer: Developer,
    pub trials: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoverageVerdict {
    Covered,
    Violated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub trials: u64,
    pub violations: u64,
    pub empirical_rate: f64,
    pub delta: f64,
    /// `sqrt(delta (1 - delta) / trials)`.
    pub sigma: f64,
    pub verdict: CoverageVerdict,
    pub testset_size: u64,
    pub bound: String,
    pub pattern: String,
    /// Commits evaluated over all trials.
    pub commits: u64,
    /// Gap between the `delta` and `1 - delta` quantiles of the first
    /// clause's estimate on the first commit.
    pub quantile_gap: f64,
}

impl CoverageReport {
    pub const CSV_HEADER: &'static str =
        "trials,violations,empirical_rate,delta,sigma,verdict,testset_size,bound,pattern,commits,quantile_gap";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.trials,
            self.violations,
            self.empirical_rate,
            self.delta,
            self.sigma,
            match self.verdict {
                CoverageVerdict::Covered => "covered",
                CoverageVerdict::Violated => "violated",
            },
            self.testset_size,
            self.bound,
            self.pattern,
            self.commits,
            self.quantile_gap
        )
    }
}

/// A commit verdict is wrong when it contradicts the truth in the direction
/// the mode guarantees against: a pass on a false formula under `fp-free`,
/// a fail on a true formula under `fn-free`.
pub fn is_violation(mode: Mode, verdict: Verdict, truth: bool) -> bool {
    match mode {
        Mode::FpFree => verdict == Verdict::Pass && !truth,
        Mode::FnFree => verdict == Verdict::Fail && truth,
    }
}

struct TrialResult {
    violated: bool,
    commits: u64,
    first_estimate: f64,
}

fn run_trial(cfg: &CoverageConfig, plan: &SamplePlan, rng: &mut ChaCha8Rng) -> Result<TrialResult, SimError> {
    let f = &cfg.script.condition;
    let mut world = cfg.world;
    let mut violated = false;
    let mut first_estimate = f64::NAN;
    let mut commits = 0;
    for step in 0..cfg.script.steps {
        let (stats, _) = simulate_commit(plan, &world, rng);
        let eval = eval_formula(f, &stats, &plan.allocation, cfg.script.mode)?;
        if step == 0 {
            let iv = eval.trace[0].interval;
            first_estimate = (iv.lo + iv.hi) / 2.0;
        }
        commits += 1;
        violated |= is_violation(cfg.script.mode, eval.verdict, world.truth(f));
        let released = match &cfg.script.adaptivity {
            Adaptivity::Full => Some(eval.verdict),
            Adaptivity::None { .. } => None,
            Adaptivity::FirstChange { on } => {
                let terminal = match on {
                    FirstChangeOn::Pass => Verdict::Pass,
                    FirstChangeOn::Fail => Verdict::Fail,
                };
                if eval.verdict == terminal {
                    break;
                }
                Some(eval.verdict)
            }
        };
        world = cfg.developer.next(world, released);
    }
    Ok(TrialResult { violated, commits, first_estimate })
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let i = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[i]
}

/// Runs `trials` independent testset lifetimes. Trial `i` draws from
/// ChaCha8 stream `i` of `seed`, so results do not depend on scheduling.
pub fn run_coverage(cfg: &CoverageConfig) -> Result<CoverageReport, SimError> {
    if cfg.trials < MIN_TRIALS {
        return Err(SimError::TooFewTrials { min: MIN_TRIALS, got: cfg.trials });
    }
    let spec = ReliabilitySpec::from_script(&cfg.script)?;
    let plan = estimate(&cfg.script.condition, &spec, cfg.strategy)?;
    let results: Vec<TrialResult> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(trial);
            run_trial(cfg, &plan, &mut rng)
        })
        .collect::<Result<_, _>>()?;
    let violations = results.iter().filter(|r| r.violated).count() as u64;
    let commits = results.iter().map(|r| r.commits).sum();
    let mut firsts: Vec<f64> = results.iter().map(|r| r.first_estimate).collect();
    firsts.sort_by(f64::total_cmp);
    let delta = cfg.script.delta;
    let sigma = (delta * (1.0 - delta) / cfg.trials as f64).sqrt();
    let empirical_rate = violations as f64 / cfg.trials as f64;
    Ok(CoverageReport {
        trials: cfg.trials,
        violations,
        empirical_rate,
        delta,
        sigma,
        verdict: if empirical_rate <= delta + 3.0 * sigma {
            CoverageVerdict::Covered
        } else {
            CoverageVerdict::Violated
        },
        testset_size: plan.testset_size,
        bound: match plan.bound {
            crate::estimator::BoundKind::Hoeffding => "hoeffding".into(),
            crate::estimator::BoundKind::Bennett { p } => format!("bennett({p})"),
            crate::estimator::BoundKind::ExactBinomial => "exact".into(),
        },
        pattern: plan.pattern.name().into(),
        commits,
        quantile_gap: quantile(&firsts, 1.0 - delta) - quantile(&firsts, delta),
    })
}

/// One row of the label-complexity table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SavingsRow {
    pub epsilon: f64,
    pub delta: f64,
    pub p: f64,
    /// Hoeffding plan for `n - o > c +/- epsilon`.
    pub n_hoeffding: u64,
    /// Bennett test size with variance bound `p`, never above Hoeffding.
    pub n_bennett: u64,
    /// Labels per commit when only disagreements are labeled.
    pub n_active: u64,
}

pub const SAVINGS_CSV_HEADER: &str = "epsilon,delta,p,n_hoeffding,n_bennett,n_active";

/// Label complexity of the three strategies over a grid, for `steps`
/// non-adaptive commits.
pub fn run_label_savings(
    epsilons: &[f64],
    deltas: &[f64],
    ps: &[f64],
    steps: u32,
) -> Result<Vec<SavingsRow>, SimError> {
    if epsilons.is_empty() || deltas.is_empty() || ps.is_empty() {
        return Err(SimError::BadGrid("every axis needs at least one value".into()));
    }
    if let Some(p) = ps.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
        return Err(SimError::BadGrid(format!("p = {p} outside (0, 1]")));
    }
    let mut rows = Vec::new();
    for &delta in deltas {
        let spec = ReliabilitySpec::new(delta, Mode::FpFree, crate::dsl::AdaptivityKind::None, steps)?;
        for &epsilon in epsilons {
            let f: Formula = format!("n - o > 0 +/- {epsilon}")
                .parse()
                .map_err(|e| SimError::BadGrid(format!("epsilon = {epsilon}: {e}")))?;
            let n_hoeffding = estimate_formula(&f, &spec)?.testset_size;
            for &p in ps {
                let raw = bennett_bound(&BennettQuery::unit(p, epsilon, spec.adjusted_share(4.0))).ceil();
                let n_bennett = if raw < n_hoeffding as f64 { raw as u64 } else { n_hoeffding };
                let n_active = active_label_count(p, epsilon, delta).min(n_bennett);
                rows.push(SavingsRow { epsilon, delta, p, n_hoeffding, n_bennett, n_active });
            }
        }
    }
    Ok(rows)
}

pub fn savings_csv(rows: &[SavingsRow]) -> String {
    let mut out = String::from(SAVINGS_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{},{},{}\n", r.epsilon, r.delta, r.p, r.n_hoeffding, r.n_bennett, r.n_active));
    }
    out
}
