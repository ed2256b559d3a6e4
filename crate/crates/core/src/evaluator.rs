//! Turning prediction files into a verdict.
//!
//! Point estimates of `n`, `o` and `d` are widened into confidence intervals
//! using the tolerances recorded in the plan's allocation, combined with
//! interval arithmetic, and compared against each clause threshold in
//! three-valued logic. The mode then decides what `Unknown` means.

use std::collections::HashMap;
use std::fmt;
use std::io::Read;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{Clause, Comparison, Expr, Formula, Mode, Variable};
use crate::estimator::{Allocation, ClauseEstimate};

pub const CSV_HEADER: [&str; 2] = ["example_id", "label"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("expected header `example_id,label`, found `{found}`")]
    Header { found: String },
    #[error("line {line}: duplicate example id `{id}`")]
    DuplicateId { id: String, line: u64 },
    #[error("line {line}: empty example id")]
    EmptyId { line: u64 },
    #[error("prediction file has no entries")]
    Empty,
    #[error("example `{id}` is missing from the {side} predictions")]
    UniverseMismatch { id: String, side: &'static str },
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("clause {clause} needs an estimate of `{variable}` but none is available")]
    MissingStat { clause: usize, variable: Variable },
    #[error("clause {clause} has no allocation in the plan")]
    MissingAllocation { clause: usize },
    #[error("clause {clause} is estimated jointly but is not `n - o`")]
    JointShape { clause: usize },
    #[error("clause {clause} needs labels on every differing example")]
    MissingDiffAccuracy { clause: usize },
}

fn read_pairs<R: Read>(reader: R) -> Result<Vec<(String, String)>, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() != 2 || header.get(0) != Some(CSV_HEADER[0]) || header.get(1) != Some(CSV_HEADER[1]) {
        return Err(DataError::Header { found: header.iter().collect::<Vec<_>>().join(",") });
    }
    let mut out = Vec::new();
    let mut seen = HashMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let id = record.get(0).unwrap_or_default().to_string();
        let label = record.get(1).unwrap_or_default().to_string();
        if id.is_empty() {
            return Err(DataError::EmptyId { line });
        }
        if seen.insert(id.clone(), ()).is_some() {
            return Err(DataError::DuplicateId { id, line });
        }
        out.push((id, label));
    }
    Ok(out)
}

fn write_pairs<'a>(pairs: impl Iterator<Item = (&'a str, &'a str)>) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("write to memory");
    for (id, label) in pairs {
        w.write_record([id, label]).expect("write to memory");
    }
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("csv of utf-8 strings")
}

/// One model's predicted label per example, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub model_id: String,
    entries: Vec<(String, String)>,
    index: HashMap<String, usize>,
}

impl PredictionSet {
    pub fn new(model_id: impl Into<String>, entries: Vec<(String, String)>) -> Result<Self, DataError> {
        if entries.is_empty() {
            return Err(DataError::Empty);
        }
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (id, _)) in entries.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(DataError::DuplicateId { id: id.clone(), line: i as u64 + 2 });
            }
        }
        Ok(Self { model_id: model_id.into(), entries, index })
    }

    pub fn from_csv<R: Read>(model_id: impl Into<String>, reader: R) -> Result<Self, DataError> {
        Self::new(model_id, read_pairs(reader)?)
    }

    pub fn to_csv(&self) -> String {
        write_pairs(self.entries.iter().map(|(i, l)| (i.as_str(), l.as_str())))
    }

    pub fn get(&self, id: &str) -> Option<&str> {
        self.index.get(id).map(|&i| self.entries[i].1.as_str())
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(id, _)| id.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Ground-truth labels; may cover only part of the testset.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LabelSet {
    labels: HashMap<String, String>,
}

impl LabelSet {
    pub fn from_csv<R: Read>(reader: R) -> Result<Self, DataError> {
        Ok(Self { labels: read_pairs(reader)?.into_iter().collect() })
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, String)>) -> Self {
        Self { labels: pairs.into_iter().collect() }
    }

    pub fn get(&self, id: &str) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    pub fn insert(&mut self, id: String, label: String) {
        self.labels.insert(id, label);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Point estimates of the three variables, each present only when the
/// examples it needs are available.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StatEstimates {
    pub new_accuracy: Option<f64>,
    pub old_accuracy: Option<f64>,
    pub diff: Option<f64>,
    /// Exact `n - o` estimate; present when every differing example is
    /// labeled, which is all it needs.
    pub diff_accuracy: Option<f64>,
    pub total: u64,
    pub differing: u64,
    pub labeled: u64,
}

impl StatEstimates {
    pub fn get(&self, v: Variable) -> Option<f64> {
        match v {
            Variable::New => self.new_accuracy,
            Variable::Old => self.old_accuracy,
            Variable::Diff => self.diff,
        }
    }

    /// Fills every field missing here from `other`.
    pub fn merge(self, other: StatEstimates) -> StatEstimates {
        StatEstimates {
            new_accuracy: self.new_accuracy.or(other.new_accuracy),
            old_accuracy: self.old_accuracy.or(other.old_accuracy),
            diff: self.diff.or(other.diff),
            diff_accuracy: self.diff_accuracy.or(other.diff_accuracy),
            total: self.total,
            differing: self.differing,
            labeled: self.labeled,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Counts {
    total: u64,
    differing: u64,
    labeled: u64,
    new_correct: u64,
    old_correct: u64,
    differing_labeled: u64,
    /// Sum over differing labeled examples of `[new correct] - [old correct]`.
    gain: i64,
}

impl Counts {
    fn add(self, o: Counts) -> Counts {
        Counts {
            total: self.total + o.total,
            differing: self.differing + o.differing,
            labeled: self.labeled + o.labeled,
            new_correct: self.new_correct + o.new_correct,
            old_correct: self.old_correct + o.old_correct,
            differing_labeled: self.differing_labeled + o.differing_labeled,
            gain: self.gain + o.gain,
        }
    }
}

/// Estimates over the whole universe of `old`.
pub fn compute_stats(old: &PredictionSet, new: &PredictionSet, labels: &LabelSet) -> Result<StatEstimates, DataError> {
    if let Some(id) = new.ids().find(|id| old.get(id).is_none()) {
        return Err(DataError::UniverseMismatch { id: id.to_string(), side: "old" });
    }
    let ids: Vec<&str> = old.ids().collect();
    compute_stats_on(&ids, old, new, labels)
}

/// Estimates restricted to `ids`, which both prediction sets must cover.
pub fn compute_stats_on<S: AsRef<str> + Sync>(
    ids: &[S],
    old: &PredictionSet,
    new: &PredictionSet,
    labels: &LabelSet,
) -> Result<StatEstimates, DataError> {
    let counts = ids
        .par_iter()
        .map(|id| {
            let id = id.as_ref();
            let o = old.get(id).ok_or_else(|| DataError::UniverseMismatch { id: id.into(), side: "old" })?;
            let n = new.get(id).ok_or_else(|| DataError::UniverseMismatch { id: id.into(), side: "new" })?;
            let differ = o != n;
            let mut c = Counts { total: 1, differing: differ as u64, ..Counts::default() };
            if let Some(truth) = labels.get(id) {
                let (nc, oc) = (n == truth, o == truth);
                c.labeled = 1;
                c.new_correct = nc as u64;
                c.old_correct = oc as u64;
                if differ {
                    c.differing_labeled = 1;
                    c.gain = nc as i64 - oc as i64;
                }
            }
            Ok::<_, DataError>(c)
        })
        .try_reduce(Counts::default, |a, b| Ok(a.add(b)))?;
    Ok(stats_from_counts(&counts))
}

fn stats_from_counts(c: &Counts) -> StatEstimates {
    let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
    StatEstimates {
        new_accuracy: ratio(c.new_correct, c.labeled),
        old_accuracy: ratio(c.old_correct, c.labeled),
        diff: ratio(c.differing, c.total),
        diff_accuracy: (c.total > 0 && c.differing_labeled == c.differing).then(|| c.gain as f64 / c.total as f64),
        total: c.total,
        differing: c.differing,
        labeled: c.labeled,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        debug_assert!(lo <= hi, "[{lo}, {hi}]");
        Self { lo, hi }
    }

    pub fn around(center: f64, radius: f64) -> Self {
        Self::new(center - radius, center + radius)
    }

    pub fn scale(self, c: f64) -> Self {
        if c >= 0.0 {
            Self::new(c * self.lo, c * self.hi)
        } else {
            Self::new(c * self.hi, c * self.lo)
        }
    }
}

impl std::ops::Add for Interval {
    type Output = Interval;
    fn add(self, o: Interval) -> Interval {
        Interval::new(self.lo + o.lo, self.hi + o.hi)
    }
}

impl std::ops::Sub for Interval {
    type Output = Interval;
    fn sub(self, o: Interval) -> Interval {
        Interval::new(self.lo - o.hi, self.hi - o.lo)
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.lo, self.hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TriBool {
    True,
    False,
    Unknown,
}

impl TriBool {
    /// Three-valued conjunction: `False` dominates `Unknown` dominates `True`.
    pub fn and(self, other: TriBool) -> TriBool {
        match (self, other) {
            (TriBool::False, _) | (_, TriBool::False) => TriBool::False,
            (TriBool::Unknown, _) | (_, TriBool::Unknown) => TriBool::Unknown,
            _ => TriBool::True,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
        })
    }
}

/// Interval of `expr` given an interval for each of its variables; `None`
/// when some variable has no interval.
pub fn interval_eval(expr: &Expr, interval_of: impl Fn(Variable) -> Option<Interval>) -> Option<Interval> {
    let mut acc: Option<Interval> = None;
    for t in expr.terms() {
        let term = interval_of(t.variable)?.scale(t.coefficient);
        acc = Some(match acc {
            None => term,
            Some(a) => a + term,
        });
    }
    acc
}

/// Strict comparison of an interval against a threshold; an endpoint equal
/// to the threshold cannot certify either answer.
pub fn compare(interval: Interval, cmp: Comparison, threshold: f64) -> TriBool {
    let (certain, refuted) = match cmp {
        Comparison::Gt => (interval.lo > threshold, interval.hi < threshold),
        Comparison::Lt => (interval.hi < threshold, interval.lo > threshold),
    };
    if certain {
        TriBool::True
    } else if refuted {
        TriBool::False
    } else {
        TriBool::Unknown
    }
}

/// Confidence interval of clause `index`'s left-hand side.
pub fn clause_interval(
    index: usize,
    cl: &Clause,
    stats: &StatEstimates,
    estimate: &ClauseEstimate,
) -> Result<Interval, EvalError> {
    match estimate {
        ClauseEstimate::Joint { tolerance, .. } => {
            if !cl.lhs.is_new_minus_old() {
                return Err(EvalError::JointShape { clause: index });
            }
            let gain = stats.diff_accuracy.ok_or(EvalError::MissingDiffAccuracy { clause: index })?;
            Ok(Interval::around(gain, *tolerance))
        }
        ClauseEstimate::Leaves { leaves } => {
            for t in cl.lhs.terms() {
                if stats.get(t.variable).is_none() {
                    return Err(EvalError::MissingStat { clause: index, variable: t.variable });
                }
                if !leaves.iter().any(|l| l.variable == t.variable) {
                    return Err(EvalError::MissingAllocation { clause: index });
                }
            }
            Ok(interval_eval(&cl.lhs, |v| {
                let leaf = leaves.iter().find(|l| l.variable == v)?;
                Some(Interval::around(stats.get(v)?, leaf.tolerance))
            })
            .expect("checked above"))
        }
    }
}

pub fn eval_clause(index: usize, cl: &Clause, stats: &StatEstimates, alloc: &Allocation) -> Result<TriBool, EvalError> {
    let estimate = alloc.clause(index).ok_or(EvalError::MissingAllocation { clause: index })?;
    let interval = clause_interval(index, cl, stats, estimate)?;
    Ok(compare(interval, cl.cmp, cl.threshold))
}

/// `Unknown` becomes `Fail` when false positives are forbidden and `Pass`
/// when false negatives are.
pub fn collapse(t: TriBool, mode: Mode) -> Verdict {
    match (t, mode) {
        (TriBool::True, _) => Verdict::Pass,
        (TriBool::False, _) => Verdict::Fail,
        (TriBool::Unknown, Mode::FpFree) => Verdict::Fail,
        (TriBool::Unknown, Mode::FnFree) => Verdict::Pass,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClauseTrace {
    pub clause: String,
    pub interval: Interval,
    pub value: TriBool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub verdict: Verdict,
    pub value: TriBool,
    pub trace: Vec<ClauseTrace>,
}

pub fn eval_formula(
    f: &Formula,
    stats: &StatEstimates,
    alloc: &Allocation,
    mode: Mode,
) -> Result<Evaluation, EvalError> {
    let mut value = TriBool::True;
    let mut trace = Vec::with_capacity(f.clauses().len());
    for (i, cl) in f.clauses().iter().enumerate() {
        let estimate = alloc.clause(i).ok_or(EvalError::MissingAllocation { clause: i })?;
        let interval = clause_interval(i, cl, stats, estimate)?;
        let v = compare(interval, cl.cmp, cl.threshold);
        value = value.and(v);
        trace.push(ClauseTrace { clause: cl.to_string(), interval, value: v });
    }
    Ok(Evaluation { verdict: collapse(value, mode), value, trace })
}
