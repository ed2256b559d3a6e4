//! Testset lifecycle.
//!
//! A session binds one CI script to one testset. Each commit consumes one
//! step of the budget; depending on the adaptivity setting its verdict is
//! shown to the developer, sent to a sink the developer cannot read, or shown
//! until the first terminating outcome. When the budget is spent (or a
//! `firstChange` testset sees its terminating outcome) the session raises
//! the new-testset alarm and refuses further commits; the old testset can
//! then be released to the developer.
//!
//! The state machine is pure: operations return the events to deliver and
//! the caller hands them to a [`Sink`].

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{self, Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dsl::{Adaptivity, CiScript, FirstChangeOn, PatternTag};
use crate::estimator::{estimate, EstimateError, PlanStrategy, ReliabilitySpec, SamplePlan};
use crate::evaluator::{
    compute_stats_on, eval_formula, DataError, EvalError, Evaluation, LabelSet, PredictionSet, StatEstimates, TriBool,
    Verdict,
};

/// Ids reported by [`SessionError::MissingLabels`].
const MISSING_SAMPLE: usize = 10;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("testset too small: {required} examples required, manifest has {available}")]
    TestsetTooSmall { required: u64, available: u64 },
    #[error("commit refused: {0}")]
    Refused(AlarmReason),
    #[error("{count} test examples still need labels (e.g. {sample:?})")]
    MissingLabels { count: usize, sample: Vec<String> },
    #[error("label for `{id}` is not part of the testset")]
    UnknownLabel { id: String },
    #[error("the testset cannot be released before the new-testset alarm")]
    NotReleasable,
    #[error("session file: {0}")]
    Io(#[from] io::Error),
    #[error("session file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("manifest: {0}")]
    Manifest(String),
}

/// Example ids of a testset in a fixed order, with labels where known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    ids: Vec<String>,
    labels: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(ids: Vec<String>, labels: impl IntoIterator<Item = (String, String)>) -> Result<Self, SessionError> {
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if id.is_empty() {
                return Err(SessionError::Manifest("empty example id".into()));
            }
            if !seen.insert(id.as_str()) {
                return Err(SessionError::Manifest(format!("duplicate example id `{id}`")));
            }
        }
        let mut map = BTreeMap::new();
        for (id, label) in labels {
            if !seen.contains(id.as_str()) {
                return Err(SessionError::UnknownLabel { id });
            }
            map.insert(id, label);
        }
        Ok(Self { ids, labels: map })
    }

    /// Reads `example_id[,label]` CSV; an empty label means unknown.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self, SessionError> {
        let mut rdr =
            csv::ReaderBuilder::new().has_headers(true).flexible(true).trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers().map_err(DataError::from)?.clone();
        let with_labels = match header.iter().collect::<Vec<_>>().as_slice() {
            ["example_id"] => false,
            ["example_id", "label"] => true,
            other => {
                return Err(SessionError::Manifest(format!(
                    "expected header `example_id[,label]`, found `{}`",
                    other.join(",")
                )))
            }
        };
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        for record in rdr.records() {
            let record = record.map_err(DataError::from)?;
            if record.len() > 2 || (!with_labels && record.len() > 1) {
                return Err(SessionError::Manifest(format!(
                    "line {}: too many fields",
                    record.position().map_or(0, |p| p.line())
                )));
            }
            let id = record.get(0).unwrap_or_default().to_string();
            if let Some(label) = record.get(1).filter(|l| !l.is_empty()) {
                labels.push((id.clone(), label.to_string()));
            }
            ids.push(id);
        }
        Self::new(ids, labels)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn label(&self, id: &str) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    /// Content hash of the id list, stable across runs.
    pub fn testset_id(&self) -> String {
        let mut h = Sha256::new();
        for id in &self.ids {
            h.update(id.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// `example_id,label` CSV of every id, label left empty when unknown.
    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(["example_id", "label"]).expect("write to memory");
        for id in &self.ids {
            w.write_record([id.as_str(), self.label(id).unwrap_or("")]).expect("write to memory");
        }
        String::from_utf8(w.into_inner().expect("flush to memory")).expect("utf-8 fields")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlarmReason {
    /// All `H` steps have been used.
    Budget,
    /// A `firstChange` testset saw its terminating verdict.
    FirstChange(Verdict),
    /// A commit needed more labels than the per-commit allowance.
    LabelPool,
}

impl std::fmt::Display for AlarmReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AlarmReason::Budget => f.write_str("step budget exhausted"),
            AlarmReason::FirstChange(v) => write!(f, "first {v} under firstChange"),
            AlarmReason::LabelPool => f.write_str("label pool exhausted"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "snake_case")]
pub enum AlarmStatus {
    Quiet,
    RequestNewTestset(AlarmReason),
}

/// What the developer sees for a commit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeveloperSignal {
    Pass,
    Fail,
    /// Verdict withheld; the commit is accepted unconditionally.
    Accept,
}

impl From<Verdict> for DeveloperSignal {
    fn from(v: Verdict) -> Self {
        match v {
            Verdict::Pass => DeveloperSignal::Pass,
            Verdict::Fail => DeveloperSignal::Fail,
        }
    }
}

/// Message for the integration team's sink.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SinkEvent {
    Verdict { testset_id: String, address: String, commit_id: String, step: u32, verdict: Verdict },
    Alarm { testset_id: String, reason: AlarmReason, commits_used: u32 },
}

pub trait Sink {
    fn deliver(&mut self, event: &SinkEvent) -> io::Result<()>;
}

/// Appends one JSON object per line.
#[derive(Debug, Clone)]
pub struct FileSink {
    path: PathBuf,
}

impl FileSink {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }
}

impl Sink for FileSink {
    fn deliver(&mut self, event: &SinkEvent) -> io::Result<()> {
        let mut f = fs::OpenOptions::new().create(true).append(true).open(&self.path)?;
        let mut line = serde_json::to_string(event)?;
        line.push('\n');
        f.write_all(line.as_bytes())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StdoutSink;

impl Sink for StdoutSink {
    fn deliver(&mut self, event: &SinkEvent) -> io::Result<()> {
        let line = serde_json::to_string(event)?;
        writeln!(io::stdout().lock(), "{line}")
    }
}

/// Keeps events in memory.
#[derive(Debug, Clone, Default)]
pub struct MemorySink {
    pub events: Vec<SinkEvent>,
}

impl Sink for MemorySink {
    fn deliver(&mut self, event: &SinkEvent) -> io::Result<()> {
        self.events.push(event.clone());
        Ok(())
    }
}

pub fn deliver_all(sink: &mut dyn Sink, events: &[SinkEvent]) -> io::Result<()> {
    events.iter().try_for_each(|e| sink.deliver(e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeEntry {
    pub commit_id: String,
    pub verdict: Verdict,
    pub value: TriBool,
    pub signal_released: bool,
    /// Labeled test examples the verdict was computed on.
    pub test_size: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub script: CiScript,
    pub plan: SamplePlan,
    pub testset_id: String,
    pub manifest: Manifest,
    pub commits_used: u32,
    pub outcome_log: Vec<OutcomeEntry>,
    pub alarm: Option<AlarmReason>,
    pub labels_consumed: u64,
    /// Labels supplied with commits, kept for later commits.
    pub supplied_labels: BTreeMap<String, String>,
    pub released: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommitOutcome {
    pub developer: DeveloperSignal,
    pub evaluation: Evaluation,
    pub alarm: Option<AlarmReason>,
    pub events: Vec<SinkEvent>,
}

/// Label request for the next commit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRequest {
    pub ids: Vec<String>,
    /// Unlabeled ids beyond the per-commit allowance.
    pub overflow: u64,
}

pub fn open_session(
    script: CiScript,
    manifest: Manifest,
    strategy: PlanStrategy,
) -> Result<SessionState, SessionError> {
    let spec = ReliabilitySpec::from_script(&script)?;
    let plan = estimate(&script.condition, &spec, strategy)?;
    let required = plan.required_manifest_size();
    if (manifest.len() as u64) < required {
        return Err(SessionError::TestsetTooSmall { required, available: manifest.len() as u64 });
    }
    Ok(SessionState {
        testset_id: manifest.testset_id(),
        script,
        plan,
        manifest,
        commits_used: 0,
        outcome_log: Vec::new(),
        alarm: None,
        labels_consumed: 0,
        supplied_labels: BTreeMap::new(),
        released: false,
    })
}

/// Which manifest ids a commit is evaluated on.
struct Portions {
    /// Estimates `d` without labels (filter or secondary set).
    unlabeled: Range<usize>,
    /// Needs labels: every id, or only differing ids.
    labeled: Range<usize>,
    /// Coarse stage of the large-lower-bound plan (needs labels).
    coarse: Range<usize>,
}

impl SessionState {
    pub fn check_alarm(&self) -> AlarmStatus {
        match self.alarm {
            Some(r) => AlarmStatus::RequestNewTestset(r),
            None => AlarmStatus::Quiet,
        }
    }

    pub fn remaining_steps(&self) -> u32 {
        self.script.steps - self.commits_used
    }

    fn label(&self, id: &str) -> Option<&str> {
        self.manifest.label(id).or_else(|| self.supplied_labels.get(id).map(String::as_str))
    }

    fn known_labels(&self, extra: &LabelSet, ids: &[&[String]]) -> LabelSet {
        let mut out = LabelSet::default();
        for portion in ids {
            for id in portion.iter() {
                if let Some(l) = extra.get(id).or_else(|| self.label(id)) {
                    out.insert(id.clone(), l.to_string());
                }
            }
        }
        out
    }

    /// Splits the manifest for this commit. Deferred plans read the observed
    /// quantity from `old`/`new` and the known labels.
    fn portions(
        &self,
        old: &PredictionSet,
        new: &PredictionSet,
        labels: &LabelSet,
    ) -> Result<Result<Portions, Vec<String>>, SessionError> {
        let ids = self.manifest.ids();
        let take = |from: usize, n: u64| -> Result<Range<usize>, SessionError> {
            let end = from as u64 + n;
            if end > ids.len() as u64 {
                return Err(SessionError::TestsetTooSmall { required: end, available: ids.len() as u64 });
            }
            Ok(from..end as usize)
        };
        let plan = &self.plan;
        let portions = match plan.pattern {
            PatternTag::Generic => Portions { unlabeled: 0..0, labeled: take(0, plan.testset_size)?, coarse: 0..0 },
            PatternTag::Pattern1 { .. } => Portions {
                unlabeled: take(0, plan.unlabeled_size)?,
                labeled: take(0, plan.testset_size)?,
                coarse: 0..0,
            },
            PatternTag::Pattern2Diff { .. } => {
                let s = plan.secondary_testset_size;
                let secondary = take(0, s)?;
                let stats = compute_stats_on(&ids[secondary.clone()], old, new, &LabelSet::default())?;
                let n = plan.resolve_main_size(&stats);
                Portions { unlabeled: secondary, labeled: take(s as usize, n)?, coarse: 0..0 }
            }
            PatternTag::Pattern2Lower { .. } => {
                let s = plan.secondary_testset_size;
                let coarse = take(0, s)?;
                let coarse_ids = &ids[coarse.clone()];
                let missing: Vec<String> = coarse_ids
                    .iter()
                    .filter(|id| labels.get(id).is_none() && self.label(id).is_none())
                    .cloned()
                    .collect();
                if !missing.is_empty() {
                    return Ok(Err(missing));
                }
                let known = self.known_labels(labels, &[coarse_ids]);
                let stats = compute_stats_on(coarse_ids, old, new, &known)?;
                let n = plan.resolve_main_size(&stats);
                Portions { unlabeled: 0..0, labeled: take(s as usize, n)?, coarse }
            }
        };
        Ok(Ok(portions))
    }

    /// Test ids still lacking a label that this commit needs.
    fn unlabeled_needed(
        &self,
        portions: &Portions,
        old: &PredictionSet,
        new: &PredictionSet,
        labels: &LabelSet,
    ) -> Vec<String> {
        let only_differing = self.plan.labels_only_differing();
        self.manifest.ids()[portions.labeled.clone()]
            .iter()
            .filter(|id| !only_differing || old.get(id) != new.get(id))
            .filter(|id| labels.get(id).is_none() && self.label(id).is_none())
            .cloned()
            .collect()
    }

    /// Labels the next commit of `new` against `old` would need, capped at
    /// the plan's per-commit allowance. Does not change the session.
    pub fn labels_needed(&self, old: &PredictionSet, new: &PredictionSet) -> Result<LabelRequest, SessionError> {
        let none = LabelSet::default();
        let mut ids = match self.portions(old, new, &none)? {
            Err(coarse_missing) => coarse_missing,
            Ok(portions) => self.unlabeled_needed(&portions, old, new, &none),
        };
        let cap = self.plan.per_commit_labels as usize;
        let overflow = ids.len().saturating_sub(cap) as u64;
        ids.truncate(cap);
        Ok(LabelRequest { ids, overflow })
    }

    fn refusal(&self) -> Option<AlarmReason> {
        if let Some(r) = self.alarm {
            return Some(r);
        }
        (self.commits_used >= self.script.steps).then_some(AlarmReason::Budget)
    }

    /// Evaluates one commit and advances the state machine.
    ///
    /// Errors leave the session untouched; in particular a refused commit
    /// computes no verdict and uses no budget.
    pub fn submit_commit(
        &mut self,
        commit_id: &str,
        old: &PredictionSet,
        new: &PredictionSet,
        labels: &LabelSet,
    ) -> Result<CommitOutcome, SessionError> {
        if let Some(r) = self.refusal() {
            return Err(SessionError::Refused(r));
        }
        let portions = match self.portions(old, new, labels)? {
            Ok(p) => p,
            Err(missing) => {
                return Err(SessionError::MissingLabels {
                    count: missing.len(),
                    sample: missing.into_iter().take(MISSING_SAMPLE).collect(),
                })
            }
        };
        let missing = self.unlabeled_needed(&portions, old, new, labels);
        if !missing.is_empty() {
            return Err(SessionError::MissingLabels {
                count: missing.len(),
                sample: missing.into_iter().take(MISSING_SAMPLE).collect(),
            });
        }
        let ids = self.manifest.ids();
        let (labeled, coarse) = (&ids[portions.labeled.clone()], &ids[portions.coarse.clone()]);
        let known = self.known_labels(labels, &[labeled, coarse]);
        let mut stats = compute_stats_on(labeled, old, new, &known)?;
        if !portions.unlabeled.is_empty() {
            let filter = compute_stats_on(&ids[portions.unlabeled.clone()], old, new, &LabelSet::default())?;
            stats = StatEstimates { diff: filter.diff, ..stats }.merge(filter);
        }
        let evaluation = eval_formula(&self.script.condition, &stats, &self.plan.allocation, self.script.mode)?;
        let fresh: Vec<(String, String)> = labeled
            .iter()
            .chain(coarse)
            .filter(|id| self.label(id).is_none())
            .filter_map(|id| labels.get(id).map(|l| (id.clone(), l.to_string())))
            .collect();
        let test_size = labeled.len() as u64;

        // Commit point: nothing below can fail.
        let consumed = fresh.len() as u64;
        self.supplied_labels.extend(fresh);
        self.labels_consumed += consumed;
        self.commits_used += 1;
        let verdict = evaluation.verdict;
        let mut events = Vec::new();
        let (developer, released) = match &self.script.adaptivity {
            Adaptivity::Full => (verdict.into(), true),
            Adaptivity::None { sink } => {
                events.push(SinkEvent::Verdict {
                    testset_id: self.testset_id.clone(),
                    address: sink.clone(),
                    commit_id: commit_id.to_string(),
                    step: self.commits_used,
                    verdict,
                });
                (DeveloperSignal::Accept, false)
            }
            Adaptivity::FirstChange { on } => {
                let terminal = match on {
                    FirstChangeOn::Pass => Verdict::Pass,
                    FirstChangeOn::Fail => Verdict::Fail,
                };
                if verdict == terminal {
                    self.alarm = Some(AlarmReason::FirstChange(verdict));
                }
                (verdict.into(), true)
            }
        };
        if self.alarm.is_none() && self.commits_used >= self.script.steps {
            self.alarm = Some(AlarmReason::Budget);
        }
        if let Some(reason) = self.alarm {
            events.push(SinkEvent::Alarm {
                testset_id: self.testset_id.clone(),
                reason,
                commits_used: self.commits_used,
            });
        }
        self.outcome_log.push(OutcomeEntry {
            commit_id: commit_id.to_string(),
            verdict,
            value: evaluation.value,
            signal_released: released,
            test_size,
        });
        Ok(CommitOutcome { developer, evaluation, alarm: self.alarm, events })
    }

    /// Retires the testset early because a commit needed more labels than
    /// the plan allows. Returns the alarm event, or `None` if an alarm was
    /// already raised.
    pub fn raise_label_alarm(&mut self) -> Option<SinkEvent> {
        if self.alarm.is_some() {
            return None;
        }
        self.alarm = Some(AlarmReason::LabelPool);
        Some(SinkEvent::Alarm {
            testset_id: self.testset_id.clone(),
            reason: AlarmReason::LabelPool,
            commits_used: self.commits_used,
        })
    }

    /// Exports the retired testset, with every label known to the session,
    /// as `example_id,label` CSV. Only allowed after the alarm.
    pub fn release_testset(&mut self) -> Result<String, SessionError> {
        if self.alarm.is_none() {
            return Err(SessionError::NotReleasable);
        }
        self.released = true;
        let labels = self.supplied_labels.iter().map(|(k, v)| (k.clone(), v.clone()));
        let mut export = self.manifest.clone();
        for (id, l) in labels {
            export.labels.insert(id, l);
        }
        Ok(export.to_csv())
    }

    pub fn to_json(&self) -> Result<String, SessionError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, SessionError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, SessionError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Writes to a temporary file beside `path`, then renames it over
    /// `path`, so readers never observe a partial file.
    pub fn save(&self, path: &Path) -> Result<(), SessionError> {
        write_atomic(path, self.to_json()?.as_bytes())?;
        Ok(())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "no file name"))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}
