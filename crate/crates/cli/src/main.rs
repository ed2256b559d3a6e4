//! `mlci`: sample-size planning and testset sessions for model CI.
//!
//! Exit codes are stable so shell pipelines can branch without parsing
//! output:
//!
//! | code | meaning                                                        |
//! |------|----------------------------------------------------------------|
//! | 0    | pass, or ok (also a withheld verdict and an `fn-free` Unknown) |
//! | 1    | fail                                                           |
//! | 2    | fail because an Unknown verdict collapsed under `fp-free`      |
//! | 3    | usage, config or I/O error                                     |
//! | 4    | refused: the testset is retired, or the label budget ran out   |

mod presets;
mod render;

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mlci_core::dsl::{parse_script, CiScript};
use mlci_core::estimator::{estimate, PlanStrategy, ReliabilitySpec};
use mlci_core::evaluator::{LabelSet, PredictionSet, TriBool, Verdict};
use mlci_core::session::{
    deliver_all, open_session, write_atomic, AlarmStatus, DeveloperSignal, FileSink, Manifest, SessionError,
    SessionState, Sink, SinkEvent, StdoutSink,
};

const EXIT_PASS: u8 = 0;
const EXIT_FAIL: u8 = 1;
const EXIT_UNKNOWN_FAIL: u8 = 2;
const EXIT_USAGE: u8 = 3;
const EXIT_ALARM: u8 = 4;

/// Overrides where sink events (alarms, withheld verdicts) are written.
/// `-` writes them to standard output.
const SINK_ENV: &str = "MLCI_SINK";

#[derive(Parser, Debug)]
#[command(name = "mlci", version, about = "Statistically reliable pass/fail checks for ML model commits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the testset size and allocation a config needs.
    Estimate {
        /// CI config file holding the `ml:` section.
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        #[arg(long, value_enum, default_value_t = StrategyArg::Auto)]
        strategy: StrategyArg,
    },
    /// Open a session on a testset manifest.
    Init {
        /// CI config file holding the `ml:` section.
        config: PathBuf,
        /// `example_id[,label]` CSV listing the testset.
        manifest: PathBuf,
        /// Session state file to create.
        #[arg(long)]
        session: PathBuf,
        #[arg(long, value_enum, default_value_t = StrategyArg::Auto)]
        strategy: StrategyArg,
        /// Replace an existing session file.
        #[arg(long)]
        force: bool,
    },
    /// Test a new model's predictions against the old model's.
    Commit {
        /// Session state file written by `init`.
        #[arg(long)]
        session: PathBuf,
        /// `example_id,prediction` CSV from the current model.
        #[arg(long)]
        old: PathBuf,
        /// `example_id,prediction` CSV from the candidate model.
        #[arg(long)]
        new: PathBuf,
        /// `example_id,label` CSV with labels requested by `labels`.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Identifier recorded in the session log and sink.
        #[arg(long)]
        id: Option<String>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// List the example ids that need labels before the next commit.
    Labels {
        /// Session state file written by `init`.
        #[arg(long)]
        session: PathBuf,
        /// `example_id,prediction` CSV from the current model.
        #[arg(long)]
        old: PathBuf,
        /// `example_id,prediction` CSV from the candidate model.
        #[arg(long)]
        new: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Export a retired testset with every known label.
    Release {
        /// Session state file written by `init`.
        #[arg(long)]
        session: PathBuf,
        /// Write to this file instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo coverage and label-savings reports.
    Simulate {
        /// Monte Carlo trials per coverage run (at least 1000).
        #[arg(long, default_value_t = 1000)]
        trials: u64,
        /// Seed for the per-trial random streams.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Grid::Smoke)]
        grid: Grid,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum StrategyArg {
    Auto,
    Baseline,
    Exact,
}

impl From<StrategyArg> for PlanStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Auto => PlanStrategy::Auto,
            StrategyArg::Baseline => PlanStrategy::Baseline,
            StrategyArg::Exact => PlanStrategy::Exact,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub(crate) enum Grid {
    /// Coverage at every reliability row of the reference table.
    Fig2,
    /// Label complexity over epsilon, delta and p.
    Fig3,
    /// One coverage run on one world.
    Smoke,
}

/// An error with the exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn usage(error: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_USAGE, error: error.into() }
    }

    fn alarm(error: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_ALARM, error: error.into() }
    }
}

impl From<SessionError> for Failure {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::Refused(_) => Failure::alarm(e),
            e => Failure::usage(e),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::usage(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::usage(e)
    }
}

type CmdResult = Result<u8, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_PASS });
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(Failure { code, error }) => {
            eprintln!("mlci: {error:#}");
            ExitCode::from(code)
        }
    }
}

fn run(command: Command) -> CmdResult {
    match command {
        Command::Estimate { config, format, strategy } => cmd_estimate(&config, format, strategy),
        Command::Init { config, manifest, session, strategy, force } => {
            cmd_init(&config, &manifest, &session, strategy, force)
        }
        Command::Commit { session, old, new, labels, id, format } => {
            cmd_commit(&session, &old, &new, labels.as_deref(), id, format)
        }
        Command::Labels { session, old, new, format } => cmd_labels(&session, &old, &new, format),
        Command::Release { session, out } => cmd_release(&session, out.as_deref()),
        Command::Simulate { trials, seed, grid, format } => presets::cmd_simulate(grid, trials, seed, format),
    }
}

fn read_config(path: &Path) -> anyhow::Result<CiScript> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_script(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_predictions(model: &str, path: &Path) -> anyhow::Result<PredictionSet> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    PredictionSet::from_csv(model, f).with_context(|| format!("reading {}", path.display()))
}

fn print_out(text: &str) -> io::Result<()> {
    let mut out = io::stdout().lock();
    out.write_all(text.as_bytes())?;
    out.flush()
}

fn cmd_estimate(config: &Path, format: Format, strategy: StrategyArg) -> CmdResult {
    let script = read_config(config)?;
    let spec = ReliabilitySpec::from_script(&script).map_err(Failure::usage)?;
    let plan = estimate(&script.condition, &spec, strategy.into()).map_err(Failure::usage)?;
    let text = match format {
        Format::Text => render::plan_text(&script, &plan),
        Format::Csv => render::plan_csv(&plan),
        Format::Json => render::plan_json(&plan).map_err(Failure::usage)?,
    };
    print_out(&text)?;
    Ok(EXIT_PASS)
}

/// Exclusive hold on a session file, released on drop.
struct SessionLock {
    path: PathBuf,
}

impl SessionLock {
    fn acquire(session: &Path) -> Result<Self, Failure> {
        let path = sibling(session, ".lock");
        OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            Failure::usage(anyhow!(
                "cannot lock {} ({e}); another mlci process may be using the session",
                path.display()
            ))
        })?;
        Ok(Self { path })
    }
}

impl Drop for SessionLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

fn sink_for(session: &Path) -> Box<dyn Sink> {
    match std::env::var_os(SINK_ENV) {
        Some(v) if v == "-" => Box::new(StdoutSink),
        Some(v) if !v.is_empty() => Box::new(FileSink::new(PathBuf::from(v))),
        _ => Box::new(FileSink::new(sibling(session, ".sink"))),
    }
}

fn deliver(session: &Path, events: &[SinkEvent]) -> Result<(), Failure> {
    deliver_all(sink_for(session).as_mut(), events).context("delivering sink events").map_err(Failure::usage)
}

fn load_session(path: &Path) -> Result<SessionState, Failure> {
    SessionState::load(path).with_context(|| format!("loading session {}", path.display())).map_err(Failure::usage)
}

fn save_session(state: &SessionState, path: &Path) -> Result<(), Failure> {
    state.save(path).with_context(|| format!("saving session {}", path.display())).map_err(Failure::usage)
}

fn cmd_init(config: &Path, manifest: &Path, session: &Path, strategy: StrategyArg, force: bool) -> CmdResult {
    let script = read_config(config)?;
    let f = File::open(manifest).with_context(|| format!("opening {}", manifest.display()))?;
    let manifest = Manifest::from_csv(f)?;
    let _lock = SessionLock::acquire(session)?;
    if session.exists() && !force {
        return Err(Failure::usage(anyhow!("{} exists; pass --force to replace it", session.display())));
    }
    let state = open_session(script, manifest, strategy.into())?;
    save_session(&state, session)?;
    print_out(&format!(
        "testset {} opened: {} examples required, {} available, {} steps\n",
        state.testset_id,
        state.plan.required_manifest_size(),
        state.manifest.len(),
        state.script.steps
    ))?;
    Ok(EXIT_PASS)
}

/// What a commit reveals to the developer: the signal and the testset's
/// status, never the estimates behind the signal.
#[derive(Serialize)]
struct CommitReport<'a> {
    commit_id: &'a str,
    signal: DeveloperSignal,
    unknown_collapsed: bool,
    alarm: AlarmStatus,
    remaining_steps: u32,
}

fn cmd_commit(
    session: &Path,
    old: &Path,
    new: &Path,
    labels: Option<&Path>,
    id: Option<String>,
    format: Format,
) -> CmdResult {
    let old = read_predictions("old", old)?;
    let new = read_predictions("new", new)?;
    let labels = match labels {
        Some(p) => {
            let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
            LabelSet::from_csv(f).with_context(|| format!("reading {}", p.display()))?
        }
        None => LabelSet::default(),
    };
    let _lock = SessionLock::acquire(session)?;
    let mut state = load_session(session)?;
    let commit_id = id.unwrap_or_else(|| format!("commit-{}", state.commits_used + 1));
    let outcome = state.submit_commit(&commit_id, &old, &new, &labels)?;
    save_session(&state, session)?;
    deliver(session, &outcome.events)?;

    let unknown_collapsed =
        outcome.developer != DeveloperSignal::Accept && outcome.evaluation.value == TriBool::Unknown;
    let code = match outcome.developer {
        DeveloperSignal::Accept => EXIT_PASS,
        _ => verdict_code(outcome.evaluation.verdict, outcome.evaluation.value),
    };
    let report = CommitReport {
        commit_id: &commit_id,
        signal: outcome.developer,
        unknown_collapsed,
        alarm: state.check_alarm(),
        remaining_steps: state.remaining_steps(),
    };
    let text = match format {
        Format::Json => serde_json::to_string(&report).map_err(Failure::usage)? + "\n",
        Format::Csv => format!(
            "commit_id,signal,unknown_collapsed,alarm,remaining_steps\n{},{},{},{},{}\n",
            report.commit_id,
            render::signal_name(report.signal),
            report.unknown_collapsed,
            render::alarm_name(report.alarm),
            report.remaining_steps
        ),
        Format::Text => {
            let mut s = format!("{}: {}", report.commit_id, render::signal_name(report.signal));
            if unknown_collapsed {
                s.push_str(" (undecided at this tolerance; collapsed by mode)");
            }
            if let AlarmStatus::RequestNewTestset(reason) = report.alarm {
                s.push_str(&format!("; new testset required: {reason}"));
            } else {
                s.push_str(&format!("; {} steps left", report.remaining_steps));
            }
            s + "\n"
        }
    };
    print_out(&text)?;
    Ok(code)
}

fn cmd_labels(session: &Path, old: &Path, new: &Path, format: Format) -> CmdResult {
    let old = read_predictions("old", old)?;
    let new = read_predictions("new", new)?;
    let _lock = SessionLock::acquire(session)?;
    let mut state = load_session(session)?;
    if let AlarmStatus::RequestNewTestset(reason) = state.check_alarm() {
        return Err(Failure::alarm(anyhow!("new testset required: {reason}")));
    }
    let request = state.labels_needed(&old, &new)?;
    if request.overflow > 0 {
        let event = state.raise_label_alarm();
        save_session(&state, session)?;
        deliver(session, event.as_slice())?;
        return Err(Failure::alarm(anyhow!(
            "commit needs {} labels beyond the per-commit allowance of {}; new testset required",
            request.overflow,
            state.plan.per_commit_labels
        )));
    }
    let text = match format {
        Format::Text => request.ids.iter().map(|id| format!("{id}\n")).collect(),
        Format::Csv => {
            let mut s = String::from("example_id\n");
            for id in &request.ids {
                s.push_str(&render::csv_field(id));
                s.push('\n');
            }
            s
        }
        Format::Json => serde_json::to_string(&request).map_err(Failure::usage)? + "\n",
    };
    print_out(&text)?;
    Ok(EXIT_PASS)
}

fn cmd_release(session: &Path, out: Option<&Path>) -> CmdResult {
    let _lock = SessionLock::acquire(session)?;
    let mut state = load_session(session)?;
    let csv = state.release_testset()?;
    match out {
        Some(p) => write_atomic(p, csv.as_bytes()).with_context(|| format!("writing {}", p.display()))?,
        None => print_out(&csv)?,
    }
    save_session(&state, session)?;
    Ok(EXIT_PASS)
}

/// Exit code for a released verdict.
fn verdict_code(verdict: Verdict, value: TriBool) -> u8 {
    match (verdict, value) {
        (Verdict::Pass, _) => EXIT_PASS,
        (Verdict::Fail, TriBool::Unknown) => EXIT_UNKNOWN_FAIL,
        (Verdict::Fail, _) => EXIT_FAIL,
    }
}
