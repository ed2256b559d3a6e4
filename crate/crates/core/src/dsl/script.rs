//! The `ml:` section of a CI script.
//!
//! ```text
//! ml:
//!   - script     : ./test_model.py
//!   - condition  : n - o > 0.02 +/- 0.01
//!   - reliability: 0.9999
//!   - mode       : fp-free
//!   - adaptivity : full
//!   - steps      : 32
//! ```
//!
//! Only this flat `- key : value` list is understood. Other top-level sections
//! of the surrounding file are skipped.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{parse_condition, ConditionError, Formula};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScriptError {
    #[error("no `ml:` section found")]
    MissingSection,
    #[error("line {line}: second `ml:` section")]
    DuplicateSection { line: usize },
    #[error("missing key `{0}` in `ml:` section")]
    MissingKey(&'static str),
    #[error("line {line}: key `{key}` given twice")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: expected `- key : value`")]
    MalformedLine { line: usize },
    #[error("line {line}: invalid {key} `{value}`: {reason}")]
    InvalidValue { line: usize, key: &'static str, value: String, reason: String },
    #[error("line {line}: reliability must lie strictly between 0 and 1, got {value}")]
    ReliabilityOutOfRange { line: usize, value: String },
    #[error("line {line}: condition: {source}")]
    Condition {
        line: usize,
        #[source]
        source: ConditionError,
    },
}

/// How `Unknown` verdicts are collapsed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Unknown counts as a failure: a pass is never a false positive.
    #[serde(rename = "fp-free")]
    FpFree,
    /// Unknown counts as a pass: a failure is never a false negative.
    #[serde(rename = "fn-free")]
    FnFree,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::FpFree => "fp-free",
            Mode::FnFree => "fn-free",
        })
    }
}

/// Which outcome ends a `firstChange` testset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FirstChangeOn {
    #[default]
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum Adaptivity {
    /// Every verdict is released to the developer.
    Full,
    /// Verdicts go to a sink the developer cannot read; the developer always
    /// sees an accept.
    None { sink: String },
    /// Verdicts are released until the first terminating outcome, which also
    /// retires the testset.
    FirstChange {
        #[serde(default)]
        on: FirstChangeOn,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum AdaptivityKind {
    Full,
    None,
    FirstChange,
}

impl fmt::Display for AdaptivityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdaptivityKind::Full => "full",
            AdaptivityKind::None => "none",
            AdaptivityKind::FirstChange => "firstChange",
        })
    }
}

impl Adaptivity {
    pub fn kind(&self) -> AdaptivityKind {
        match self {
            Adaptivity::Full => AdaptivityKind::Full,
            Adaptivity::None { .. } => AdaptivityKind::None,
            Adaptivity::FirstChange { .. } => AdaptivityKind::FirstChange,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiScript {
    /// The `script` entry; recorded, never executed.
    pub script_path: String,
    pub condition: Formula,
    /// `1 - delta`, as written.
    pub reliability: f64,
    /// Failure probability of the whole testset lifetime.
    pub delta: f64,
    pub mode: Mode,
    pub adaptivity: Adaptivity,
    /// Step budget `H`: commits one testset may serve.
    pub steps: u32,
}

/// `1 - reliability`, computed digit-wise for plain decimals so that
/// `0.99999` yields exactly `1e-5` rather than `1.0000000000065512e-5`.
pub fn reliability_to_delta(text: &str) -> Option<f64> {
    let t = text.trim();
    let r: f64 = t.parse().ok()?;
    if !(r > 0.0 && r < 1.0) {
        return None;
    }
    let frac = t.strip_prefix("0.").or_else(|| t.strip_prefix('.'));
    if let Some(digits) = frac.filter(|d| !d.is_empty() && d.len() <= 18 && d.bytes().all(|b| b.is_ascii_digit())) {
        let scale = 10u64.pow(digits.len() as u32);
        let num: u64 = digits.parse().ok()?;
        return Some((scale - num) as f64 / scale as f64);
    }
    Some(1.0 - r)
}

const KEYS: [&str; 6] = ["script", "condition", "reliability", "mode", "adaptivity", "steps"];
const FIRST_CHANGE_KEY: &str = "firstChange_on";

#[derive(Default)]
struct Entries {
    values: Vec<(String, String, usize)>,
}

impl Entries {
    fn get(&self, key: &'static str) -> Result<(&str, usize), ScriptError> {
        self.values
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, l)| (v.as_str(), *l))
            .ok_or(ScriptError::MissingKey(key))
    }
}

/// Parses a CI script and validates every entry.
pub fn parse_script(text: &str) -> Result<CiScript, ScriptError> {
    let entries = collect_entries(text)?;

    let (script_path, _) = entries.get("script")?;
    if script_path.is_empty() {
        return Err(ScriptError::InvalidValue {
            line: entries.get("script")?.1,
            key: "script",
            value: String::new(),
            reason: "empty".into(),
        });
    }

    let (cond, line) = entries.get("condition")?;
    let condition = parse_condition(cond).map_err(|source| ScriptError::Condition { line, source })?;

    let (rel, line) = entries.get("reliability")?;
    let reliability: f64 = rel.parse().map_err(|_| ScriptError::InvalidValue {
        line,
        key: "reliability",
        value: rel.to_string(),
        reason: "not a number".into(),
    })?;
    let delta =
        reliability_to_delta(rel).ok_or_else(|| ScriptError::ReliabilityOutOfRange { line, value: rel.to_string() })?;

    let (m, line) = entries.get("mode")?;
    let mode = match m {
        "fp-free" => Mode::FpFree,
        "fn-free" => Mode::FnFree,
        _ => {
            return Err(ScriptError::InvalidValue {
                line,
                key: "mode",
                value: m.to_string(),
                reason: "expected `fp-free` or `fn-free`".into(),
            })
        }
    };

    let first_change_on = match entries.values.iter().find(|(k, _, _)| k == FIRST_CHANGE_KEY) {
        None => FirstChangeOn::Pass,
        Some((_, v, l)) => match v.as_str() {
            "pass" => FirstChangeOn::Pass,
            "fail" => FirstChangeOn::Fail,
            _ => {
                return Err(ScriptError::InvalidValue {
                    line: *l,
                    key: FIRST_CHANGE_KEY,
                    value: v.clone(),
                    reason: "expected `pass` or `fail`".into(),
                })
            }
        },
    };

    let (a, line) = entries.get("adaptivity")?;
    let adaptivity = parse_adaptivity(a, first_change_on).map_err(|reason| ScriptError::InvalidValue {
        line,
        key: "adaptivity",
        value: a.to_string(),
        reason,
    })?;

    let (s, line) = entries.get("steps")?;
    let steps: u32 = s.parse().ok().filter(|&h| h >= 1).ok_or_else(|| ScriptError::InvalidValue {
        line,
        key: "steps",
        value: s.to_string(),
        reason: "expected a positive integer".into(),
    })?;

    Ok(CiScript { script_path: script_path.to_string(), condition, reliability, delta, mode, adaptivity, steps })
}

fn parse_adaptivity(value: &str, on: FirstChangeOn) -> Result<Adaptivity, String> {
    if let Some(rest) = value.strip_prefix("none") {
        let rest = rest.trim_start();
        let Some(addr) = rest.strip_prefix("->") else {
            return Err("`none` needs a sink: `none -> ADDRESS`".into());
        };
        let addr = addr.trim();
        if addr.is_empty() || addr.contains(char::is_whitespace) {
            return Err("sink address must be a single non-empty token".into());
        }
        return Ok(Adaptivity::None { sink: addr.to_string() });
    }
    match value {
        "full" => Ok(Adaptivity::Full),
        "firstChange" => Ok(Adaptivity::FirstChange { on }),
        _ => Err("expected `full`, `none -> ADDRESS` or `firstChange`".into()),
    }
}

fn collect_entries(text: &str) -> Result<Entries, ScriptError> {
    let mut entries = Entries::default();
    let mut seen_section = false;
    // indentation of the open `ml:` header
    let mut section: Option<usize> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let indent = raw.len() - raw.trim_start().len();
        match section {
            Some(header) if indent > header => {}
            _ => {
                section = None;
                if trimmed == "ml:" {
                    if seen_section {
                        return Err(ScriptError::DuplicateSection { line });
                    }
                    seen_section = true;
                    section = Some(indent);
                }
                continue;
            }
        }
        let item = trimmed.strip_prefix('-').ok_or(ScriptError::MalformedLine { line })?;
        let (key, value) = item.split_once(':').ok_or(ScriptError::MalformedLine { line })?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(ScriptError::MalformedLine { line });
        }
        if !KEYS.contains(&key) && key != FIRST_CHANGE_KEY {
            return Err(ScriptError::UnknownKey { line, key: key.to_string() });
        }
        if entries.values.iter().any(|(k, _, _)| k == key) {
            return Err(ScriptError::DuplicateKey { line, key: key.to_string() });
        }
        entries.values.push((key.to_string(), value.to_string(), line));
    }
    if !seen_section {
        return Err(ScriptError::MissingSection);
    }
    Ok(entries)
}

impl CiScript {
    /// Renders the script back into the `ml:` section format.
    pub fn to_script_text(&self) -> String {
        let adaptivity = match &self.adaptivity {
            Adaptivity::Full => "full".to_string(),
            Adaptivity::None { sink } => format!("none -> {sink}"),
            Adaptivity::FirstChange { .. } => "firstChange".to_string(),
        };
        let mut s = format!(
            "ml:\n  - script     : {}\n  - condition  : {}\n  - reliability: {}\n  - mode       : {}\n  - adaptivity : {}\n  - steps      : {}\n",
            self.script_path, self.condition, self.reliability, self.mode, adaptivity, self.steps
        );
        if let Adaptivity::FirstChange { on: FirstChangeOn::Fail } = self.adaptivity {
            s.push_str("  - firstChange_on: fail\n");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = "ml:
  - script     : ./test_model.py
  - condition  : n - o > 0.02 +/- 0.01
  - reliability: 0.9999
  - mode       : fp-free
  - adaptivity : full
  - steps      : 32
";

    const NONE: &str = "ml:
  - script     : ./test_model.py
  - condition  : d < 0.1 +/- 0.01
  - reliability: 0.9999
  - mode       : fp-free
  - adaptivity : none -> xx@abc.com
  - steps      : 32
";

    #[test]
    fn full_adaptivity_script() {
        let s = parse_script(FULL).unwrap();
        assert_eq!(s.script_path, "./test_model.py");
        assert_eq!(s.delta, 0.0001);
        assert_eq!(s.reliability, 0.9999);
        assert_eq!(s.mode, Mode::FpFree);
        assert_eq!(s.adaptivity, Adaptivity::Full);
        assert_eq!(s.steps, 32);
        assert_eq!(s.condition.to_string(), "n - o > 0.02 +/- 0.01");
    }

    #[test]
    fn none_adaptivity_script() {
        let s = parse_script(NONE).unwrap();
        assert_eq!(s.adaptivity, Adaptivity::None { sink: "xx@abc.com".into() });
        assert_eq!(s.condition.to_string(), "d < 0.1 +/- 0.01");
    }

    #[test]
    fn zero_steps_rejected() {
        let text = FULL.replace("steps      : 32", "steps      : 0");
        assert!(matches!(parse_script(&text), Err(ScriptError::InvalidValue { key: "steps", line: 7, .. })));
    }

    #[test]
    fn reliability_bounds() {
        for r in ["1", "0", "1.5", "-0.1", "1.0"] {
            let text = FULL.replace("0.9999", r);
            assert!(matches!(parse_script(&text), Err(ScriptError::ReliabilityOutOfRange { .. })), "{r}");
        }
        let text = FULL.replace("0.9999", "high");
        assert!(matches!(parse_script(&text), Err(ScriptError::InvalidValue { key: "reliability", .. })));
    }

    #[test]
    fn delta_is_exact_for_decimals() {
        assert_eq!(reliability_to_delta("0.99999"), Some(1e-5));
        assert_eq!(reliability_to_delta("0.99"), Some(0.01));
        assert_eq!(reliability_to_delta(".9"), Some(0.1));
        assert_eq!(reliability_to_delta("9.99e-1"), Some(1.0 - 0.999));
        assert_eq!(reliability_to_delta("1"), None);
    }

    #[test]
    fn missing_and_unknown_keys() {
        let text = FULL.replace("  - steps      : 32\n", "");
        assert_eq!(parse_script(&text), Err(ScriptError::MissingKey("steps")));
        let text = format!("{FULL}  - timeout: 3\n");
        assert!(matches!(parse_script(&text), Err(ScriptError::UnknownKey { line: 8, .. })));
        let text = format!("{FULL}  - steps: 3\n");
        assert!(matches!(parse_script(&text), Err(ScriptError::DuplicateKey { .. })));
        assert_eq!(parse_script("language: python\n"), Err(ScriptError::MissingSection));
    }

    #[test]
    fn none_requires_sink() {
        let text = NONE.replace("none -> xx@abc.com", "none");
        assert!(matches!(parse_script(&text), Err(ScriptError::InvalidValue { key: "adaptivity", .. })));
        let text = NONE.replace("none -> xx@abc.com", "none ->");
        assert!(parse_script(&text).is_err());
    }

    #[test]
    fn bad_condition_reports_line() {
        let text = FULL.replace("n - o > 0.02 +/- 0.01", "n - x > 0.02 +/- 0.01");
        assert!(matches!(
            parse_script(&text),
            Err(ScriptError::Condition { line: 3, source: ConditionError::UnknownVariable { .. } })
        ));
    }

    #[test]
    fn surrounding_travis_sections_are_ignored() {
        let text = format!("language: python\nscript:\n  - pytest\n{FULL}\nnotifications:\n  email: false\n");
        assert_eq!(parse_script(&text).unwrap(), parse_script(FULL).unwrap());
    }

    #[test]
    fn indented_section() {
        let indented: String = FULL.lines().map(|l| format!("  {l}\n")).collect();
        assert_eq!(parse_script(&indented).unwrap(), parse_script(FULL).unwrap());
        let text = format!("jobs:\n{indented}  other:\n    - script: x\n");
        assert_eq!(parse_script(&text).unwrap(), parse_script(FULL).unwrap());
    }

    #[test]
    fn first_change_knob() {
        let text = FULL.replace("adaptivity : full", "adaptivity : firstChange");
        assert_eq!(parse_script(&text).unwrap().adaptivity, Adaptivity::FirstChange { on: FirstChangeOn::Pass });
        let text = format!("{text}  - firstChange_on: fail\n");
        let s = parse_script(&text).unwrap();
        assert_eq!(s.adaptivity, Adaptivity::FirstChange { on: FirstChangeOn::Fail });
        assert_eq!(parse_script(&s.to_script_text()).unwrap(), s);
    }

    #[test]
    fn render_round_trips() {
        for text in [FULL, NONE] {
            let s = parse_script(text).unwrap();
            assert_eq!(parse_script(&s.to_script_text()).unwrap(), s);
        }
    }
}
