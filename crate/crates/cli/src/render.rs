//! Plan and status rendering.

use std::fmt::Write as _;

use mlci_core::dsl::{CiScript, PatternTag};
use mlci_core::estimator::{BoundKind, ClauseEstimate, SamplePlan};
use mlci_core::session::{AlarmReason, AlarmStatus, DeveloperSignal};

pub const PLAN_CSV_HEADER: &str = "testset_size,bound,bennett_p,pattern,unlabeled_size,secondary_testset_size,per_commit_labels,required_manifest_size,ln_adjusted_delta";

pub fn bound_name(b: &BoundKind) -> &'static str {
    match b {
        BoundKind::Hoeffding => "hoeffding",
        BoundKind::Bennett { .. } => "bennett",
        BoundKind::ExactBinomial => "exact-binomial",
    }
}

pub fn signal_name(s: DeveloperSignal) -> &'static str {
    match s {
        DeveloperSignal::Pass => "pass",
        DeveloperSignal::Fail => "fail",
        DeveloperSignal::Accept => "accept",
    }
}

pub fn alarm_name(a: AlarmStatus) -> String {
    match a {
        AlarmStatus::Quiet => "quiet".into(),
        AlarmStatus::RequestNewTestset(AlarmReason::Budget) => "budget".into(),
        AlarmStatus::RequestNewTestset(AlarmReason::FirstChange(v)) => format!("first_change_{v}"),
        AlarmStatus::RequestNewTestset(AlarmReason::LabelPool) => "label_pool".into(),
    }
}

/// Quotes a CSV field when it needs it.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

pub fn plan_csv(plan: &SamplePlan) -> String {
    let p = match plan.bound {
        BoundKind::Bennett { p } => p.to_string(),
        _ => String::new(),
    };
    format!(
        "{PLAN_CSV_HEADER}\n{},{},{},{},{},{},{},{},{}\n",
        plan.testset_size,
        bound_name(&plan.bound),
        p,
        plan.pattern.name(),
        plan.unlabeled_size,
        plan.secondary_testset_size,
        plan.per_commit_labels,
        plan.required_manifest_size(),
        plan.ln_adjusted_delta
    )
}

pub fn plan_json(plan: &SamplePlan) -> serde_json::Result<String> {
    Ok(serde_json::to_string_pretty(plan)? + "\n")
}

pub fn plan_text(script: &CiScript, plan: &SamplePlan) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "condition: {}", script.condition);
    let _ = writeln!(
        s,
        "reliability: {} (delta {:e}), {} steps, adjusted delta e^{:.4}",
        script.reliability, script.delta, script.steps, plan.ln_adjusted_delta
    );
    let _ = writeln!(s, "testset size: {}", plan.testset_size);
    let bound = match plan.bound {
        BoundKind::Bennett { p } => format!("bennett (variance bound {p})"),
        b => bound_name(&b).to_owned(),
    };
    let _ = writeln!(s, "bound: {bound}");
    let _ = writeln!(s, "pattern: {}", plan.pattern.name());
    match plan.pattern {
        PatternTag::Pattern1 { .. } => {
            let _ = writeln!(s, "unlabeled examples for the d filter: {}", plan.unlabeled_size);
        }
        PatternTag::Pattern2Diff { .. } | PatternTag::Pattern2Lower { .. } => {
            let _ = writeln!(s, "secondary set: {}", plan.secondary_testset_size);
        }
        PatternTag::Generic => {}
    }
    let _ = writeln!(s, "manifest must hold: {}", plan.required_manifest_size());
    let _ = writeln!(s, "labels per commit: at most {}", plan.per_commit_labels);
    for c in &plan.allocation.clauses {
        match &c.estimate {
            ClauseEstimate::Leaves { leaves } => {
                for l in leaves {
                    let _ = writeln!(
                        s,
                        "  clause {}: {} tolerance {:.6} delta e^{:.4} -> {} samples",
                        c.clause,
                        l.variable.symbol(),
                        l.tolerance,
                        l.delta.ln(),
                        l.samples
                    );
                }
            }
            ClauseEstimate::Joint { tolerance, delta, samples } => {
                let _ = writeln!(
                    s,
                    "  clause {}: joint tolerance {tolerance:.6} delta e^{:.4} -> {samples} samples",
                    c.clause,
                    delta.ln()
                );
            }
        }
    }
    if let Some(t) = &plan.deferred {
        let _ = writeln!(s, "test size by observed variance bound:");
        for r in &t.rows {
            let _ = writeln!(s, "  p <= {:.2}: {}", r.p, r.n);
        }
        let _ = writeln!(s, "  otherwise: {}", t.fallback);
    }
    s
}
