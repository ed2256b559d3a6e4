//! Grids for `mlci simulate`.

use std::fmt::Write as _;

use serde::Serialize;

use mlci_core::dsl::parse_script;
use mlci_core::estimator::PlanStrategy;
use mlci_core::simharness::{
    run_coverage, run_label_savings, savings_csv, CoverageConfig, CoverageReport, CoverageVerdict, Developer,
    SyntheticWorld,
};

use crate::{print_out, CmdResult, Failure, Format, Grid, EXIT_PASS};

/// Reliability rows of the reference table.
pub const RELIABILITY_ROWS: [f64; 4] = [0.99, 0.999, 0.9999, 0.99999];

/// Axes of the label-complexity grid.
pub const SAVINGS_EPSILONS: [f64; 4] = [0.01, 0.025, 0.05, 0.1];
pub const SAVINGS_DELTAS: [f64; 4] = [0.01, 0.001, 0.0001, 0.00001];
pub const SAVINGS_PS: [f64; 6] = [0.01, 0.05, 0.1, 0.2, 0.5, 1.0];

#[derive(Debug, Clone, Serialize)]
pub struct CoverageCase {
    pub reliability: f64,
    pub epsilon: f64,
    pub condition: String,
    pub adaptivity: String,
    pub steps: u32,
    pub developer: Developer,
    pub world: SyntheticWorld,
}

#[derive(Debug, Serialize)]
struct CoverageRow<'a> {
    #[serde(flatten)]
    case: &'a CoverageCase,
    report: &'a CoverageReport,
}

fn world(n: f64, o: f64, d: f64) -> SyntheticWorld {
    SyntheticWorld::new(n, o, d).expect("preset worlds are feasible")
}

/// Worlds sit exactly on the threshold, the hardest place for fp-free.
/// Fully adaptive runs use the threshold-chasing developer.
pub fn fig2_cases() -> Vec<CoverageCase> {
    let eps = 0.1;
    let mut cases = Vec::new();
    for reliability in RELIABILITY_ROWS {
        for (condition, w) in [
            (format!("n > 0.8 +/- {eps}"), world(0.8, 0.75, 0.1)),
            (format!("n - o > 0.02 +/- {eps}"), world(0.82, 0.8, 0.1)),
        ] {
            for adaptivity in ["none -> sink", "full"] {
                let developer = if adaptivity == "full" {
                    Developer::ThresholdChaser { step: eps / 2.0 }
                } else {
                    Developer::Fixed
                };
                cases.push(CoverageCase {
                    reliability,
                    epsilon: eps,
                    condition: condition.clone(),
                    adaptivity: adaptivity.into(),
                    steps: 32,
                    developer,
                    world: w,
                });
            }
        }
    }
    cases
}

pub fn smoke_case() -> CoverageCase {
    CoverageCase {
        reliability: 0.95,
        epsilon: 0.05,
        condition: "n > 0.8 +/- 0.05".into(),
        adaptivity: "full".into(),
        steps: 8,
        developer: Developer::ThresholdChaser { step: 0.025 },
        world: world(0.8, 0.75, 0.1),
    }
}

pub fn run_case(case: &CoverageCase, trials: u64, seed: u64) -> Result<CoverageReport, Failure> {
    let text = format!(
        "ml:\n  - script: ./simulate\n  - condition: {}\n  - reliability: {}\n  - mode: fp-free\n  - adaptivity: {}\n  - steps: {}\n",
        case.condition, case.reliability, case.adaptivity, case.steps
    );
    let script = parse_script(&text).map_err(Failure::usage)?;
    run_coverage(&CoverageConfig {
        script,
        strategy: PlanStrategy::Auto,
        world: case.world,
        developer: case.developer,
        trials,
        seed,
    })
    .map_err(Failure::usage)
}

fn render_coverage(rows: &[(CoverageCase, CoverageReport)], format: Format) -> Result<String, Failure> {
    Ok(match format {
        Format::Csv => {
            let mut s = format!("reliability,epsilon,condition,adaptivity,steps,{}\n", CoverageReport::CSV_HEADER);
            for (c, r) in rows {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{}",
                    c.reliability,
                    c.epsilon,
                    c.condition,
                    c.adaptivity,
                    c.steps,
                    r.csv_row()
                );
            }
            s
        }
        Format::Json => {
            let rows: Vec<_> = rows.iter().map(|(case, report)| CoverageRow { case, report }).collect();
            serde_json::to_string_pretty(&rows).map_err(Failure::usage)? + "\n"
        }
        Format::Text => {
            let mut s = String::new();
            for (c, r) in rows {
                let _ = writeln!(
                    s,
                    "{} @ {} ({}, H={}): N={} [{}], {} / {} trials violated = {:.5} vs delta {} + 3 sigma {:.5} -> {}",
                    c.condition,
                    c.reliability,
                    c.adaptivity,
                    c.steps,
                    r.testset_size,
                    r.bound,
                    r.violations,
                    r.trials,
                    r.empirical_rate,
                    r.delta,
                    3.0 * r.sigma,
                    match r.verdict {
                        CoverageVerdict::Covered => "covered",
                        CoverageVerdict::Violated => "VIOLATED",
                    }
                );
            }
            s
        }
    })
}

pub fn cmd_simulate(grid: Grid, trials: u64, seed: u64, format: Format) -> CmdResult {
    let text = match grid {
        Grid::Fig3 => {
            let rows = run_label_savings(&SAVINGS_EPSILONS, &SAVINGS_DELTAS, &SAVINGS_PS, 1).map_err(Failure::usage)?;
            match format {
                Format::Csv => savings_csv(&rows),
                Format::Json => serde_json::to_string_pretty(&rows).map_err(Failure::usage)? + "\n",
                Format::Text => {
                    let mut s = String::new();
                    for r in &rows {
                        let _ = writeln!(
                            s,
                            "eps={} delta={} p={}: hoeffding {} bennett {} ({:.1}x) active {} ({:.1}x)",
                            r.epsilon,
                            r.delta,
                            r.p,
                            r.n_hoeffding,
                            r.n_bennett,
                            r.n_hoeffding as f64 / r.n_bennett as f64,
                            r.n_active,
                            r.n_hoeffding as f64 / r.n_active.max(1) as f64
                        );
                    }
                    s
                }
            }
        }
        Grid::Fig2 | Grid::Smoke => {
            let cases = if grid == Grid::Fig2 { fig2_cases() } else { vec![smoke_case()] };
            let mut rows = Vec::with_capacity(cases.len());
            for case in cases {
                let report = run_case(&case, trials, seed)?;
                rows.push((case, report));
            }
            render_coverage(&rows, format)?
        }
    };
    print_out(&text)?;
    Ok(EXIT_PASS)
}
