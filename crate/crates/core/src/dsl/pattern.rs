use serde::{Deserialize, Serialize};

use super::{Comparison, Formula, Variable};

/// Lower bounds at or above this value are worth a coarse-then-fine plan.
pub const LARGE_LOWER_BOUND: f64 = 0.9;

/// Formula shapes that admit a cheaper plan than the generic estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "pattern")]
pub enum PatternTag {
    /// `d < A +/- B /\ n - o > C +/- D`, in either clause order.
    Pattern1 {
        a: f64,
        b: f64,
        c: f64,
        d: f64,
        diff_clause: usize,
        gain_clause: usize,
    },
    /// `n - o > C +/- D` alone.
    Pattern2Diff {
        c: f64,
        d: f64,
    },
    /// `n > A +/- B` alone, with `A >= 0.9`.
    Pattern2Lower {
        a: f64,
        b: f64,
    },
    Generic,
}

impl PatternTag {
    pub fn name(&self) -> &'static str {
        match self {
            PatternTag::Pattern1 { .. } => "pattern1",
            PatternTag::Pattern2Diff { .. } => "pattern2-diff",
            PatternTag::Pattern2Lower { .. } => "pattern2-lower",
            PatternTag::Generic => "generic",
        }
    }
}

pub fn match_pattern(f: &Formula) -> PatternTag {
    let clauses = f.clauses();
    let is_diff_cap = |i: usize| {
        let c = &clauses[i];
        c.cmp == Comparison::Lt && c.lhs.is_single(Variable::Diff)
    };
    let is_gain = |i: usize| {
        let c = &clauses[i];
        c.cmp == Comparison::Gt && c.lhs.is_new_minus_old()
    };
    match clauses.len() {
        2 => {
            let found = if is_diff_cap(0) && is_gain(1) {
                Some((0, 1))
            } else if is_gain(0) && is_diff_cap(1) {
                Some((1, 0))
            } else {
                None
            };
            match found {
                Some((diff_clause, gain_clause)) => PatternTag::Pattern1 {
                    a: clauses[diff_clause].threshold,
                    b: clauses[diff_clause].tolerance,
                    c: clauses[gain_clause].threshold,
                    d: clauses[gain_clause].tolerance,
                    diff_clause,
                    gain_clause,
                },
                None => PatternTag::Generic,
            }
        }
        1 if is_gain(0) => PatternTag::Pattern2Diff { c: clauses[0].threshold, d: clauses[0].tolerance },
        1 if clauses[0].cmp == Comparison::Gt
            && clauses[0].lhs.is_single(Variable::New)
            && clauses[0].threshold >= LARGE_LOWER_BOUND =>
        {
            PatternTag::Pattern2Lower { a: clauses[0].threshold, b: clauses[0].tolerance }
        }
        _ => PatternTag::Generic,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse_condition;

    fn tag(s: &str) -> PatternTag {
        match_pattern(&parse_condition(s).unwrap())
    }

    #[test]
    fn pattern1_either_order() {
        let expected = |diff_clause, gain_clause| PatternTag::Pattern1 {
            a: 0.1,
            b: 0.01,
            c: 0.02,
            d: 0.01,
            diff_clause,
            gain_clause,
        };
        assert_eq!(tag("d < 0.1 +/- 0.01 /\\ n - o > 0.02 +/- 0.01"), expected(0, 1));
        assert_eq!(tag("n - o > 0.02 +/- 0.01 /\\ d < 0.1 +/- 0.01"), expected(1, 0));
    }

    #[test]
    fn pattern2_shapes() {
        assert_eq!(tag("n - o > 0.02 +/- 0.01"), PatternTag::Pattern2Diff { c: 0.02, d: 0.01 });
        assert_eq!(tag("n > 0.95 +/- 0.01"), PatternTag::Pattern2Lower { a: 0.95, b: 0.01 });
        assert_eq!(tag("n > 0.9 +/- 0.01"), PatternTag::Pattern2Lower { a: 0.9, b: 0.01 });
    }

    #[test]
    fn generic_fallbacks() {
        assert_eq!(tag("d < 0.1 +/- 0.01"), PatternTag::Generic);
        assert_eq!(tag("n > 0.5 +/- 0.05"), PatternTag::Generic);
        assert_eq!(tag("n - 1.1 * o > 0.01 +/- 0.01 /\\ d < 0.1 +/- 0.01"), PatternTag::Generic);
        assert_eq!(tag("o - n > 0.02 +/- 0.01"), PatternTag::Generic);
        assert_eq!(tag("d > 0.1 +/- 0.01 /\\ n - o > 0.02 +/- 0.01"), PatternTag::Generic);
        assert_eq!(tag("d < 0.1 +/- 0.01 /\\ n - o > 0.02 +/- 0.01 /\\ n > 0.5 +/- 0.1"), PatternTag::Generic);
    }
}
