//! Condition language and CI script format.
//!
//! A condition is a conjunction of clauses over three accuracy variables:
//!
//! ```text
//! n - o > 0.02 +/- 0.01 /\ d < 0.1 +/- 0.01
//! ```
//!
//! `n` is the accuracy of the new model, `o` the accuracy of the old model and
//! `d` the fraction of examples on which their predictions differ. Every clause
//! carries its own error tolerance after `+/-`.
//!
//! The script format is the `ml:` section of a `.travis.yml`-style file; see
//! [`parse_script`].

mod condition;
mod pattern;
mod script;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use condition::{parse_condition, ConditionError};
pub use pattern::{match_pattern, PatternTag, LARGE_LOWER_BOUND};
pub use script::{
    parse_script, reliability_to_delta, Adaptivity, AdaptivityKind, CiScript, FirstChangeOn, Mode, ScriptError,
};

/// One of the three observable quantities of a commit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variable {
    /// `n`: accuracy of the new model.
    New,
    /// `o`: accuracy of the old model.
    Old,
    /// `d`: fraction of examples where new and old predictions differ.
    Diff,
}

impl Variable {
    pub const ALL: [Variable; 3] = [Variable::New, Variable::Old, Variable::Diff];

    pub fn symbol(self) -> &'static str {
        match self {
            Variable::New => "n",
            Variable::Old => "o",
            Variable::Diff => "d",
        }
    }

    pub fn from_symbol(s: &str) -> Option<Self> {
        match s {
            "n" => Some(Variable::New),
            "o" => Some(Variable::Old),
            "d" => Some(Variable::Diff),
            _ => None,
        }
    }

    /// Dynamic range of the variable. All three live in `[0, 1]`.
    pub fn range(self) -> f64 {
        1.0
    }
}

impl fmt::Display for Variable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

/// `coefficient * variable`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub coefficient: f64,
    pub variable: Variable,
}

impl Term {
    pub fn new(coefficient: f64, variable: Variable) -> Self {
        Self { coefficient, variable }
    }
}

/// A linear expression with at most one term per variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Term>", into = "Vec<Term>")]
pub struct Expr {
    terms: Vec<Term>,
}

impl Expr {
    /// Builds an expression, rejecting empty term lists, zero or non-finite
    /// coefficients and repeated variables. Errors report position 0 since
    /// there is no source text.
    pub fn new(terms: Vec<Term>) -> Result<Self, ConditionError> {
        if terms.is_empty() {
            return Err(ConditionError::Syntax { pos: 0, msg: "empty expression".into() });
        }
        for (i, t) in terms.iter().enumerate() {
            if !t.coefficient.is_finite() || t.coefficient == 0.0 {
                return Err(ConditionError::InvalidCoefficient { pos: 0, value: t.coefficient });
            }
            if terms[..i].iter().any(|u| u.variable == t.variable) {
                return Err(ConditionError::DuplicateVariable { pos: 0, variable: t.variable });
            }
        }
        Ok(Self { terms })
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn coefficient_of(&self, v: Variable) -> Option<f64> {
        self.terms.iter().find(|t| t.variable == v).map(|t| t.coefficient)
    }

    /// True when the expression is exactly `n - o`.
    pub fn is_new_minus_old(&self) -> bool {
        self.terms.len() == 2
            && self.coefficient_of(Variable::New) == Some(1.0)
            && self.coefficient_of(Variable::Old) == Some(-1.0)
    }

    /// True when the expression is exactly the single variable `v`.
    pub fn is_single(&self, v: Variable) -> bool {
        self.terms.len() == 1 && self.terms[0].variable == v && self.terms[0].coefficient == 1.0
    }
}

impl TryFrom<Vec<Term>> for Expr {
    type Error = ConditionError;

    fn try_from(terms: Vec<Term>) -> Result<Self, Self::Error> {
        Expr::new(terms)
    }
}

impl From<Expr> for Vec<Term> {
    fn from(e: Expr) -> Self {
        e.terms
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.terms.iter().enumerate() {
            let c = t.coefficient;
            if i == 0 {
                if c == 1.0 {
                    write!(f, "{}", t.variable)?;
                } else {
                    write!(f, "{} * {}", c, t.variable)?;
                }
                continue;
            }
            let op = if c < 0.0 { '-' } else { '+' };
            let abs = c.abs();
            if abs == 1.0 {
                write!(f, " {} {}", op, t.variable)?;
            } else {
                write!(f, " {} {} * {}", op, abs, t.variable)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Comparison {
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = "<")]
    Lt,
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Comparison::Gt => ">",
            Comparison::Lt => "<",
        })
    }
}

/// `lhs cmp threshold +/- tolerance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clause {
    pub lhs: Expr,
    pub cmp: Comparison,
    pub threshold: f64,
    pub tolerance: f64,
}

impl Clause {
    pub fn new(lhs: Expr, cmp: Comparison, threshold: f64, tolerance: f64) -> Result<Self, ConditionError> {
        if !threshold.is_finite() {
            return Err(ConditionError::Syntax { pos: 0, msg: format!("threshold must be finite, got {threshold}") });
        }
        if !(tolerance.is_finite() && tolerance > 0.0) {
            return Err(ConditionError::NonPositiveTolerance { pos: 0, value: tolerance });
        }
        Ok(Self { lhs, cmp, threshold, tolerance })
    }

    pub fn variables(&self) -> impl Iterator<Item = Variable> + '_ {
        self.lhs.terms().iter().map(|t| t.variable)
    }
}

impl fmt::Display for Clause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} +/- {}", self.lhs, self.cmp, self.threshold, self.tolerance)
    }
}

/// A non-empty conjunction of clauses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Clause>", into = "Vec<Clause>")]
pub struct Formula {
    clauses: Vec<Clause>,
}

impl Formula {
    pub fn new(clauses: Vec<Clause>) -> Result<Self, ConditionError> {
        if clauses.is_empty() {
            return Err(ConditionError::Syntax { pos: 0, msg: "a condition needs at least one clause".into() });
        }
        Ok(Self { clauses })
    }

    pub fn clauses(&self) -> &[Clause] {
        &self.clauses
    }

    pub fn uses(&self, v: Variable) -> bool {
        self.clauses.iter().any(|c| c.variables().any(|w| w == v))
    }
}

impl TryFrom<Vec<Clause>> for Formula {
    type Error = ConditionError;

    fn try_from(clauses: Vec<Clause>) -> Result<Self, Self::Error> {
        Formula::new(clauses)
    }
}

impl From<Formula> for Vec<Clause> {
    fn from(f: Formula) -> Self {
        f.clauses
    }
}

impl std::str::FromStr for Formula {
    type Err = ConditionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_condition(s)
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.clauses.iter().enumerate() {
            if i > 0 {
                f.write_str(" /\\ ")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}
