//! Recursive descent parser for conditions.
//!
//! ```text
//! formula := clause ( "/\" clause )*
//! clause  := expr ( ">" | "<" ) const "+/-" const
//! expr    := term ( ( "+" | "-" ) term )*
//! term    := factor ( "*" factor )*        exactly one factor is a variable
//! factor  := "n" | "o" | "d" | const
//! const   := "-"? decimal
//! ```
//!
//! `*` binds tighter than `+`/`-`, and `+`/`-` associate to the left, so
//! `n - o + d` has terms `[(1, n), (-1, o), (1, d)]`.

use thiserror::Error;

use super::{Clause, Comparison, Expr, Formula, Term, Variable};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConditionError {
    #[error("syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown variable `{name}` at byte {pos}; expected one of n, o, d")]
    UnknownVariable { pos: usize, name: String },
    #[error("tolerance must be positive, got {value} at byte {pos}")]
    NonPositiveTolerance { pos: usize, value: f64 },
    #[error("variable `{variable}` appears more than once in one expression (byte {pos})")]
    DuplicateVariable { pos: usize, variable: Variable },
    #[error("coefficient must be finite and nonzero, got {value} at byte {pos}")]
    InvalidCoefficient { pos: usize, value: f64 },
    #[error("comparator `{op}` at byte {pos} is not supported; use strict `>` or `<`")]
    NonStrictComparator { pos: usize, op: String },
}

impl ConditionError {
    pub fn position(&self) -> usize {
        match self {
            ConditionError::Syntax { pos, .. }
            | ConditionError::UnknownVariable { pos, .. }
            | ConditionError::NonPositiveTolerance { pos, .. }
            | ConditionError::DuplicateVariable { pos, .. }
            | ConditionError::InvalidCoefficient { pos, .. }
            | ConditionError::NonStrictComparator { pos, .. } => *pos,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Number(f64),
    Plus,
    Minus,
    Star,
    Gt,
    Lt,
    PlusMinus,
    And,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Number(x) => format!("number {x}"),
            Tok::Plus => "`+`".into(),
            Tok::Minus => "`-`".into(),
            Tok::Star => "`*`".into(),
            Tok::Gt => "`>`".into(),
            Tok::Lt => "`<`".into(),
            Tok::PlusMinus => "`+/-`".into(),
            Tok::And => "`/\\`".into(),
        }
    }
}

fn lex(src: &str) -> Result<Vec<(Tok, usize)>, ConditionError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        let start = i;
        match b {
            b' ' | b'\t' | b'\r' | b'\n' => {
                i += 1;
            }
            b'+' if src[i..].starts_with("+/-") => {
                out.push((Tok::PlusMinus, start));
                i += 3;
            }
            b'+' => {
                out.push((Tok::Plus, start));
                i += 1;
            }
            b'-' => {
                out.push((Tok::Minus, start));
                i += 1;
            }
            b'*' => {
                out.push((Tok::Star, start));
                i += 1;
            }
            b'/' if src[i..].starts_with("/\\") => {
                out.push((Tok::And, start));
                i += 2;
            }
            b'>' | b'<' => {
                if bytes.get(i + 1) == Some(&b'=') {
                    return Err(ConditionError::NonStrictComparator { pos: start, op: src[i..i + 2].to_string() });
                }
                out.push((if b == b'>' { Tok::Gt } else { Tok::Lt }, start));
                i += 1;
            }
            b'0'..=b'9' | b'.' => {
                i += scan_number(&bytes[i..]);
                let text = &src[start..i];
                let value: f64 = text
                    .parse()
                    .map_err(|_| ConditionError::Syntax { pos: start, msg: format!("malformed number `{text}`") })?;
                out.push((Tok::Number(value), start));
            }
            b if b.is_ascii_alphabetic() || b == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push((Tok::Ident(src[start..i].to_string()), start));
            }
            _ => {
                let ch = src[i..].chars().next().unwrap_or('?');
                if ch == '≥' || ch == '≤' {
                    return Err(ConditionError::NonStrictComparator { pos: start, op: ch.to_string() });
                }
                return Err(ConditionError::Syntax { pos: start, msg: format!("unexpected character `{ch}`") });
            }
        }
    }
    Ok(out)
}

/// Length of the longest prefix shaped like `digits [. digits] [e [+-] digits]`.
fn scan_number(b: &[u8]) -> usize {
    let mut i = 0;
    while i < b.len() && b[i].is_ascii_digit() {
        i += 1;
    }
    if i < b.len() && b[i] == b'.' {
        i += 1;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        let mut j = i + 1;
        if j < b.len() && (b[j] == b'+' || b[j] == b'-') {
            j += 1;
        }
        if j < b.len() && b[j].is_ascii_digit() {
            while j < b.len() && b[j].is_ascii_digit() {
                j += 1;
            }
            i = j;
        }
    }
    i
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn peek_at(&self, k: usize) -> Option<&Tok> {
        self.toks.get(self.pos + k).map(|(t, _)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |(_, p)| *p)
    }

    fn bump(&mut self) -> Option<(Tok, usize)> {
        let t = self.toks.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn unexpected(&self, wanted: &str) -> ConditionError {
        let found = self.peek().map_or_else(|| "end of input".to_string(), Tok::describe);
        ConditionError::Syntax { pos: self.offset(), msg: format!("expected {wanted}, found {found}") }
    }

    fn formula(&mut self) -> Result<Formula, ConditionError> {
        let mut clauses = vec![self.clause()?];
        while self.peek() == Some(&Tok::And) {
            self.bump();
            clauses.push(self.clause()?);
        }
        if self.peek().is_some() {
            return Err(self.unexpected("`/\\` or end of input"));
        }
        Formula::new(clauses)
    }

    fn clause(&mut self) -> Result<Clause, ConditionError> {
        let lhs = self.expr()?;
        let cmp = match self.peek() {
            Some(Tok::Gt) => Comparison::Gt,
            Some(Tok::Lt) => Comparison::Lt,
            _ => return Err(self.unexpected("`>` or `<`")),
        };
        self.bump();
        let threshold = self.constant()?.0;
        if self.peek() != Some(&Tok::PlusMinus) {
            return Err(self.unexpected("`+/-`"));
        }
        self.bump();
        let (tolerance, tol_pos) = self.constant()?;
        if !(tolerance.is_finite() && tolerance > 0.0) {
            return Err(ConditionError::NonPositiveTolerance { pos: tol_pos, value: tolerance });
        }
        Ok(Clause { lhs, cmp, threshold, tolerance })
    }

    fn expr(&mut self) -> Result<Expr, ConditionError> {
        let mut terms: Vec<Term> = Vec::new();
        let mut sign = 1.0;
        loop {
            let (coefficient, variable, at) = self.term()?;
            if terms.iter().any(|t| t.variable == variable) {
                return Err(ConditionError::DuplicateVariable { pos: at, variable });
            }
            let coefficient = sign * coefficient;
            if !coefficient.is_finite() || coefficient == 0.0 {
                return Err(ConditionError::InvalidCoefficient { pos: at, value: coefficient });
            }
            terms.push(Term { coefficient, variable });
            match self.peek() {
                Some(Tok::Plus) => sign = 1.0,
                Some(Tok::Minus) => sign = -1.0,
                _ => break,
            }
            self.bump();
        }
        Ok(Expr { terms })
    }

    /// Returns the folded coefficient, the variable, and the variable's offset.
    fn term(&mut self) -> Result<(f64, Variable, usize), ConditionError> {
        let mut coefficient = 1.0;
        let mut variable: Option<(Variable, usize)> = None;
        loop {
            match self.peek() {
                Some(Tok::Ident(_)) => {
                    let Some((Tok::Ident(name), at)) = self.bump() else { unreachable!() };
                    let v = Variable::from_symbol(&name).ok_or(ConditionError::UnknownVariable { pos: at, name })?;
                    if variable.is_some() {
                        return Err(ConditionError::Syntax {
                            pos: at,
                            msg: "a term may contain only one variable".into(),
                        });
                    }
                    variable = Some((v, at));
                }
                Some(Tok::Number(_)) => coefficient *= self.constant()?.0,
                Some(Tok::Minus) if matches!(self.peek_at(1), Some(Tok::Number(_))) => {
                    coefficient *= self.constant()?.0
                }
                _ => return Err(self.unexpected("a variable (n, o, d) or a constant")),
            }
            if self.peek() != Some(&Tok::Star) {
                break;
            }
            self.bump();
        }
        match variable {
            Some((v, at)) => Ok((coefficient, v, at)),
            None => Err(ConditionError::Syntax { pos: self.offset(), msg: "term has no variable".into() }),
        }
    }

    fn constant(&mut self) -> Result<(f64, usize), ConditionError> {
        let at = self.offset();
        let negative = if self.peek() == Some(&Tok::Minus) {
            self.bump();
            true
        } else {
            false
        };
        match self.bump() {
            Some((Tok::Number(x), _)) => Ok((if negative { -x } else { x }, at)),
            Some((t, p)) => {
                Err(ConditionError::Syntax { pos: p, msg: format!("expected a number, found {}", t.describe()) })
            }
            None => Err(ConditionError::Syntax { pos: self.end, msg: "expected a number, found end of input".into() }),
        }
    }
}

/// Parses a condition such as `n - 1.1 * o > 0.01 +/- 0.01 /\ d < 0.1 +/- 0.01`.
pub fn parse_condition(text: &str) -> Result<Formula, ConditionError> {
    let toks = lex(text)?;
    let mut p = Parser { toks, pos: 0, end: text.len() };
    p.formula()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn terms(f: &Formula, i: usize) -> Vec<(f64, Variable)> {
        f.clauses()[i].lhs.terms().iter().map(|t| (t.coefficient, t.variable)).collect()
    }

    #[test]
    fn two_clause_condition() {
        let f = parse_condition("n - o > 0.02 +/- 0.01 /\\ d < 0.1 +/- 0.01").unwrap();
        assert_eq!(f.clauses().len(), 2);
        assert_eq!(terms(&f, 0), vec![(1.0, Variable::New), (-1.0, Variable::Old)]);
        let c = &f.clauses()[0];
        assert_eq!((c.cmp, c.threshold, c.tolerance), (Comparison::Gt, 0.02, 0.01));
        let c = &f.clauses()[1];
        assert_eq!(terms(&f, 1), vec![(1.0, Variable::Diff)]);
        assert_eq!((c.cmp, c.threshold, c.tolerance), (Comparison::Lt, 0.1, 0.01));
    }

    #[test]
    fn single_variable_lower_bound() {
        let f = parse_condition("n > 0.8 +/- 0.05").unwrap();
        assert_eq!(terms(&f, 0), vec![(1.0, Variable::New)]);
        assert_eq!(f.clauses()[0].threshold, 0.8);
        assert_eq!(f.clauses()[0].tolerance, 0.05);
    }

    #[test]
    fn constant_on_either_side_of_star() {
        let a = parse_condition("n - 1.1 * o > 0.01 +/- 0.01").unwrap();
        let b = parse_condition("n - o * 1.1 > 0.01 +/- 0.01").unwrap();
        assert_eq!(terms(&a, 0), vec![(1.0, Variable::New), (-1.1, Variable::Old)]);
        assert_eq!(a, b);
    }

    #[test]
    fn whitespace_insensitive() {
        let a = parse_condition("n-o>0.02+/-0.01/\\d<0.1+/-0.01").unwrap();
        let b = parse_condition("  n  -  o >\t0.02 +/- 0.01\n /\\ d < 0.1 +/- 0.01 ").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn addition_is_left_associative() {
        let f = parse_condition("n - o + d > 0 +/- 0.1").unwrap();
        assert_eq!(terms(&f, 0), vec![(1.0, Variable::New), (-1.0, Variable::Old), (1.0, Variable::Diff)]);
    }

    #[test]
    fn signed_constants() {
        let f = parse_condition("-2 * n + o * -0.5 > -0.01 +/- 0.01").unwrap();
        assert_eq!(terms(&f, 0), vec![(-2.0, Variable::New), (-0.5, Variable::Old)]);
        assert_eq!(f.clauses()[0].threshold, -0.01);
    }

    #[test]
    fn rejects_unknown_variable() {
        let e = parse_condition("x < 0.1 +/- 0.01").unwrap_err();
        assert!(matches!(e, ConditionError::UnknownVariable { pos: 0, ref name } if name == "x"));
    }

    #[test]
    fn rejects_nonpositive_tolerance() {
        let e = parse_condition("n > 0.8 +/- 0").unwrap_err();
        assert!(matches!(e, ConditionError::NonPositiveTolerance { pos: 12, .. }));
        let e = parse_condition("n > 0.8 +/- -0.1").unwrap_err();
        assert!(matches!(e, ConditionError::NonPositiveTolerance { .. }));
    }

    #[test]
    fn rejects_duplicate_variable() {
        let e = parse_condition("n + n > 0.5 +/- 0.1").unwrap_err();
        assert_eq!(e, ConditionError::DuplicateVariable { pos: 4, variable: Variable::New });
    }

    #[test]
    fn rejects_non_strict_comparators() {
        for s in ["n >= 0.5 +/- 0.1", "n <= 0.5 +/- 0.1", "n ≥ 0.5 +/- 0.1"] {
            let e = parse_condition(s).unwrap_err();
            assert!(matches!(e, ConditionError::NonStrictComparator { pos: 2, .. }), "{s}: {e}");
        }
    }

    #[test]
    fn syntax_errors_carry_positions() {
        let e = parse_condition("n > 0.5").unwrap_err();
        assert_eq!(e.position(), 7);
        let e = parse_condition("n > 0.5 +/- 0.1 /\\").unwrap_err();
        assert_eq!(e.position(), 18);
        let e = parse_condition("n o > 0.5 +/- 0.1").unwrap_err();
        assert_eq!(e.position(), 2);
        let e = parse_condition("n * o > 0.5 +/- 0.1").unwrap_err();
        assert_eq!(e.position(), 4);
        let e = parse_condition("2 * 3 > 0.5 +/- 0.1").unwrap_err();
        assert!(matches!(e, ConditionError::Syntax { .. }));
        assert!(parse_condition("").is_err());
        assert!(parse_condition("n > 0.5 +/- 0.1 \\/ d < 0.1 +/- 0.1").is_err());
        assert!(parse_condition("n / o > 0.5 +/- 0.1").is_err());
    }

    #[test]
    fn zero_coefficient_rejected() {
        let e = parse_condition("0 * n > 0.5 +/- 0.1").unwrap_err();
        assert!(matches!(e, ConditionError::InvalidCoefficient { .. }));
    }

    #[test]
    fn conjunction_grouping_does_not_matter() {
        let f = parse_condition("n > 0.1 +/- 0.1 /\\ o > 0.2 +/- 0.1 /\\ d < 0.3 +/- 0.1").unwrap();
        let thresholds: Vec<f64> = f.clauses().iter().map(|c| c.threshold).collect();
        assert_eq!(thresholds, vec![0.1, 0.2, 0.3]);
    }

    #[test]
    fn display_reparses() {
        for s in [
            "n - 1.1 * o > 0.01 +/- 0.01 /\\ d < 0.1 +/- 0.01",
            "-2 * n + 0.5 * o - d > -0.25 +/- 0.125",
            "d < 0.1 +/- 0.01",
        ] {
            let f = parse_condition(s).unwrap();
            assert_eq!(f.to_string(), s);
            assert_eq!(parse_condition(&f.to_string()).unwrap(), f);
        }
    }
}
