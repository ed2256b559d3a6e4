//! Sample-size bounds.
//!
//! All three bounds answer the same question: how many i.i.d. samples make the
//! empirical mean land within `tolerance` of the true mean with probability at
//! least `1 - delta`. Counts are ceilings of the real-valued bound.
//!
//! The Hoeffding and Bennett inversions use the one-sided constant
//! (`delta` rather than `delta / 2` inside the logarithm). Callers that need a
//! two-sided guarantee split `delta` themselves.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

/// Largest count reported as a plan; beyond this f64 stops being exact.
pub const MAX_SAMPLES: f64 = 9_007_199_254_740_992.0; // 2^53

/// Largest `n` the exact binomial scan visits.
pub const EXACT_SCAN_LIMIT: u64 = 10_000_000;

/// Grid step for the worst-case true mean in [`exact_binomial_n`].
pub const EXACT_GRID_STEP: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BoundError {
    #[error("failure probability must lie in (0, 1), got {0}")]
    InvalidDelta(f64),
    #[error("tolerance must be positive and finite, got {0}")]
    InvalidTolerance(f64),
    #[error("range must be positive and finite, got {0}")]
    InvalidRange(f64),
    #[error("variance bound must lie in (0, b^2], got {0}")]
    InvalidVariance(f64),
    #[error("threshold must lie strictly between 0 and 1, got {0}")]
    InvalidThreshold(f64),
    #[error("infeasible plan: {required:.0} samples exceed the limit of {limit:.0}")]
    Infeasible {
        required: f64,
        limit: f64,
        /// A valid, looser count when one exists.
        fallback: Option<u64>,
    },
}

/// A failure probability kept in log space, so `delta / 2^H` stays
/// representable for any step budget.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct FailureProb {
    ln: f64,
}

impl FailureProb {
    pub fn new(delta: f64) -> Result<Self, BoundError> {
        if delta > 0.0 && delta < 1.0 {
            Ok(Self { ln: delta.ln() })
        } else {
            Err(BoundError::InvalidDelta(delta))
        }
    }

    pub fn from_ln(ln: f64) -> Result<Self, BoundError> {
        if ln < 0.0 && ln.is_finite() {
            Ok(Self { ln })
        } else {
            Err(BoundError::InvalidDelta(ln.exp()))
        }
    }

    pub fn ln(self) -> f64 {
        self.ln
    }

    /// `delta` itself; underflows to 0 for extremely small values.
    pub fn value(self) -> f64 {
        self.ln.exp()
    }

    /// `delta / k`.
    pub fn split(self, k: f64) -> Self {
        debug_assert!(k >= 1.0);
        Self { ln: self.ln - k.ln() }
    }

    /// `delta / 2^h`.
    pub fn split_pow2(self, h: u32) -> Self {
        Self { ln: self.ln - f64::from(h) * std::f64::consts::LN_2 }
    }
}

impl TryFrom<f64> for FailureProb {
    type Error = BoundError;

    /// Deserializes from `ln(delta)`.
    fn try_from(ln: f64) -> Result<Self, Self::Error> {
        FailureProb::from_ln(ln)
    }
}

impl From<FailureProb> for f64 {
    fn from(d: FailureProb) -> f64 {
        d.ln
    }
}

fn check_tolerance(eps: f64) -> Result<(), BoundError> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(BoundError::InvalidTolerance(eps))
    }
}

fn ceil_count(x: f64) -> Result<u64, BoundError> {
    if x.is_nan() || x > MAX_SAMPLES {
        return Err(BoundError::Infeasible { required: x, limit: MAX_SAMPLES, fallback: None });
    }
    Ok((x.ceil() as u64).max(1))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoeffdingQuery {
    pub range: f64,
    pub tolerance: f64,
    pub delta: FailureProb,
}

/// Real-valued Hoeffding bound `-r^2 ln(delta) / (2 eps^2)`.
pub fn hoeffding_bound(q: &HoeffdingQuery) -> f64 {
    -q.range * q.range * q.delta.ln() / (2.0 * q.tolerance * q.tolerance)
}

pub fn hoeffding_n(q: &HoeffdingQuery) -> Result<u64, BoundError> {
    if !(q.range > 0.0 && q.range.is_finite()) {
        return Err(BoundError::InvalidRange(q.range));
    }
    check_tolerance(q.tolerance)?;
    ceil_count(hoeffding_bound(q))
}

/// `h(u) = (1 + u) ln(1 + u) - u`.
pub fn bennett_h(u: f64) -> f64 {
    debug_assert!(u >= 0.0);
    if u < 1e-4 {
        // (1+u)ln(1+u) - u cancels badly near zero
        let u2 = u * u;
        return u2 / 2.0 - u2 * u / 6.0 + u2 * u2 / 12.0 - u2 * u2 * u / 20.0;
    }
    (1.0 + u) * u.ln_1p() - u
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BennettQuery {
    /// Bound on the per-sample second moment `E[X_i^2]`.
    pub variance: f64,
    /// Almost-sure bound `|X_i| <= b`.
    pub bound: f64,
    pub tolerance: f64,
    pub delta: FailureProb,
}

impl BennettQuery {
    /// Unit-bounded variables, the case for accuracies and disagreement.
    pub fn unit(variance: f64, tolerance: f64, delta: FailureProb) -> Self {
        Self { variance, bound: 1.0, tolerance, delta }
    }

    fn validate(&self) -> Result<(), BoundError> {
        check_tolerance(self.tolerance)?;
        if !(self.bound > 0.0 && self.bound.is_finite()) {
            return Err(BoundError::InvalidRange(self.bound));
        }
        if !(self.variance > 0.0 && self.variance <= self.bound * self.bound) {
            return Err(BoundError::InvalidVariance(self.variance));
        }
        Ok(())
    }
}

/// Real-valued Bennett bound `-ln(delta) b^2 / (p h(b eps / p))`, without any
/// comparison against Hoeffding.
pub fn bennett_bound(q: &BennettQuery) -> f64 {
    let b2 = q.bound * q.bound;
    -q.delta.ln() * b2 / (q.variance * bennett_h(q.bound * q.tolerance / q.variance))
}

/// Bennett sample size, never worse than Hoeffding for a variable of range
/// `b`. The clip is only sound for variables supported on `[0, b]`; variables
/// on `[-b, b]` should use [`bennett_bound`] and compare against their own
/// baseline.
pub fn bennett_n(q: &BennettQuery) -> Result<u64, BoundError> {
    q.validate()?;
    let hoeffding = hoeffding_n(&HoeffdingQuery { range: q.bound, tolerance: q.tolerance, delta: q.delta })?;
    match ceil_count(bennett_bound(q)) {
        Ok(n) => Ok(n.min(hoeffding)),
        Err(_) => Ok(hoeffding),
    }
}

/// `ln Pr[|X/n - p| > eps]` for `X ~ Binomial(n, p)`, summed in log space.
pub fn binomial_deviation_ln_prob(n: u64, p: f64, eps: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return f64::NEG_INFINITY;
    }
    Tail::new(p).ln_prob(n, eps)
}

struct Tail {
    p: f64,
    ln_p: f64,
    ln_q: f64,
    ln_odds: f64,
}

/// Terms this far below the running sum no longer change it.
const LN_NEGLIGIBLE: f64 = -40.0;

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

impl Tail {
    fn new(p: f64) -> Self {
        let ln_p = p.ln();
        let ln_q = (-p).ln_1p();
        Self { p, ln_p, ln_q, ln_odds: ln_p - ln_q }
    }

    fn ln_pmf(&self, n: u64, k: u64, ln_fact_n: f64) -> f64 {
        ln_fact_n - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
            + k as f64 * self.ln_p
            + (n - k) as f64 * self.ln_q
    }

    fn ln_prob(&self, n: u64, eps: f64) -> f64 {
        let nf = n as f64;
        let ln_fact_n = ln_gamma(nf + 1.0);
        let above = |k: u64| k as f64 / nf - self.p > eps;
        let below = |k: u64| self.p - k as f64 / nf > eps;

        let mut upper = f64::NEG_INFINITY;
        let mut k = ((nf * (self.p + eps)).floor().max(0.0) as u64).min(n);
        while k > 0 && above(k - 1) {
            k -= 1;
        }
        while k <= n && !above(k) {
            k += 1;
        }
        if k <= n {
            let mut term = self.ln_pmf(n, k, ln_fact_n);
            upper = term;
            while k < n {
                term += (((n - k) as f64) / ((k + 1) as f64)).ln() + self.ln_odds;
                k += 1;
                upper = log_add(upper, term);
                if term < upper + LN_NEGLIGIBLE {
                    break;
                }
            }
        }

        let mut lower = f64::NEG_INFINITY;
        let start = (nf * (self.p - eps)).ceil();
        if start > 0.0 {
            let mut k = (start as u64).min(n);
            while k < n && below(k + 1) {
                k += 1;
            }
            loop {
                if below(k) {
                    break;
                }
                if k == 0 {
                    return upper;
                }
                k -= 1;
            }
            let mut term = self.ln_pmf(n, k, ln_fact_n);
            lower = term;
            while k > 0 {
                term += ((k as f64) / ((n - k + 1) as f64)).ln() - self.ln_odds;
                k -= 1;
                lower = log_add(lower, term);
                if term < lower + LN_NEGLIGIBLE {
                    break;
                }
            }
        }
        log_add(upper, lower)
    }
}

/// True means at which [`exact_binomial_n`] checks the deviation probability:
/// the `1e-3` grid inside `[c - eps, c + eps]` plus both endpoints, clamped to
/// `(0, 1)`, ordered from most to least binding.
pub fn exact_grid(threshold: f64, tolerance: f64) -> Vec<f64> {
    let lo = (threshold - tolerance).max(0.0);
    let hi = (threshold + tolerance).min(1.0);
    let mut grid: Vec<f64> = vec![lo, hi];
    let first = (lo / EXACT_GRID_STEP).ceil() as i64;
    let last = (hi / EXACT_GRID_STEP).floor() as i64;
    grid.extend((first..=last).map(|i| i as f64 * EXACT_GRID_STEP));
    grid.retain(|&p| p > 0.0 && p < 1.0);
    grid.sort_by(|a, b| (a - 0.5).abs().partial_cmp(&(b - 0.5).abs()).unwrap().then(a.partial_cmp(b).unwrap()));
    grid.dedup();
    grid
}

/// Smallest `n` such that, for every true mean `p*` on the grid around the
/// threshold, `Pr[|X/n - p*| > eps] <= delta` under `X ~ Binomial(n, p*)`.
///
/// Restricting `p*` to `[c - eps, c + eps]` suffices for clause verdicts: a
/// wrong verdict at a true mean outside the band needs a deviation beyond
/// the band edge, and binomial tails are monotone in `p*`.
pub fn exact_binomial_n(threshold: f64, tolerance: f64, delta: FailureProb) -> Result<u64, BoundError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(BoundError::InvalidThreshold(threshold));
    }
    check_tolerance(tolerance)?;
    let fallback = hoeffding_n(&HoeffdingQuery { range: 1.0, tolerance, delta }).ok();
    let tails: Vec<Tail> = exact_grid(threshold, tolerance).into_iter().map(Tail::new).collect();
    let ln_delta = delta.ln();
    let passes = |n: u64| tails.iter().all(|t| t.ln_prob(n, tolerance) <= ln_delta);

    const CHUNK: u64 = 512;
    let mut start = 1;
    while start <= EXACT_SCAN_LIMIT {
        let end = (start + CHUNK).min(EXACT_SCAN_LIMIT + 1);
        let candidates: Vec<u64> = (start..end).collect();
        if let Some(i) = candidates.par_iter().position_first(|&n| passes(n)) {
            return Ok(candidates[i]);
        }
        start = end;
    }
    Err(BoundError::Infeasible { required: EXACT_SCAN_LIMIT as f64 + 1.0, limit: EXACT_SCAN_LIMIT as f64, fallback })
}
