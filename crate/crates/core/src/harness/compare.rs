//! Trend assertions between result tables.

use std::fmt;

use super::eval::{Condition, ResultsTable};
use crate::error::{Error, Result};

/// One checked inequality `lhs <op> rhs` on table cells.
#[derive(Clone, Debug, PartialEq)]
pub struct Trend {
    pub name: String,
    pub relation: &'static str,
    pub lhs: f64,
    pub rhs: f64,
    /// Signed slack; positive when the assertion holds.
    pub margin: f64,
    pub passed: bool,
}

impl fmt::Display for Trend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: lhs={:.2} {} rhs={:.2} (margin {:+.2})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.lhs,
            self.relation,
            self.rhs,
            self.margin
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrendReport {
    pub trends: Vec<Trend>,
}

impl TrendReport {
    pub fn all_passed(&self) -> bool {
        !self.trends.is_empty() && self.trends.iter().all(|t| t.passed)
    }

    fn le(&mut self, name: String, lhs: f64, rhs: f64) {
        self.trends.push(Trend { name, relation: "<=", lhs, rhs, margin: rhs - lhs, passed: lhs <= rhs });
    }

    fn ge(&mut self, name: String, lhs: f64, rhs: f64) {
        self.trends.push(Trend { name, relation: ">=", lhs, rhs, margin: lhs - rhs, passed: lhs >= rhs });
    }

    fn gt(&mut self, name: String, lhs: f64, rhs: f64) {
        self.trends.push(Trend { name, relation: ">", lhs, rhs, margin: lhs - rhs, passed: lhs > rhs });
    }
}

impl fmt::Display for TrendReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.trends {
            writeln!(f, "{t}")?;
        }
        write!(
            f,
            "{}/{} trends hold",
            self.trends.iter().filter(|t| t.passed).count(),
            self.trends.len()
        )
    }
}

/// Required PER ratio of the keyword model to the keyword-ablated baseline.
pub const KEYWORD_BIAS_RATIO: f64 = 0.6;
/// SNR at which the single-SNR trends are read.
pub const TREND_SNR_DB: f64 = 0.0;
pub const TREND_KW_WORDS: usize = 3;

/// Checks the qualitative trends: `baseline` is the keyword-ablated model,
/// `tc` the keyword model, `no_pivot` optionally the keyword model trained
/// without pivot tokens. Each assertion is emitted only when its cells exist.
pub fn compare_models(
    baseline: Option<&ResultsTable>,
    tc: Option<&ResultsTable>,
    no_pivot: Option<&ResultsTable>,
) -> Result<TrendReport> {
    let (Some(base), Some(tc)) = (baseline, tc) else {
        return Err(Error::Config("comparison needs a baseline table and a keyword-model table".into()));
    };
    let s0 = TREND_SNR_DB;
    let kw = TREND_KW_WORDS;
    let mut r = TrendReport::default();

    if let (Some(t), Some(b)) = (tc.per(Condition::MixCross, kw, s0), base.per(Condition::MixCross, kw, s0)) {
        r.le(
            format!("keyword bias: {} {} at {s0} dB <= {KEYWORD_BIAS_RATIO} x {}", tc.model, Condition::MixCross.label(), base.model),
            t,
            KEYWORD_BIAS_RATIO * b,
        );
    }
    if let Some(np) = no_pivot {
        let mut snrs: Vec<f64> = tc
            .rows
            .iter()
            .filter(|row| row.condition == super::eval::cell_label(Condition::MixCross, kw))
            .map(|row| row.snr_db)
            .collect();
        snrs.sort_by(f64::total_cmp);
        for s in snrs {
            if let (Some(n), Some(p)) = (np.per(Condition::MixCross, kw, s), tc.per(Condition::MixCross, kw, s)) {
                r.ge(format!("pivot ablation: {} >= {} at {s} dB", np.model, tc.model), n, p);
            }
        }
    }
    for (longer, shorter) in [(2, 1), (3, 2)] {
        if let (Some(a), Some(b)) = (
            tc.per(Condition::MixCross, shorter, s0),
            tc.per(Condition::MixCross, longer, s0),
        ) {
            r.ge(format!("keyword length: PER({shorter}-word) >= PER({longer}-word) at {s0} dB"), a, b);
        }
    }
    for (same, cross) in [(Condition::MixSame, Condition::MixCross), (Condition::ConcatSame, Condition::ConcatCross)] {
        if let (Some(a), Some(b)) = (tc.per(same, kw, s0), tc.per(cross, kw, s0)) {
            r.gt(format!("speaker identity: PER({}) > PER({}) at {s0} dB", same.label(), cross.label()), a, b);
        }
    }
    if r.trends.is_empty() {
        return Err(Error::Config("no trend could be evaluated: required cells are missing".into()));
    }
    Ok(r)
}
