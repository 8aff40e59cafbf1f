//! nDCG@k, aggregate statistics, and the paired t-test.

mod ndcg;
mod stats;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use ndcg::{mean_ndcg, ndcg_at_k, NdcgEvaluation, PerQueryScores};
pub use stats::{
    aggregate, ln_gamma, paired_differences_t_test, paired_t_test, reg_inc_beta, student_t_two_sided_p,
    AggregateStats, TTestResult,
};

/// JSON evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub metric: String,
    pub k: usize,
    pub per_query: BTreeMap<String, f64>,
    pub mean: f64,
    pub excluded_queries: Vec<String>,
}

impl EvaluationReport {
    pub fn from_evaluation(eval: &NdcgEvaluation) -> crate::Result<Self> {
        Ok(Self {
            metric: eval.scores.metric.clone(),
            k: eval.k,
            per_query: eval.scores.scores.clone(),
            mean: mean_ndcg(&eval.scores)?,
            excluded_queries: eval.excluded.clone(),
        })
    }
}

/// Score as a percentage with two decimals: `0.4059` → `"40.59"`.
pub fn format_percent(score: f64) -> String {
    format!("{:.2}", score * 100.0)
}

/// `"40.59"` or `"40.59*"`.
pub fn format_score(score: f64, significant: bool) -> String {
    let mut s = format_percent(score);
    if significant {
        s.push('*');
    }
    s
}

/// `"36.09(4.56)"`, or `"40.36*(0.72)"` when flagged significant.
pub fn format_mean_std(stats: &AggregateStats, significant: bool) -> String {
    format!("{}({:.2})", format_score(stats.mean, significant), stats.std * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_conventions() {
        assert_eq!(format_percent(0.4059), "40.59");
        assert_eq!(format_score(0.4059, true), "40.59*");
        let s = AggregateStats { mean: 0.3609, std: 0.0456, n: 10 };
        assert_eq!(format_mean_std(&s, false), "36.09(4.56)");
        let s = AggregateStats { mean: 0.4036, std: 0.0072, n: 10 };
        assert_eq!(format_mean_std(&s, true), "40.36*(0.72)");
    }
}
