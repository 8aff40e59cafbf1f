use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::{Qrels, Run};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerQueryScores {
    pub metric: String,
    pub scores: BTreeMap<String, f64>,
}

impl PerQueryScores {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn restrict(&self, ids: &BTreeSet<String>) -> PerQueryScores {
        PerQueryScores {
            metric: self.metric.clone(),
            scores: self
                .scores
                .iter()
                .filter(|(q, _)| ids.contains(*q))
                .map(|(q, s)| (q.clone(), *s))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NdcgEvaluation {
    pub k: usize,
    pub scores: PerQueryScores,
    /// Queries without a positive judgment, or ranked but never judged.
    pub excluded: Vec<String>,
}

fn discount(rank: usize) -> f64 {
    ((rank + 1) as f64).log2()
}

fn dcg(gains: impl Iterator<Item = u32>) -> f64 {
    gains
        .enumerate()
        .map(|(i, g)| g as f64 / discount(i + 1))
        .sum()
}

/// nDCG@k with linear gain and a `log2(rank + 1)` discount.
///
/// Every query with at least one judgment of grade ≥ 1 is scored; if the run
/// has no ranking for it, it scores 0.
pub fn ndcg_at_k(run: &Run, qrels: &Qrels, k: usize) -> NdcgEvaluation {
    let mut scores = BTreeMap::new();
    let mut excluded = BTreeSet::new();
    for qid in qrels.query_ids() {
        let judged = qrels.for_query(qid).expect("listed query");
        let mut ideal: Vec<u32> = judged.values().copied().filter(|&g| g > 0).collect();
        if ideal.is_empty() {
            excluded.insert(qid.to_owned());
            continue;
        }
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let idcg = dcg(ideal.into_iter().take(k));
        let actual = run.get(qid).map_or(0.0, |ranking| {
            dcg(ranking
                .iter()
                .take(k)
                .map(|d| judged.get(&d.doc_id).copied().unwrap_or(0)))
        });
        scores.insert(qid.to_owned(), actual / idcg);
    }
    for qid in run.query_ids() {
        if !qrels.contains_query(qid) {
            excluded.insert(qid.to_owned());
        }
    }
    NdcgEvaluation {
        k,
        scores: PerQueryScores {
            metric: format!("ndcg@{k}"),
            scores,
        },
        excluded: excluded.into_iter().collect(),
    }
}

pub fn mean_ndcg(scores: &PerQueryScores) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("per-query scores"));
    }
    Ok(scores.scores.values().sum::<f64>() / scores.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::ScoredDoc;

    fn run(q: &str, docs: &[&str]) -> Run {
        let mut r = Run::new("t");
        r.insert(
            q,
            docs.iter()
                .enumerate()
                .map(|(i, d)| ScoredDoc { doc_id: d.to_string(), score: -(i as f64) })
                .collect(),
        );
        r
    }

    fn qrels(rows: &[(&str, &str, u32)]) -> Qrels {
        let mut q = Qrels::new();
        for (a, b, g) in rows {
            q.insert(a, b, *g);
        }
        q
    }

    #[test]
    fn perfect_and_second_place() {
        let q = qrels(&[("q", "rel", 1)]);
        assert_eq!(ndcg_at_k(&run("q", &["rel", "x"]), &q, 10).scores.scores["q"], 1.0);
        let second = ndcg_at_k(&run("q", &["x", "rel"]), &q, 10).scores.scores["q"];
        assert!((second - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert!((second - 0.63093).abs() < 1e-5);
    }

    #[test]
    fn nothing_retrieved() {
        let q = qrels(&[("q", "rel", 2)]);
        assert_eq!(ndcg_at_k(&run("q", &["x", "y"]), &q, 10).scores.scores["q"], 0.0);
        assert_eq!(ndcg_at_k(&Run::new("empty"), &q, 10).scores.scores["q"], 0.0);
    }

    #[test]
    fn cutoff_applies() {
        let q = qrels(&[("q", "rel", 1)]);
        let docs: Vec<String> = (0..10).map(|i| format!("x{i}")).chain(["rel".into()]).collect();
        let refs: Vec<&str> = docs.iter().map(String::as_str).collect();
        assert_eq!(ndcg_at_k(&run("q", &refs), &q, 10).scores.scores["q"], 0.0);
        assert!(ndcg_at_k(&run("q", &refs), &q, 11).scores.scores["q"] > 0.0);
    }

    #[test]
    fn exclusions_reported() {
        let q = qrels(&[("zero", "d", 0), ("ok", "d", 1)]);
        let mut r = run("ok", &["d"]);
        r.insert("stray", vec![]);
        let e = ndcg_at_k(&r, &q, 10);
        assert_eq!(e.excluded, ["stray", "zero"]);
        assert_eq!(e.scores.scores.keys().collect::<Vec<_>>(), ["ok"]);
        assert_eq!(e.scores.metric, "ndcg@10");
    }

    #[test]
    fn graded_example() {
        // ranking grades [0, 2, 1], ideal [2, 1]
        let q = qrels(&[("q", "a", 2), ("q", "b", 1)]);
        let got = ndcg_at_k(&run("q", &["x", "a", "b"]), &q, 10).scores.scores["q"];
        let dcg = 2.0 / 3f64.log2() + 1.0 / 4f64.log2();
        let idcg = 2.0 + 1.0 / 3f64.log2();
        assert!((got - dcg / idcg).abs() < 1e-12);
    }

    #[test]
    fn means() {
        let s = |v: &[f64]| PerQueryScores {
            metric: "ndcg@10".into(),
            scores: v.iter().enumerate().map(|(i, &x)| (i.to_string(), x)).collect(),
        };
        assert_eq!(mean_ndcg(&s(&[0.5, 0.5])).unwrap(), 0.5);
        assert_eq!(mean_ndcg(&s(&[1.0, 0.0])).unwrap(), 0.5);
        assert!(mean_ndcg(&s(&[])).is_err());
    }
}
