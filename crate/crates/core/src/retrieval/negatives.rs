use std::collections::BTreeMap;

use serde::Serialize;

use super::{bm25_retrieve, Bm25Params, Corpus, QuerySet, Qrels, Run};
use crate::encoder::TokenizerSpec;
use crate::error::Result;

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MinedNegatives {
    pub negatives: BTreeMap<String, Vec<String>>,
    pub warnings: Vec<String>,
}

/// First `n` documents per query, in ranked order, that are judged 0 or
/// unjudged. Queries without any judgments are kept and listed in `warnings`.
pub fn mine_hard_negatives(run: &Run, qrels: &Qrels, n: usize) -> MinedNegatives {
    let mut out = MinedNegatives::default();
    for (qid, ranking) in run.iter() {
        if !qrels.contains_query(qid) {
            out.warnings.push(format!("query {qid} has no judgments; all retrieved documents treated as non-relevant"));
        }
        let negatives = ranking
            .iter()
            .filter(|d| qrels.grade(qid, &d.doc_id).unwrap_or(0) == 0)
            .take(n)
            .map(|d| d.doc_id.clone())
            .collect();
        out.negatives.insert(qid.to_owned(), negatives);
    }
    out
}

/// BM25 retrieval deep enough that `n` negatives survive the relevance filter.
pub fn mine_bm25_negatives(
    corpus: &Corpus,
    queries: &QuerySet,
    qrels: &Qrels,
    params: Bm25Params,
    spec: &TokenizerSpec,
    n: usize,
) -> Result<MinedNegatives> {
    let max_relevant = qrels
        .query_ids()
        .map(|q| qrels.for_query(q).map_or(0, |j| j.values().filter(|&&g| g > 0).count()))
        .max()
        .unwrap_or(0);
    let run = bm25_retrieve(corpus, queries, params, spec, n + max_relevant)?;
    Ok(mine_hard_negatives(&run, qrels, n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::ScoredDoc;

    fn run(docs: &[&str]) -> Run {
        let mut r = Run::new("t");
        r.insert(
            "q",
            docs.iter()
                .enumerate()
                .map(|(i, d)| ScoredDoc { doc_id: d.to_string(), score: 10.0 - i as f64 })
                .collect(),
        );
        r
    }

    fn qrels(pairs: &[(&str, u32)]) -> Qrels {
        let mut q = Qrels::new();
        for (d, g) in pairs {
            q.insert("q", d, *g);
        }
        q
    }

    #[test]
    fn filters_relevant() {
        let m = mine_hard_negatives(&run(&["dA", "dB", "dC"]), &qrels(&[("dA", 1), ("dB", 0)]), 30);
        assert_eq!(m.negatives["q"], ["dB", "dC"]);
        assert!(m.warnings.is_empty());
    }

    #[test]
    fn all_relevant_and_truncation() {
        let all = qrels(&[("dA", 1), ("dB", 2)]);
        assert!(mine_hard_negatives(&run(&["dA", "dB"]), &all, 30).negatives["q"].is_empty());
        let m = mine_hard_negatives(&run(&["dA", "dB", "dC"]), &qrels(&[("dA", 1)]), 1);
        assert_eq!(m.negatives["q"], ["dB"]);
    }

    #[test]
    fn unjudged_query_warns() {
        let m = mine_hard_negatives(&run(&["dA"]), &Qrels::new(), 5);
        assert_eq!(m.negatives["q"], ["dA"]);
        assert_eq!(m.warnings.len(), 1);
    }
}
