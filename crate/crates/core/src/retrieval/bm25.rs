use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{top_k, Corpus, QuerySet, Run, ScoredDoc};
use crate::encoder::TokenizerSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 0.9, b: 0.4 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1 > 0.0 && self.k1.is_finite()) || !(0.0..=1.0).contains(&self.b) {
            return Err(Error::InvalidConfig(format!("bm25 k1={} b={}", self.k1, self.b)));
        }
        Ok(())
    }
}

/// Inverted index over hashed term ids.
///
/// `score(q, d) = Σ_{t ∈ q ∩ d} idf(t) · tf·(k1 + 1) / (tf + k1·(1 − b + b·|d|/avgdl))`
/// with `idf(t) = ln(1 + (N − df + 0.5) / (df + 0.5))`. Query terms count once.
pub struct Bm25Index {
    doc_ids: Vec<String>,
    doc_len: Vec<u32>,
    avgdl: f64,
    postings: HashMap<u32, Vec<(u32, u32)>>,
    params: Bm25Params,
    tokenizer: TokenizerSpec,
}

impl Bm25Index {
    pub fn build(corpus: &Corpus, params: Bm25Params, tokenizer: TokenizerSpec) -> Result<Self> {
        params.validate()?;
        let mut doc_ids = Vec::with_capacity(corpus.len());
        let mut doc_len = Vec::with_capacity(corpus.len());
        let mut postings: HashMap<u32, Vec<(u32, u32)>> = HashMap::new();
        for (idx, (id, doc)) in corpus.iter().enumerate() {
            let terms = tokenizer.terms(&doc.full_text());
            let mut tf: HashMap<u32, u32> = HashMap::new();
            for &t in &terms {
                *tf.entry(t).or_default() += 1;
            }
            for (t, f) in tf {
                postings.entry(t).or_default().push((idx as u32, f));
            }
            doc_ids.push(id.to_owned());
            doc_len.push(terms.len() as u32);
        }
        let total: u64 = doc_len.iter().map(|&l| l as u64).sum();
        let avgdl = total as f64 / doc_ids.len() as f64;
        Ok(Self {
            doc_ids,
            doc_len,
            avgdl,
            postings,
            params,
            tokenizer,
        })
    }

    pub fn idf(&self, df: usize) -> f64 {
        let n = self.doc_ids.len() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Documents sharing at least one term with `query`, best first.
    pub fn search(&self, query: &str, k: usize) -> Vec<ScoredDoc> {
        let terms: BTreeSet<u32> = self.tokenizer.terms(query).into_iter().collect();
        let Bm25Params { k1, b } = self.params;
        let mut scores: HashMap<u32, f64> = HashMap::new();
        for t in terms {
            let Some(list) = self.postings.get(&t) else { continue };
            let idf = self.idf(list.len());
            for &(doc, tf) in list {
                let tf = tf as f64;
                let norm = 1.0 - b + b * self.doc_len[doc as usize] as f64 / self.avgdl;
                *scores.entry(doc).or_default() += idf * tf * (k1 + 1.0) / (tf + k1 * norm);
            }
        }
        let scored = scores
            .into_iter()
            .map(|(doc, score)| ScoredDoc {
                doc_id: self.doc_ids[doc as usize].clone(),
                score,
            })
            .collect();
        top_k(scored, k)
    }

    pub fn retrieve(&self, queries: &QuerySet, k: usize, tag: &str) -> Run {
        let pairs: Vec<(&str, &str)> = queries.iter().collect();
        let rankings: Vec<Vec<ScoredDoc>> = pairs.par_iter().map(|(_, text)| self.search(text, k)).collect();
        let mut run = Run::new(tag);
        for ((id, _), ranking) in pairs.into_iter().zip(rankings) {
            run.insert(id, ranking);
        }
        run
    }
}

pub fn bm25_retrieve(
    corpus: &Corpus,
    queries: &QuerySet,
    params: Bm25Params,
    spec: &TokenizerSpec,
    k: usize,
) -> Result<Run> {
    Ok(Bm25Index::build(corpus, params, *spec)?.retrieve(queries, k, "bm25"))
}
