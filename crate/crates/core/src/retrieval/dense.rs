use rayon::prelude::*;

use super::{top_k, Corpus, QuerySet, Run, ScoredDoc};
use crate::encoder::{EncoderConfig, Embedding, ToyEncoder};
use crate::error::Result;
use crate::tensor_store::TensorArchive;

/// Exhaustive inner-product index over unit-norm document embeddings.
pub struct DenseIndex {
    doc_ids: Vec<String>,
    embeddings: Vec<Embedding>,
}

impl DenseIndex {
    pub fn build(encoder: &ToyEncoder<'_>, corpus: &Corpus) -> Result<Self> {
        let (doc_ids, texts): (Vec<String>, Vec<String>) =
            corpus.iter().map(|(id, d)| (id.to_owned(), d.full_text())).unzip();
        let embeddings = encoder.encode_documents(&texts)?;
        Ok(Self { doc_ids, embeddings })
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn search(&self, query: &Embedding, k: usize) -> Vec<ScoredDoc> {
        let scored = self
            .doc_ids
            .iter()
            .zip(&self.embeddings)
            .map(|(id, e)| ScoredDoc {
                doc_id: id.clone(),
                score: query.dot(e),
            })
            .collect();
        top_k(scored, k)
    }

    pub fn retrieve(&self, encoder: &ToyEncoder<'_>, queries: &QuerySet, k: usize, tag: &str) -> Result<Run> {
        let (ids, texts): (Vec<&str>, Vec<&str>) = queries.iter().unzip();
        let embedded = encoder.encode_queries(&texts)?;
        let rankings: Vec<Vec<ScoredDoc>> = embedded.par_iter().map(|q| self.search(q, k)).collect();
        let mut run = Run::new(tag);
        for (id, ranking) in ids.into_iter().zip(rankings) {
            run.insert(id, ranking);
        }
        Ok(run)
    }
}

/// Cosine top-`k` for every query, scoring the whole corpus.
pub fn dense_retrieve(
    archive: &TensorArchive,
    config: &EncoderConfig,
    corpus: &Corpus,
    queries: &QuerySet,
    k: usize,
) -> Result<Run> {
    let encoder = ToyEncoder::new(archive, config)?;
    DenseIndex::build(&encoder, corpus)?.retrieve(&encoder, queries, k, "dense")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_encoder;
    use crate::retrieval::Document;
    use std::collections::BTreeMap;

    fn corpus(docs: &[(&str, &str)]) -> Corpus {
        Corpus::new(
            docs.iter()
                .map(|(id, text)| {
                    (
                        id.to_string(),
                        Document {
                            title: String::new(),
                            text: text.to_string(),
                        },
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    fn queries(qs: &[(&str, &str)]) -> QuerySet {
        QuerySet::new(qs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect::<BTreeMap<_, _>>())
    }

    #[test]
    fn verbatim_document_ranks_first() {
        let cfg = EncoderConfig::default();
        let archive = init_encoder(&cfg).unwrap();
        let c = corpus(&[
            ("d0", "zeta omega kappa"),
            ("d1", "statin therapy lowers cholesterol"),
            ("d2", "river boat lantern"),
            ("d3", "violin piano cello"),
        ]);
        // title is empty, so the document text is " " + text; same tokens
        let run = dense_retrieve(&archive, &cfg, &c, &queries(&[("q", "statin therapy lowers cholesterol")]), 10).unwrap();
        let top = &run.get("q").unwrap()[0];
        assert_eq!(top.doc_id, "d1");
        assert!((top.score - 1.0).abs() < 1e-5, "{}", top.score);
    }

    #[test]
    fn k_larger_than_corpus_and_ties() {
        let cfg = EncoderConfig::default();
        let archive = init_encoder(&cfg).unwrap();
        let c = corpus(&[("b", "same words"), ("a", "same words"), ("c", "other thing")]);
        let run = dense_retrieve(&archive, &cfg, &c, &queries(&[("q", "something")]), 50).unwrap();
        let ranking = run.get("q").unwrap();
        assert_eq!(ranking.len(), 3);
        let pos = |id: &str| ranking.iter().position(|d| d.doc_id == id).unwrap();
        assert_eq!(pos("b"), pos("a") + 1);
        assert_eq!(ranking[pos("a")].score, ranking[pos("b")].score);
    }
}
