//! Seeded synthetic retrieval collections for exercising the full pipeline.
//!
//! Each query is a handful of topic words; its relevant documents mix those
//! words into random filler, and every other document is filler only.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ExperimentManifest, GridSearchConfig};
use crate::encoder::{init_encoder, make_domain_variant, EncoderConfig};
use crate::error::{Error, Result};
use crate::retrieval::{save_corpus, save_qrels, save_queries, Corpus, Document, QuerySet, Qrels};
use crate::tensor_store::save_archive;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_docs: usize,
    pub n_dev_queries: usize,
    pub n_test_queries: usize,
    pub vocab_words: usize,
    pub doc_len: usize,
    pub query_len: usize,
    pub max_relevant: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_docs: 500,
            n_dev_queries: 50,
            n_test_queries: 50,
            vocab_words: 3000,
            doc_len: 24,
            query_len: 4,
            max_relevant: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub corpus: Corpus,
    pub dev_queries: QuerySet,
    pub dev_qrels: Qrels,
    pub test_queries: QuerySet,
    pub test_qrels: Qrels,
}

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ne", "ru", "sa", "ti", "vo", "ze", "bu", "da", "fe", "gi", "ho", "ju", "pe",
];

fn make_vocab(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut words = Vec::with_capacity(n);
    while words.len() < n {
        let len = rng.random_range(2..=4);
        let w: String = (0..len).map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())]).collect();
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    let n_queries = spec.n_dev_queries + spec.n_test_queries;
    if spec.max_relevant == 0 || spec.query_len == 0 || spec.doc_len < spec.query_len {
        return Err(Error::InvalidConfig("synthetic spec needs positive query_len/max_relevant and doc_len ≥ query_len".into()));
    }
    if n_queries * spec.max_relevant > spec.n_docs {
        return Err(Error::InvalidConfig(format!(
            "{n_queries} queries × {} relevant docs exceed {} documents",
            spec.max_relevant, spec.n_docs
        )));
    }
    if spec.vocab_words < spec.query_len * 4 || spec.vocab_words > 40_000 {
        return Err(Error::InvalidConfig(format!("vocab_words {} out of range", spec.vocab_words)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let vocab = make_vocab(&mut rng, spec.vocab_words);
    let filler = |rng: &mut ChaCha8Rng, n: usize| -> Vec<&str> {
        (0..n).map(|_| vocab[rng.random_range(0..vocab.len())].as_str()).collect()
    };

    let mut slots: Vec<usize> = (0..spec.n_docs).collect();
    slots.shuffle(&mut rng);
    let mut slots = slots.into_iter();
    let mut docs: Vec<Option<Document>> = vec![None; spec.n_docs];
    let mut queries = BTreeMap::new();
    let mut judgments: Vec<(String, usize, u32)> = Vec::new();

    for q in 0..n_queries {
        let qid = format!("q{q:04}");
        let topic: Vec<&str> = rand::seq::index::sample(&mut rng, vocab.len(), spec.query_len)
            .into_iter()
            .map(|i| vocab[i].as_str())
            .collect();
        queries.insert(qid.clone(), topic.join(" "));
        let n_rel = rng.random_range(1..=spec.max_relevant);
        for r in 0..n_rel {
            let slot = slots.next().expect("slot budget checked above");
            let mut words = filler(&mut rng, spec.doc_len - spec.query_len);
            // more relevant docs carry more of the topic
            let keep = if r == 0 { spec.query_len } else { rng.random_range(1..=spec.query_len) };
            words.extend(topic.iter().take(keep));
            words.shuffle(&mut rng);
            docs[slot] = Some(Document {
                title: filler(&mut rng, 2).join(" "),
                text: words.join(" "),
            });
            judgments.push((qid.clone(), slot, if r == 0 { 2 } else { 1 }));
        }
    }
    for doc in docs.iter_mut().filter(|d| d.is_none()) {
        *doc = Some(Document {
            title: filler(&mut rng, 2).join(" "),
            text: filler(&mut rng, spec.doc_len).join(" "),
        });
    }

    let doc_id = |slot: usize| format!("d{slot:05}");
    let corpus = Corpus::new(
        docs.into_iter()
            .enumerate()
            .map(|(i, d)| (doc_id(i), d.expect("every slot filled")))
            .collect(),
    )?;
    let mut dev_qrels = Qrels::new();
    let mut test_qrels = Qrels::new();
    let dev_ids: BTreeSet<String> = (0..spec.n_dev_queries).map(|q| format!("q{q:04}")).collect();
    for (qid, slot, grade) in judgments {
        let target = if dev_ids.contains(&qid) { &mut dev_qrels } else { &mut test_qrels };
        target.insert(&qid, &doc_id(slot), grade);
    }
    let all = QuerySet::new(queries);
    let test_ids: BTreeSet<String> = all.ids().filter(|q| !dev_ids.contains(*q)).map(str::to_owned).collect();
    Ok(SyntheticDataset {
        corpus,
        dev_queries: all.restrict(&dev_ids),
        dev_qrels,
        test_queries: all.restrict(&test_ids),
        test_qrels,
    })
}

/// Writes a complete experiment (two toy archives, encoder config, data
/// files, and `manifest.json`) into `dir` and returns the loaded manifest.
///
/// The retrieval archive is `init_encoder(config)`; the domain archive is
/// its variant under `domain_seed` and `strength`.
pub fn write_experiment(
    dir: &Path,
    data: &SyntheticSpec,
    config: &EncoderConfig,
    domain_seed: u64,
    strength: f64,
    grid: GridSearchConfig,
) -> Result<ExperimentManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let dataset = generate(data)?;
    let retrieval = init_encoder(config)?;
    let domain = make_domain_variant(&retrieval, config, domain_seed, strength)?;
    save_archive(&retrieval, dir.join("retrieval.mrg"))?;
    save_archive(&domain, dir.join("domain.mrg"))?;
    config.save(dir.join("encoder.json"))?;
    save_corpus(&dataset.corpus, dir.join("corpus.jsonl"))?;
    save_queries(&dataset.dev_queries, dir.join("dev_queries.jsonl"))?;
    save_qrels(&dataset.dev_qrels, dir.join("dev_qrels.txt"))?;
    save_queries(&dataset.test_queries, dir.join("test_queries.jsonl"))?;
    save_qrels(&dataset.test_qrels, dir.join("test_qrels.txt"))?;
    let manifest = ExperimentManifest {
        retrieval_archive: "retrieval.mrg".into(),
        domain_archive: "domain.mrg".into(),
        encoder_config: "encoder.json".into(),
        corpus: "corpus.jsonl".into(),
        dev_queries: "dev_queries.jsonl".into(),
        dev_qrels: "dev_qrels.txt".into(),
        test_queries: "test_queries.jsonl".into(),
        test_qrels: "test_qrels.txt".into(),
        grid,
        output_dir: "out".into(),
        seed: data.seed,
    };
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    ExperimentManifest::load(&path)
}
