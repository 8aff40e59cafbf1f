//! Corpus, query, qrels, and run handling plus the two first-stage retrievers.

mod bm25;
mod dense;
mod negatives;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bm25::{bm25_retrieve, Bm25Index, Bm25Params};
pub use dense::{dense_retrieve, DenseIndex};
pub use negatives::{mine_bm25_negatives, mine_hard_negatives, MinedNegatives};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub title: String,
    pub text: String,
}

impl Document {
    /// The indexed text for both retrievers: `title + " " + text`.
    pub fn full_text(&self) -> String {
        format!("{} {}", self.title, self.text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    docs: BTreeMap<String, Document>,
}

impl Corpus {
    pub fn new(docs: BTreeMap<String, Document>) -> Result<Self> {
        if docs.is_empty() {
            return Err(Error::Empty("corpus"));
        }
        Ok(Self { docs })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.docs.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Document)> {
        self.docs.iter().map(|(k, v)| (k.as_str(), v))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QuerySet {
    queries: BTreeMap<String, String>,
}

impl QuerySet {
    pub fn new(queries: BTreeMap<String, String>) -> Self {
        Self { queries }
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&str> {
        self.queries.get(id).map(String::as_str)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.queries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.queries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn restrict(&self, ids: &BTreeSet<String>) -> QuerySet {
        QuerySet {
            queries: self
                .queries
                .iter()
                .filter(|(k, _)| ids.contains(*k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

/// Graded relevance judgments, `query_id → doc_id → grade`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the previous grade if the pair was already judged.
    pub fn insert(&mut self, query_id: &str, doc_id: &str, grade: u32) -> Option<u32> {
        self.judgments
            .entry(query_id.to_owned())
            .or_default()
            .insert(doc_id.to_owned(), grade)
    }

    pub fn grade(&self, query_id: &str, doc_id: &str) -> Option<u32> {
        self.judgments.get(query_id)?.get(doc_id).copied()
    }

    pub fn for_query(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(query_id)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    pub fn contains_query(&self, query_id: &str) -> bool {
        self.judgments.contains_key(query_id)
    }

    pub fn num_queries(&self) -> usize {
        self.judgments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.judgments.is_empty()
    }

    pub fn restrict(&self, ids: &BTreeSet<String>) -> Qrels {
        Qrels {
            judgments: self
                .judgments
                .iter()
                .filter(|(k, _)| ids.contains(*k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn to_trec_string(&self) -> String {
        let mut out = String::new();
        for (q, docs) in &self.judgments {
            for (d, g) in docs {
                writeln!(out, "{q} 0 {d} {g}").unwrap();
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDoc {
    pub doc_id: String,
    pub score: f64,
}

/// Score descending, then doc id ascending.
pub fn ranking_order(a: &ScoredDoc, b: &ScoredDoc) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.doc_id.cmp(&b.doc_id))
}

/// Sorts by [`ranking_order`] and keeps the first `k`.
pub fn top_k(mut scored: Vec<ScoredDoc>, k: usize) -> Vec<ScoredDoc> {
    scored.sort_by(ranking_order);
    scored.truncate(k);
    scored
}

#[derive(Debug, Clone, PartialEq)]
pub struct Run {
    rankings: BTreeMap<String, Vec<ScoredDoc>>,
    tag: String,
}

impl Run {
    pub fn new(tag: impl Into<String>) -> Self {
        Self {
            rankings: BTreeMap::new(),
            tag: tag.into(),
        }
    }

    /// Stores a query's ranking, re-sorting it into [`ranking_order`].
    pub fn insert(&mut self, query_id: impl Into<String>, mut ranking: Vec<ScoredDoc>) {
        ranking.sort_by(ranking_order);
        self.rankings.insert(query_id.into(), ranking);
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn get(&self, query_id: &str) -> Option<&[ScoredDoc]> {
        self.rankings.get(query_id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[ScoredDoc])> {
        self.rankings.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.rankings.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.rankings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rankings.is_empty()
    }

    /// `qid Q0 docid rank score tag`, rank from 1, score with 6 decimals.
    pub fn to_trec_string(&self) -> String {
        let mut out = String::new();
        for (q, docs) in &self.rankings {
            for (i, d) in docs.iter().enumerate() {
                writeln!(out, "{q} Q0 {} {} {:.6} {}", d.doc_id, i + 1, d.score, self.tag).unwrap();
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_trec_string()).map_err(|e| Error::io(path, e))
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_owned(),
        line,
        message: message.into(),
    }
}

fn non_blank_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

#[derive(Deserialize)]
struct CorpusLine {
    #[serde(rename = "_id")]
    id: String,
    #[serde(default)]
    title: Option<String>,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct QueryLine {
    #[serde(rename = "_id")]
    id: String,
    text: String,
}

pub fn parse_corpus(text: &str, path: &Path) -> Result<Corpus> {
    let mut docs = BTreeMap::new();
    for (n, line) in non_blank_lines(text) {
        let rec: CorpusLine = serde_json::from_str(line).map_err(|e| parse_error(path, n, e.to_string()))?;
        let doc = Document {
            title: rec.title.unwrap_or_default(),
            text: rec.text,
        };
        if docs.insert(rec.id.clone(), doc).is_some() {
            return Err(Error::DuplicateId {
                path: path.to_owned(),
                line: n,
                id: rec.id,
            });
        }
    }
    Corpus::new(docs)
}

pub fn parse_queries(text: &str, path: &Path) -> Result<QuerySet> {
    let mut queries = BTreeMap::new();
    for (n, line) in non_blank_lines(text) {
        let rec: QueryLine = serde_json::from_str(line).map_err(|e| parse_error(path, n, e.to_string()))?;
        if queries.insert(rec.id.clone(), rec.text).is_some() {
            return Err(Error::DuplicateId {
                path: path.to_owned(),
                line: n,
                id: rec.id,
            });
        }
    }
    Ok(QuerySet::new(queries))
}

/// TREC qrels: `qid iter docid grade`, `iter` ignored.
pub fn parse_qrels(text: &str, path: &Path) -> Result<Qrels> {
    let mut qrels = Qrels::new();
    for (n, line) in non_blank_lines(text) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [qid, _iter, docid, grade] = fields[..] else {
            return Err(parse_error(path, n, format!("expected 4 fields, found {}", fields.len())));
        };
        let grade: u32 = grade
            .parse()
            .map_err(|_| parse_error(path, n, format!("grade {grade:?} is not a non-negative integer")))?;
        if qrels.insert(qid, docid, grade).is_some() {
            return Err(Error::DuplicateId {
                path: path.to_owned(),
                line: n,
                id: format!("{qid} {docid}"),
            });
        }
    }
    Ok(qrels)
}

/// TREC run: `qid Q0 docid rank score tag`. Rankings are re-sorted by score
/// (ties by doc id); the rank column is only checked to be an integer.
pub fn parse_run(text: &str, path: &Path) -> Result<Run> {
    let mut per_query: BTreeMap<String, Vec<ScoredDoc>> = BTreeMap::new();
    let mut seen: BTreeSet<(String, String)> = BTreeSet::new();
    let mut tag = None;
    for (n, line) in non_blank_lines(text) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [qid, _q0, docid, rank, score, run_tag] = fields[..] else {
            return Err(parse_error(path, n, format!("expected 6 fields, found {}", fields.len())));
        };
        rank.parse::<u64>()
            .map_err(|_| parse_error(path, n, format!("rank {rank:?} is not an integer")))?;
        let score: f64 = score
            .parse()
            .ok()
            .filter(|s: &f64| s.is_finite())
            .ok_or_else(|| parse_error(path, n, format!("score {score:?} is not a finite number")))?;
        if !seen.insert((qid.to_owned(), docid.to_owned())) {
            return Err(Error::DuplicateId {
                path: path.to_owned(),
                line: n,
                id: format!("{qid} {docid}"),
            });
        }
        tag.get_or_insert_with(|| run_tag.to_owned());
        per_query.entry(qid.to_owned()).or_default().push(ScoredDoc {
            doc_id: docid.to_owned(),
            score,
        });
    }
    let mut run = Run::new(tag.unwrap_or_default());
    for (q, docs) in per_query {
        run.insert(q, docs);
    }
    Ok(run)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    parse_corpus(&read(path)?, path)
}

pub fn load_queries(path: impl AsRef<Path>) -> Result<QuerySet> {
    let path = path.as_ref();
    parse_queries(&read(path)?, path)
}

pub fn load_qrels(path: impl AsRef<Path>) -> Result<Qrels> {
    let path = path.as_ref();
    parse_qrels(&read(path)?, path)
}

pub fn load_run(path: impl AsRef<Path>) -> Result<Run> {
    let path = path.as_ref();
    parse_run(&read(path)?, path)
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for (id, doc) in corpus.iter() {
        let line = serde_json::json!({"_id": id, "title": doc.title, "text": doc.text});
        out.push_str(&line.to_string());
        out.push('\n');
    }
    let path = path.as_ref();
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn save_queries(queries: &QuerySet, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for (id, text) in queries.iter() {
        out.push_str(&serde_json::to_string(&QueryLine {
            id: id.to_owned(),
            text: text.to_owned(),
        })?);
        out.push('\n');
    }
    let path = path.as_ref();
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn save_qrels(qrels: &Qrels, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, qrels.to_trec_string()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn qrels_line() {
        let q = parse_qrels("q1 0 d7 2\n", p()).unwrap();
        assert_eq!(q.grade("q1", "d7"), Some(2));
        assert_eq!(q.grade("q1", "d8"), None);
    }

    #[test]
    fn empty_qrels_is_valid() {
        assert!(parse_qrels("", p()).unwrap().is_empty());
    }

    #[test]
    fn qrels_errors_carry_line_numbers() {
        match parse_qrels("q1 0 d1 1\n\nq1 0 d2\n", p()) {
            Err(Error::Parse { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_qrels("q1 0 d1 -1\n", p()), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(
            parse_qrels("q1 0 d1 1\nq1 0 d1 2\n", p()),
            Err(Error::DuplicateId { line: 2, .. })
        ));
    }

    #[test]
    fn corpus_parsing() {
        let text = r#"{"_id": "d1", "title": "T", "text": "body"}
{"_id": "d2", "text": "no title"}
{"_id": "d3", "title": null, "text": "null title"}
"#;
        let c = parse_corpus(text, p()).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.get("d1").unwrap().full_text(), "T body");
        assert_eq!(c.get("d2").unwrap().title, "");
    }

    #[test]
    fn corpus_errors() {
        let dup = "{\"_id\": \"d1\", \"text\": \"a\"}\n{\"_id\": \"d1\", \"text\": \"b\"}\n";
        assert!(matches!(parse_corpus(dup, p()), Err(Error::DuplicateId { line: 2, .. })));
        assert!(matches!(parse_corpus("{\"_id\": 1}\n", p()), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_corpus("", p()), Err(Error::Empty(_))));
    }

    #[test]
    fn queries_parsing() {
        let q = parse_queries("{\"_id\": \"q1\", \"text\": \"statins\"}\n", p()).unwrap();
        assert_eq!(q.get("q1"), Some("statins"));
        let dup = "{\"_id\": \"q\", \"text\": \"a\"}\n{\"_id\": \"q\", \"text\": \"b\"}\n";
        assert!(matches!(parse_queries(dup, p()), Err(Error::DuplicateId { .. })));
    }

    #[test]
    fn run_format_and_parse() {
        let mut run = Run::new("tag1");
        run.insert(
            "q1",
            vec![
                ScoredDoc { doc_id: "b".into(), score: 0.5 },
                ScoredDoc { doc_id: "a".into(), score: 0.5 },
                ScoredDoc { doc_id: "c".into(), score: 0.9 },
            ],
        );
        let text = run.to_trec_string();
        assert_eq!(
            text,
            "q1 Q0 c 1 0.900000 tag1\nq1 Q0 a 2 0.500000 tag1\nq1 Q0 b 3 0.500000 tag1\n"
        );
        assert_eq!(parse_run(&text, p()).unwrap(), run);
        assert!(matches!(parse_run("q1 Q0 a 1 x t\n", p()), Err(Error::Parse { .. })));
        assert!(matches!(
            parse_run("q1 Q0 a 1 1 t\nq1 Q0 a 2 1 t\n", p()),
            Err(Error::DuplicateId { .. })
        ));
    }

    #[test]
    fn save_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = parse_corpus("{\"_id\": \"d\", \"title\": \"x\", \"text\": \"y \\\"z\\\"\"}\n", p()).unwrap();
        save_corpus(&corpus, dir.path().join("c.jsonl")).unwrap();
        assert_eq!(load_corpus(dir.path().join("c.jsonl")).unwrap(), corpus);
        let mut qrels = Qrels::new();
        qrels.insert("q", "d", 3);
        save_qrels(&qrels, dir.path().join("q.txt")).unwrap();
        assert_eq!(load_qrels(dir.path().join("q.txt")).unwrap(), qrels);
    }
}
