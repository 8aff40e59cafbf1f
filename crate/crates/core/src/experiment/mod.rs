//! Coefficient grid search and the surrounding experimental protocol.
//!
//! For every `(α_lower, α_upper)` pair on the grid the two source archives
//! are merged, the dev queries are run against the full corpus, and the pair
//! with the highest mean nDCG@k wins. Ties go to the larger `α_upper`, then
//! the larger `α_lower`. The limited-data study repeats the selection on
//! small random dev samples and reports the spread of the test scores.

mod render;
pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, ToyEncoder};
use crate::error::{Error, Result};
use crate::evaluation::{
    aggregate, mean_ndcg, ndcg_at_k, paired_t_test, AggregateStats, NdcgEvaluation, PerQueryScores, TTestResult,
};
use crate::merge::{count_layers, merge_archives, LayerPartition, MergeSpec};
use crate::retrieval::{load_corpus, load_qrels, load_queries, Corpus, DenseIndex, QuerySet, Qrels, Run};
use crate::tensor_store::{load_archive, save_archive, TensorArchive};

pub use render::{render_grid_table, render_limited_table, render_table2, render_table3, Table2Row, Table3Row};

pub const SELECTED_ARCHIVE: &str = "selected.mrg";
pub const GRID_REPORT: &str = "grid_search_report.json";
pub const GRID_TABLE: &str = "grid_search_table.txt";
pub const LIMITED_REPORT: &str = "limited_data_report.json";
pub const LIMITED_TABLE: &str = "limited_data_table.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSearchConfig {
    pub alpha_values: Vec<f64>,
    /// `[α_lower, α_upper]` pairs left out of the search.
    pub excluded: Vec<[f64; 2]>,
    pub k: usize,
}

impl Default for GridSearchConfig {
    fn default() -> Self {
        Self {
            alpha_values: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            excluded: vec![[0.0, 0.0], [1.0, 1.0]],
            k: 10,
        }
    }
}

impl GridSearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.k == 0 {
            return bad("metric cutoff k must be positive".into());
        }
        if let Some(a) = self.alpha_values.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return bad(format!("grid alpha {a} outside [0, 1]"));
        }
        let distinct: BTreeSet<u64> = self.alpha_values.iter().map(|a| a.to_bits()).collect();
        if distinct.len() != self.alpha_values.len() {
            return bad("grid alphas must be distinct".into());
        }
        for [l, u] in &self.excluded {
            if !self.alpha_values.contains(l) || !self.alpha_values.contains(u) {
                return bad(format!("excluded pair ({l}, {u}) is not on the grid"));
            }
        }
        if enumerate_grid(self).is_empty() {
            return bad("every grid configuration is excluded".into());
        }
        Ok(())
    }
}

/// Row-major product of the grid (α_lower outer, both ascending) without the
/// excluded pairs.
pub fn enumerate_grid(config: &GridSearchConfig) -> Vec<(f64, f64)> {
    let mut alphas = config.alpha_values.clone();
    alphas.sort_by(f64::total_cmp);
    let mut out = Vec::with_capacity(alphas.len() * alphas.len());
    for &l in &alphas {
        for &u in &alphas {
            if !config.excluded.contains(&[l, u]) {
                out.push((l, u));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub retrieval_archive: PathBuf,
    pub domain_archive: PathBuf,
    pub encoder_config: PathBuf,
    pub corpus: PathBuf,
    pub dev_queries: PathBuf,
    pub dev_qrels: PathBuf,
    pub test_queries: PathBuf,
    pub test_qrels: PathBuf,
    #[serde(default)]
    pub grid: GridSearchConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl ExperimentManifest {
    /// Reads a manifest; relative paths are taken relative to its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Self = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut m.retrieval_archive,
            &mut m.domain_archive,
            &mut m.encoder_config,
            &mut m.corpus,
            &mut m.dev_queries,
            &mut m.dev_qrels,
            &mut m.test_queries,
            &mut m.test_qrels,
            &mut m.output_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        m.grid.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Everything a search reads, loaded once and shared read-only.
pub struct ExperimentInputs {
    pub retrieval: TensorArchive,
    pub domain: TensorArchive,
    pub config: EncoderConfig,
    pub partition: LayerPartition,
    pub corpus: Corpus,
    pub dev_queries: QuerySet,
    pub dev_qrels: Qrels,
    pub test_queries: QuerySet,
    pub test_qrels: Qrels,
    pub grid: GridSearchConfig,
}

impl ExperimentInputs {
    pub fn load(manifest: &ExperimentManifest) -> Result<Self> {
        for p in [
            &manifest.retrieval_archive,
            &manifest.domain_archive,
            &manifest.encoder_config,
            &manifest.corpus,
            &manifest.dev_queries,
            &manifest.dev_qrels,
            &manifest.test_queries,
            &manifest.test_qrels,
        ] {
            if !p.exists() {
                return Err(Error::io(p, std::io::Error::from(std::io::ErrorKind::NotFound)));
            }
        }
        let config = EncoderConfig::load(&manifest.encoder_config)?;
        let retrieval = load_archive(&manifest.retrieval_archive)?;
        let domain = load_archive(&manifest.domain_archive)?;
        Self::new(
            retrieval,
            domain,
            config,
            load_corpus(&manifest.corpus)?,
            load_queries(&manifest.dev_queries)?,
            load_qrels(&manifest.dev_qrels)?,
            load_queries(&manifest.test_queries)?,
            load_qrels(&manifest.test_qrels)?,
            manifest.grid.clone(),
        )
    }

    /// The layer boundary is the midpoint of the retrieval archive's layers.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        retrieval: TensorArchive,
        domain: TensorArchive,
        config: EncoderConfig,
        corpus: Corpus,
        dev_queries: QuerySet,
        dev_qrels: Qrels,
        test_queries: QuerySet,
        test_qrels: Qrels,
        grid: GridSearchConfig,
    ) -> Result<Self> {
        grid.validate()?;
        config.validate()?;
        let partition = LayerPartition::halves(count_layers(&retrieval)?)?;
        Ok(Self {
            retrieval,
            domain,
            config,
            partition,
            corpus,
            dev_queries,
            dev_qrels,
            test_queries,
            test_qrels,
            grid,
        })
    }

    pub fn merge_spec(&self, alpha_lower: f64, alpha_upper: f64) -> Result<MergeSpec> {
        MergeSpec::new(alpha_lower, alpha_upper, self.partition)
    }

    pub fn merged(&self, alpha_lower: f64, alpha_upper: f64) -> Result<TensorArchive> {
        merge_archives(&self.retrieval, &self.domain, &self.merge_spec(alpha_lower, alpha_upper)?)
    }

    /// Dense retrieval of `queries` with `archive`, scored by nDCG@k.
    pub fn evaluate_archive(&self, archive: &TensorArchive, queries: &QuerySet, qrels: &Qrels) -> Result<(Run, NdcgEvaluation)> {
        let encoder = ToyEncoder::new(archive, &self.config)?;
        let index = DenseIndex::build(&encoder, &self.corpus)?;
        let run = index.retrieve(&encoder, queries, self.grid.k, "dense")?;
        let eval = ndcg_at_k(&run, qrels, self.grid.k);
        Ok((run, eval))
    }

    /// Per-query dev scores for every grid configuration, in grid order.
    fn score_grid(&self, queries: &QuerySet, qrels: &Qrels) -> Result<Vec<((f64, f64), PerQueryScores)>> {
        enumerate_grid(&self.grid)
            .into_iter()
            .map(|(l, u)| {
                let merged = self.merged(l, u)?;
                let (_, eval) = self.evaluate_archive(&merged, queries, qrels)?;
                info!("config ({l:.2}, {u:.2}): {} dev queries scored", eval.scores.len());
                Ok(((l, u), eval.scores))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfigScore {
    pub alpha_lower: f64,
    pub alpha_upper: f64,
    pub dev_ndcg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaPair {
    pub alpha_lower: f64,
    pub alpha_upper: f64,
}

/// Index of the best dev score; ties go to larger α_upper, then α_lower.
pub fn select_config(per_config: &[ConfigScore]) -> Option<usize> {
    per_config
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| {
            a.dev_ndcg
                .total_cmp(&b.dev_ndcg)
                .then(a.alpha_upper.total_cmp(&b.alpha_upper))
                .then(a.alpha_lower.total_cmp(&b.alpha_lower))
        })
        .map(|(i, _)| i)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestComparison {
    pub source_ndcg: f64,
    pub merged_ndcg: f64,
    pub significance: TTestResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchReport {
    pub per_config: Vec<ConfigScore>,
    pub selected: AlphaPair,
    pub dev_ndcg_selected: f64,
    pub test_ndcg_selected: Option<f64>,
    pub dev_queries_scored: usize,
    pub excluded_dev_queries: Vec<String>,
    /// Selected merged model against the unmerged retrieval model on test.
    pub test_comparison: Option<TestComparison>,
}

impl GridSearchReport {
    pub fn table2_row(&self, dataset: &str) -> Option<Table2Row> {
        let cmp = self.test_comparison.as_ref()?;
        Some(Table2Row {
            dataset: dataset.to_owned(),
            source: cmp.source_ndcg,
            merged: cmp.merged_ndcg,
            significant: cmp.significance.significant_at_5pct,
            alpha_lower: self.selected.alpha_lower,
            alpha_upper: self.selected.alpha_upper,
        })
    }
}

fn mean_over(scores: &PerQueryScores, ids: Option<&BTreeSet<String>>) -> Result<f64> {
    match ids {
        Some(ids) => mean_ndcg(&scores.restrict(ids)),
        None => mean_ndcg(scores),
    }
}

/// Picks the best configuration from cached per-query dev scores, averaging
/// over `sample` when given.
fn select_from_scores(
    scored: &[((f64, f64), PerQueryScores)],
    sample: Option<&BTreeSet<String>>,
) -> Result<(Vec<ConfigScore>, usize, usize)> {
    let effective = match sample {
        Some(ids) => scored[0].1.scores.keys().filter(|q| ids.contains(*q)).count(),
        None => scored[0].1.len(),
    };
    if effective == 0 {
        return Err(Error::Empty("effective dev set (no sampled query has a relevant document)"));
    }
    let per_config = scored
        .iter()
        .map(|((l, u), s)| {
            Ok(ConfigScore {
                alpha_lower: *l,
                alpha_upper: *u,
                dev_ndcg: mean_over(s, sample)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = select_config(&per_config).expect("grid is non-empty");
    Ok((per_config, best, effective))
}

/// Runs the grid on the dev set, evaluates the winner on the test set, and
/// writes the selected checkpoint, report, table, and test runs to `out_dir`.
pub fn grid_search(inputs: &ExperimentInputs, out_dir: &Path) -> Result<GridSearchReport> {
    let scored = inputs.score_grid(&inputs.dev_queries, &inputs.dev_qrels)?;
    let (per_config, best, effective) = select_from_scores(&scored, None)?;
    let selected = per_config[best];
    let mut excluded: BTreeSet<String> = inputs
        .dev_queries
        .ids()
        .filter(|q| !scored[0].1.scores.contains_key(*q))
        .map(str::to_owned)
        .collect();
    excluded.extend(inputs.dev_qrels.query_ids().filter(|q| !scored[0].1.scores.contains_key(*q)).map(str::to_owned));

    let merged = inputs.merged(selected.alpha_lower, selected.alpha_upper)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    save_archive(&merged, out_dir.join(SELECTED_ARCHIVE))?;

    let (merged_run, merged_eval) = inputs.evaluate_archive(&merged, &inputs.test_queries, &inputs.test_qrels)?;
    let (source_run, source_eval) = inputs.evaluate_archive(&inputs.retrieval, &inputs.test_queries, &inputs.test_qrels)?;
    let merged_test = mean_ndcg(&merged_eval.scores)?;
    let test_comparison = if merged_eval.scores.len() >= 2 {
        Some(TestComparison {
            source_ndcg: mean_ndcg(&source_eval.scores)?,
            merged_ndcg: merged_test,
            significance: paired_t_test(&merged_eval.scores, &source_eval.scores)?,
        })
    } else {
        None
    };
    merged_run.save(out_dir.join("test_merged.run"))?;
    source_run.save(out_dir.join("test_source.run"))?;

    let report = GridSearchReport {
        per_config,
        selected: AlphaPair {
            alpha_lower: selected.alpha_lower,
            alpha_upper: selected.alpha_upper,
        },
        dev_ndcg_selected: selected.dev_ndcg,
        test_ndcg_selected: Some(merged_test),
        dev_queries_scored: effective,
        excluded_dev_queries: excluded.into_iter().collect(),
        test_comparison,
    };
    write_json(&out_dir.join(GRID_REPORT), &report)?;
    let table = render_grid_table(&report);
    fs::write(out_dir.join(GRID_TABLE), &table).map_err(|e| Error::io(out_dir.join(GRID_TABLE), e))?;
    Ok(report)
}

pub fn run_grid_search(manifest: &ExperimentManifest) -> Result<GridSearchReport> {
    let inputs = ExperimentInputs::load(manifest)?;
    grid_search(&inputs, &manifest.output_dir)
}

/// Seeded uniform sample of `n` query ids without replacement (all of them
/// when `n` exceeds the set), with qrels cut down to the sample.
pub fn sample_dev_queries(full: &QuerySet, qrels: &Qrels, n: usize, seed: u64) -> (QuerySet, Qrels) {
    let ids = sample_ids(full, n, seed);
    (full.restrict(&ids), qrels.restrict(&ids))
}

fn sample_ids(full: &QuerySet, n: usize, seed: u64) -> BTreeSet<String> {
    let all: Vec<&str> = full.ids().collect();
    if n >= all.len() {
        return all.into_iter().map(str::to_owned).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::index::sample(&mut rng, all.len(), n)
        .into_iter()
        .map(|i| all[i].to_owned())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitedDataRun {
    pub run: usize,
    pub sample_seed: u64,
    pub dev_queries_scored: usize,
    pub selected: AlphaPair,
    pub dev_ndcg: f64,
    pub test_ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitedDataReport {
    pub n_queries: usize,
    pub global_seed: u64,
    pub runs: Vec<LimitedDataRun>,
    pub stats: AggregateStats,
    /// Unmerged retrieval model on the same test set.
    pub source_test_ndcg: f64,
}

/// Repeats selection on `n_runs` dev samples of `n_queries` queries.
///
/// Run `r` (1-based) samples with seed `global_seed + r`. Every sample is
/// scored against the full corpus, so each configuration's per-query dev and
/// test scores are computed once and reused across runs.
pub fn limited_data(
    inputs: &ExperimentInputs,
    n_queries: usize,
    n_runs: usize,
    global_seed: u64,
) -> Result<LimitedDataReport> {
    if n_queries == 0 || n_runs == 0 {
        return Err(Error::InvalidConfig("n_queries and n_runs must be positive".into()));
    }
    let scored = inputs.score_grid(&inputs.dev_queries, &inputs.dev_qrels)?;
    let mut test_cache: BTreeMap<usize, f64> = BTreeMap::new();
    let mut runs = Vec::with_capacity(n_runs);
    for r in 1..=n_runs {
        let sample_seed = global_seed.wrapping_add(r as u64);
        let ids = sample_ids(&inputs.dev_queries, n_queries, sample_seed);
        let (per_config, best, effective) = select_from_scores(&scored, Some(&ids))?;
        let chosen = per_config[best];
        let test_ndcg = match test_cache.get(&best) {
            Some(&v) => v,
            None => {
                let merged = inputs.merged(chosen.alpha_lower, chosen.alpha_upper)?;
                let (_, eval) = inputs.evaluate_archive(&merged, &inputs.test_queries, &inputs.test_qrels)?;
                let v = mean_ndcg(&eval.scores)?;
                test_cache.insert(best, v);
                v
            }
        };
        info!("run {r}: selected ({:.2}, {:.2}), test {test_ndcg:.4}", chosen.alpha_lower, chosen.alpha_upper);
        runs.push(LimitedDataRun {
            run: r,
            sample_seed,
            dev_queries_scored: effective,
            selected: AlphaPair {
                alpha_lower: chosen.alpha_lower,
                alpha_upper: chosen.alpha_upper,
            },
            dev_ndcg: chosen.dev_ndcg,
            test_ndcg,
        });
    }
    let test_scores: Vec<f64> = runs.iter().map(|r| r.test_ndcg).collect();
    let (_, source_eval) = inputs.evaluate_archive(&inputs.retrieval, &inputs.test_queries, &inputs.test_qrels)?;
    Ok(LimitedDataReport {
        n_queries,
        global_seed,
        stats: aggregate(&test_scores)?,
        runs,
        source_test_ndcg: mean_ndcg(&source_eval.scores)?,
    })
}

/// Loads the manifest inputs, runs [`limited_data`], and writes the report
/// and table to the manifest's output directory.
pub fn run_limited_data(manifest: &ExperimentManifest, n_queries: usize, n_runs: usize) -> Result<LimitedDataReport> {
    let inputs = ExperimentInputs::load(manifest)?;
    let report = limited_data(&inputs, n_queries, n_runs, manifest.seed)?;
    let out_dir = &manifest.output_dir;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_json(&out_dir.join(LIMITED_REPORT), &report)?;
    let table = render_limited_table(&report);
    fs::write(out_dir.join(LIMITED_TABLE), table).map_err(|e| Error::io(out_dir.join(LIMITED_TABLE), e))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceReport {
    pub metric: String,
    pub k: usize,
    pub n: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    #[serde(flatten)]
    pub ttest: TTestResult,
    /// `"*"` when p < 0.05, else empty.
    pub star: String,
}

/// Per-query nDCG@k of both runs and a paired t-test of `a − b`.
pub fn compare_systems(run_a: &Run, run_b: &Run, qrels: &Qrels, k: usize) -> Result<SignificanceReport> {
    let a = ndcg_at_k(run_a, qrels, k).scores;
    let b = ndcg_at_k(run_b, qrels, k).scores;
    let ttest = paired_t_test(&a, &b)?;
    Ok(SignificanceReport {
        metric: a.metric.clone(),
        k,
        n: a.len(),
        mean_a: mean_ndcg(&a)?,
        mean_b: mean_ndcg(&b)?,
        star: if ttest.significant_at_5pct { "*".into() } else { String::new() },
        ttest,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}
