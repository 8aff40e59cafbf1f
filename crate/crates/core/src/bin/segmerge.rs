use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::warn;

use segmerge::encoder::{init_encoder, make_domain_variant, EncoderConfig, TokenizerMode, TokenizerSpec};
use segmerge::evaluation::{ndcg_at_k, EvaluationReport};
use segmerge::experiment::synthetic::{write_experiment, SyntheticSpec};
use segmerge::experiment::{
    compare_systems, render_grid_table, render_limited_table, run_grid_search, run_limited_data, ExperimentManifest,
    GridSearchConfig, GRID_REPORT, LIMITED_REPORT,
};
use segmerge::merge::{count_layers, merge_archives, LayerPartition, MergeSpec, NonlayerPolicy};
use segmerge::retrieval::{
    bm25_retrieve, dense_retrieve, load_corpus, load_qrels, load_queries, load_run, mine_bm25_negatives, Bm25Params,
};
use segmerge::tensor_store::{load_archive, save_archive};

#[derive(Parser)]
#[command(name = "segmerge", version, about = "Layer-segmented weight interpolation for dense retrievers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    Lower,
    Upper,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Dense,
    Bm25,
}

#[derive(Subcommand)]
enum Command {
    /// Merge two archives with separate lower/upper coefficients.
    Merge {
        #[arg(long)]
        retrieval: PathBuf,
        #[arg(long)]
        domain: PathBuf,
        #[arg(long)]
        alpha_lower: f64,
        #[arg(long)]
        alpha_upper: f64,
        /// First layer index of the upper segment.
        #[arg(long)]
        boundary: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "upper")]
        nonlayer_policy: Policy,
        /// Copy tensors absent from the domain archive from the retrieval archive.
        #[arg(long)]
        allow_missing: bool,
    },
    /// Search the coefficient grid on the dev set and evaluate the winner on test.
    GridSearch {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// nDCG@k of a TREC run against qrels, as JSON.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// BM25 hard negatives per query, as JSON lines.
    MineNegatives {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long, default_value_t = 30)]
        n: usize,
        #[arg(long, value_enum, default_value = "word")]
        tokenizer: Tokenizer,
        #[arg(long, default_value_t = 4096)]
        vocab_size: usize,
        #[arg(long, default_value_t = 0.9)]
        k1: f64,
        #[arg(long, default_value_t = 0.4)]
        b: f64,
    },
    /// Repeat selection on small dev samples and report mean(std) on test.
    LimitedData {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 50)]
        n_queries: usize,
        #[arg(long, default_value_t = 10)]
        n_runs: usize,
        /// Overrides the manifest seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Paired t-test on per-query nDCG@k of two runs.
    Ttest {
        #[arg(long)]
        run_a: PathBuf,
        #[arg(long)]
        run_b: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Retrieve with a toy encoder archive or BM25 and write a TREC run.
    Retrieve {
        #[arg(long, value_enum, default_value = "dense")]
        mode: Mode,
        #[arg(long, required_if_eq("mode", "dense"))]
        archive: Option<PathBuf>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Initialize a toy encoder archive from a JSON config.
    Init {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Derive a perturbed "domain" archive from a base archive.
    Variant {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        domain_seed: u64,
        #[arg(long, default_value_t = 0.1)]
        strength: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic experiment (archives, data, manifest) to a directory.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        n_docs: usize,
        #[arg(long, default_value_t = 50)]
        n_dev_queries: usize,
        #[arg(long, default_value_t = 50)]
        n_test_queries: usize,
        #[arg(long, default_value_t = 1)]
        domain_seed: u64,
        #[arg(long, default_value_t = 0.1)]
        strength: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Tokenizer {
    Word,
    CharBigram,
}

fn run(cli: Cli) -> segmerge::Result<()> {
    match cli.command {
        Command::Merge {
            retrieval,
            domain,
            alpha_lower,
            alpha_upper,
            boundary,
            out,
            nonlayer_policy,
            allow_missing,
        } => {
            let r = load_archive(&retrieval)?;
            let d = load_archive(&domain)?;
            let partition = LayerPartition::new(count_layers(&r)?, boundary)?;
            let mut spec = MergeSpec::new(alpha_lower, alpha_upper, partition)?;
            spec.nonlayer_policy = match nonlayer_policy {
                Policy::Lower => NonlayerPolicy::Lower,
                Policy::Upper => NonlayerPolicy::Upper,
            };
            spec.allow_missing_in_domain = allow_missing;
            save_archive(&merge_archives(&r, &d, &spec)?, &out)?;
            println!("wrote {}", out.display());
        }
        Command::GridSearch { manifest, out_dir } => {
            let mut m = ExperimentManifest::load(&manifest)?;
            if let Some(dir) = out_dir {
                m.output_dir = dir;
            }
            let report = run_grid_search(&m)?;
            print!("{}", render_grid_table(&report));
            println!("report: {}", m.output_dir.join(GRID_REPORT).display());
        }
        Command::Evaluate { run, qrels, k } => {
            let eval = ndcg_at_k(&load_run(&run)?, &load_qrels(&qrels)?, k);
            if !eval.excluded.is_empty() {
                warn!("{} queries excluded (no relevant judgments)", eval.excluded.len());
            }
            println!("{}", serde_json::to_string_pretty(&EvaluationReport::from_evaluation(&eval)?)?);
        }
        Command::MineNegatives {
            corpus,
            queries,
            qrels,
            n,
            tokenizer,
            vocab_size,
            k1,
            b,
        } => {
            let spec = TokenizerSpec {
                mode: match tokenizer {
                    Tokenizer::Word => TokenizerMode::Word,
                    Tokenizer::CharBigram => TokenizerMode::CharBigram,
                },
                vocab_size,
                max_seq: usize::MAX,
            };
            let mined = mine_bm25_negatives(
                &load_corpus(&corpus)?,
                &load_queries(&queries)?,
                &load_qrels(&qrels)?,
                Bm25Params { k1, b },
                &spec,
                n,
            )?;
            for w in &mined.warnings {
                warn!("{w}");
            }
            for (qid, docs) in &mined.negatives {
                println!("{}", serde_json::json!({"query_id": qid, "negatives": docs}));
            }
        }
        Command::LimitedData {
            manifest,
            n_queries,
            n_runs,
            seed,
        } => {
            let mut m = ExperimentManifest::load(&manifest)?;
            if let Some(seed) = seed {
                m.seed = seed;
            }
            let report = run_limited_data(&m, n_queries, n_runs)?;
            print!("{}", render_limited_table(&report));
            println!("report: {}", m.output_dir.join(LIMITED_REPORT).display());
        }
        Command::Ttest { run_a, run_b, qrels, k } => {
            let report = compare_systems(&load_run(&run_a)?, &load_run(&run_b)?, &load_qrels(&qrels)?, k)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Retrieve {
            mode,
            archive,
            config,
            corpus,
            queries,
            k,
            out,
        } => {
            let config = EncoderConfig::load(&config)?;
            let corpus = load_corpus(&corpus)?;
            let queries = load_queries(&queries)?;
            let run = match mode {
                Mode::Dense => {
                    let archive = load_archive(archive.expect("required by clap"))?;
                    dense_retrieve(&archive, &config, &corpus, &queries, k)?
                }
                Mode::Bm25 => {
                    let spec = TokenizerSpec {
                        max_seq: usize::MAX,
                        ..config.tokenizer_spec()
                    };
                    bm25_retrieve(&corpus, &queries, Bm25Params::default(), &spec, k)?
                }
            };
            run.save(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Init { config, out } => {
            save_archive(&init_encoder(&EncoderConfig::load(&config)?)?, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Variant {
            base,
            config,
            domain_seed,
            strength,
            out,
        } => {
            let config = EncoderConfig::load(&config)?;
            let variant = make_domain_variant(&load_archive(&base)?, &config, domain_seed, strength)?;
            save_archive(&variant, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Synth {
            out_dir,
            seed,
            n_docs,
            n_dev_queries,
            n_test_queries,
            domain_seed,
            strength,
        } => {
            let data = SyntheticSpec {
                n_docs,
                n_dev_queries,
                n_test_queries,
                seed,
                ..SyntheticSpec::default()
            };
            let config = EncoderConfig {
                seed,
                ..EncoderConfig::default()
            };
            write_experiment(&out_dir, &data, &config, domain_seed, strength, GridSearchConfig::default())?;
            println!("wrote {}", out_dir.join("manifest.json").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
