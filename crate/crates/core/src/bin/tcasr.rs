use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tcasr::corpus::{
    build_example, derive_seed, generate_corpus, load_corpus, mix_weighted_example, pick_partner,
    write_corpus, write_examples, Corpus, KeywordPolicy, MixMode, MixSpec, Pairing,
    SyntheticCorpusConfig, TargetPosition, WeightPolicy,
};
use tcasr::harness::{
    compare_models, evaluate, example_input, load_run, read_csv, train, write_csv, Condition, EvalGrid,
    ExperimentConfig, OracleRecognizer, Recognizer, Regime,
};
use tcasr::model::{write_cross_attention, AttentionKind, ForwardOptions};
use tcasr::{Error, Result};

#[derive(Parser)]
#[command(name = "tcasr", version, about = "Keyword-conditioned multi-talker phone recognition")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrepMode {
    /// Uniform-weight training mixture.
    Mix,
    /// SNR-controlled mixture with tiled interference.
    Snr,
    Concat,
}

#[derive(Clone, Copy, ValueEnum)]
enum PairArg {
    Cross,
    Same,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus (manifest + feature files).
    GenCorpus {
        /// Corpus config JSON; defaults are used for missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "corpus")]
        out: PathBuf,
    },
    /// Build an example set from a generated corpus.
    Prepare {
        #[arg(long, default_value = "corpus")]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "snr")]
        mode: PrepMode,
        #[arg(long, value_enum, default_value = "cross")]
        pairing: PairArg,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        snr_db: f64,
        #[arg(long, default_value_t = 3)]
        kw_words: usize,
        #[arg(long)]
        no_pivot: bool,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = 4)]
        test_per_speaker: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "examples")]
        out: PathBuf,
    },
    /// Train a model; writes config, per-epoch checkpoints and a loss log.
    Train {
        #[arg(long)]
        regime: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Experiment config JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Train on a corpus written by gen-corpus instead of regenerating it.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        no_pivot: bool,
    },
    /// Evaluate an averaged model over a grid.
    Eval {
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 10)]
        avg_last: usize,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Score the ground-truth oracle path instead of the model.
        #[arg(long)]
        oracle: bool,
        /// Write the cross-attention maps of the first test item (ATTN1).
        #[arg(long)]
        attn_out: Option<PathBuf>,
    },
    /// Check trend assertions between result tables.
    Compare {
        /// Keyword-ablated baseline table.
        #[arg(long)]
        a: PathBuf,
        /// Keyword model table.
        #[arg(long)]
        b: PathBuf,
        /// Keyword model trained without pivot tokens.
        #[arg(long)]
        no_pivot: Option<PathBuf>,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

fn corpus_for(cfg: &SyntheticCorpusConfig, dir: Option<&Path>) -> Result<Corpus> {
    match dir {
        Some(d) => load_corpus(d),
        None => generate_corpus(cfg),
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::GenCorpus { config, out } => {
            let cfg: SyntheticCorpusConfig = match config {
                Some(p) => read_json(&p)?,
                None => SyntheticCorpusConfig::default(),
            };
            let corpus = generate_corpus(&cfg)?;
            let m = write_corpus(&corpus, &out)?;
            println!(
                "wrote {} utterances from {} speakers to {} (vocab {}, feature mean {:.3}, std {:.3})",
                m.utterances.len(),
                cfg.n_speakers,
                out.display(),
                m.vocab_size,
                m.feature_mean,
                m.feature_std
            );
        }
        Cmd::Prepare { corpus, mode, pairing, snr_db, kw_words, no_pivot, split, test_per_speaker, seed, out } => {
            let corpus = load_corpus(&corpus)?;
            let (train_ids, test_ids) = corpus.split(test_per_speaker)?;
            let pool = match split {
                SplitArg::Train => train_ids,
                SplitArg::Test => test_ids,
            };
            let pairing = match pairing {
                PairArg::Cross => Pairing::CrossSpeaker,
                PairArg::Same => Pairing::SameSpeaker,
            };
            let policy = KeywordPolicy::sampled(kw_words, kw_words, !no_pivot);
            let mut examples = Vec::with_capacity(pool.len());
            let mut skipped = 0;
            for (i, &target) in pool.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, i as u64));
                let other = pick_partner(&corpus, &pool, target, pairing, &mut rng)?;
                let ex = match mode {
                    PrepMode::Mix => mix_weighted_example(&corpus, target, other, &policy, &mut rng),
                    PrepMode::Snr | PrepMode::Concat => {
                        let spec = MixSpec {
                            mode: if matches!(mode, PrepMode::Snr) { MixMode::Mix } else { MixMode::Concat },
                            pairing,
                            weight_policy: WeightPolicy::SnrDb(snr_db),
                            target_position: TargetPosition::First,
                        };
                        build_example(&corpus, target, other, &spec, &policy, &mut rng)
                    }
                };
                match ex {
                    Ok(ex) => examples.push(ex),
                    Err(Error::InfeasibleAlignment { .. } | Error::DegenerateInput(_)) => skipped += 1,
                    Err(e) => return Err(e),
                }
            }
            let path = write_examples(&examples, &out)?;
            println!("wrote {} examples to {} ({skipped} skipped)", examples.len(), path.display());
        }
        Cmd::Train { regime, seed, out, config, corpus, epochs, no_pivot } => {
            let mut cfg: ExperimentConfig = match config {
                Some(p) => read_json(&p)?,
                None => ExperimentConfig::default(),
            };
            if let Some(r) = regime {
                cfg.regime = Regime::parse(&r)?;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
                cfg.checkpoint_average_n = cfg.checkpoint_average_n.min(e);
            }
            if no_pivot {
                cfg.pivots = false;
            }
            let corpus = corpus_for(&cfg.corpus, corpus.as_deref())?;
            cfg.corpus = corpus.config.clone();
            println!("training {} for {} epochs into {}", cfg.regime.name(), cfg.epochs, out.display());
            let outcome = train(&cfg, &corpus, Some(&out), |e| {
                println!(
                    "epoch {:>3}  lr {:.2e}  loss {:>8.3}  examples {}  skipped {}  grad {:.2}",
                    e.epoch, e.lr, e.mean_loss, e.examples, e.skipped, e.grad_norm
                )
            })?;
            println!("{} checkpoints written", outcome.checkpoint_paths.len());
        }
        Cmd::Eval { grid, ckpt, avg_last, csv, corpus, oracle, attn_out } => {
            let mut grid: EvalGrid = match grid {
                Some(p) => read_json(&p)?,
                None => EvalGrid::default(),
            };
            let (cfg, model) = load_run(&ckpt, avg_last)?;
            grid.dummy_keyword = !cfg.regime.uses_keyword();
            grid.pivots = cfg.pivots && cfg.regime.uses_keyword();
            let corpus = corpus_for(&cfg.corpus, corpus.as_deref())?;
            let (_, test_ids) = corpus.split(cfg.test_per_speaker)?;
            let name = csv.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string();
            let oracle_rec = OracleRecognizer { corpus: &corpus };
            let rec: &dyn Recognizer = if oracle { &oracle_rec } else { &model };
            let table = evaluate(rec, &corpus, &test_ids, &grid, &name)?;
            write_csv(&table, &csv)?;
            print!("{}", table.render());
            if let Some(path) = attn_out {
                let target = test_ids[0];
                let policy = if grid.dummy_keyword {
                    KeywordPolicy::dummy()
                } else {
                    KeywordPolicy::sampled(3, 3, grid.pivots)
                };
                let mut rng = ChaCha8Rng::seed_from_u64(grid.seed);
                let spec = Condition::MixCross.spec(0.0);
                let other = pick_partner(&corpus, &test_ids, target, spec.pairing, &mut rng)?;
                let ex = build_example(&corpus, target, other, &spec, &policy, &mut rng)?;
                let mut g = tcasr::autodiff::Graph::new();
                let fo = model.forward(
                    &mut g,
                    &example_input(&ex)?,
                    &ex.keyword,
                    ForwardOptions { record_attention: true, dropout_rng: None },
                )?;
                let maps: Vec<_> = fo.attention.into_iter().filter(|m| m.kind == AttentionKind::Cross).collect();
                write_cross_attention(&maps, &path)?;
                println!("cross-attention maps written to {}", path.display());
            }
        }
        Cmd::Compare { a, b, no_pivot } => {
            let base = read_csv(&a)?;
            let tc = read_csv(&b)?;
            let np = no_pivot.map(read_csv).transpose()?;
            let report = compare_models(Some(&base), Some(&tc), np.as_ref())?;
            println!("{report}");
            return Ok(report.all_passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
