use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tcasr::corpus::{clean_example, generate_corpus, Corpus, SyntheticCorpusConfig};
use tcasr::harness::{
    average_checkpoints, compare_models, evaluate, example_input, list_checkpoints, load_run, read_csv, train,
    write_csv, Condition, EvalGrid, ExperimentConfig, OracleRecognizer, Regime, ResultRow, ResultsTable,
};
use tcasr::Error;

fn tiny(regime: Regime, epochs: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        corpus: SyntheticCorpusConfig { n_speakers: 2, n_utterances: 14, ..Default::default() },
        regime,
        epochs,
        warmup_epochs: 1,
        checkpoint_average_n: 1,
        batch_size: 4,
        test_per_speaker: 2,
        ..Default::default()
    };
    let mut m = cfg.model_config();
    m.d_model = 8;
    m.speech_blocks = 1;
    m.keyword_blocks = 1;
    m.sa_heads = 2;
    cfg.model = Some(m);
    cfg
}

fn row(condition: &str, snr_db: f64, per: f64) -> ResultRow {
    ResultRow {
        condition: condition.into(),
        snr_db,
        n_utts: 10,
        substitutions: 0,
        deletions: 0,
        insertions: 0,
        ref_len: 100,
        per,
    }
}

#[test]
fn one_epoch_on_ten_examples_writes_one_checkpoint() {
    let cfg = tiny(Regime::TcFull, 1);
    let corpus = generate_corpus(&cfg.corpus).unwrap();
    assert_eq!(corpus.split(cfg.test_per_speaker).unwrap().0.len(), 10);
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cfg, &corpus, Some(dir.path()), |_| {}).unwrap();
    assert_eq!(list_checkpoints(dir.path()).unwrap().len(), 1);
    assert_eq!(out.checkpoint_paths.len(), 1);
    assert_eq!(out.log[0].examples + out.log[0].skipped, 10);
    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[test]
fn training_lowers_the_loss() {
    let mut cfg = tiny(Regime::TcFull, 30);
    cfg.corpus.n_utterances = 24;
    cfg.optimizer.lr = 3e-3;
    let corpus = generate_corpus(&cfg.corpus).unwrap();
    let out = train(&cfg, &corpus, None, |_| {}).unwrap();
    let first = out.log[0].mean_loss;
    let last = out.log.last().unwrap().mean_loss;
    assert!(last < first, "loss went from {first} to {last}");
}

#[test]
fn dummy_keyword_carries_no_content() {
    let cfg = tiny(Regime::DaStrong, 1);
    let corpus = generate_corpus(&cfg.corpus).unwrap();
    let model = tcasr::model::TcAsrModel::new(cfg.model_config(), 3).unwrap();
    let policy = cfg.keyword_policy();
    let a = clean_example(&corpus, 0, &policy, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = clean_example(&corpus, 0, &policy, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
    let c = clean_example(&corpus, 5, &policy, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(a.keyword, b.keyword);
    assert_eq!(a.keyword, c.keyword);
    let x = example_input(&a).unwrap();
    let mut reversed = b.keyword.clone();
    reversed.reverse();
    assert_eq!(model.log_probs(&x, &a.keyword).unwrap(), model.log_probs(&x, &reversed).unwrap());
}

#[test]
fn averaged_run_matches_manual_mean() {
    let cfg = tiny(Regime::TcFull, 3);
    let corpus = generate_corpus(&cfg.corpus).unwrap();
    let dir = tempfile::tempdir().unwrap();
    train(&cfg, &corpus, Some(dir.path()), |_| {}).unwrap();
    let paths = list_checkpoints(dir.path()).unwrap();
    let stores: Vec<_> = paths[1..].iter().map(|p| tcasr::checkpoint::load(p).unwrap()).collect();
    let avg = average_checkpoints(dir.path(), 2).unwrap();
    assert_eq!(avg.len(), stores[0].len());
    for p in avg.iter() {
        let a = stores[0].by_name(&p.name).unwrap().value.data();
        let b = stores[1].by_name(&p.name).unwrap().value.data();
        for (i, v) in p.value.data().iter().enumerate() {
            assert!((v - 0.5 * (a[i] + b[i])).abs() < 1e-12, "{}[{i}]", p.name);
        }
    }
    assert!(matches!(average_checkpoints(dir.path(), 4), Err(Error::Checkpoint(_))));
    let (loaded_cfg, _) = load_run(dir.path(), 2).unwrap();
    assert_eq!(loaded_cfg, cfg);
}

fn small_corpus() -> Corpus {
    generate_corpus(&SyntheticCorpusConfig { n_speakers: 4, n_utterances: 40, ..Default::default() }).unwrap()
}

#[test]
fn grid_is_a_cartesian_product_and_deterministic() {
    let corpus = small_corpus();
    let (train_ids, test_ids) = corpus.split(3).unwrap();
    assert!(train_ids.iter().all(|t| !test_ids.contains(t)));
    assert_eq!(train_ids.len() + test_ids.len(), corpus.utterances.len());

    let model = tcasr::model::TcAsrModel::new(tiny(Regime::TcFull, 1).model_config(), 5).unwrap();
    let grid = EvalGrid { items_per_target: 1, ..EvalGrid::default() };
    let a = evaluate(&model, &corpus, &test_ids, &grid, "m").unwrap();
    assert_eq!(a.rows.len(), 12);
    let b = evaluate(&model, &corpus, &test_ids, &grid, "m").unwrap();
    assert_eq!(a, b);

    let oracle = evaluate(&OracleRecognizer { corpus: &corpus }, &corpus, &test_ids, &grid, "oracle").unwrap();
    assert!(oracle.rows.iter().all(|r| r.per == 0.0 && r.ref_len > 0));

    let empty = EvalGrid { snrs_db: vec![], ..grid.clone() };
    assert!(matches!(evaluate(&model, &corpus, &test_ids, &empty, "m"), Err(Error::Config(_))));
}

#[test]
fn training_and_evaluation_are_reproducible() {
    let cfg = tiny(Regime::TcFull, 2);
    let corpus = generate_corpus(&cfg.corpus).unwrap();
    let (_, test_ids) = corpus.split(cfg.test_per_speaker).unwrap();
    let grid = EvalGrid { conditions: vec![Condition::MixCross], ..EvalGrid::default() };
    let run = || {
        let m = train(&cfg, &corpus, None, |_| {}).unwrap().averaged_model().unwrap();
        evaluate(&m, &corpus, &test_ids, &grid, "m").unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn csv_round_trip_and_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tc_full.csv");
    let t = ResultsTable { model: "tc_full".into(), rows: vec![row("A+B@kw3", -3.0, 41.5), row("A+B@kw3", 0.0, 117.0)] };
    write_csv(&t, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "condition,snr_db,n_utts,substitutions,deletions,insertions,ref_len,per"
    );
    assert_eq!(read_csv(&path).unwrap(), t);
}

#[test]
fn identical_tables_fail_difference_trends() {
    let rows = vec![
        row("A+B@kw1", 0.0, 50.0),
        row("A+B@kw2", 0.0, 50.0),
        row("A+B@kw3", 0.0, 50.0),
        row("A+A'@kw3", 0.0, 50.0),
        row("A|B@kw3", 0.0, 50.0),
        row("A|A'@kw3", 0.0, 50.0),
    ];
    let t = ResultsTable { model: "m".into(), rows };
    let report = compare_models(Some(&t), Some(&t), Some(&t)).unwrap();
    for tr in &report.trends {
        let difference = tr.name.starts_with("keyword bias") || tr.name.starts_with("speaker identity");
        assert_eq!(tr.passed, !difference, "{tr}");
        let line = tr.to_string();
        assert!(line.contains("lhs=50.00") && line.contains("margin"), "{line}");
    }
    assert_eq!(report.trends.len(), 1 + 1 + 2 + 2);
    assert!(!report.all_passed());
}

#[test]
fn keyword_bias_reads_the_zero_db_cross_speaker_cell() {
    let base = ResultsTable { model: "clean".into(), rows: vec![row("A+B@kw3", 0.0, 92.30)] };
    let tc = ResultsTable { model: "tc_full".into(), rows: vec![row("A+B@kw3", 0.0, 23.18)] };
    let report = compare_models(Some(&base), Some(&tc), None).unwrap();
    assert_eq!(report.trends.len(), 1);
    assert!(report.all_passed());
    assert!((report.trends[0].rhs - 0.6 * 92.30).abs() < 1e-12);
}

#[test]
fn missing_tables_are_config_errors() {
    let t = ResultsTable { model: "m".into(), rows: vec![row("A+B@kw3", 0.0, 10.0)] };
    assert!(matches!(compare_models(None, Some(&t), None), Err(Error::Config(_))));
    assert!(matches!(compare_models(Some(&t), None, None), Err(Error::Config(_))));
    let unrelated = ResultsTable { model: "u".into(), rows: vec![row("A|B@kw2", 3.0, 10.0)] };
    assert!(matches!(compare_models(Some(&unrelated), Some(&unrelated), None), Err(Error::Config(_))));
}
