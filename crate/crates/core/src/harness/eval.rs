//! Evaluation grid: builds every test condition, decodes greedily and scores
//! phone error rate.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::example_input;
use crate::corpus::{
    build_example, derive_seed, pick_partner, Corpus, KeywordPolicy, MixMode, MixSpec, Pairing,
    TargetPosition, TrainingExample, WeightPolicy,
};
use crate::ctc::{greedy_decode, BLANK};
use crate::error::{Error, Result};
use crate::frontend::{output_frames, SUBSAMPLE};
use crate::metrics::{score, EditCounts};
use crate::model::TcAsrModel;
use crate::tensor::Tensor;

const STREAM_PARTNER: u64 = 100;
const STREAM_KEYWORD: u64 = 200;
/// Stand-in for log(0) in one-hot oracle outputs.
const LOG_ZERO: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    /// Cross-speaker overlap.
    #[serde(rename = "A+B")]
    MixCross,
    /// Same-speaker overlap.
    #[serde(rename = "A+A'")]
    MixSame,
    /// Cross-speaker concatenation, target first.
    #[serde(rename = "A|B")]
    ConcatCross,
    /// Same-speaker concatenation, target first.
    #[serde(rename = "A|A'")]
    ConcatSame,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::MixCross,
        Condition::MixSame,
        Condition::ConcatCross,
        Condition::ConcatSame,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Condition::MixCross => "A+B",
            Condition::MixSame => "A+A'",
            Condition::ConcatCross => "A|B",
            Condition::ConcatSame => "A|A'",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown condition {s:?}")))
    }

    pub fn spec(self, snr_db: f64) -> MixSpec {
        let (mode, pairing) = match self {
            Condition::MixCross => (MixMode::Mix, Pairing::CrossSpeaker),
            Condition::MixSame => (MixMode::Mix, Pairing::SameSpeaker),
            Condition::ConcatCross => (MixMode::Concat, Pairing::CrossSpeaker),
            Condition::ConcatSame => (MixMode::Concat, Pairing::SameSpeaker),
        };
        MixSpec {
            mode,
            pairing,
            weight_policy: WeightPolicy::SnrDb(snr_db),
            target_position: TargetPosition::First,
        }
    }

    fn index(self) -> u64 {
        Condition::ALL.iter().position(|&c| c == self).expect("listed") as u64
    }
}

/// Cell label used in result tables: condition plus keyword length.
pub fn cell_label(cond: Condition, kw_words: usize) -> String {
    format!("{}@kw{kw_words}", cond.label())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalGrid {
    pub snrs_db: Vec<f64>,
    pub conditions: Vec<Condition>,
    pub keyword_words: Vec<usize>,
    /// Wrap keywords in pivot tokens; must match how the model was trained.
    pub pivots: bool,
    /// Feed the constant dummy keyword instead (keyword-ablated models).
    pub dummy_keyword: bool,
    /// Test items built per held-out target utterance and cell.
    pub items_per_target: usize,
    pub strip_pivots: bool,
    pub seed: u64,
}

impl Default for EvalGrid {
    fn default() -> Self {
        Self {
            snrs_db: vec![-3.0, 0.0, 3.0],
            conditions: Condition::ALL.to_vec(),
            keyword_words: vec![3],
            pivots: true,
            dummy_keyword: false,
            items_per_target: 2,
            strip_pivots: true,
            seed: 11,
        }
    }
}

impl EvalGrid {
    pub fn validate(&self) -> Result<()> {
        if self.snrs_db.is_empty() || self.conditions.is_empty() || self.keyword_words.is_empty() {
            return Err(Error::Config("evaluation grid is empty".into()));
        }
        if self.items_per_target == 0 {
            return Err(Error::Config("items_per_target must be positive".into()));
        }
        if self.keyword_words.contains(&0) {
            return Err(Error::Config("keyword length 0 in grid".into()));
        }
        if let Some(s) = self.snrs_db.iter().find(|s| !s.is_finite()) {
            return Err(Error::Config(format!("snr {s} is not finite")));
        }
        Ok(())
    }

    fn policy(&self, kw: usize) -> KeywordPolicy {
        if self.dummy_keyword {
            KeywordPolicy::dummy()
        } else {
            KeywordPolicy::sampled(kw, kw, self.pivots)
        }
    }
}

/// Anything that turns an example into per-frame log probabilities over the
/// encoder's output frames.
pub trait Recognizer {
    fn log_probs(&self, ex: &TrainingExample) -> Result<Tensor>;
}

impl Recognizer for TcAsrModel {
    fn log_probs(&self, ex: &TrainingExample) -> Result<Tensor> {
        TcAsrModel::log_probs(self, &example_input(ex)?, &ex.keyword)
    }
}

/// Emits a one-hot path built from the ground-truth alignment.
pub struct OracleRecognizer<'a> {
    pub corpus: &'a Corpus,
}

impl Recognizer for OracleRecognizer<'_> {
    fn log_probs(&self, ex: &TrainingExample) -> Result<Tensor> {
        oracle_log_probs(self.corpus, ex)
    }
}

/// One-hot log probabilities of a CTC path for the example's target. Each
/// label of the target (pivots included, plus a blank between repeated
/// phones) starts at the first subsampled frame of its aligned span, shifted
/// later when an earlier label needs the frame and earlier when the labels
/// left would not fit before the end of the target stream. Frames outside
/// the target stream are blank.
pub fn oracle_log_probs(corpus: &Corpus, ex: &TrainingExample) -> Result<Tensor> {
    let u = corpus.utterance(ex.meta.target_utt);
    let vocab = corpus.vocab;
    let t_out = output_frames(ex.features.num_frames(), SUBSAMPLE);
    let offset = ex.meta.target_offset;
    let frame_of = |raw: usize| raw.div_ceil(SUBSAMPLE);
    let (lo, hi) = (frame_of(offset), frame_of(offset + u.num_frames()).min(t_out));

    let span = if ex.meta.pivots {
        Some(ex.meta.keyword_span.ok_or_else(|| Error::Input("pivots without keyword span".into()))?)
    } else {
        None
    };
    // (label, natural start frame)
    let mut labels: Vec<(usize, usize)> = Vec::new();
    for (i, (&p, &(start, end))) in u.phones.iter().zip(&u.alignment).enumerate() {
        let at = frame_of(offset + start);
        if span.is_some_and(|(s, _)| s == i) {
            labels.push((vocab.iph(), at));
        }
        if labels.last().is_some_and(|&(l, _)| l == p) {
            labels.push((BLANK, at));
        }
        labels.push((p, at));
        if span.is_some_and(|(_, e)| e == i + 1) {
            labels.push((vocab.ipt(), frame_of(offset + end).saturating_sub(1)));
        }
    }
    if labels.len() > hi.saturating_sub(lo) {
        return Err(Error::DegenerateInput(format!(
            "{} target labels do not fit in {} frames",
            labels.len(),
            hi.saturating_sub(lo)
        )));
    }
    let n = labels.len();
    let mut starts = Vec::with_capacity(n);
    for (j, &(_, natural)) in labels.iter().enumerate() {
        let earliest = starts.last().map_or(lo, |&s: &usize| s + 1);
        starts.push(natural.max(earliest).min(hi - (n - j)));
    }
    let mut path = vec![BLANK; t_out];
    for (j, &(label, _)) in labels.iter().enumerate() {
        let end = starts.get(j + 1).copied().unwrap_or(hi);
        path[starts[j]..end].fill(label);
    }
    let v = vocab.size();
    let mut data = vec![LOG_ZERO; t_out * v];
    for (k, &label) in path.iter().enumerate() {
        data[k * v + label] = 0.0;
    }
    Tensor::new(vec![t_out, v], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub condition: String,
    pub snr_db: f64,
    pub n_utts: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
    pub per: f64,
}

impl ResultRow {
    fn new(condition: String, snr_db: f64, n_utts: usize, c: EditCounts) -> Self {
        Self {
            condition,
            snr_db,
            n_utts,
            substitutions: c.substitutions,
            deletions: c.deletions,
            insertions: c.insertions,
            ref_len: c.ref_len,
            per: c.per(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultsTable {
    pub model: String,
    pub rows: Vec<ResultRow>,
}

impl ResultsTable {
    pub fn get(&self, condition: &str, snr_db: f64) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.condition == condition && (r.snr_db - snr_db).abs() < 1e-9)
    }

    pub fn per(&self, cond: Condition, kw_words: usize, snr_db: f64) -> Option<f64> {
        self.get(&cell_label(cond, kw_words), snr_db).map(|r| r.per)
    }

    /// Aligned plain-text rendering.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model: {}  (PER in %, pivot tokens stripped before scoring)", self.model);
        let _ = writeln!(
            s,
            "{:<12} {:>7} {:>6} {:>6} {:>6} {:>6} {:>7} {:>8}",
            "condition", "snr_db", "utts", "sub", "del", "ins", "ref", "per"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<12} {:>7.1} {:>6} {:>6} {:>6} {:>6} {:>7} {:>8.2}",
                r.condition, r.snr_db, r.n_utts, r.substitutions, r.deletions, r.insertions, r.ref_len, r.per
            );
        }
        s
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

pub fn write_csv(table: &ResultsTable, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in &table.rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a table; the model name is taken from the file stem.
pub fn read_csv(path: impl AsRef<Path>) -> Result<ResultsTable> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<ResultRow>, _>>().map_err(csv_err)?;
    Ok(ResultsTable {
        model: path.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string(),
        rows,
    })
}

/// Builds the test item for one grid cell. Partners depend only on the
/// condition and the item, keywords only on the keyword length and the item,
/// so cells that differ in one factor share everything else.
fn cell_example(
    corpus: &Corpus,
    test_ids: &[usize],
    grid: &EvalGrid,
    cond: Condition,
    snr: f64,
    kw: usize,
    target: usize,
    item: usize,
) -> Result<TrainingExample> {
    let key = (target * 1000 + item) as u64;
    let mut prng = ChaCha8Rng::seed_from_u64(derive_seed(grid.seed, STREAM_PARTNER + cond.index(), key));
    let mut krng = ChaCha8Rng::seed_from_u64(derive_seed(grid.seed, STREAM_KEYWORD + kw as u64, key));
    let spec = cond.spec(snr);
    let other = pick_partner(corpus, test_ids, target, spec.pairing, &mut prng)?;
    build_example(corpus, target, other, &spec, &grid.policy(kw), &mut krng)
}

/// Scores `rec` on every (condition, keyword length, SNR) cell over the
/// held-out `test_ids`.
pub fn evaluate(
    rec: &dyn Recognizer,
    corpus: &Corpus,
    test_ids: &[usize],
    grid: &EvalGrid,
    model_name: &str,
) -> Result<ResultsTable> {
    grid.validate()?;
    if test_ids.is_empty() {
        return Err(Error::Config("no test utterances".into()));
    }
    let mut rows = Vec::new();
    for &cond in &grid.conditions {
        for &kw in &grid.keyword_words {
            for &snr in &grid.snrs_db {
                let mut counts = EditCounts::default();
                let mut n = 0;
                for &target in test_ids {
                    for item in 0..grid.items_per_target {
                        let ex = cell_example(corpus, test_ids, grid, cond, snr, kw, target, item)?;
                        let hyp = greedy_decode(&rec.log_probs(&ex)?);
                        counts.merge(&score(&hyp, &ex.target, &corpus.vocab, grid.strip_pivots)?);
                        n += 1;
                    }
                }
                rows.push(ResultRow::new(cell_label(cond, kw), snr, n, counts));
            }
        }
    }
    Ok(ResultsTable {
        model: model_name.to_string(),
        rows,
    })
}
