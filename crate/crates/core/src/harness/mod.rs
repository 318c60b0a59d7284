//! Training regimes, the training loop, checkpoint averaging, evaluation
//! grids and trend comparison.

mod compare;
mod eval;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::checkpoint;
use crate::corpus::{
    build_example, clean_example, derive_seed, energy, pick_partner, Corpus, KeywordPolicy, MixMode,
    MixSpec, Pairing, SyntheticCorpusConfig, TargetPosition, TrainingExample, WeightPolicy,
};
use crate::error::{Error, Result};
use crate::frontend::{encoder_input, FeatureMatrix, SPLICE_CONTEXT};
use crate::model::{ForwardOptions, ModelConfig, TcAsrModel};
use crate::optim::{adam_step, AdamConfig, AdamState, LrSchedule};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub use compare::{compare_models, Trend, TrendReport};
pub use eval::{
    evaluate, oracle_log_probs, read_csv, write_csv, Condition, EvalGrid, OracleRecognizer, Recognizer,
    ResultRow, ResultsTable,
};

const STREAM_EPOCH: u64 = 1;
const STREAM_DROPOUT: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Single clean utterances, no keyword content.
    Clean,
    DaStrong,
    DaWeak,
    TcStrong,
    TcWeak,
    TcFull,
}

pub const STRONG_SNR_DB: (f64, f64) = (3.0, 9.0);
pub const WEAK_SNR_DB: (f64, f64) = (-9.0, -3.0);

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Clean => "clean",
            Regime::DaStrong => "da_strong",
            Regime::DaWeak => "da_weak",
            Regime::TcStrong => "tc_strong",
            Regime::TcWeak => "tc_weak",
            Regime::TcFull => "tc_full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "clean" => Regime::Clean,
            "da_strong" => Regime::DaStrong,
            "da_weak" => Regime::DaWeak,
            "tc_strong" => Regime::TcStrong,
            "tc_weak" => Regime::TcWeak,
            "tc_full" => Regime::TcFull,
            other => return Err(Error::Config(format!("unknown regime {other:?}"))),
        })
    }

    /// Whether the model receives real keyword content.
    pub fn uses_keyword(self) -> bool {
        matches!(self, Regime::TcStrong | Regime::TcWeak | Regime::TcFull)
    }

    /// Target-to-interference SNR ranges a training mixture is drawn from;
    /// empty for clean training.
    pub fn snr_ranges(self) -> Vec<(f64, f64)> {
        match self {
            Regime::Clean => vec![],
            Regime::DaStrong | Regime::TcStrong => vec![STRONG_SNR_DB],
            Regime::DaWeak | Regime::TcWeak => vec![WEAK_SNR_DB],
            Regime::TcFull => vec![STRONG_SNR_DB, WEAK_SNR_DB],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub corpus: SyntheticCorpusConfig,
    /// Defaults to the desk-scale model sized for the corpus.
    pub model: Option<ModelConfig>,
    pub optimizer: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub checkpoint_average_n: usize,
    pub regime: Regime,
    /// Wrap keywords and targets in pivot tokens (keyword regimes only).
    pub pivots: bool,
    /// Inclusive range of keyword lengths in words during training.
    pub keyword_words: (usize, usize),
    /// Utterances per speaker held out for evaluation.
    pub test_per_speaker: usize,
    /// Each training utterance is the target this many times per epoch.
    pub passes_per_epoch: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Replaces the regime's training SNR ranges when set.
    pub train_snr_db: Option<Vec<(f64, f64)>>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: SyntheticCorpusConfig::default(),
            model: None,
            optimizer: AdamConfig::default(),
            epochs: 30,
            batch_size: 8,
            warmup_epochs: 3,
            checkpoint_average_n: 10,
            regime: Regime::TcFull,
            pivots: true,
            keyword_words: (2, 4),
            test_per_speaker: 4,
            passes_per_epoch: 1,
            grad_clip: Some(5.0),
            train_snr_db: None,
            seed: 7,
        }
    }
}

impl ExperimentConfig {
    pub fn model_config(&self) -> ModelConfig {
        self.model.clone().unwrap_or_else(|| ModelConfig {
            input_dim: self.corpus.feature_dim * SPLICE_CONTEXT.len(),
            ..ModelConfig::desk_scale(self.corpus.vocab().size())
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        let m = self.model_config();
        m.validate()?;
        if m.vocab_size != self.corpus.vocab().size() {
            return Err(Error::Config(format!(
                "model vocab {} != corpus vocab {}",
                m.vocab_size,
                self.corpus.vocab().size()
            )));
        }
        if m.input_dim != self.corpus.feature_dim * SPLICE_CONTEXT.len() {
            return Err(Error::Config(format!(
                "model input_dim {} != spliced feature dim {}",
                m.input_dim,
                self.corpus.feature_dim * SPLICE_CONTEXT.len()
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.passes_per_epoch == 0 {
            return Err(Error::Config("epochs, batch_size and passes_per_epoch must be positive".into()));
        }
        if self.checkpoint_average_n == 0 || self.checkpoint_average_n > self.epochs {
            return Err(Error::Config(format!(
                "checkpoint_average_n {} must be in 1..={}",
                self.checkpoint_average_n, self.epochs
            )));
        }
        let (lo, hi) = self.keyword_words;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("keyword_words ({lo}, {hi}) is invalid")));
        }
        LrSchedule::new(self.optimizer.lr, self.warmup_epochs)?;
        Ok(())
    }

    pub fn keyword_policy(&self) -> KeywordPolicy {
        if self.regime.uses_keyword() {
            KeywordPolicy::sampled(self.keyword_words.0, self.keyword_words.1, self.pivots)
        } else {
            KeywordPolicy::dummy()
        }
    }
}

/// Weights `(w_target, w_other)` with the larger one equal to 1 that put the
/// target `snr_db` above the interference over their overlap.
pub fn snr_weights(target: &FeatureMatrix, other: &FeatureMatrix, snr_db: f64) -> Result<(f64, f64)> {
    let n = target.num_frames().min(other.num_frames()) * target.dim();
    let g = crate::corpus::snr_gain(energy(&target.data()[..n]), energy(&other.data()[..n]), snr_db)?;
    Ok(if g > 1.0 { (1.0 / g, 1.0) } else { (1.0, g) })
}

/// One training example for `target` under the regime: the target is mixed
/// with a cross-speaker partner at an SNR drawn from the regime's range, the
/// shorter stream zero-padded.
pub fn regime_example(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    pool: &[usize],
    target: usize,
    rng: &mut impl Rng,
) -> Result<TrainingExample> {
    let policy = cfg.keyword_policy();
    let ranges = match (&cfg.train_snr_db, cfg.regime) {
        (_, Regime::Clean) => vec![],
        (Some(r), _) => r.clone(),
        (None, r) => r.snr_ranges(),
    };
    if ranges.is_empty() {
        return clean_example(corpus, target, &policy, rng);
    }
    let other = pick_partner(corpus, pool, target, Pairing::CrossSpeaker, rng)?;
    let (lo, hi) = ranges[rng.random_range(0..ranges.len())];
    let snr = rng.random_range(lo..=hi);
    let (wt, wo) = snr_weights(&corpus.utterance(target).features, &corpus.utterance(other).features, snr)?;
    let spec = MixSpec {
        mode: MixMode::Mix,
        pairing: Pairing::CrossSpeaker,
        weight_policy: WeightPolicy::Fixed(wt, wo),
        target_position: TargetPosition::First,
    };
    build_example(corpus, target, other, &spec, &policy, rng)
}

/// Encoder input tensor (spliced and subsampled) for an example.
pub fn example_input(ex: &TrainingExample) -> Result<Tensor> {
    encoder_input(&ex.features)?.to_tensor()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub examples: usize,
    pub skipped: usize,
    pub grad_norm: f64,
}

pub struct TrainOutcome {
    pub model: TcAsrModel,
    /// The last `checkpoint_average_n` epoch checkpoints, oldest first.
    pub recent: Vec<ParamStore>,
    pub log: Vec<EpochLog>,
    pub checkpoint_paths: Vec<PathBuf>,
}

impl TrainOutcome {
    /// Model whose parameters are the mean of the retained checkpoints.
    pub fn averaged_model(&self) -> Result<TcAsrModel> {
        let mut m = self.model.clone();
        m.load_params(&checkpoint::average(&self.recent)?)?;
        Ok(m)
    }
}

pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "train_log.jsonl";

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.ckpt"))
}

/// Trains under `cfg` on the corpus's training split. Writes the config, one
/// checkpoint per epoch and a JSON-lines loss log into `out` when given.
pub fn train(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    out: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.config != cfg.corpus {
        return Err(Error::Config("corpus was not generated from this experiment's corpus config".into()));
    }
    let (train_ids, _) = corpus.split(cfg.test_per_speaker)?;
    let mut model = TcAsrModel::new(cfg.model_config(), derive_seed(cfg.seed, 0, 0))?;
    let mut adam = AdamState::new(model.params(), &cfg.optimizer);
    let schedule = LrSchedule::new(cfg.optimizer.lr, cfg.warmup_epochs)?;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_DROPOUT, 0));

    let mut log_file = None;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), serde_json::to_vec_pretty(cfg)?)?;
        log_file = Some(fs::File::create(dir.join(LOG_FILE))?);
    }

    let mut recent = Vec::new();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut paths = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_EPOCH, epoch as u64));
        let mut order: Vec<usize> = (0..cfg.passes_per_epoch).flat_map(|_| train_ids.iter().copied()).collect();
        order.shuffle(&mut rng);
        let lr = schedule.lr_at(epoch);

        let mut total = 0.0;
        let mut used = 0;
        let mut skipped = 0;
        let mut norm_sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            model.params_mut().zero_grad();
            let mut in_batch = 0;
            for &target in chunk {
                let ex = match regime_example(cfg, corpus, &train_ids, target, &mut rng) {
                    Ok(ex) => ex,
                    Err(Error::InfeasibleAlignment { .. }) => {
                        skipped += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let x = example_input(&ex)?;
                let mut g = Graph::new();
                let opts = ForwardOptions {
                    record_attention: false,
                    dropout_rng: (model.config().dropout > 0.0).then_some(&mut dropout_rng),
                };
                let loss = match model.loss(&mut g, &x, &ex.keyword, &ex.target, opts) {
                    Ok(l) => l,
                    Err(Error::InfeasibleAlignment { .. }) => {
                        skipped += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let value = g.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(Error::Training {
                        param: "loss".into(),
                        reason: format!("loss became {value} at epoch {epoch} on utterance {target}"),
                    });
                }
                g.backward(loss)?;
                g.accumulate_into(model.params_mut())?;
                total += value;
                in_batch += 1;
            }
            if in_batch == 0 {
                continue;
            }
            used += in_batch;
            model.params_mut().scale_grads(1.0 / in_batch as f64);
            let norm = model.params().grad_norm();
            if let Some(clip) = cfg.grad_clip {
                if norm > clip {
                    model.params_mut().scale_grads(clip / norm);
                }
            }
            norm_sum += norm;
            steps += 1;
            adam_step(model.params_mut(), &mut adam, lr)?;
        }

        let entry = EpochLog {
            epoch,
            lr,
            mean_loss: total / used.max(1) as f64,
            examples: used,
            skipped,
            grad_norm: norm_sum / steps.max(1) as f64,
        };
        if let Some(dir) = out {
            let p = checkpoint_path(dir, epoch);
            checkpoint::save(model.params(), &p)?;
            paths.push(p);
        }
        if let Some(f) = log_file.as_mut() {
            serde_json::to_writer(&mut *f, &entry)?;
            f.write_all(b"\n")?;
        }
        on_epoch(&entry);
        log.push(entry);
        recent.push(model.params().clone());
        if recent.len() > cfg.checkpoint_average_n {
            recent.remove(0);
        }
    }
    Ok(TrainOutcome {
        model,
        recent,
        log,
        checkpoint_paths: paths,
    })
}

/// Epoch checkpoints in `dir`, sorted by epoch.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("epoch_") && n.ends_with(".ckpt"))
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Mean of the last `last_n` epoch checkpoints in `dir`.
pub fn average_checkpoints(dir: &Path, last_n: usize) -> Result<ParamStore> {
    let all = list_checkpoints(dir)?;
    if last_n == 0 || all.len() < last_n {
        return Err(Error::Checkpoint(format!(
            "asked to average {last_n} checkpoints, {} found in {}",
            all.len(),
            dir.display()
        )));
    }
    let stores = all[all.len() - last_n..]
        .iter()
        .map(checkpoint::load)
        .collect::<Result<Vec<_>>>()?;
    checkpoint::average(&stores)
}

/// Loads a trained run: its config and the averaged model.
pub fn load_run(dir: &Path, last_n: usize) -> Result<(ExperimentConfig, TcAsrModel)> {
    let cfg: ExperimentConfig = serde_json::from_slice(&fs::read(dir.join(CONFIG_FILE))?)?;
    let mut model = TcAsrModel::new(cfg.model_config(), 0)?;
    model.load_params(&average_checkpoints(dir, last_n)?)?;
    Ok((cfg, model))
}
