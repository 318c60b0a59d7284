//! Assembles training and test examples from corpus utterances.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::keyword::{add_pivots, select_keyword};
use super::mix::{concat, energy, mix_snr, mix_weighted_with, snr_gain, MixMode, MixSpec, Pairing, TargetPosition, WeightPolicy, UNIFORM_WEIGHT_RANGE};
use super::{ctc_feasible, Corpus};
use crate::ctc::{repeat_count, BLANK};
use crate::error::{Error, Result};
use crate::frontend::FeatureMatrix;

/// How the keyword input is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordPolicy {
    /// Inclusive word-count range; one value is drawn per example.
    pub words: (usize, usize),
    pub pivots: bool,
    /// Replace the keyword with the single constant token `[BLANK]`.
    pub dummy: bool,
}

impl KeywordPolicy {
    pub fn sampled(lo: usize, hi: usize, pivots: bool) -> Self {
        Self { words: (lo, hi), pivots, dummy: false }
    }

    pub fn dummy() -> Self {
        Self { words: (1, 1), pivots: false, dummy: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleMeta {
    /// `None` for a single unmixed utterance.
    pub spec: Option<MixSpec>,
    /// The keyword-bearing utterance.
    pub target_utt: usize,
    pub other_utt: Option<usize>,
    pub same_speaker: bool,
    /// First frame of the target stream inside the mixture.
    pub target_offset: usize,
    pub target_gain: f64,
    pub other_gain: f64,
    /// Phone range of the keyword inside the target transcription (before pivots).
    pub keyword_span: Option<(usize, usize)>,
    pub pivots: bool,
}

#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub features: FeatureMatrix,
    pub keyword: Vec<usize>,
    pub target: Vec<usize>,
    pub meta: ExampleMeta,
}

/// Draws a partner for `target` from `pool` under the pairing rule.
pub fn pick_partner(
    corpus: &Corpus,
    pool: &[usize],
    target: usize,
    pairing: Pairing,
    rng: &mut impl Rng,
) -> Result<usize> {
    let spk = corpus.utterance(target).speaker_id;
    let candidates: Vec<usize> = pool
        .iter()
        .copied()
        .filter(|&id| {
            let s = corpus.utterance(id).speaker_id;
            match pairing {
                Pairing::CrossSpeaker => s != spk,
                Pairing::SameSpeaker => s == spk && id != target,
            }
        })
        .collect();
    candidates.choose(rng).copied().ok_or_else(|| {
        Error::DegenerateInput(format!("no {pairing:?} partner for utterance {target}"))
    })
}

/// Builds one example with utterance `target_id` as the keyword source and
/// `other_id` as interference.
pub fn build_example(
    corpus: &Corpus,
    target_id: usize,
    other_id: usize,
    spec: &MixSpec,
    policy: &KeywordPolicy,
    rng: &mut impl Rng,
) -> Result<TrainingExample> {
    spec.validate()?;
    let a = corpus.utterance(target_id);
    let b = corpus.utterance(other_id);
    let same_speaker = a.speaker_id == b.speaker_id;
    match spec.pairing {
        Pairing::CrossSpeaker if same_speaker => {
            return Err(Error::Input(format!("utterances {target_id} and {other_id} share a speaker")));
        }
        Pairing::SameSpeaker if !same_speaker || target_id == other_id => {
            return Err(Error::Input(format!(
                "utterances {target_id} and {other_id} are not a same-speaker pair"
            )));
        }
        _ => {}
    }

    let (features, target_offset, target_gain, other_gain) = match spec.mode {
        MixMode::Mix => match spec.weight_policy {
            WeightPolicy::SnrDb(snr) => {
                let m = mix_snr(&a.features, &b.features, snr)?;
                (m.features, 0, m.target_gain, m.other_gain)
            }
            wp => {
                let (w1, w2) = match wp {
                    WeightPolicy::Fixed(w1, w2) => (w1, w2),
                    _ => {
                        let (lo, hi) = UNIFORM_WEIGHT_RANGE;
                        (rng.random_range(lo..=hi), rng.random_range(lo..=hi))
                    }
                };
                match spec.target_position {
                    TargetPosition::First => (mix_weighted_with(&a.features, &b.features, w1, w2)?, 0, w1, w2),
                    TargetPosition::Second => (mix_weighted_with(&b.features, &a.features, w1, w2)?, 0, w2, w1),
                }
            }
        },
        MixMode::Concat => {
            let (ga, gb) = match spec.weight_policy {
                WeightPolicy::SnrDb(snr) => (1.0, snr_gain(energy(a.features.data()), energy(b.features.data()), snr)?),
                WeightPolicy::Fixed(w1, w2) => (w1, w2),
                WeightPolicy::Uniform => (1.0, 1.0),
            };
            let scaled_a = if ga == 1.0 {
                a.features.clone()
            } else {
                FeatureMatrix::new(
                    a.num_frames(),
                    a.features.dim(),
                    a.features.data().iter().map(|v| v * ga).collect(),
                )?
            };
            let m = concat(&scaled_a, &b.features, spec.target_position, gb)?;
            (m.features, m.target_offset, ga, gb)
        }
    };

    let (keyword, target, keyword_span) = keyword_and_target(corpus, target_id, policy, rng)?;
    check_feasible(&features, &target)?;

    Ok(TrainingExample {
        features,
        keyword,
        target,
        meta: ExampleMeta {
            spec: Some(*spec),
            target_utt: target_id,
            other_utt: Some(other_id),
            same_speaker,
            target_offset,
            target_gain,
            other_gain,
            keyword_span,
            pivots: policy.pivots && !policy.dummy,
        },
    })
}

type LabelPair = (Vec<usize>, Vec<usize>, Option<(usize, usize)>);

fn keyword_and_target(corpus: &Corpus, id: usize, policy: &KeywordPolicy, rng: &mut impl Rng) -> Result<LabelPair> {
    let a = corpus.utterance(id);
    if policy.dummy {
        return Ok((vec![BLANK], a.phones.clone(), None));
    }
    let (lo, hi) = policy.words;
    if lo == 0 || lo > hi {
        return Err(Error::Config(format!("keyword word range ({lo}, {hi}) is invalid")));
    }
    let n = rng.random_range(lo..=hi.min(a.words.len().max(lo)));
    let kw = select_keyword(a, n, rng)?;
    let (k, t) = add_pivots(&kw.phones, &a.phones, kw.span, &corpus.vocab, policy.pivots)?;
    Ok((k, t, Some(kw.span)))
}

fn check_feasible(features: &FeatureMatrix, target: &[usize]) -> Result<()> {
    if !ctc_feasible(features.num_frames(), target.len()) {
        return Err(Error::InfeasibleAlignment {
            frames: features.num_frames(),
            labels: target.len(),
            repeats: repeat_count(target),
        });
    }
    Ok(())
}

/// A single utterance with no interference.
pub fn clean_example(corpus: &Corpus, id: usize, policy: &KeywordPolicy, rng: &mut impl Rng) -> Result<TrainingExample> {
    let features = corpus.utterance(id).features.clone();
    let (keyword, target, keyword_span) = keyword_and_target(corpus, id, policy, rng)?;
    check_feasible(&features, &target)?;
    Ok(TrainingExample {
        features,
        keyword,
        target,
        meta: ExampleMeta {
            spec: None,
            target_utt: id,
            other_utt: None,
            same_speaker: false,
            target_offset: 0,
            target_gain: 1.0,
            other_gain: 0.0,
            keyword_span,
            pivots: policy.pivots && !policy.dummy,
        },
    })
}

/// Training mixture `w1·U1 + w2·U2` with the keyword taken from either
/// stream with probability ½.
pub fn mix_weighted_example(
    corpus: &Corpus,
    u1: usize,
    u2: usize,
    policy: &KeywordPolicy,
    rng: &mut impl Rng,
) -> Result<TrainingExample> {
    let pairing = if corpus.utterance(u1).speaker_id == corpus.utterance(u2).speaker_id {
        Pairing::SameSpeaker
    } else {
        Pairing::CrossSpeaker
    };
    let (lo, hi) = UNIFORM_WEIGHT_RANGE;
    let w1 = rng.random_range(lo..=hi);
    let w2 = rng.random_range(lo..=hi);
    let first = rng.random::<bool>();
    let (target, other, pos) = if first {
        (u1, u2, TargetPosition::First)
    } else {
        (u2, u1, TargetPosition::Second)
    };
    let spec = MixSpec {
        mode: MixMode::Mix,
        pairing,
        weight_policy: WeightPolicy::Fixed(w1, w2),
        target_position: pos,
    };
    build_example(corpus, target, other, &spec, policy, rng)
}
