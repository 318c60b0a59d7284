//! Synthetic phone-aligned multi-speaker corpus and example construction.
//!
//! Every phone has a template vector, every speaker a spectral envelope and an
//! additive signature. A frame of phone `p` spoken by speaker `s` is
//!
//! ```text
//! template[p] ⊙ envelope[s] + signature_strength · signature[s] + noise_level · ε
//! ```
//!
//! with `envelope[s] = (1 - timbre) + timbre · band[s] / q`, where `band[s]` is
//! a random 0/1 mask keeping a fraction `q = band_fraction` of the feature
//! bands. The envelope averages 1 over bands; `q = 0.5` gives the symmetric
//! `1 ± timbre` comb. With `timbre = 0` the envelope is all ones and a frame is template plus
//! signature plus noise. A non-zero timbre ties speaker identity to where a
//! phone's energy lands, which is what lets a listener attribute components of
//! an overlapped mixture to the speaker that produced them.

mod example;
mod keyword;
mod manifest;
mod mix;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{output_frames, FeatureMatrix, N_MELS, SUBSAMPLE};
use crate::vocab::PhoneVocab;

pub use example::{
    build_example, clean_example, mix_weighted_example, pick_partner, ExampleMeta, KeywordPolicy, TrainingExample,
};
pub use keyword::{add_pivots, select_keyword, strip_pivots, Keyword};
pub use manifest::{
    load_corpus, read_examples, read_manifest, write_corpus, write_examples, CorpusManifest,
    ExampleDescriptor, UtteranceRecord,
};
pub use mix::{
    concat, energy, mix_snr, mix_snr_waveform, mix_weighted, mix_weighted_with, snr_db_of, snr_gain,
    tile, MixMode, MixSpec, Mixture, Pairing, TargetPosition, WeightPolicy, UNIFORM_WEIGHT_RANGE,
};

/// Mixes `seed` with a stream tag and an index into an independent seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticCorpusConfig {
    pub n_speakers: usize,
    pub n_utterances: usize,
    pub phone_set_size: usize,
    pub lexicon_size: usize,
    /// Inclusive range of phones per lexicon word.
    pub phones_per_word: (usize, usize),
    /// Inclusive range of words per utterance.
    pub words_per_utterance: (usize, usize),
    /// Inclusive range of frames per phone.
    pub phone_frames: (usize, usize),
    pub feature_dim: usize,
    pub signature_strength: f64,
    pub timbre: f64,
    /// Probability that a feature band belongs to a speaker's envelope.
    pub band_fraction: f64,
    pub noise_level: f64,
    /// Each phone segment's template term is scaled by `10^(-u/20)` with
    /// `u ~ U[0, loudness_jitter_db]`.
    pub loudness_jitter_db: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        Self {
            n_speakers: 8,
            n_utterances: 200,
            phone_set_size: 16,
            lexicon_size: 64,
            phones_per_word: (2, 3),
            words_per_utterance: (4, 6),
            phone_frames: (6, 12),
            feature_dim: N_MELS,
            signature_strength: 0.5,
            timbre: 0.8,
            band_fraction: 0.5,
            noise_level: 0.1,
            loudness_jitter_db: 0.0,
            seed: 1,
        }
    }
}

impl SyntheticCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.phone_set_size < 8 {
            return bad(format!("phone_set_size {} < 8", self.phone_set_size));
        }
        if self.n_speakers < 2 {
            return bad(format!("n_speakers {} < 2", self.n_speakers));
        }
        if self.n_utterances < 2 * self.n_speakers {
            return bad(format!(
                "{} utterances cannot give each of {} speakers two utterances",
                self.n_utterances, self.n_speakers
            ));
        }
        if self.lexicon_size == 0 || self.feature_dim == 0 {
            return bad("lexicon_size and feature_dim must be positive".into());
        }
        for (name, (lo, hi)) in [
            ("phones_per_word", self.phones_per_word),
            ("words_per_utterance", self.words_per_utterance),
            ("phone_frames", self.phone_frames),
        ] {
            if lo == 0 || lo > hi {
                return bad(format!("{name} range ({lo}, {hi}) is empty or starts at 0"));
            }
        }
        // Every phone must survive subsampling with a frame to spare so that
        // repeated phones stay separable.
        if self.phone_frames.0 < 2 * SUBSAMPLE {
            return bad(format!(
                "phone_frames minimum {} < {}",
                self.phone_frames.0,
                2 * SUBSAMPLE
            ));
        }
        for (name, v) in [
            ("signature_strength", self.signature_strength),
            ("timbre", self.timbre),
            ("noise_level", self.noise_level),
            ("loudness_jitter_db", self.loudness_jitter_db),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and ≥ 0, got {v}"));
            }
        }
        if !(self.band_fraction > 0.0 && self.band_fraction <= 1.0) {
            return bad(format!("band_fraction must be in (0, 1], got {}", self.band_fraction));
        }
        Ok(())
    }

    pub fn vocab(&self) -> PhoneVocab {
        PhoneVocab::new(self.phone_set_size).expect("validated phone set")
    }
}

/// A word occurrence: lexicon id and its half-open phone range in the
/// utterance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordSpan {
    pub word_id: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: usize,
    pub speaker_id: usize,
    /// Vocabulary ids of the phones.
    pub phones: Vec<usize>,
    /// Half-open frame range of each phone; contiguous and covering `[0, T)`.
    pub alignment: Vec<(usize, usize)>,
    pub words: Vec<WordSpan>,
    pub features: FeatureMatrix,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.features.num_frames()
    }

    pub fn check_invariants(&self) -> Result<()> {
        let mut expect = 0;
        for &(s, e) in &self.alignment {
            if s != expect || e <= s {
                return Err(Error::Input(format!(
                    "utterance {}: alignment is not contiguous at frame {s}",
                    self.id
                )));
            }
            expect = e;
        }
        if expect != self.num_frames() || self.alignment.len() != self.phones.len() {
            return Err(Error::Input(format!(
                "utterance {}: alignment does not cover the features",
                self.id
            )));
        }
        let mut p = 0;
        for w in &self.words {
            if w.start != p || w.end <= w.start {
                return Err(Error::Input(format!("utterance {}: bad word span", self.id)));
            }
            p = w.end;
        }
        if p != self.phones.len() {
            return Err(Error::Input(format!("utterance {}: words do not cover phones", self.id)));
        }
        Ok(())
    }
}

/// Generated corpus with its hidden generative factors.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub config: SyntheticCorpusConfig,
    pub vocab: PhoneVocab,
    /// Phone vocabulary ids per lexicon word.
    pub lexicon: Vec<Vec<usize>>,
    pub templates: Vec<Vec<f64>>,
    pub signatures: Vec<Vec<f64>>,
    pub envelopes: Vec<Vec<f64>>,
    pub utterances: Vec<Utterance>,
}

/// Worst-case label count for an utterance of `n_phones`: phones + two pivots.
pub fn max_target_len(n_phones: usize) -> usize {
    n_phones + 2
}

/// The CTC feasibility bound every emitted example must meet.
pub fn ctc_feasible(frames: usize, target_len: usize) -> bool {
    output_frames(frames, SUBSAMPLE) > 2 * target_len
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            scale * v
        })
        .collect()
}

/// Builds a corpus. Deterministic in `cfg.seed`.
pub fn generate_corpus(cfg: &SyntheticCorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let vocab = cfg.vocab();
    let f = cfg.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let templates: Vec<Vec<f64>> = (0..cfg.phone_set_size).map(|_| gaussian_vec(&mut rng, f, 1.0)).collect();
    let signatures: Vec<Vec<f64>> = (0..cfg.n_speakers).map(|_| gaussian_vec(&mut rng, f, 1.0)).collect();
    let envelopes: Vec<Vec<f64>> = (0..cfg.n_speakers)
        .map(|_| {
            (0..f)
                .map(|_| {
                    let band = if rng.random_bool(cfg.band_fraction) { 1.0 } else { 0.0 };
                    (1.0 - cfg.timbre) + cfg.timbre * band / cfg.band_fraction
                })
                .collect()
        })
        .collect();
    let lexicon: Vec<Vec<usize>> = (0..cfg.lexicon_size)
        .map(|_| {
            let n = rng.random_range(cfg.phones_per_word.0..=cfg.phones_per_word.1);
            (0..n).map(|_| vocab.phone(rng.random_range(0..cfg.phone_set_size))).collect()
        })
        .collect();

    let mut utterances = Vec::with_capacity(cfg.n_utterances);
    let speaker_ids: Vec<usize> = (0..cfg.n_speakers).collect();
    for id in 0..cfg.n_utterances {
        // round-robin keeps speakers balanced; every speaker gets ≥ 2 utterances
        let speaker_id = if id < 2 * cfg.n_speakers {
            id % cfg.n_speakers
        } else {
            *speaker_ids.choose(&mut rng).expect("non-empty")
        };
        let utt = loop {
            let n_words = rng.random_range(cfg.words_per_utterance.0..=cfg.words_per_utterance.1);
            let mut phones = Vec::new();
            let mut words = Vec::with_capacity(n_words);
            for _ in 0..n_words {
                let word_id = rng.random_range(0..cfg.lexicon_size);
                let start = phones.len();
                phones.extend_from_slice(&lexicon[word_id]);
                words.push(WordSpan {
                    word_id,
                    start,
                    end: phones.len(),
                });
            }
            let mut alignment = Vec::with_capacity(phones.len());
            let mut t = 0;
            for _ in &phones {
                let d = rng.random_range(cfg.phone_frames.0..=cfg.phone_frames.1);
                alignment.push((t, t + d));
                t += d;
            }
            if !ctc_feasible(t, max_target_len(phones.len())) {
                continue;
            }
            let mut data = Vec::with_capacity(t * f);
            for (&p, &(s, e)) in phones.iter().zip(&alignment) {
                let tpl = &templates[p - 1];
                let gain = if cfg.loudness_jitter_db > 0.0 {
                    10f64.powf(-rng.random_range(0.0..=cfg.loudness_jitter_db) / 20.0)
                } else {
                    1.0
                };
                for _ in s..e {
                    for j in 0..f {
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        data.push(
                            gain * tpl[j] * envelopes[speaker_id][j]
                                + cfg.signature_strength * signatures[speaker_id][j]
                                + cfg.noise_level * noise,
                        );
                    }
                }
            }
            break Utterance {
                id,
                speaker_id,
                phones,
                alignment,
                words,
                features: FeatureMatrix::new(t, f, data)?,
            };
        };
        utterances.push(utt);
    }

    Ok(Corpus {
        config: cfg.clone(),
        vocab,
        lexicon,
        templates,
        signatures,
        envelopes,
        utterances,
    })
}

impl Corpus {
    /// Utterance ids split into (train, test): the last `test_per_speaker`
    /// utterances of every speaker are held out.
    pub fn split(&self, test_per_speaker: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for s in 0..self.config.n_speakers {
            let ids: Vec<usize> = self
                .utterances
                .iter()
                .filter(|u| u.speaker_id == s)
                .map(|u| u.id)
                .collect();
            if ids.len() < test_per_speaker + 1 || (test_per_speaker > 0 && test_per_speaker < 2) {
                return Err(Error::Config(format!(
                    "speaker {s} has {} utterances; cannot hold out {test_per_speaker} (need ≥ 2 held out for same-speaker pairs)",
                    ids.len()
                )));
            }
            let cut = ids.len() - test_per_speaker;
            train.extend_from_slice(&ids[..cut]);
            test.extend_from_slice(&ids[cut..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((train, test))
    }

    pub fn utterance(&self, id: usize) -> &Utterance {
        &self.utterances[id]
    }
}
