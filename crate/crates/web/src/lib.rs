//! WebAssembly bindings for a small interactive demo: log-mel spectrogram of
//! a chirp, SNR-controlled mixing of two synthetic utterances, and CTC path
//! collapsing plus phone error rate scoring.
//!
//! Every exported function returns a JSON string. Failures come back as
//! `{"error": "..."}` so the page never has to catch exceptions.

use std::collections::HashMap;
use std::f64::consts::PI;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use wasm_bindgen::prelude::*;

use tcasr::corpus::{generate_corpus, mix_snr, pick_partner, snr_db_of, tile, Pairing, SyntheticCorpusConfig};
use tcasr::ctc::{collapse, BLANK};
use tcasr::frontend::{logmel, FeatureMatrix, Waveform, DEFAULT_SAMPLE_RATE, FRAME_LEN_MS, FRAME_SHIFT_MS, N_MELS};
use tcasr::metrics::edit_counts;

#[derive(Serialize)]
pub struct Heatmap {
    pub frames: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl From<&FeatureMatrix> for Heatmap {
    fn from(f: &FeatureMatrix) -> Self {
        Self {
            frames: f.num_frames(),
            dim: f.dim(),
            data: f.data().iter().map(|&v| v as f32).collect(),
        }
    }
}

fn to_json<T: Serialize>(r: Result<T, String>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| json!({ "error": e.to_string() }).to_string()),
        Err(e) => json!({ "error": e }).to_string(),
    }
}

#[derive(Serialize)]
pub struct Spectrogram {
    pub heatmap: Heatmap,
    /// Index of the loudest mel band in each frame.
    pub peak_band: Vec<usize>,
}

/// Log-mel features of a linear chirp from `f0` to `f1` Hz.
pub fn chirp_spectrogram(f0: f64, f1: f64, seconds: f64) -> Result<Spectrogram, String> {
    if !(seconds > 0.0 && seconds <= 10.0) {
        return Err("duration must be in (0, 10] seconds".into());
    }
    let sr = DEFAULT_SAMPLE_RATE;
    let n = (seconds * sr).round() as usize;
    let rate = (f1 - f0) / seconds;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            (2.0 * PI * (f0 * t + 0.5 * rate * t * t)).sin()
        })
        .collect();
    let wave = Waveform::new(samples, sr).map_err(|e| e.to_string())?;
    let feats = logmel(&wave, N_MELS, FRAME_LEN_MS, FRAME_SHIFT_MS).map_err(|e| e.to_string())?;
    let peak_band = (0..feats.num_frames())
        .map(|t| {
            feats
                .row(t)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0)
        })
        .collect();
    Ok(Spectrogram {
        heatmap: Heatmap::from(&feats),
        peak_band,
    })
}

#[derive(Serialize)]
pub struct MixtureView {
    pub target: Heatmap,
    pub interference: Heatmap,
    pub mixture: Heatmap,
    pub gain: f64,
    pub achieved_snr_db: f64,
    pub target_speaker: usize,
    pub interference_speaker: usize,
    pub target_phones: Vec<usize>,
}

/// Mixes two utterances of a small synthetic corpus at `snr_db`.
pub fn mixture(snr_db: f64, same_speaker: bool, seed: u64) -> Result<MixtureView, String> {
    let cfg = SyntheticCorpusConfig {
        n_speakers: 4,
        n_utterances: 16,
        seed,
        ..Default::default()
    };
    let corpus = generate_corpus(&cfg).map_err(|e| e.to_string())?;
    let ids: Vec<usize> = (0..corpus.utterances.len()).collect();
    let pairing = if same_speaker { Pairing::SameSpeaker } else { Pairing::CrossSpeaker };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let other = pick_partner(&corpus, &ids, 0, pairing, &mut rng).map_err(|e| e.to_string())?;
    let a = corpus.utterance(0);
    let b = corpus.utterance(other);
    let m = mix_snr(&a.features, &b.features, snr_db).map_err(|e| e.to_string())?;
    let tiled = tile(&b.features, a.num_frames()).map_err(|e| e.to_string())?;
    let scaled: Vec<f64> = tiled.data().iter().map(|v| v * m.other_gain).collect();
    let interference = FeatureMatrix::new(tiled.num_frames(), tiled.dim(), scaled.clone()).map_err(|e| e.to_string())?;
    Ok(MixtureView {
        target: Heatmap::from(&a.features),
        interference: Heatmap::from(&interference),
        mixture: Heatmap::from(&m.features),
        gain: m.other_gain,
        achieved_snr_db: snr_db_of(a.features.data(), &scaled),
        target_speaker: a.speaker_id,
        interference_speaker: b.speaker_id,
        target_phones: a.phones.clone(),
    })
}

#[derive(Serialize)]
pub struct ScoreView {
    pub collapsed: Vec<String>,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
    /// Phone error rate in percent.
    pub per: f64,
}

fn is_pivot(tok: &str) -> bool {
    tok == "<IPH>" || tok == "<IPT>"
}

/// Collapses a frame-level CTC path (`_` is blank) and scores it against a
/// space-separated reference. Pivot tokens are dropped when `strip_pivots`.
pub fn ctc_score(reference: &str, path: &str, strip_pivots: bool) -> Result<ScoreView, String> {
    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut names = vec!["_".to_string()];
    let mut id_of = |tok: &str, names: &mut Vec<String>| -> usize {
        if tok == "_" {
            return BLANK;
        }
        *ids.entry(tok.to_string()).or_insert_with(|| {
            names.push(tok.to_string());
            names.len() - 1
        })
    };
    let keep = |t: &&str| !(strip_pivots && is_pivot(t));
    let reference: Vec<usize> = reference
        .split_whitespace()
        .filter(keep)
        .filter(|t| *t != "_")
        .map(|t| id_of(t, &mut names))
        .collect();
    if reference.is_empty() {
        return Err("reference is empty".into());
    }
    let frames: Vec<usize> = path.split_whitespace().map(|t| id_of(t, &mut names)).collect();
    let collapsed_ids: Vec<usize> = collapse(frames)
        .into_iter()
        .filter(|&i| !(strip_pivots && is_pivot(&names[i])))
        .collect();
    let c = edit_counts(&collapsed_ids, &reference);
    Ok(ScoreView {
        collapsed: collapsed_ids.iter().map(|&i| names[i].clone()).collect(),
        substitutions: c.substitutions,
        deletions: c.deletions,
        insertions: c.insertions,
        ref_len: c.ref_len,
        per: c.per(),
    })
}

#[wasm_bindgen(js_name = chirpSpectrogram)]
pub fn chirp_spectrogram_js(f0: f64, f1: f64, seconds: f64) -> String {
    to_json(chirp_spectrogram(f0, f1, seconds))
}

#[wasm_bindgen(js_name = mixture)]
pub fn mixture_js(snr_db: f64, same_speaker: bool, seed: u32) -> String {
    to_json(mixture(snr_db, same_speaker, seed as u64))
}

#[wasm_bindgen(js_name = ctcScore)]
pub fn ctc_score_js(reference: &str, path: &str, strip_pivots: bool) -> String {
    to_json(ctc_score(reference, path, strip_pivots))
}
