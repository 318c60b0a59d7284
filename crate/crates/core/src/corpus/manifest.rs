//! On-disk layout: a JSON corpus manifest plus one FEAT1 file per utterance,
//! and JSON-lines example sets.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::example::{ExampleMeta, TrainingExample};
use super::{Corpus, SyntheticCorpusConfig, Utterance, WordSpan};
use crate::error::{Error, Result};
use crate::frontend::{read_features, write_features};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: usize,
    pub speaker_id: usize,
    pub phones: Vec<usize>,
    pub alignment: Vec<(usize, usize)>,
    pub words: Vec<WordSpan>,
    /// Relative to the manifest's directory.
    pub features: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub config: SyntheticCorpusConfig,
    pub vocab_size: usize,
    pub feature_dim: usize,
    /// Mean and standard deviation of all feature cells.
    pub feature_mean: f64,
    pub feature_std: f64,
    pub lexicon: Vec<Vec<usize>>,
    pub templates: Vec<Vec<f64>>,
    pub signatures: Vec<Vec<f64>>,
    pub envelopes: Vec<Vec<f64>>,
    pub utterances: Vec<UtteranceRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleDescriptor {
    pub index: usize,
    pub features: String,
    pub keyword: Vec<usize>,
    pub target: Vec<usize>,
    pub meta: ExampleMeta,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const EXAMPLES_FILE: &str = "examples.jsonl";

fn feature_stats(corpus: &Corpus) -> (f64, f64) {
    let mut n = 0usize;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for u in &corpus.utterances {
        for &v in u.features.data() {
            n += 1;
            sum += v;
            sq += v * v;
        }
    }
    let mean = sum / n.max(1) as f64;
    (mean, (sq / n.max(1) as f64 - mean * mean).max(0.0).sqrt())
}

/// Writes `dir/manifest.json` and `dir/feats/utt_XXXXX.feat`.
pub fn write_corpus(corpus: &Corpus, dir: impl AsRef<Path>) -> Result<CorpusManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("feats"))?;
    let mut records = Vec::with_capacity(corpus.utterances.len());
    for u in &corpus.utterances {
        let rel = format!("feats/utt_{:05}.feat", u.id);
        write_features(&u.features, dir.join(&rel))?;
        records.push(UtteranceRecord {
            id: u.id,
            speaker_id: u.speaker_id,
            phones: u.phones.clone(),
            alignment: u.alignment.clone(),
            words: u.words.clone(),
            features: rel,
        });
    }
    let (feature_mean, feature_std) = feature_stats(corpus);
    let manifest = CorpusManifest {
        config: corpus.config.clone(),
        vocab_size: corpus.vocab.size(),
        feature_dim: corpus.config.feature_dim,
        feature_mean,
        feature_std,
        lexicon: corpus.lexicon.clone(),
        templates: corpus.templates.clone(),
        signatures: corpus.signatures.clone(),
        envelopes: corpus.envelopes.clone(),
        utterances: records,
    };
    let f = BufWriter::new(fs::File::create(dir.join(MANIFEST_FILE))?);
    serde_json::to_writer_pretty(f, &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<CorpusManifest> {
    let f = BufReader::new(fs::File::open(path)?);
    Ok(serde_json::from_reader(f)?)
}

/// Loads a corpus written by [`write_corpus`]. Features come back at the
/// file format's 32-bit precision.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir = dir.as_ref();
    let m = read_manifest(dir.join(MANIFEST_FILE))?;
    m.config.validate()?;
    let vocab = m.config.vocab();
    if vocab.size() != m.vocab_size {
        return Err(Error::Format(format!(
            "manifest vocab size {} disagrees with config ({})",
            m.vocab_size,
            vocab.size()
        )));
    }
    let mut utterances = Vec::with_capacity(m.utterances.len());
    for (i, r) in m.utterances.into_iter().enumerate() {
        if r.id != i {
            return Err(Error::Format(format!("utterance {} listed at position {i}", r.id)));
        }
        let u = Utterance {
            id: r.id,
            speaker_id: r.speaker_id,
            phones: r.phones,
            alignment: r.alignment,
            words: r.words,
            features: read_features(dir.join(&r.features))?,
        };
        u.check_invariants()?;
        utterances.push(u);
    }
    Ok(Corpus {
        config: m.config,
        vocab,
        lexicon: m.lexicon,
        templates: m.templates,
        signatures: m.signatures,
        envelopes: m.envelopes,
        utterances,
    })
}

/// Writes `dir/examples.jsonl` and one feature file per example.
pub fn write_examples(examples: &[TrainingExample], dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("feats"))?;
    let path = dir.join(EXAMPLES_FILE);
    let mut out = BufWriter::new(fs::File::create(&path)?);
    for (index, ex) in examples.iter().enumerate() {
        let rel = format!("feats/ex_{index:06}.feat");
        write_features(&ex.features, dir.join(&rel))?;
        let d = ExampleDescriptor {
            index,
            features: rel,
            keyword: ex.keyword.clone(),
            target: ex.target.clone(),
            meta: ex.meta.clone(),
        };
        serde_json::to_writer(&mut out, &d)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(path)
}

pub fn read_examples(dir: impl AsRef<Path>) -> Result<Vec<TrainingExample>> {
    let dir = dir.as_ref();
    let f = BufReader::new(fs::File::open(dir.join(EXAMPLES_FILE))?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let d: ExampleDescriptor = serde_json::from_str(&line)?;
        out.push(TrainingExample {
            features: read_features(dir.join(&d.features))?,
            keyword: d.keyword,
            target: d.target,
            meta: d.meta,
        });
    }
    Ok(out)
}
