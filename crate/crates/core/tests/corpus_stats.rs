use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tcasr::corpus::{generate_corpus, mix_weighted, select_keyword, SyntheticCorpusConfig};
use tcasr::frontend::FeatureMatrix;

#[test]
fn sampled_mixing_weights_are_uniform_on_the_range() {
    let a = FeatureMatrix::new(2, 3, vec![1.0; 6]).unwrap();
    let b = FeatureMatrix::new(3, 3, vec![2.0; 9]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut all = Vec::new();
    for _ in 0..10_000 {
        let (m, w1, w2) = mix_weighted(&a, &b, &mut rng).unwrap();
        assert_eq!(m.num_frames(), 3);
        assert!((m.row(0)[0] - (w1 + 2.0 * w2)).abs() < 1e-12);
        assert!((m.row(2)[0] - 2.0 * w2).abs() < 1e-12);
        all.extend([w1, w2]);
    }
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    assert!(all.iter().all(|w| (0.1..=0.9).contains(w)));
    assert!((mean - 0.5).abs() < 0.01, "{mean}");
}

#[test]
fn keyword_start_is_uniform() {
    let corpus = generate_corpus(&SyntheticCorpusConfig { n_utterances: 40, ..Default::default() }).unwrap();
    let u = corpus.utterances.iter().find(|u| u.words.len() == 5).expect("a five-word utterance");
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut counts = [0usize; 3];
    for _ in 0..10_000 {
        let kw = select_keyword(u, 3, &mut rng).unwrap();
        counts[kw.words.0] += 1;
        let expected: Vec<usize> = u.phones[u.words[kw.words.0].start..u.words[kw.words.1 - 1].end].to_vec();
        assert_eq!(kw.phones, expected);
    }
    for c in counts {
        assert!((c as f64 / 10_000.0 - 1.0 / 3.0).abs() < 0.02, "{counts:?}");
    }
    let full = select_keyword(u, 5, &mut rng).unwrap();
    assert_eq!(full.phones, u.phones);
}

#[test]
fn cross_speaker_distance_follows_signature_strength() {
    let cfg = SyntheticCorpusConfig {
        n_speakers: 40,
        n_utterances: 160,
        timbre: 0.0,
        noise_level: 0.0,
        signature_strength: 0.7,
        ..Default::default()
    };
    let corpus = generate_corpus(&cfg).unwrap();
    // First frame of each (speaker, phone) occurrence.
    let mut frames: Vec<Vec<Option<Vec<f64>>>> = vec![vec![None; cfg.phone_set_size + 1]; cfg.n_speakers];
    for u in &corpus.utterances {
        for (p, &(start, _)) in u.phones.iter().zip(&u.alignment) {
            frames[u.speaker_id][*p].get_or_insert_with(|| u.features.row(start).to_vec());
        }
    }
    let mut dists = Vec::new();
    for p in 1..=cfg.phone_set_size {
        for a in 0..cfg.n_speakers {
            for b in a + 1..cfg.n_speakers {
                if let (Some(x), Some(y)) = (&frames[a][p], &frames[b][p]) {
                    dists.push(x.iter().zip(y).map(|(i, j)| (i - j).powi(2)).sum::<f64>().sqrt());
                }
            }
        }
    }
    let mean = dists.iter().sum::<f64>() / dists.len() as f64;
    let expected = 2f64.sqrt() * cfg.signature_strength * (cfg.feature_dim as f64).sqrt();
    assert!(dists.len() > 100);
    assert!((mean / expected - 1.0).abs() < 0.05, "mean {mean}, expected {expected}");
}
