//! Keyword sampling and pivot-token labeling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Utterance;
use crate::error::{Error, Result};
use crate::vocab::PhoneVocab;

/// A contiguous run of words sampled from an utterance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Keyword {
    pub phones: Vec<usize>,
    /// Half-open range of phone positions inside the utterance's transcription.
    pub span: (usize, usize),
    /// Half-open range of word positions.
    pub words: (usize, usize),
}

/// Picks a uniformly random contiguous `n_words` span of `u`.
pub fn select_keyword(u: &Utterance, n_words: usize, rng: &mut impl Rng) -> Result<Keyword> {
    if n_words == 0 {
        return Err(Error::Config("keyword must have at least one word".into()));
    }
    if u.words.len() < n_words {
        return Err(Error::DegenerateInput(format!(
            "utterance {} has {} words, keyword needs {n_words}",
            u.id,
            u.words.len()
        )));
    }
    let first = rng.random_range(0..=u.words.len() - n_words);
    let last = first + n_words - 1;
    let span = (u.words[first].start, u.words[last].end);
    Ok(Keyword {
        phones: u.phones[span.0..span.1].to_vec(),
        span,
        words: (first, first + n_words),
    })
}

/// Wraps the keyword in `IPH … IPT` and inserts the same pair around `span`
/// in the target. With `enabled = false` both are returned unchanged.
pub fn add_pivots(
    keyword: &[usize],
    target: &[usize],
    span: (usize, usize),
    vocab: &PhoneVocab,
    enabled: bool,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let (s, e) = span;
    if s > e || e > target.len() {
        return Err(Error::Index(format!(
            "span ({s}, {e}) out of bounds for target of length {}",
            target.len()
        )));
    }
    if target[s..e] != *keyword {
        return Err(Error::Input(format!("target[{s}..{e}] does not match the keyword")));
    }
    if !enabled {
        return Ok((keyword.to_vec(), target.to_vec()));
    }
    let mut kw = Vec::with_capacity(keyword.len() + 2);
    kw.push(vocab.iph());
    kw.extend_from_slice(keyword);
    kw.push(vocab.ipt());
    let mut tg = Vec::with_capacity(target.len() + 2);
    tg.extend_from_slice(&target[..s]);
    tg.push(vocab.iph());
    tg.extend_from_slice(&target[s..e]);
    tg.push(vocab.ipt());
    tg.extend_from_slice(&target[e..]);
    Ok((kw, tg))
}

pub fn strip_pivots(seq: &[usize], vocab: &PhoneVocab) -> Vec<usize> {
    vocab.strip_pivots(seq)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn insertion_rule() {
        let v = PhoneVocab::new(8).unwrap();
        let p = |i| v.phone(i);
        let (kw, tg) = add_pivots(&[p(3), p(7)], &[p(1), p(3), p(7), p(2)], (1, 3), &v, true).unwrap();
        assert_eq!(kw, vec![v.iph(), p(3), p(7), v.ipt()]);
        assert_eq!(tg, vec![p(1), v.iph(), p(3), p(7), v.ipt(), p(2)]);
        assert_eq!(strip_pivots(&tg, &v), vec![p(1), p(3), p(7), p(2)]);
        let (kw2, tg2) = add_pivots(&[p(3), p(7)], &[p(1), p(3), p(7), p(2)], (1, 3), &v, false).unwrap();
        assert_eq!(kw2, vec![p(3), p(7)]);
        assert_eq!(tg2, vec![p(1), p(3), p(7), p(2)]);
    }

    #[test]
    fn bad_span() {
        let v = PhoneVocab::new(8).unwrap();
        assert!(matches!(add_pivots(&[1], &[1, 2], (1, 3), &v, true), Err(Error::Index(_))));
        assert!(matches!(add_pivots(&[1], &[1, 2], (1, 2), &v, true), Err(Error::Input(_))));
    }

    #[test]
    fn keyword_span_matches_words() {
        let cfg = super::super::SyntheticCorpusConfig { n_utterances: 20, ..Default::default() };
        let corpus = super::super::generate_corpus(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for u in &corpus.utterances {
            let n = u.words.len();
            let full = select_keyword(u, n, &mut rng).unwrap();
            assert_eq!(full.phones, u.phones);
            let k = select_keyword(u, 2, &mut rng).unwrap();
            let cat: Vec<usize> = u.words[k.words.0..k.words.1]
                .iter()
                .flat_map(|w| u.phones[w.start..w.end].iter().copied())
                .collect();
            assert_eq!(k.phones, cat);
            assert!(matches!(select_keyword(u, n + 1, &mut rng), Err(Error::DegenerateInput(_))));
        }
    }
}
