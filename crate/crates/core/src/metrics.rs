//! Phone error rate via unit-cost Levenshtein alignment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::PhoneVocab;

/// Edit counts between a hypothesis and a reference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// Error rate in percent. Exceeds 100 when insertions dominate.
    pub fn per(&self) -> f64 {
        if self.ref_len == 0 {
            return 0.0;
        }
        100.0 * self.errors() as f64 / self.ref_len as f64
    }

    pub fn merge(&mut self, other: &EditCounts) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.ref_len += other.ref_len;
    }
}

/// Minimum-cost alignment counts. Among equal-cost alignments, prefers
/// substitutions, then deletions, then insertions.
pub fn edit_counts(hyp: &[usize], reference: &[usize]) -> EditCounts {
    let n = reference.len();
    let m = hyp.len();
    // cell = (cost, subs, dels, ins)
    let mut prev: Vec<(usize, usize, usize, usize)> = (0..=m).map(|j| (j, 0, 0, j)).collect();
    let mut cur = vec![(0, 0, 0, 0); m + 1];
    for i in 1..=n {
        cur[0] = (i, 0, i, 0);
        for j in 1..=m {
            let diag = prev[j - 1];
            let sub = if reference[i - 1] == hyp[j - 1] {
                diag
            } else {
                (diag.0 + 1, diag.1 + 1, diag.2, diag.3)
            };
            let del = (prev[j].0 + 1, prev[j].1, prev[j].2 + 1, prev[j].3);
            let ins = (cur[j - 1].0 + 1, cur[j - 1].1, cur[j - 1].2, cur[j - 1].3 + 1);
            let mut best = sub;
            if del.0 < best.0 {
                best = del;
            }
            if ins.0 < best.0 {
                best = ins;
            }
            cur[j] = best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let (_, substitutions, deletions, insertions) = prev[m];
    EditCounts {
        substitutions,
        deletions,
        insertions,
        ref_len: n,
    }
}

/// Scores `hyp` against `reference`, optionally dropping pivot tokens from
/// both first.
pub fn score(
    hyp: &[usize],
    reference: &[usize],
    vocab: &PhoneVocab,
    strip_pivots: bool,
) -> Result<EditCounts> {
    let (h, r) = if strip_pivots {
        (vocab.strip_pivots(hyp), vocab.strip_pivots(reference))
    } else {
        (hyp.to_vec(), reference.to_vec())
    };
    if r.is_empty() {
        return Err(Error::Scoring("reference is empty".into()));
    }
    Ok(edit_counts(&h, &r))
}

/// Phone error rate in percent.
pub fn per(hyp: &[usize], reference: &[usize], vocab: &PhoneVocab, strip_pivots: bool) -> Result<f64> {
    score(hyp, reference, vocab, strip_pivots).map(|c| c.per())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_checked() {
        let v = PhoneVocab::new(8).unwrap();
        assert_eq!(per(&[1, 2, 3], &[1, 2, 3], &v, true).unwrap(), 0.0);
        assert_eq!(per(&[], &[1, 2, 3, 4], &v, true).unwrap(), 100.0);
        let p = per(&[1, 7, 3], &[1, 2, 3], &v, true).unwrap();
        assert!((p - 100.0 / 3.0).abs() < 1e-12);
        let c = edit_counts(&[1, 7, 3], &[1, 2, 3]);
        assert_eq!((c.substitutions, c.deletions, c.insertions), (1, 0, 0));
    }

    #[test]
    fn pivots_are_stripped_by_request() {
        let v = PhoneVocab::new(4).unwrap();
        let r = [v.iph(), 1, 2, v.ipt(), 3];
        assert_eq!(per(&[1, 2, 3], &r, &v, true).unwrap(), 0.0);
        assert!(per(&[1, 2, 3], &r, &v, false).unwrap() > 0.0);
    }

    #[test]
    fn empty_reference_is_an_error() {
        let v = PhoneVocab::new(4).unwrap();
        assert!(matches!(per(&[1], &[], &v, false), Err(Error::Scoring(_))));
        assert!(matches!(
            per(&[1], &[v.iph(), v.ipt()], &v, true),
            Err(Error::Scoring(_))
        ));
    }

    #[test]
    fn insertions_push_past_100() {
        let v = PhoneVocab::new(8).unwrap();
        let r = [1, 2, 3];
        let doubled = [4, 5, 6, 4, 5, 6];
        assert!(per(&doubled, &r, &v, false).unwrap() > 100.0);
    }
}
