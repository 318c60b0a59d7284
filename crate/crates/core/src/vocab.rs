//! Phone vocabulary: blank, phones, and the two pivot tokens.

use serde::{Deserialize, Serialize};

use crate::ctc::BLANK;
use crate::error::{Error, Result};

/// Layout: `0` is blank, `1..=n_phones` are phones, then `<IPH>`, `<IPT>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhoneVocab {
    n_phones: usize,
}

impl PhoneVocab {
    pub fn new(n_phones: usize) -> Result<Self> {
        if n_phones == 0 {
            return Err(Error::Config("vocabulary needs at least one phone".into()));
        }
        Ok(Self { n_phones })
    }

    pub fn n_phones(&self) -> usize {
        self.n_phones
    }

    pub fn blank(&self) -> usize {
        BLANK
    }

    /// Vocabulary id of phone `p` (0-based phone index).
    pub fn phone(&self, p: usize) -> usize {
        debug_assert!(p < self.n_phones);
        p + 1
    }

    pub fn iph(&self) -> usize {
        self.n_phones + 1
    }

    pub fn ipt(&self) -> usize {
        self.n_phones + 2
    }

    /// Blank + phones + 2 pivots.
    pub fn size(&self) -> usize {
        self.n_phones + 3
    }

    pub fn is_pivot(&self, id: usize) -> bool {
        id == self.iph() || id == self.ipt()
    }

    pub fn is_phone(&self, id: usize) -> bool {
        id >= 1 && id <= self.n_phones
    }

    pub fn strip_pivots(&self, ids: &[usize]) -> Vec<usize> {
        ids.iter().copied().filter(|&i| !self.is_pivot(i)).collect()
    }

    pub fn symbol(&self, id: usize) -> String {
        match id {
            BLANK => "-".to_string(),
            i if i == self.iph() => "<IPH>".to_string(),
            i if i == self.ipt() => "<IPT>".to_string(),
            i => format!("p{}", i - 1),
        }
    }

    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.symbol(i)).collect::<Vec<_>>().join(" ")
    }
}
