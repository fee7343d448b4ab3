//! DIF detection methods: RMSD item fit, the Wald-1 test with Wald-2 anchor
//! selection, and the observed-score GLR and GMH tests.

pub mod rmsd;
pub mod scorebased;
pub mod wald;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorSource {
    Wald2,
    FallbackSecondHalf,
    Supplied,
}

/// Items held equal across groups; every other item is studied.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorSet {
    /// Sorted item indices.
    pub items: Vec<usize>,
    pub source: AnchorSource,
}

impl AnchorSet {
    pub fn new(mut items: Vec<usize>, source: AnchorSource, n_items: usize) -> Result<Self> {
        items.sort_unstable();
        items.dedup();
        if items.is_empty() {
            return Err(Error::Config("anchor set is empty".into()));
        }
        if items.len() >= n_items {
            return Err(Error::Config("anchor set leaves no item to study".into()));
        }
        if let Some(&j) = items.iter().find(|&&j| j >= n_items) {
            return Err(Error::Config(format!("anchor item {j} out of range")));
        }
        Ok(AnchorSet { items, source })
    }

    /// Items `n_items / 2 .. n_items` (15..29 in one-based terms for 29 items).
    pub fn second_half(n_items: usize) -> Self {
        AnchorSet {
            items: (n_items / 2..n_items).collect(),
            source: AnchorSource::FallbackSecondHalf,
        }
    }

    pub fn contains(&self, item: usize) -> bool {
        self.items.binary_search(&item).is_ok()
    }

    pub fn studied(&self, n_items: usize) -> Vec<usize> {
        (0..n_items).filter(|j| !self.contains(*j)).collect()
    }
}
