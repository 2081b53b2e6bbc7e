//! Labeled/unlabeled pool bookkeeping.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{DoktError, Result};

/// Dense sample index, stable for the lifetime of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SampleId(pub usize);

impl SampleId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Class index in `[0, C)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Label(pub usize);

impl Label {
    pub fn class(self) -> usize {
        self.0
    }
}

/// Partition of the selectable ids `[0, n)` into a labeled and an unlabeled
/// pool, plus the annotation budget.
///
/// Held-out evaluation ids are not part of the pool; see
/// [`crate::dataset::Dataset::pool_size`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolState {
    n_ids: usize,
    labeled: BTreeMap<SampleId, Label>,
    unlabeled: BTreeSet<SampleId>,
    initial_labeled: usize,
    pub round: usize,
    pub budget_total: usize,
    pub budget_used: usize,
}

impl PoolState {
    /// Builds a pool over `[0, n_ids)` where `initial` are already labeled.
    pub fn new(
        n_ids: usize,
        initial: impl IntoIterator<Item = (SampleId, Label)>,
        budget_total: usize,
    ) -> Result<Self> {
        let mut labeled = BTreeMap::new();
        for (id, label) in initial {
            if id.0 >= n_ids {
                return Err(DoktError::UnknownSample(id.0));
            }
            if labeled.insert(id, label).is_some() {
                return Err(DoktError::Config(format!("sample {id} labeled twice")));
            }
        }
        let unlabeled = (0..n_ids)
            .map(SampleId)
            .filter(|id| !labeled.contains_key(id))
            .collect();
        let initial_labeled = labeled.len();
        Ok(Self {
            n_ids,
            labeled,
            unlabeled,
            initial_labeled,
            round: 0,
            budget_total,
            budget_used: 0,
        })
    }

    pub fn n_ids(&self) -> usize {
        self.n_ids
    }

    pub fn labeled(&self) -> &BTreeMap<SampleId, Label> {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &BTreeSet<SampleId> {
        &self.unlabeled
    }

    pub fn labeled_ids(&self) -> Vec<SampleId> {
        self.labeled.keys().copied().collect()
    }

    pub fn unlabeled_ids(&self) -> Vec<SampleId> {
        self.unlabeled.iter().copied().collect()
    }

    pub fn label_of(&self, id: SampleId) -> Option<Label> {
        self.labeled.get(&id).copied()
    }

    pub fn is_unlabeled(&self, id: SampleId) -> bool {
        self.unlabeled.contains(&id)
    }

    pub fn initial_labeled(&self) -> usize {
        self.initial_labeled
    }

    pub fn budget_remaining(&self) -> usize {
        self.budget_total - self.budget_used
    }

    /// Moves `id` from the unlabeled to the labeled pool, consuming one unit
    /// of budget.
    pub fn assign(&mut self, id: SampleId, label: Label) -> Result<()> {
        if id.0 >= self.n_ids {
            return Err(DoktError::UnknownSample(id.0));
        }
        if self.budget_used >= self.budget_total {
            return Err(DoktError::Config("label budget exhausted".into()));
        }
        if !self.unlabeled.remove(&id) {
            return Err(DoktError::Config(format!("sample {id} is already labeled")));
        }
        self.labeled.insert(id, label);
        self.budget_used += 1;
        debug_assert!(self.check_invariants().is_ok());
        Ok(())
    }

    /// Verifies disjointness, exhaustiveness and budget accounting.
    pub fn check_invariants(&self) -> Result<()> {
        if self.labeled.keys().any(|id| self.unlabeled.contains(id)) {
            return Err(DoktError::Config("labeled and unlabeled overlap".into()));
        }
        if self.labeled.len() + self.unlabeled.len() != self.n_ids {
            return Err(DoktError::Config("pools do not cover every id".into()));
        }
        if self.budget_used > self.budget_total {
            return Err(DoktError::Config("budget overspent".into()));
        }
        if self.budget_used != self.labeled.len() - self.initial_labeled {
            return Err(DoktError::Config("budget accounting drifted".into()));
        }
        Ok(())
    }
}
