//! A loaded dataset: embeddings, the pretext space, the pool/evaluation split
//! and the ground truth behind the simulated oracle.

use std::path::Path;

use crate::embedding::{Embeddings, PretextSpace};
use crate::error::{DoktError, Result};
use crate::manifest::{load_labels, load_manifest, Manifest};
use crate::pool::{Label, SampleId};

/// Fraction of ids (taken from the end of the id range) held out for
/// evaluating the target model.
pub const EVAL_FRACTION: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct Dataset {
    manifest: Manifest,
    embeddings: Embeddings,
    space: PretextSpace,
    truth: Vec<Label>,
    pool_size: usize,
}

impl Dataset {
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let manifest = load_manifest(manifest_path)?;
        let embeddings = Embeddings::load(&manifest.embeddings_file())?;
        let truth = load_labels(&manifest.labels_file(), manifest.n_samples, manifest.n_classes)?;
        Self::from_parts(manifest, embeddings, truth)
    }

    pub fn from_parts(manifest: Manifest, embeddings: Embeddings, truth: Vec<Label>) -> Result<Self> {
        if embeddings.len() != manifest.n_samples || truth.len() != manifest.n_samples {
            return Err(DoktError::DimensionMismatch {
                field: "n_samples",
                declared: manifest.n_samples as u64,
                found: embeddings.len() as u64,
            });
        }
        if let Some(l) = truth.iter().find(|l| l.0 >= manifest.n_classes) {
            return Err(DoktError::LabelRange {
                class: l.0,
                n_classes: manifest.n_classes,
            });
        }
        let n = manifest.n_samples;
        if n < 2 {
            return Err(DoktError::Config("dataset needs at least 2 samples".into()));
        }
        let n_eval = ((n as f64 * EVAL_FRACTION).round() as usize).clamp(1, n - 1);
        let space = PretextSpace::from_embeddings(&embeddings);
        Ok(Self {
            manifest,
            embeddings,
            space,
            truth,
            pool_size: n - n_eval,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn embeddings(&self) -> &Embeddings {
        &self.embeddings
    }

    pub fn space(&self) -> &PretextSpace {
        &self.space
    }

    pub fn n_classes(&self) -> usize {
        self.manifest.n_classes
    }

    /// Ids `[0, pool_size)` form the selectable pool.
    pub fn pool_size(&self) -> usize {
        self.pool_size
    }

    /// Held-out ids with their labels, used only to score the target model.
    pub fn eval_set(&self) -> Vec<(SampleId, Label)> {
        (self.pool_size..self.manifest.n_samples)
            .map(|i| (SampleId(i), self.truth[i]))
            .collect()
    }

    /// A simulated oracle answering from the ground-truth label file.
    pub fn oracle(&self) -> SimulatedOracle<'_> {
        SimulatedOracle {
            truth: &self.truth[..self.pool_size],
        }
    }
}

/// Label source for a round.
pub trait Oracle {
    /// Returns the annotation for `id`, or `None` if it is not available yet.
    fn label(&mut self, id: SampleId) -> Option<Label>;
}

#[derive(Debug, Clone, Copy)]
pub struct SimulatedOracle<'a> {
    truth: &'a [Label],
}

impl Oracle for SimulatedOracle<'_> {
    fn label(&mut self, id: SampleId) -> Option<Label> {
        self.truth.get(id.0).copied()
    }
}
