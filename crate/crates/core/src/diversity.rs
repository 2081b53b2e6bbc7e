//! Traceback diversity: find an unlabeled sample's nearest labeled neighbors
//! in the pretext space, read their annotations, and score how concentrated
//! and how close that labeled neighborhood is.
//!
//! For a neighbor prefix of size `iota` the score is
//! `var(V / |V|) * mcos`, where `V` is the similarity-weighted sum of the
//! neighbors' one-hot labels and `mcos` their mean scaled cosine. The prefix
//! size is chosen by enumerating `1..=L` and keeping the minimum. Low scores
//! mean a mixed or distant labeled neighborhood.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::PretextSpace;
use crate::error::{DoktError, Result};
use crate::pool::{PoolState, SampleId};
use crate::similarity::{population_variance, scale_cosine};

/// Labeled neighbors of one query, most similar first.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    pub ids: Vec<SampleId>,
    pub cosines: Vec<f64>,
    pub iota: usize,
}

impl NeighborSet {
    /// The first `iota` neighbors.
    pub fn prefix(&self, iota: usize) -> NeighborSet {
        let iota = iota.min(self.ids.len());
        NeighborSet {
            ids: self.ids[..iota].to_vec(),
            cosines: self.cosines[..iota].to_vec(),
            iota,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracebackScore {
    pub s_trace: f64,
    pub iota: usize,
    pub mcos: f64,
    pub vt: Vec<f64>,
}

/// Which end of the traceback ranking counts as "most diverse".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DiversityOrder {
    /// Lowest score first.
    #[default]
    Ascending,
    /// Highest score first.
    Descending,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiversityConfig {
    pub order: DiversityOrder,
    /// Upper bound on the neighbor count; defaults to 1% of the labeled pool.
    pub l_cap: Option<usize>,
}

/// `max(1, ceil(0.01 * n_labeled))`.
pub fn default_l_cap(n_labeled: usize) -> usize {
    n_labeled.div_ceil(100).max(1)
}

fn by_similarity(a: &(SampleId, f64), b: &(SampleId, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Exact k-nearest labeled neighbors of `x` by pooled-pretext cosine; ties go
/// to the smaller id.
pub fn knn_pretext(space: &PretextSpace, pool: &PoolState, x: SampleId, k: usize) -> Result<NeighborSet> {
    let n_labeled = pool.labeled().len();
    if k == 0 || k > n_labeled {
        return Err(DoktError::NotEnoughLabeled {
            needed: k.max(1),
            have: n_labeled,
        });
    }
    let mut scored: Vec<(SampleId, f64)> = pool
        .labeled()
        .keys()
        .map(|&id| (id, space.cosine(x, id)))
        .collect();
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, by_similarity);
        scored.truncate(k);
    }
    scored.sort_by(by_similarity);
    let (ids, cosines) = scored.into_iter().unzip();
    Ok(NeighborSet { ids, cosines, iota: k })
}

/// Mean scaled cosine over the neighbor set.
pub fn mcosine(nbrs: &NeighborSet) -> f64 {
    if nbrs.cosines.is_empty() {
        return 0.0;
    }
    nbrs.cosines.iter().map(|&c| scale_cosine(c)).sum::<f64>() / nbrs.cosines.len() as f64
}

/// Similarity-weighted sum of the neighbors' one-hot labels.
pub fn traceback_vector(nbrs: &NeighborSet, pool: &PoolState, n_classes: usize) -> Result<Vec<f64>> {
    let mut vt = vec![0.0; n_classes];
    for (&id, &c) in nbrs.ids.iter().zip(&nbrs.cosines) {
        let label = pool.label_of(id).ok_or(DoktError::UnknownSample(id.0))?;
        *vt.get_mut(label.0).ok_or(DoktError::LabelRange {
            class: label.0,
            n_classes,
        })? += scale_cosine(c);
    }
    Ok(vt)
}

/// `var(vt / |vt|) * mcos`, with the variance term taken as 0 when `vt` is
/// the zero vector.
pub fn traceback_objective(vt: &[f64], mcos: f64) -> f64 {
    let n = vt.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 {
        return 0.0;
    }
    let normalized: Vec<f64> = vt.iter().map(|v| v / n).collect();
    population_variance(&normalized) * mcos
}

/// Enumerates every neighbor count in `1..=l_cap` and returns the one with
/// the smallest objective (the smallest count on ties).
pub fn optimize_iota(
    space: &PretextSpace,
    pool: &PoolState,
    x: SampleId,
    n_classes: usize,
    l_cap: usize,
) -> Result<TracebackScore> {
    if pool.labeled().is_empty() {
        return Err(DoktError::EmptyLabeledPool);
    }
    let l_cap = l_cap.clamp(1, pool.labeled().len());
    let nbrs = knn_pretext(space, pool, x, l_cap)?;

    // Prefix sums: each step adds one neighbor's weight to V and to the
    // similarity total.
    let mut vt = vec![0.0; n_classes];
    let mut sim_sum = 0.0;
    let mut best: Option<TracebackScore> = None;
    for (i, (&id, &c)) in nbrs.ids.iter().zip(&nbrs.cosines).enumerate() {
        let label = pool.label_of(id).ok_or(DoktError::UnknownSample(id.0))?;
        let w = scale_cosine(c);
        *vt.get_mut(label.0).ok_or(DoktError::LabelRange {
            class: label.0,
            n_classes,
        })? += w;
        sim_sum += w;
        let iota = i + 1;
        let mcos = sim_sum / iota as f64;
        let objective = traceback_objective(&vt, mcos);
        if best.as_ref().is_none_or(|b| objective < b.s_trace) {
            best = Some(TracebackScore {
                s_trace: objective,
                iota,
                mcos,
                vt: vt.clone(),
            });
        }
    }
    Ok(best.expect("l_cap >= 1"))
}

/// Traceback diversity score of `x` with the default neighbor cap.
pub fn s_trace(space: &PretextSpace, pool: &PoolState, x: SampleId, n_classes: usize) -> Result<TracebackScore> {
    optimize_iota(space, pool, x, n_classes, default_l_cap(pool.labeled().len()))
}

/// Scores every unlabeled sample and orders them most diverse first; ties go
/// to the smaller id.
pub fn rank_by_diversity(
    space: &PretextSpace,
    pool: &PoolState,
    n_classes: usize,
    cfg: &DiversityConfig,
) -> Result<Vec<(SampleId, TracebackScore)>> {
    let l_cap = cfg.l_cap.unwrap_or_else(|| default_l_cap(pool.labeled().len()));
    let ids = pool.unlabeled_ids();
    let mut scored = ids
        .par_iter()
        .map(|&id| optimize_iota(space, pool, id, n_classes, l_cap).map(|s| (id, s)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| {
        let primary = match cfg.order {
            DiversityOrder::Ascending => a.1.s_trace.total_cmp(&b.1.s_trace),
            DiversityOrder::Descending => b.1.s_trace.total_cmp(&a.1.s_trace),
        };
        primary.then(a.0.cmp(&b.0))
    });
    Ok(scored)
}
