#![allow(dead_code)]

use dokt_core::rng::{seeded_rng, StreamRng};
use dokt_core::synthetic::{generate, SyntheticConfig};
use dokt_core::{Dataset, Label, Manifest, PoolState, PretextSpace, SampleId};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> StreamRng {
    seeded_rng(seed, "tests")
}

pub fn gaussian_vec(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Random point on the probability simplex with `c` entries.
pub fn simplex(rng: &mut impl Rng, c: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..c).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / z).collect()
}

/// Rows on a coarse integer grid so that cosines (and hence scores) tie.
pub fn quantized_rows(rng: &mut impl Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| loop {
            let row: Vec<f64> = (0..dim).map(|_| rng.random_range(-2i32..=2) as f64).collect();
            if row.iter().any(|&v| v != 0.0) {
                break row;
            }
        })
        .collect()
}

/// Labels `n_labeled` random ids of `[0, n)` with random classes.
pub fn random_pool(rng: &mut impl Rng, n: usize, n_labeled: usize, n_classes: usize) -> PoolState {
    let ids = rand::seq::index::sample(rng, n, n_labeled).into_vec();
    let labeled: Vec<(SampleId, Label)> = ids
        .into_iter()
        .map(|i| (SampleId(i), Label(rng.random_range(0..n_classes))))
        .collect();
    PoolState::new(n, labeled, n).unwrap()
}

pub fn space(rows: &[Vec<f64>]) -> PretextSpace {
    PretextSpace::from_rows(rows).unwrap()
}

/// A small in-memory synthetic dataset.
pub fn dataset(cfg: &SyntheticConfig) -> Dataset {
    let (embeddings, labels) = generate(cfg).unwrap();
    let manifest = Manifest::new(cfg.n_samples, cfg.n_classes, cfg.tokens, cfg.dim, "e.bin", "l.csv");
    Dataset::from_parts(manifest, embeddings, labels).unwrap()
}

pub fn small_synthetic(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        n_samples: 120,
        n_classes: 3,
        dim: 6,
        tokens: 2,
        modes_per_class: 3,
        noise: 0.9,
        seed,
        ..Default::default()
    }
}

/// Relative error `|a - b| / (|a| + |b|)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
