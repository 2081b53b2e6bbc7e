//! Seeded Gaussian-mixture datasets in the on-disk layout the engine reads.
//!
//! Each class owns a few sub-cluster centers; a sample draws one of its
//! class's centers, adds isotropic noise to get a latent vector, and every
//! token is the latent plus independent token noise.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::Embeddings;
use crate::error::{DoktError, Result};
use crate::manifest::{write_label_rows, Manifest};
use crate::pool::{Label, SampleId};
use crate::rng::seeded_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_samples: usize,
    pub n_classes: usize,
    pub dim: usize,
    pub tokens: usize,
    pub modes_per_class: usize,
    /// Standard deviation of sub-cluster centers around the origin.
    pub center_scale: f64,
    /// Within-mode standard deviation of the latent vector.
    pub noise: f64,
    /// Per-token standard deviation around the latent vector.
    pub token_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            n_classes: 10,
            dim: 32,
            tokens: 4,
            modes_per_class: 5,
            center_scale: 1.0,
            noise: 0.4,
            token_noise: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 || self.n_classes < 2 || self.dim < 2 || self.tokens == 0 {
            return Err(DoktError::Config(
                "synthetic data needs n >= 2, C >= 2, d >= 2, T >= 1".into(),
            ));
        }
        if self.modes_per_class == 0 {
            return Err(DoktError::Config("modes_per_class must be positive".into()));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Generates embeddings and labels in memory.
pub fn generate(cfg: &SyntheticConfig) -> Result<(Embeddings, Vec<Label>)> {
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed, "synthetic");
    let centers: Vec<Vec<f64>> = (0..cfg.n_classes * cfg.modes_per_class)
        .map(|_| (0..cfg.dim).map(|_| cfg.center_scale * gaussian(&mut rng)).collect())
        .collect();
    let mut labels = Vec::with_capacity(cfg.n_samples);
    let mut values = Vec::with_capacity(cfg.n_samples * cfg.tokens * cfg.dim);
    for _ in 0..cfg.n_samples {
        let class = rng.random_range(0..cfg.n_classes);
        let mode = rng.random_range(0..cfg.modes_per_class);
        let center = &centers[class * cfg.modes_per_class + mode];
        let latent: Vec<f64> = center.iter().map(|c| c + cfg.noise * gaussian(&mut rng)).collect();
        for _ in 0..cfg.tokens {
            values.extend(latent.iter().map(|l| (l + cfg.token_noise * gaussian(&mut rng)) as f32));
        }
        labels.push(Label(class));
    }
    let embeddings = Embeddings::new(cfg.n_samples, cfg.tokens, cfg.dim, values)?;
    Ok((embeddings, labels))
}

/// Writes `manifest.json`, `embeddings.bin` and `labels.csv` into `dir` and
/// returns the manifest path.
pub fn write_synthetic(dir: &Path, cfg: &SyntheticConfig) -> Result<PathBuf> {
    let (embeddings, labels) = generate(cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| DoktError::io(dir, e))?;
    embeddings.save(&dir.join("embeddings.bin"))?;
    write_label_rows(
        &dir.join("labels.csv"),
        labels.iter().enumerate().map(|(i, &l)| (SampleId(i), l)),
    )?;
    let manifest = Manifest::new(
        cfg.n_samples,
        cfg.n_classes,
        cfg.tokens,
        cfg.dim,
        "embeddings.bin",
        "labels.csv",
    );
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}
