#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use dokt_core::sampler::{RoundConfig, Strategy};
use dokt_core::synthetic::{write_synthetic, SyntheticConfig};
use dokt_core::trainer::TrainConfig;
use dokt_core::uncertainty::HeadConfig;
use dokt_core::Dataset;

pub fn small_dataset(dir: &Path) -> Arc<Dataset> {
    let cfg = SyntheticConfig {
        n_samples: 300,
        n_classes: 3,
        dim: 8,
        tokens: 2,
        seed: 7,
        ..Default::default()
    };
    let manifest = write_synthetic(dir, &cfg).unwrap();
    Arc::new(Dataset::open(&manifest).unwrap())
}

pub fn small_config(strategy: Strategy) -> RoundConfig {
    RoundConfig {
        m_per_round: 4,
        rounds: 3,
        strategy,
        seed: 11,
        initial_fraction: 0.05,
        trainer: TrainConfig {
            epochs: 10,
            hidden_units: 16,
            ..Default::default()
        },
        head: HeadConfig {
            epochs: 10,
            hidden_units: 8,
            ..Default::default()
        },
        ..Default::default()
    }
}
