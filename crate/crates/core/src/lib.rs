//! Pool-based active learning that combines traceback diversity over a
//! pretext embedding space with a learned, perturbation-aware uncertainty
//! estimate.
//!
//! The crate is organised bottom-up:
//!
//! - [`embedding`], [`manifest`], [`dataset`]: file formats and ingestion.
//! - [`pool`], [`similarity`], [`rng`]: shared bookkeeping and primitives.
//! - [`trainer`]: the downstream classification head and intra-class mixing.
//! - [`diversity`]: neighbor traceback and the diversity score.
//! - [`uncertainty`]: the uncertainty score, the ranking-loss head and the
//!   mixing/masking divergence.
//! - [`sampler`]: the round engine, baselines and label-efficiency reports.
//! - [`synthetic`]: seeded Gaussian-mixture datasets for tests and demos.

pub mod dataset;
pub mod diversity;
pub mod embedding;
pub mod error;
pub mod manifest;
mod nn;
pub mod pool;
pub mod rng;
pub mod sampler;
pub mod similarity;
pub mod synthetic;
pub mod trainer;
pub mod uncertainty;

pub use dataset::Dataset;
pub use embedding::{Embeddings, PretextSpace, TokenEmbedding};
pub use error::{DoktError, Result};
pub use manifest::Manifest;
pub use pool::{Label, PoolState, SampleId};
