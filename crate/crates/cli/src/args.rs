use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dokt_core::diversity::{DiversityConfig, DiversityOrder};
use dokt_core::sampler::{RoundConfig, Strategy, DEFAULT_INITIAL_FRACTION, DEFAULT_RHO};
use dokt_core::synthetic::SyntheticConfig;
use dokt_core::trainer::{PairRule, TrainConfig};
use dokt_core::uncertainty::{HeadConfig, HeadLoss, RankingSign};

fn trainer_defaults() -> TrainConfig {
    TrainConfig::default()
}

fn head_defaults() -> HeadConfig {
    HeadConfig::default()
}

fn synthetic_defaults() -> SyntheticConfig {
    SyntheticConfig::default()
}

#[derive(Debug, Parser)]
#[command(name = "dokt", version, about = "Pool-based active learning with traceback diversity and domain uncertainty")]
pub struct Cli {
    /// Worker threads for scoring (defaults to all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run simulated active-learning benchmarks and write JSON-lines reports.
    Simulate(SimulateArgs),
    /// Score the unlabeled pool once and write the selected ids.
    Select(SelectArgs),
    /// Host a human-oracle labeling session over HTTP.
    Serve(ServeArgs),
    /// Build the labels-to-target table from report files.
    Report(ReportArgs),
    /// Write a seeded Gaussian-mixture manifest, embeddings and labels.
    GenSynthetic(GenSyntheticArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated strategies.
    #[arg(long, value_delimiter = ',', default_value = "dokt")]
    pub strategy: Vec<Strategy>,
    /// Number of seeds; runs use seeds `seed .. seed + seeds`.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for report files.
    #[arg(long, default_value = "reports")]
    pub out: PathBuf,
    /// Also write per-round score tables under `<out>/scores`.
    #[arg(long)]
    pub dump_scores: bool,
    #[command(flatten)]
    pub round: RoundArgs,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// CSV `id,class` describing the current labeled pool.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value = "dokt")]
    pub strategy: Strategy,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Round index used to derive per-round seeds.
    #[arg(long, default_value_t = 1)]
    pub round_index: usize,
    #[arg(long, default_value = "selected.csv")]
    pub out: PathBuf,
    #[command(flatten)]
    pub round: RoundArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Directory holding the session checkpoint; an existing checkpoint is
    /// resumed.
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    #[arg(long, default_value = "dokt")]
    pub strategy: Strategy,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub round: RoundArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory of `<strategy>_seed<N>.jsonl` files.
    #[arg(long)]
    pub reports: PathBuf,
    /// Fixed target accuracy.
    #[arg(long, conflicts_with = "target_strategy")]
    pub target: Option<f64>,
    /// Use this strategy's final accuracy, seed by seed, as the target.
    #[arg(long, default_value = "random")]
    pub target_strategy: String,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenSyntheticArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = synthetic_defaults().n_samples)]
    pub n_samples: usize,
    #[arg(long, default_value_t = synthetic_defaults().n_classes)]
    pub n_classes: usize,
    #[arg(long, default_value_t = synthetic_defaults().dim)]
    pub dim: usize,
    #[arg(long, default_value_t = synthetic_defaults().tokens)]
    pub tokens: usize,
    #[arg(long, default_value_t = synthetic_defaults().modes_per_class)]
    pub modes_per_class: usize,
    #[arg(long, default_value_t = synthetic_defaults().center_scale)]
    pub center_scale: f64,
    #[arg(long, default_value_t = synthetic_defaults().noise)]
    pub noise: f64,
    #[arg(long, default_value_t = synthetic_defaults().token_noise)]
    pub token_noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl GenSyntheticArgs {
    pub fn config(&self) -> SyntheticConfig {
        SyntheticConfig {
            n_samples: self.n_samples,
            n_classes: self.n_classes,
            dim: self.dim,
            tokens: self.tokens,
            modes_per_class: self.modes_per_class,
            center_scale: self.center_scale,
            noise: self.noise,
            token_noise: self.token_noise,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Default)]
pub enum OrderArg {
    #[default]
    Ascending,
    Descending,
}

#[derive(Debug, Clone, Copy, ValueEnum, Default)]
pub enum PairRuleArg {
    #[default]
    Close,
    Literal,
}

#[derive(Debug, Clone, Copy, ValueEnum, Default)]
pub enum HeadLossArg {
    #[default]
    Ranking,
    Mse,
    LearningLoss,
}

#[derive(Debug, Clone, Copy, ValueEnum, Default)]
pub enum SignArg {
    #[default]
    Agreeing,
    Literal,
}

/// Round-engine settings shared by simulate, select and serve.
#[derive(Debug, Args)]
pub struct RoundArgs {
    /// Samples queried per round.
    #[arg(long, default_value_t = 20)]
    pub m: usize,
    #[arg(long, default_value_t = 15)]
    pub rounds: usize,
    /// Label budget beyond the initial pool (default: rounds * m).
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_INITIAL_FRACTION)]
    pub initial_fraction: f64,
    /// Token fraction replaced when perturbing.
    #[arg(long, default_value_t = DEFAULT_RHO)]
    pub rho: f64,
    /// Neighbor cap for the traceback search (default: 1% of the labeled pool, at least 1).
    #[arg(long)]
    pub l_cap: Option<usize>,
    #[arg(long, value_enum, default_value_t)]
    pub diversity_order: OrderArg,
    #[arg(long, default_value_t = trainer_defaults().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = trainer_defaults().hidden_units)]
    pub hidden_units: usize,
    #[arg(long, default_value_t = trainer_defaults().learning_rate)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = trainer_defaults().batch_size)]
    pub batch_size: usize,
    /// Disable intra-class mixing when training the selection model.
    #[arg(long)]
    pub no_mix: bool,
    #[arg(long, default_value_t = trainer_defaults().mix_lambda)]
    pub mix_lambda: f64,
    #[arg(long, value_enum, default_value_t)]
    pub pair_rule: PairRuleArg,
    #[arg(long, default_value_t = head_defaults().epochs)]
    pub head_epochs: usize,
    #[arg(long, default_value_t = head_defaults().hidden_units)]
    pub head_hidden_units: usize,
    #[arg(long, default_value_t = head_defaults().learning_rate)]
    pub head_learning_rate: f64,
    #[arg(long, default_value_t = head_defaults().batch_pairs)]
    pub head_batch_pairs: usize,
    /// Ranking-loss margin.
    #[arg(long, default_value_t = head_defaults().margin)]
    pub margin: f64,
    #[arg(long, value_enum, default_value_t)]
    pub head_loss: HeadLossArg,
    #[arg(long, value_enum, default_value_t)]
    pub ranking_sign: SignArg,
    /// Token-mixed copies of each labeled sample added to the head's training set.
    #[arg(long, default_value_t = head_defaults().mixes_per_sample)]
    pub head_mixes: usize,
    /// Token fraction swapped in those copies.
    #[arg(long, default_value_t = head_defaults().mix_ratio)]
    pub head_mix_ratio: f64,
}

impl RoundArgs {
    pub fn config(&self, strategy: Strategy, seed: u64) -> RoundConfig {
        RoundConfig {
            m_per_round: self.m,
            rounds: self.rounds,
            strategy,
            seed,
            initial_fraction: self.initial_fraction,
            budget: self.budget,
            trainer: TrainConfig {
                learning_rate: self.learning_rate,
                epochs: self.epochs,
                batch_size: self.batch_size,
                hidden_units: self.hidden_units,
                seed,
                mix_enabled: !self.no_mix,
                mix_lambda: self.mix_lambda,
                pair_rule: match self.pair_rule {
                    PairRuleArg::Close => PairRule::Close,
                    PairRuleArg::Literal => PairRule::Literal,
                },
            },
            head: HeadConfig {
                hidden_units: self.head_hidden_units,
                learning_rate: self.head_learning_rate,
                epochs: self.head_epochs,
                batch_pairs: self.head_batch_pairs,
                margin: self.margin,
                loss: match self.head_loss {
                    HeadLossArg::Ranking => HeadLoss::Ranking,
                    HeadLossArg::Mse => HeadLoss::Mse,
                    HeadLossArg::LearningLoss => HeadLoss::LearningLoss,
                },
                sign: match self.ranking_sign {
                    SignArg::Agreeing => RankingSign::Agreeing,
                    SignArg::Literal => RankingSign::Literal,
                },
                mixes_per_sample: self.head_mixes,
                mix_ratio: self.head_mix_ratio,
                seed,
            },
            rho: self.rho,
            diversity: DiversityConfig {
                order: match self.diversity_order {
                    OrderArg::Ascending => DiversityOrder::Ascending,
                    OrderArg::Descending => DiversityOrder::Descending,
                },
                l_cap: self.l_cap,
            },
        }
    }
}
