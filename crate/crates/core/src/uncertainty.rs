//! Domain-based uncertainty.
//!
//! Three parts feed the final score of an unlabeled sample:
//!
//! 1. [`uncertainty_score`], a closed-form uncertainty of a probability
//!    vector that compares its variance with the smallest variance any
//!    vector sharing its maximum could have ([`max_var`]).
//! 2. An [`UncertaintyHead`] that learns to predict that score from the
//!    downstream model's hidden features, trained with a pairwise
//!    [`ranking_loss`].
//! 3. A perturbation divergence: the sample's tokens are partly replaced by
//!    its nearest labeled pretext neighbor's tokens ("mixed") or by zero
//!    tokens at the same positions ("masked"), and the KL divergence between
//!    the two predictions measures how unstable the prediction is.
//!
//! The domain uncertainty is the head's prediction plus the divergence.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diversity::knn_pretext;
use crate::embedding::{Embeddings, PretextSpace, TokenEmbedding};
use crate::error::{DoktError, Result};
use crate::nn::Mlp;
use crate::pool::{PoolState, SampleId};
use crate::rng::{seeded_rng, StreamRng};
use crate::similarity::population_variance;
use crate::trainer::{mask_tokens, mix_tokens, read_checkpoint, write_checkpoint, CheckpointKind};
use crate::trainer::{DownstreamModel, ProbabilityVector};

/// Floor applied to both distributions before the KL divergence.
pub const KL_EPSILON: f64 = 1e-8;

/// Variances below this are treated as a uniform prediction.
const UNIFORM_VARIANCE: f64 = 1e-12;

/// Variance of the vector that keeps `max(p)` and spreads the remaining
/// mass evenly over the other `C - 1` entries.
pub fn max_var(p: &ProbabilityVector) -> f64 {
    let c = p.len() as f64;
    let m = p.max();
    let rest = (1.0 - m) / (c - 1.0);
    ((1.0 / c - m).powi(2) + (c - 1.0) * (1.0 / c - rest).powi(2)) / c
}

/// `1 - max(p) * max_var(p) / var(p)`, in `[0, 1)`. A uniform `p` (zero
/// variance) scores `1 - 1/C`.
pub fn uncertainty_score(p: &ProbabilityVector) -> f64 {
    let var = population_variance(p.as_slice());
    let m = p.max();
    if var < UNIFORM_VARIANCE {
        return 1.0 - m;
    }
    1.0 - m * max_var(p) / var
}

/// Sign convention for the active branch of the ranking loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RankingSign {
    /// `-(s1_hat - s2_hat)(s1 - s2)`: minimizing pushes the predicted gap
    /// towards the sign of the target gap.
    #[default]
    Agreeing,
    /// `(s1_hat - s2_hat)(s1 - s2)` as literally written.
    Literal,
}

/// Pairwise ranking loss with a dead zone: zero once the predictions are
/// more than `margin` apart.
pub fn ranking_loss(s1_hat: f64, s2_hat: f64, s1: f64, s2: f64, margin: f64, sign: RankingSign) -> f64 {
    ranking_loss_with_grad(s1_hat, s2_hat, s1, s2, margin, sign).0
}

/// The loss and its partial derivatives with respect to `s1_hat`, `s2_hat`.
pub fn ranking_loss_with_grad(
    s1_hat: f64,
    s2_hat: f64,
    s1: f64,
    s2: f64,
    margin: f64,
    sign: RankingSign,
) -> (f64, f64, f64) {
    if (s1_hat - s2_hat).abs() > margin {
        return (0.0, 0.0, 0.0);
    }
    let k = match sign {
        RankingSign::Agreeing => -(s1 - s2),
        RankingSign::Literal => s1 - s2,
    };
    (k * (s1_hat - s2_hat), k, -k)
}

/// Training objective for the uncertainty head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadLoss {
    /// Dead-zone pairwise ranking loss.
    #[default]
    Ranking,
    /// Squared error against the target score.
    Mse,
    /// Hinge on the predicted gap in the direction of the target gap:
    /// `max(0, margin - sign(s1 - s2)(s1_hat - s2_hat))`.
    LearningLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden_units: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Pairs per gradient step.
    pub batch_pairs: usize,
    pub margin: f64,
    pub loss: HeadLoss,
    pub sign: RankingSign,
    /// Token mixes of random labeled pairs added to the training set per
    /// labeled sample. They cover the space between labeled samples, where
    /// the unlabeled pool mostly lives.
    pub mixes_per_sample: usize,
    pub mix_ratio: f64,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden_units: 32,
            learning_rate: 1.0,
            epochs: 300,
            batch_pairs: 8,
            margin: 0.1,
            loss: HeadLoss::Ranking,
            sign: RankingSign::Agreeing,
            mixes_per_sample: 16,
            mix_ratio: 0.25,
            seed: 0,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_units == 0 || self.epochs == 0 || self.batch_pairs == 0 {
            return Err(DoktError::Config(
                "head hidden_units, epochs and batch_pairs must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(DoktError::Config("head learning_rate must be positive".into()));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(DoktError::Config("margin must be positive".into()));
        }
        if !(self.mix_ratio > 0.0 && self.mix_ratio <= 1.0) {
            return Err(DoktError::Config("head mix_ratio must be in (0, 1]".into()));
        }
        Ok(())
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Scalar predictor over downstream hidden features, squashed to `(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyHead {
    net: Mlp,
}

impl UncertaintyHead {
    pub fn init(input_dim: usize, hidden_units: usize, rng: &mut StreamRng) -> Self {
        Self {
            net: Mlp::init(input_dim, hidden_units, 1, rng),
        }
    }

    pub fn predict(&self, features: &[f64]) -> f64 {
        sigmoid(self.net.forward(features).out[0])
    }

    pub fn parameters(&self) -> &[f64] {
        &self.net.params
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.net.params
    }

    /// Loss of one training pair under `cfg.loss`, and its gradient with
    /// respect to [`Self::parameters`].
    pub fn pair_loss_and_grad(
        &self,
        pair: [(&[f64], f64); 2],
        cfg: &HeadConfig,
    ) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.net.params.len()];
        let loss = self.accumulate_pair(pair, cfg, &mut grad);
        (loss, grad)
    }

    pub fn pair_loss(&self, pair: [(&[f64], f64); 2], cfg: &HeadConfig) -> f64 {
        let [(x1, s1), (x2, s2)] = pair;
        let (h1, h2) = (self.predict(x1), self.predict(x2));
        pair_loss_terms(h1, h2, s1, s2, cfg).0
    }

    fn accumulate_pair(&self, pair: [(&[f64], f64); 2], cfg: &HeadConfig, grad: &mut [f64]) -> f64 {
        let [(x1, s1), (x2, s2)] = pair;
        let a1 = self.net.forward(x1);
        let a2 = self.net.forward(x2);
        let h1 = sigmoid(a1.out[0]);
        let h2 = sigmoid(a2.out[0]);
        let (loss, d1, d2) = pair_loss_terms(h1, h2, s1, s2, cfg);
        if d1 != 0.0 {
            self.net.backward(x1, &a1, &[d1 * h1 * (1.0 - h1)], grad);
        }
        if d2 != 0.0 {
            self.net.backward(x2, &a2, &[d2 * h2 * (1.0 - h2)], grad);
        }
        loss
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        write_checkpoint(path, CheckpointKind::UncertaintyHead, &self.net)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(Self {
            net: read_checkpoint(path, CheckpointKind::UncertaintyHead)?,
        })
    }
}

fn pair_loss_terms(h1: f64, h2: f64, s1: f64, s2: f64, cfg: &HeadConfig) -> (f64, f64, f64) {
    match cfg.loss {
        HeadLoss::Ranking => ranking_loss_with_grad(h1, h2, s1, s2, cfg.margin, cfg.sign),
        HeadLoss::Mse => (
            (h1 - s1).powi(2) + (h2 - s2).powi(2),
            2.0 * (h1 - s1),
            2.0 * (h2 - s2),
        ),
        HeadLoss::LearningLoss => {
            let dir = if s1 > s2 {
                1.0
            } else if s1 < s2 {
                -1.0
            } else {
                0.0
            };
            let hinge = cfg.margin - dir * (h1 - h2);
            if dir == 0.0 || hinge <= 0.0 {
                (0.0, 0.0, 0.0)
            } else {
                (hinge, -dir, dir)
            }
        }
    }
}

/// Hidden features and closed-form uncertainty targets for head training.
#[derive(Debug, Clone, Default)]
pub struct HeadTrainingSet {
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

impl HeadTrainingSet {
    /// Runs `model` over `ids` and records each sample's hidden features and
    /// [`uncertainty_score`] of its prediction.
    pub fn from_model(model: &DownstreamModel, embeddings: &Embeddings, ids: &[SampleId]) -> Self {
        let mut set = Self::default();
        for &id in ids {
            let f = model.forward_pooled(&embeddings.pooled(id));
            set.targets.push(uncertainty_score(&f.probs));
            set.features.push(f.hidden);
        }
        set
    }

    /// Adds `per_sample` mixes of each of `ids` with another of `ids` drawn
    /// uniformly, scored by `model` like any other sample.
    pub fn add_mixes(
        &mut self,
        model: &DownstreamModel,
        embeddings: &Embeddings,
        ids: &[SampleId],
        per_sample: usize,
        ratio: f64,
        rng: &mut StreamRng,
    ) -> Result<()> {
        if ids.len() < 2 {
            return Ok(());
        }
        for (i, &a) in ids.iter().enumerate() {
            let x = embeddings.sample(a);
            for _ in 0..per_sample {
                // Draw from the other ids without rejection.
                let j = rng.random_range(0..ids.len() - 1);
                let b = ids[if j >= i { j + 1 } else { j }];
                let (mixed, _) = mix_tokens(&x, &embeddings.sample(b), ratio, rng)?;
                let f = model.forward_pooled(&mixed.pooled());
                self.targets.push(uncertainty_score(&f.probs));
                self.features.push(f.hidden);
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Trains the head on the labeled pool and mixes of labeled pairs.
pub fn train_uncertainty_head(
    model: &DownstreamModel,
    embeddings: &Embeddings,
    pool: &PoolState,
    cfg: &HeadConfig,
) -> Result<UncertaintyHead> {
    cfg.validate()?;
    let ids = pool.labeled_ids();
    let mut set = HeadTrainingSet::from_model(model, embeddings, &ids);
    let mut rng = seeded_rng(cfg.seed, "head/mix");
    set.add_mixes(model, embeddings, &ids, cfg.mixes_per_sample, cfg.mix_ratio, &mut rng)?;
    fit_head(&set, cfg).map(|(h, _)| h)
}

/// Each epoch shuffles the samples, pairs them off consecutively and takes a
/// gradient step per `batch_pairs` pairs. Returns the head and the mean pair
/// loss of every epoch.
pub fn fit_head(set: &HeadTrainingSet, cfg: &HeadConfig) -> Result<(UncertaintyHead, Vec<f64>)> {
    cfg.validate()?;
    if set.len() < 2 {
        return Err(DoktError::NotEnoughLabeled {
            needed: 2,
            have: set.len(),
        });
    }
    let dim = set.features[0].len();
    let mut head = UncertaintyHead::init(dim, cfg.hidden_units, &mut seeded_rng(cfg.seed, "head/init"));
    let mut rng = seeded_rng(cfg.seed, "head/epochs");
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let pairs: Vec<(usize, usize)> = order.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        let mut total = 0.0;
        for batch in pairs.chunks(cfg.batch_pairs) {
            let mut grad = vec![0.0; head.net.params.len()];
            for &(i, j) in batch {
                total += head.accumulate_pair(
                    [
                        (&set.features[i], set.targets[i]),
                        (&set.features[j], set.targets[j]),
                    ],
                    cfg,
                    &mut grad,
                );
            }
            head.net.step(&grad, cfg.learning_rate / batch.len() as f64);
        }
        history.push(total / pairs.len() as f64);
    }
    if !head.net.is_finite() {
        return Err(DoktError::Config("head training diverged".into()));
    }
    Ok((head, history))
}

/// Mixed and masked variants of one unlabeled sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationPair {
    pub mixed: TokenEmbedding,
    pub masked: TokenEmbedding,
    pub indices: Vec<usize>,
    pub neighbor: SampleId,
}

/// Random stream for the perturbation of `id` in `round`.
pub fn perturbation_rng(seed: u64, round: usize, id: SampleId) -> StreamRng {
    seeded_rng(seed, &format!("perturb/{round}/{id}"))
}

/// Mixes `x` with its nearest labeled pretext neighbor at ratio `rho`, and
/// masks the same token positions with zeros.
pub fn perceptual_perturb(
    embeddings: &Embeddings,
    space: &PretextSpace,
    pool: &PoolState,
    x: SampleId,
    rho: f64,
    rng: &mut StreamRng,
) -> Result<PerturbationPair> {
    if pool.labeled().is_empty() {
        return Err(DoktError::EmptyLabeledPool);
    }
    let neighbor = knn_pretext(space, pool, x, 1)?.ids[0];
    let original = embeddings.sample(x);
    let (mixed, indices) = mix_tokens(&original, &embeddings.sample(neighbor), rho, rng)?;
    let masked = mask_tokens(&original, &indices)?;
    Ok(PerturbationPair {
        mixed,
        masked,
        indices,
        neighbor,
    })
}

fn floor_renormalize(p: &[f64]) -> Vec<f64> {
    let floored: Vec<f64> = p.iter().map(|&v| v.max(KL_EPSILON)).collect();
    let z: f64 = floored.iter().sum();
    floored.into_iter().map(|v| v / z).collect()
}

/// `KL(v_mix || v_mask)` in nats, after flooring both inputs at
/// [`KL_EPSILON`] and renormalizing.
pub fn kl_divergence(v_mix: &ProbabilityVector, v_mask: &ProbabilityVector) -> Result<f64> {
    if v_mix.len() != v_mask.len() {
        return Err(DoktError::Shape(format!(
            "KL over {} and {} classes",
            v_mix.len(),
            v_mask.len()
        )));
    }
    let p = floor_renormalize(v_mix.as_slice());
    let q = floor_renormalize(v_mask.as_slice());
    Ok(p.iter().zip(&q).map(|(pi, qi)| pi * (pi / qi).ln()).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainUncertainty {
    pub s_learned: f64,
    pub d_kl: f64,
    pub d_domain: f64,
}

impl DomainUncertainty {
    pub fn new(s_learned: f64, d_kl: f64) -> Self {
        Self {
            s_learned,
            d_kl,
            d_domain: s_learned + d_kl,
        }
    }
}

/// Everything [`domain_uncertainty`] needs besides the sample id.
pub struct UncertaintyContext<'a> {
    pub embeddings: &'a Embeddings,
    pub space: &'a PretextSpace,
    pub pool: &'a PoolState,
    pub model: &'a DownstreamModel,
    pub head: &'a UncertaintyHead,
    pub rho: f64,
    /// When false the divergence term is fixed at 0.
    pub perturbation: bool,
    pub seed: u64,
    pub round: usize,
}

/// Learned uncertainty of `x` plus the divergence between its mixed and
/// masked predictions.
pub fn domain_uncertainty(ctx: &UncertaintyContext<'_>, x: SampleId) -> Result<DomainUncertainty> {
    let f = ctx.model.forward_pooled(&ctx.embeddings.pooled(x));
    let s_learned = ctx.head.predict(&f.hidden);
    let d_kl = if ctx.perturbation {
        let mut rng = perturbation_rng(ctx.seed, ctx.round, x);
        let pair = perceptual_perturb(ctx.embeddings, ctx.space, ctx.pool, x, ctx.rho, &mut rng)?;
        let v_mix = ctx.model.forward(&pair.mixed).probs;
        let v_mask = ctx.model.forward(&pair.masked).probs;
        kl_divergence(&v_mix, &v_mask)?
    } else {
        0.0
    };
    Ok(DomainUncertainty::new(s_learned, d_kl))
}
