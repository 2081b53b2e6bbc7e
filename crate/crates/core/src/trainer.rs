//! Desk-scale downstream classifier: a rectifier head over pooled pretext
//! tokens, trained with cross-entropy on labeled samples and on intra-class
//! token mixes of nearby same-class pairs.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::embedding::{Embeddings, PretextSpace, TokenEmbedding};
use crate::error::{DoktError, Result};
use crate::nn::Mlp;
use crate::pool::{Label, PoolState, SampleId};
use crate::rng::{seeded_rng, StreamRng};

/// Which side of the per-class median cosine a pair must fall on to be
/// mixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PairRule {
    /// Pairs strictly above the class median (the closest half).
    #[default]
    Close,
    /// Pairs strictly below the class median.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden_units: usize,
    pub seed: u64,
    pub mix_enabled: bool,
    pub mix_lambda: f64,
    pub pair_rule: PairRule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 60,
            batch_size: 16,
            hidden_units: 64,
            seed: 0,
            mix_enabled: true,
            mix_lambda: 0.5,
            pair_rule: PairRule::Close,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DoktError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.hidden_units == 0 {
            return bad("epochs, batch_size and hidden_units must be positive");
        }
        if !(self.mix_lambda > 0.0 && self.mix_lambda < 1.0) {
            return bad("mix_lambda must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Class-probability vector: non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.len() < 2 {
            return Err(DoktError::Shape("probability vector needs C >= 2".into()));
        }
        if p.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(DoktError::Shape("probability entries must lie in [0, 1]".into()));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(DoktError::Shape(format!("probabilities sum to {sum}")));
        }
        Ok(Self(p))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the largest entry; lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate() {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// The downstream classifier. `hidden` (post-rectifier) plays the role of the
/// downstream representation consumed by the uncertainty head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamModel {
    net: Mlp,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: ProbabilityVector,
}

impl DownstreamModel {
    pub fn init(input_dim: usize, hidden_units: usize, n_classes: usize, rng: &mut StreamRng) -> Self {
        Self {
            net: Mlp::init(input_dim, hidden_units, n_classes, rng),
        }
    }

    pub fn zeros(input_dim: usize, hidden_units: usize, n_classes: usize) -> Self {
        Self {
            net: Mlp::zeros(input_dim, hidden_units, n_classes),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.net.n_in
    }

    pub fn hidden_units(&self) -> usize {
        self.net.n_hidden
    }

    pub fn n_classes(&self) -> usize {
        self.net.n_out
    }

    pub fn parameters(&self) -> &[f64] {
        &self.net.params
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.net.params
    }

    pub fn forward(&self, x: &TokenEmbedding) -> Forward {
        self.forward_pooled(&x.pooled())
    }

    pub fn forward_pooled(&self, x: &[f64]) -> Forward {
        let act = self.net.forward(x);
        let probs = ProbabilityVector(softmax(&act.out));
        Forward {
            hidden: act.hidden,
            logits: act.out,
            probs,
        }
    }

    pub fn predict(&self, x: &[f64]) -> Label {
        Label(self.forward_pooled(x).probs.argmax())
    }

    /// Mean cross-entropy over `batch` and its gradient with respect to
    /// [`Self::parameters`].
    pub fn loss_and_grad(&self, batch: &[(&[f64], Label)]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.net.params.len()];
        let mut loss = 0.0;
        for &(x, y) in batch {
            let act = self.net.forward(x);
            let p = softmax(&act.out);
            loss -= p[y.0].max(f64::MIN_POSITIVE).ln();
            let mut d = p;
            d[y.0] -= 1.0;
            self.net.backward(x, &act, &d, &mut grad);
        }
        let inv = 1.0 / batch.len().max(1) as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        (loss * inv, grad)
    }

    pub fn loss(&self, batch: &[(&[f64], Label)]) -> f64 {
        let total: f64 = batch
            .iter()
            .map(|&(x, y)| {
                let p = softmax(&self.net.forward(x).out);
                -p[y.0].max(f64::MIN_POSITIVE).ln()
            })
            .sum();
        total / batch.len().max(1) as f64
    }

    pub fn accuracy(&self, data: &[(&[f64], Label)]) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let hits = data.iter().filter(|&&(x, y)| self.predict(x) == y).count();
        hits as f64 / data.len() as f64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, CheckpointKind::Downstream, &self.net)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self {
            net: read_checkpoint(path, CheckpointKind::Downstream)?,
        })
    }
}

/// A same-class pair selected for token mixing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntraClassPair {
    pub class: Label,
    pub a: SampleId,
    pub b: SampleId,
    pub cosine: f64,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Same-class labeled pairs on the selected side of their class's median
/// pretext cosine. When every pair of a class ties at the median, the whole
/// class is returned.
pub fn intra_class_pairs(pool: &PoolState, space: &PretextSpace, rule: PairRule) -> Vec<IntraClassPair> {
    let mut by_class: std::collections::BTreeMap<Label, Vec<SampleId>> = Default::default();
    for (&id, &label) in pool.labeled() {
        by_class.entry(label).or_default().push(id);
    }
    let mut out = Vec::new();
    for (class, members) in by_class {
        if members.len() < 2 {
            continue;
        }
        let mut pairs = Vec::with_capacity(members.len() * (members.len() - 1) / 2);
        for (i, &a) in members.iter().enumerate() {
            for &b in &members[i + 1..] {
                pairs.push(IntraClassPair {
                    class,
                    a,
                    b,
                    cosine: space.cosine(a, b),
                });
            }
        }
        let mut cosines: Vec<f64> = pairs.iter().map(|p| p.cosine).collect();
        cosines.sort_by(f64::total_cmp);
        let tau = median(&cosines);
        let all_tied = cosines.first() == cosines.last();
        out.extend(pairs.into_iter().filter(|p| {
            all_tied
                || match rule {
                    PairRule::Close => p.cosine > tau,
                    PairRule::Literal => p.cosine < tau,
                }
        }));
    }
    out
}

/// Number of token rows replaced at mixing ratio `ratio`.
pub fn mixed_token_count(ratio: f64, tokens: usize) -> usize {
    // The small slack keeps e.g. 0.7 * 10 from rounding up to 8.
    ((ratio * tokens as f64 - 1e-9).ceil().max(0.0) as usize).min(tokens)
}

/// Copies `a` and replaces `ceil(ratio * T)` randomly chosen token rows with
/// the rows of `b`. Returns the mixed tokens and the sorted replaced indices.
pub fn mix_tokens(
    a: &TokenEmbedding,
    b: &TokenEmbedding,
    ratio: f64,
    rng: &mut StreamRng,
) -> Result<(TokenEmbedding, Vec<usize>)> {
    if !a.same_shape(b) {
        return Err(DoktError::Shape(format!(
            "cannot mix {}x{} with {}x{}",
            a.tokens(),
            a.dim(),
            b.tokens(),
            b.dim()
        )));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(DoktError::Config(format!("mixing ratio {ratio} outside (0, 1]")));
    }
    let count = mixed_token_count(ratio, a.tokens());
    let mut indices = index::sample(rng, a.tokens(), count).into_vec();
    indices.sort_unstable();
    let mut out = a.clone();
    for &t in &indices {
        out.row_mut(t).copy_from_slice(b.row(t));
    }
    Ok((out, indices))
}

/// Copies `a` with the listed token rows set to the all-zero mask token.
pub fn mask_tokens(a: &TokenEmbedding, indices: &[usize]) -> Result<TokenEmbedding> {
    let mut out = a.clone();
    for &t in indices {
        if t >= a.tokens() {
            return Err(DoktError::TokenIndex {
                index: t,
                tokens: a.tokens(),
            });
        }
        out.row_mut(t).fill(0.0);
    }
    Ok(out)
}

/// Per-epoch mean training loss.
pub type LossHistory = Vec<f64>;

pub fn train_downstream(
    embeddings: &Embeddings,
    space: &PretextSpace,
    pool: &PoolState,
    n_classes: usize,
    cfg: &TrainConfig,
) -> Result<DownstreamModel> {
    train_downstream_with_history(embeddings, space, pool, n_classes, cfg).map(|(m, _)| m)
}

/// Mini-batch gradient descent on cross-entropy over the labeled pool, plus
/// (when enabled) one fresh token mix per eligible intra-class pair each
/// epoch, trained against the pair's shared label.
pub fn train_downstream_with_history(
    embeddings: &Embeddings,
    space: &PretextSpace,
    pool: &PoolState,
    n_classes: usize,
    cfg: &TrainConfig,
) -> Result<(DownstreamModel, LossHistory)> {
    cfg.validate()?;
    if pool.labeled().is_empty() {
        return Err(DoktError::EmptyLabeledPool);
    }
    let mut init_rng = seeded_rng(cfg.seed, "downstream/init");
    let mut epoch_rng = seeded_rng(cfg.seed, "downstream/epochs");
    let mut model = DownstreamModel::init(embeddings.dim(), cfg.hidden_units, n_classes, &mut init_rng);

    let base: Vec<(Vec<f64>, Label)> = pool
        .labeled()
        .iter()
        .map(|(&id, &y)| (embeddings.pooled(id), y))
        .collect();
    let pairs = if cfg.mix_enabled {
        intra_class_pairs(pool, space, cfg.pair_rule)
    } else {
        Vec::new()
    };

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = Vec::new();
    for _ in 0..cfg.epochs {
        let mut samples: Vec<(Vec<f64>, Label)> = base.clone();
        for pair in &pairs {
            let (mixed, _) = mix_tokens(
                &embeddings.sample(pair.a),
                &embeddings.sample(pair.b),
                cfg.mix_lambda,
                &mut epoch_rng,
            )?;
            samples.push((mixed.pooled(), pair.class));
        }
        order.clear();
        order.extend(0..samples.len());
        order.shuffle(&mut epoch_rng);

        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&[f64], Label)> =
                chunk.iter().map(|&i| (samples[i].0.as_slice(), samples[i].1)).collect();
            let (loss, grad) = model.loss_and_grad(&batch);
            epoch_loss += loss * chunk.len() as f64;
            model.net.step(&grad, cfg.learning_rate);
        }
        history.push(epoch_loss / samples.len() as f64);
    }
    if !model.net.is_finite() {
        return Err(DoktError::Config("training diverged to non-finite parameters".into()));
    }
    Ok((model, history))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum CheckpointKind {
    Downstream = 1,
    UncertaintyHead = 2,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"DKCP";
const CHECKPOINT_VERSION: u32 = 1;

/// Header (magic, version, kind, three `u32` layer sizes) followed by the
/// `f64` little-endian parameter blob.
pub(crate) fn write_checkpoint(path: &Path, kind: CheckpointKind, net: &Mlp) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + net.params.len() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(kind as u32).to_le_bytes());
    for n in [net.n_in, net.n_hidden, net.n_out] {
        buf.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for p in &net.params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| DoktError::io(path, e))?;
    file.write_all(&buf).map_err(|e| DoktError::io(path, e))
}

pub(crate) fn read_checkpoint(path: &Path, kind: CheckpointKind) -> Result<Mlp> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| DoktError::io(path, e))?;
    if bytes.len() < 24 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(DoktError::Checkpoint("not a model checkpoint".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    if word(4) != CHECKPOINT_VERSION as usize {
        return Err(DoktError::Checkpoint(format!("unsupported version {}", word(4))));
    }
    if word(8) != kind as usize {
        return Err(DoktError::Checkpoint("checkpoint holds a different model kind".into()));
    }
    let (n_in, n_hidden, n_out) = (word(12), word(16), word(20));
    let count = Mlp::param_count(n_in, n_hidden, n_out);
    let blob = &bytes[24..];
    if blob.len() != count * 8 {
        return Err(DoktError::Checkpoint(format!(
            "expected {count} parameters, found {} bytes",
            blob.len()
        )));
    }
    let params = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Mlp {
        n_in,
        n_hidden,
        n_out,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn emb(rows: &[[f32; 2]]) -> TokenEmbedding {
        TokenEmbedding::new(rows.len(), 2, rows.concat()).unwrap()
    }

    #[test]
    fn softmax_of_ln2_zero() {
        let p = softmax(&[2f64.ln(), 0.0]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = DownstreamModel::zeros(4, 8, 5);
        let f = m.forward_pooled(&[0.3, -1.0, 2.0, 0.5]);
        for p in f.probs.as_slice() {
            assert!((p - 0.2).abs() < 1e-15);
        }
        assert_eq!(f.hidden.len(), 8);
    }

    #[test]
    fn probabilities_normalized() {
        let mut rng = seeded_rng(3, "t");
        let m = DownstreamModel::init(6, 10, 4, &mut rng);
        for _ in 0..50 {
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-5.0..5.0)).collect();
            let f = m.forward_pooled(&x);
            let s: f64 = f.probs.as_slice().iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mixing_replaces_ceil_ratio_rows() {
        let a = emb(&[[1.0, 1.0], [2.0, 2.0], [3.0, 3.0], [4.0, 4.0]]);
        let b = emb(&[[-1.0, -1.0], [-2.0, -2.0], [-3.0, -3.0], [-4.0, -4.0]]);
        let mut rng = seeded_rng(1, "mix");
        let (m, idx) = mix_tokens(&a, &b, 0.3, &mut rng).unwrap();
        assert_eq!(idx.len(), 2);
        for t in 0..4 {
            let expect = if idx.contains(&t) { b.row(t) } else { a.row(t) };
            assert_eq!(m.row(t), expect);
        }
    }

    #[test]
    fn self_mixing_is_identity() {
        let a = emb(&[[1.0, 0.5], [2.0, 2.0], [0.1, 3.0]]);
        let mut rng = seeded_rng(1, "mix");
        for r in [0.1, 0.5, 0.99] {
            assert_eq!(mix_tokens(&a, &a, r, &mut rng).unwrap().0, a);
        }
    }

    #[test]
    fn mixing_deterministic_per_seed() {
        let a = emb(&[[1.0, 1.0]; 8]);
        let b = emb(&[[2.0, 2.0]; 8]);
        let i1 = mix_tokens(&a, &b, 0.5, &mut seeded_rng(9, "m")).unwrap().1;
        let i2 = mix_tokens(&a, &b, 0.5, &mut seeded_rng(9, "m")).unwrap().1;
        assert_eq!(i1, i2);
    }

    #[test]
    fn mixing_shape_mismatch() {
        let a = emb(&[[1.0, 1.0]; 3]);
        let b = emb(&[[1.0, 1.0]; 4]);
        assert!(matches!(
            mix_tokens(&a, &b, 0.5, &mut seeded_rng(0, "m")),
            Err(DoktError::Shape(_))
        ));
    }

    #[test]
    fn mixed_count_edges() {
        assert_eq!(mixed_token_count(0.3, 4), 2);
        assert_eq!(mixed_token_count(0.7, 10), 7);
        assert_eq!(mixed_token_count(1.0, 4), 4);
        assert_eq!(mixed_token_count(0.01, 4), 1);
    }

    #[test]
    fn masking_edges() {
        let a = emb(&[[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]);
        assert_eq!(mask_tokens(&a, &[]).unwrap(), a);
        let all = mask_tokens(&a, &[0, 1, 2]).unwrap();
        assert!(all.values().iter().all(|&v| v == 0.0));
        let once = mask_tokens(&a, &[1]).unwrap();
        assert_eq!(mask_tokens(&once, &[1]).unwrap(), once);
        assert_eq!(once.row(1), &[0.0, 0.0]);
        assert!(matches!(
            mask_tokens(&a, &[3]),
            Err(DoktError::TokenIndex { index: 3, tokens: 3 })
        ));
    }

    fn pool_space(rows: &[Vec<f64>], labels: &[usize]) -> (PoolState, PretextSpace) {
        let space = PretextSpace::from_rows(rows).unwrap();
        let pool = PoolState::new(
            rows.len(),
            labels.iter().enumerate().map(|(i, &c)| (SampleId(i), Label(c))),
            0,
        )
        .unwrap();
        (pool, space)
    }

    #[test]
    fn pairs_keep_strictly_closer_than_median() {
        // Unit vectors with pairwise cosines a-b 0.5, b-c 0.9, a-c 0.1
        // (Cholesky factor of the Gram matrix).
        let c2 = (0.9 - 0.5 * 0.1) / 0.75f64.sqrt();
        let c3 = (1.0 - 0.01 - c2 * c2).sqrt();
        let rows = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.5, 0.75f64.sqrt(), 0.0],
            vec![0.1, c2, c3],
        ];
        let (pool, space) = pool_space(&rows, &[0, 0, 0]);
        let pairs = intra_class_pairs(&pool, &space, PairRule::Close);
        assert_eq!(pairs.len(), 1);
        assert_eq!((pairs[0].a, pairs[0].b), (SampleId(1), SampleId(2)));
        assert!((pairs[0].cosine - 0.9).abs() < 1e-12);
        let literal = intra_class_pairs(&pool, &space, PairRule::Literal);
        assert_eq!(literal.len(), 1);
        assert_eq!((literal[0].a, literal[0].b), (SampleId(0), SampleId(2)));
        assert!((literal[0].cosine - 0.1).abs() < 1e-12);
    }

    #[test]
    fn singleton_class_has_no_pairs() {
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let (pool, space) = pool_space(&rows, &[0, 1, 2]);
        assert!(intra_class_pairs(&pool, &space, PairRule::Close).is_empty());
    }

    #[test]
    fn identical_pair_always_returned() {
        let rows = vec![vec![1.0, 2.0], vec![1.0, 2.0], vec![0.0, 1.0]];
        let (pool, space) = pool_space(&rows, &[0, 0, 1]);
        let pairs = intra_class_pairs(&pool, &space, PairRule::Close);
        assert_eq!(pairs.len(), 1);
        assert!((pairs[0].cosine - 1.0).abs() < 1e-12);
    }
}
