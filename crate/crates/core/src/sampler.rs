//! The active-learning round engine.
//!
//! A round trains the downstream model and uncertainty head on the labeled
//! pool, selects a batch with the configured strategy, asks the oracle for
//! labels, then retrains a fresh target model and evaluates it on the
//! held-out split.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Oracle};
use crate::diversity::{rank_by_diversity, DiversityConfig, TracebackScore};
use crate::error::{DoktError, Result};
use crate::pool::{PoolState, SampleId};
use crate::rng::seeded_rng;
use crate::similarity::squared_euclidean;
use crate::trainer::{train_downstream, DownstreamModel, TrainConfig};
use crate::uncertainty::{
    domain_uncertainty, train_uncertainty_head, DomainUncertainty, HeadConfig, UncertaintyContext,
    UncertaintyHead,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Dokt,
    Random,
    Coreset,
    Entropy,
    DoktNoTraceback,
    DoktNoMixing,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Dokt,
        Strategy::Random,
        Strategy::Coreset,
        Strategy::Entropy,
        Strategy::DoktNoTraceback,
        Strategy::DoktNoMixing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Dokt => "dokt",
            Strategy::Random => "random",
            Strategy::Coreset => "coreset",
            Strategy::Entropy => "entropy",
            Strategy::DoktNoTraceback => "dokt_no_traceback",
            Strategy::DoktNoMixing => "dokt_no_mixing",
        }
    }

    pub fn is_dokt(self) -> bool {
        matches!(
            self,
            Strategy::Dokt | Strategy::DoktNoTraceback | Strategy::DoktNoMixing
        )
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = DoktError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| DoktError::Config(format!("unknown strategy `{s}`")))
    }
}

pub const DEFAULT_RHO: f64 = 0.3;
pub const DEFAULT_INITIAL_FRACTION: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub m_per_round: usize,
    pub rounds: usize,
    pub strategy: Strategy,
    pub seed: u64,
    /// Fraction of all samples drawn (from the pool) as the initial labels.
    pub initial_fraction: f64,
    /// Labels available beyond the initial pool; defaults to `rounds * M`.
    pub budget: Option<usize>,
    pub trainer: TrainConfig,
    pub head: HeadConfig,
    /// Token fraction replaced when perturbing an unlabeled sample.
    pub rho: f64,
    pub diversity: DiversityConfig,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            m_per_round: 20,
            rounds: 15,
            strategy: Strategy::Dokt,
            seed: 0,
            initial_fraction: DEFAULT_INITIAL_FRACTION,
            budget: None,
            trainer: TrainConfig::default(),
            head: HeadConfig::default(),
            rho: DEFAULT_RHO,
            diversity: DiversityConfig::default(),
        }
    }
}

impl RoundConfig {
    pub fn budget_total(&self) -> usize {
        self.budget.unwrap_or(self.rounds * self.m_per_round)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m_per_round == 0 {
            return Err(DoktError::Config("M must be at least 1".into()));
        }
        if self.rounds * self.m_per_round > self.budget_total() {
            return Err(DoktError::Config(format!(
                "{} rounds of {} exceed the budget of {}",
                self.rounds,
                self.m_per_round,
                self.budget_total()
            )));
        }
        if !(self.initial_fraction > 0.0 && self.initial_fraction < 1.0) {
            return Err(DoktError::Config("initial_fraction must lie in (0, 1)".into()));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(DoktError::Config("rho must lie in (0, 1]".into()));
        }
        if self.diversity.l_cap == Some(0) {
            return Err(DoktError::Config("l_cap must be positive".into()));
        }
        self.trainer.validate()?;
        self.head.validate()
    }
}

/// Per-sample scores recorded for a selected id. Only the fields produced
/// by the active strategy are present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: SampleId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_trace: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iota: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_learned: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_kl: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_domain: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coreset_distance: Option<f64>,
}

impl ScoreRecord {
    pub fn bare(id: SampleId) -> Self {
        Self {
            id,
            s_trace: None,
            iota: None,
            s_learned: None,
            d_kl: None,
            d_domain: None,
            entropy: None,
            coreset_distance: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub selected: Vec<SampleId>,
    pub scores: Vec<ScoreRecord>,
    /// Target-model accuracy on the held-out split after this round.
    pub accuracy: f64,
    pub cumulative_labels: usize,
    pub budget_used: usize,
    /// Fewer than M samples were selected.
    pub partial: bool,
    /// Not written to report files so that they stay byte-reproducible.
    #[serde(skip)]
    pub wall_time_ms: u128,
}

/// Output of one selection step, including the full score tables used.
#[derive(Debug, Clone, Default)]
pub struct Selection {
    pub ids: Vec<SampleId>,
    pub scores: Vec<ScoreRecord>,
    /// Traceback scores of every unlabeled sample, most diverse first.
    pub diversity: Vec<(SampleId, TracebackScore)>,
    /// Domain uncertainty of every stage-two candidate.
    pub uncertainty: Vec<(SampleId, DomainUncertainty)>,
}

#[derive(Debug, Clone)]
pub struct DoktModels {
    pub downstream: DownstreamModel,
    pub head: UncertaintyHead,
}

/// A seed for a named sub-task of a run.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    seeded_rng(seed, label).random()
}

/// Trains the downstream model (with intra-class mixing per config) and the
/// uncertainty head on the current labeled pool.
pub fn train_models(dataset: &Dataset, pool: &PoolState, cfg: &RoundConfig, round: usize) -> Result<DoktModels> {
    let downstream = train_selection_model(dataset, pool, cfg, round)?;
    let head_cfg = HeadConfig {
        seed: derive_seed(cfg.seed, &format!("head/{round}")),
        ..cfg.head.clone()
    };
    let head = train_uncertainty_head(&downstream, dataset.embeddings(), pool, &head_cfg)?;
    Ok(DoktModels { downstream, head })
}

fn train_selection_model(dataset: &Dataset, pool: &PoolState, cfg: &RoundConfig, round: usize) -> Result<DownstreamModel> {
    let tcfg = TrainConfig {
        seed: derive_seed(cfg.seed, &format!("downstream/{round}")),
        ..cfg.trainer.clone()
    };
    train_downstream(dataset.embeddings(), dataset.space(), pool, dataset.n_classes(), &tcfg)
}

/// Retrains a fresh target model without mixing. The seed depends only on
/// the run seed and the round, so every strategy is evaluated alike.
pub fn train_target(dataset: &Dataset, pool: &PoolState, cfg: &RoundConfig, round: usize) -> Result<DownstreamModel> {
    let tcfg = TrainConfig {
        seed: derive_seed(cfg.seed, &format!("target/{round}")),
        mix_enabled: false,
        ..cfg.trainer.clone()
    };
    train_downstream(dataset.embeddings(), dataset.space(), pool, dataset.n_classes(), &tcfg)
}

pub fn evaluate(dataset: &Dataset, model: &DownstreamModel) -> f64 {
    let eval = dataset.eval_set();
    let inputs: Vec<Vec<f64>> = eval.iter().map(|&(id, _)| dataset.embeddings().pooled(id)).collect();
    let data: Vec<(&[f64], _)> = inputs.iter().zip(&eval).map(|(x, &(_, y))| (x.as_slice(), y)).collect();
    model.accuracy(&data)
}

fn sort_by_domain(scored: &mut [(SampleId, DomainUncertainty)]) {
    scored.sort_by(|a, b| b.1.d_domain.total_cmp(&a.1.d_domain).then(a.0.cmp(&b.0)));
}

/// Two-stage selection: keep the first `min(2M, |U|)` samples of the
/// diversity order (or a random `2M` when traceback is ablated), then take
/// the `M` candidates with the highest domain uncertainty.
pub fn select_dokt(
    dataset: &Dataset,
    pool: &PoolState,
    models: &DoktModels,
    cfg: &RoundConfig,
    round: usize,
    m: usize,
) -> Result<Selection> {
    let n_candidates = (2 * m).min(pool.unlabeled().len());
    let (diversity, candidates) = if cfg.strategy == Strategy::DoktNoTraceback {
        let unlabeled = pool.unlabeled_ids();
        let mut rng = seeded_rng(cfg.seed, &format!("no-traceback/{round}"));
        let mut picked: Vec<SampleId> = index::sample(&mut rng, unlabeled.len(), n_candidates)
            .into_iter()
            .map(|i| unlabeled[i])
            .collect();
        picked.sort_unstable();
        (Vec::new(), picked)
    } else {
        let ranked = rank_by_diversity(dataset.space(), pool, dataset.n_classes(), &cfg.diversity)?;
        let candidates = ranked[..n_candidates].iter().map(|(id, _)| *id).collect();
        (ranked, candidates)
    };

    let ctx = UncertaintyContext {
        embeddings: dataset.embeddings(),
        space: dataset.space(),
        pool,
        model: &models.downstream,
        head: &models.head,
        rho: cfg.rho,
        perturbation: cfg.strategy != Strategy::DoktNoMixing,
        seed: cfg.seed,
        round,
    };
    let mut uncertainty = candidates
        .par_iter()
        .map(|&id| domain_uncertainty(&ctx, id).map(|u| (id, u)))
        .collect::<Result<Vec<_>>>()?;
    sort_by_domain(&mut uncertainty);

    let trace: BTreeMap<SampleId, &TracebackScore> = diversity.iter().map(|(id, s)| (*id, s)).collect();
    let take = m.min(uncertainty.len());
    let ids: Vec<SampleId> = uncertainty[..take].iter().map(|(id, _)| *id).collect();
    let scores = uncertainty[..take]
        .iter()
        .map(|(id, u)| ScoreRecord {
            s_trace: trace.get(id).map(|t| t.s_trace),
            iota: trace.get(id).map(|t| t.iota),
            s_learned: Some(u.s_learned),
            d_kl: Some(u.d_kl),
            d_domain: Some(u.d_domain),
            ..ScoreRecord::bare(*id)
        })
        .collect();
    Ok(Selection {
        ids,
        scores,
        diversity,
        uncertainty,
    })
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Uniform draw without replacement.
pub fn select_random(pool: &PoolState, m: usize, rng: &mut impl Rng) -> Selection {
    let unlabeled = pool.unlabeled_ids();
    let take = m.min(unlabeled.len());
    let ids: Vec<SampleId> = index::sample(rng, unlabeled.len(), take)
        .into_iter()
        .map(|i| unlabeled[i])
        .collect();
    Selection {
        scores: ids.iter().map(|&id| ScoreRecord::bare(id)).collect(),
        ids,
        ..Default::default()
    }
}

/// Greedy k-center on pooled pretext vectors: repeatedly take the unlabeled
/// point farthest (Euclidean) from every labeled point and every earlier
/// pick; ties go to the smaller id.
pub fn select_coreset(dataset: &Dataset, pool: &PoolState, m: usize) -> Selection {
    let unlabeled = pool.unlabeled_ids();
    let centers = pool.labeled_ids();
    let space = dataset.space();
    let mut nearest: Vec<f64> = unlabeled
        .par_iter()
        .map(|&u| {
            centers
                .iter()
                .map(|&c| squared_euclidean(space.vector(u), space.vector(c)))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mut taken = vec![false; unlabeled.len()];
    let mut ids = Vec::new();
    let mut scores = Vec::new();
    for _ in 0..m.min(unlabeled.len()) {
        let mut best: Option<usize> = None;
        for (i, d) in nearest.iter().enumerate() {
            if !taken[i] && best.is_none_or(|b| *d > nearest[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("an untaken point remains");
        taken[b] = true;
        let picked = unlabeled[b];
        ids.push(picked);
        scores.push(ScoreRecord {
            coreset_distance: Some(nearest[b].sqrt()),
            ..ScoreRecord::bare(picked)
        });
        for (i, d) in nearest.iter_mut().enumerate() {
            if !taken[i] {
                *d = d.min(squared_euclidean(space.vector(unlabeled[i]), space.vector(picked)));
            }
        }
    }
    Selection {
        ids,
        scores,
        ..Default::default()
    }
}

/// Top-M by predictive entropy of `model`; ties go to the smaller id.
pub fn select_entropy(dataset: &Dataset, pool: &PoolState, model: &DownstreamModel, m: usize) -> Selection {
    let mut scored: Vec<(SampleId, f64)> = pool
        .unlabeled_ids()
        .par_iter()
        .map(|&id| {
            let p = model.forward_pooled(&dataset.embeddings().pooled(id)).probs;
            (id, entropy(p.as_slice()))
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(m);
    Selection {
        ids: scored.iter().map(|(id, _)| *id).collect(),
        scores: scored
            .iter()
            .map(|&(id, h)| ScoreRecord {
                entropy: Some(h),
                ..ScoreRecord::bare(id)
            })
            .collect(),
        ..Default::default()
    }
}

/// Selects up to `m` unlabeled samples with `cfg.strategy`, training
/// whatever models the strategy needs.
pub fn select_round(dataset: &Dataset, pool: &PoolState, cfg: &RoundConfig, round: usize, m: usize) -> Result<Selection> {
    if pool.unlabeled().is_empty() || m == 0 {
        return Ok(Selection::default());
    }
    match cfg.strategy {
        Strategy::Random => {
            let mut rng = seeded_rng(cfg.seed, &format!("random/{round}"));
            Ok(select_random(pool, m, &mut rng))
        }
        Strategy::Coreset => Ok(select_coreset(dataset, pool, m)),
        Strategy::Entropy => {
            let model = train_selection_model(dataset, pool, cfg, round)?;
            Ok(select_entropy(dataset, pool, &model, m))
        }
        Strategy::Dokt | Strategy::DoktNoTraceback | Strategy::DoktNoMixing => {
            let models = train_models(dataset, pool, cfg, round)?;
            select_dokt(dataset, pool, &models, cfg, round, m)
        }
    }
}

/// Seeded uniform initial labeled pool; identical for every strategy that
/// shares a seed.
pub fn initial_pool(dataset: &Dataset, cfg: &RoundConfig, oracle: &mut dyn Oracle) -> Result<PoolState> {
    let n_pool = dataset.pool_size();
    let n_init = ((dataset.manifest().n_samples as f64 * cfg.initial_fraction).round() as usize).clamp(1, n_pool);
    let mut rng = seeded_rng(cfg.seed, "initial-pool");
    let mut ids: Vec<SampleId> = index::sample(&mut rng, n_pool, n_init)
        .into_iter()
        .map(SampleId)
        .collect();
    ids.sort_unstable();
    let mut initial = Vec::with_capacity(ids.len());
    for id in ids {
        let label = oracle
            .label(id)
            .ok_or_else(|| DoktError::Config(format!("oracle has no label for initial sample {id}")))?;
        initial.push((id, label));
    }
    let budget = cfg.budget_total().min(n_pool - n_init);
    PoolState::new(n_pool, initial, budget)
}

/// Runs the full simulated protocol and returns one report per round,
/// starting with the round-0 evaluation of the initial pool.
pub fn run_simulation(dataset: &Dataset, cfg: &RoundConfig) -> Result<Vec<RoundReport>> {
    run_simulation_with(dataset, cfg, |_, _| {})
}

/// [`run_simulation`] that also hands every report and (for rounds after
/// the first) its selection tables to `observe`.
pub fn run_simulation_with(
    dataset: &Dataset,
    cfg: &RoundConfig,
    mut observe: impl FnMut(&RoundReport, Option<&Selection>),
) -> Result<Vec<RoundReport>> {
    cfg.validate()?;
    let mut oracle = dataset.oracle();
    let mut pool = initial_pool(dataset, cfg, &mut oracle)?;
    let mut reports = Vec::with_capacity(cfg.rounds + 1);

    let start = Instant::now();
    let target = train_target(dataset, &pool, cfg, 0)?;
    let report = RoundReport {
        round: 0,
        selected: Vec::new(),
        scores: Vec::new(),
        accuracy: evaluate(dataset, &target),
        cumulative_labels: pool.labeled().len(),
        budget_used: pool.budget_used,
        partial: false,
        wall_time_ms: start.elapsed().as_millis(),
    };
    observe(&report, None);
    reports.push(report);

    for round in 1..=cfg.rounds {
        let m = cfg
            .m_per_round
            .min(pool.budget_remaining())
            .min(pool.unlabeled().len());
        if m == 0 {
            break;
        }
        let start = Instant::now();
        let selection = select_round(dataset, &pool, cfg, round, m)?;
        for &id in &selection.ids {
            let label = oracle
                .label(id)
                .ok_or_else(|| DoktError::Config(format!("oracle has no label for {id}")))?;
            pool.assign(id, label)?;
        }
        pool.round = round;
        pool.check_invariants()?;
        let target = train_target(dataset, &pool, cfg, round)?;
        let report = RoundReport {
            round,
            selected: selection.ids.clone(),
            scores: selection.scores.clone(),
            accuracy: evaluate(dataset, &target),
            cumulative_labels: pool.labeled().len(),
            budget_used: pool.budget_used,
            partial: selection.ids.len() < cfg.m_per_round,
            wall_time_ms: start.elapsed().as_millis(),
        };
        observe(&report, Some(&selection));
        reports.push(report);
    }
    Ok(reports)
}

/// Smallest cumulative label count whose accuracy reaches `target_acc`, at
/// round granularity; `None` if never reached.
pub fn labels_to_target(reports: &[RoundReport], target_acc: f64) -> Option<usize> {
    reports
        .iter()
        .find(|r| r.accuracy >= target_acc)
        .map(|r| r.cumulative_labels)
}

/// One simulated run of a strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct Run {
    pub seed: u64,
    pub reports: Vec<RoundReport>,
}

/// The accuracy a labels-to-target table is measured against.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Fixed(f64),
    /// Final accuracy of the named strategy's run with the same seed.
    FinalAccuracyOf(String),
}

/// One row of the labels-to-target table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRow {
    pub strategy: String,
    /// Mean over runs; an unreached run counts as its final label count plus
    /// one more round. `None` when no run reached the target.
    pub labels: Option<f64>,
    /// Every run reached the target.
    pub reached: bool,
    pub runs: usize,
    pub runs_reached: usize,
}

/// Cost charged to a run that never reaches the target.
pub fn unreached_cost(reports: &[RoundReport]) -> usize {
    let last = reports.last().map(|r| r.cumulative_labels).unwrap_or(0);
    let m = reports.iter().map(|r| r.selected.len()).max().unwrap_or(0);
    last + m
}

/// Aggregates [`labels_to_target`] over several runs per strategy.
pub fn labels_to_target_table(runs: &BTreeMap<String, Vec<Run>>, target: &Target) -> Result<Vec<TargetRow>> {
    let reference: BTreeMap<u64, f64> = match target {
        Target::Fixed(_) => BTreeMap::new(),
        Target::FinalAccuracyOf(name) => runs
            .get(name)
            .ok_or_else(|| DoktError::Config(format!("no runs for target strategy `{name}`")))?
            .iter()
            .filter_map(|r| r.reports.last().map(|l| (r.seed, l.accuracy)))
            .collect(),
    };
    let target_for = |seed: u64| -> Result<f64> {
        match target {
            Target::Fixed(acc) => Ok(*acc),
            Target::FinalAccuracyOf(name) => reference
                .get(&seed)
                .copied()
                .ok_or_else(|| DoktError::Config(format!("`{name}` has no run with seed {seed}"))),
        }
    };
    let mut rows = Vec::with_capacity(runs.len());
    for (strategy, runs) in runs {
        let mut counts = Vec::with_capacity(runs.len());
        for run in runs {
            counts.push(labels_to_target(&run.reports, target_for(run.seed)?));
        }
        let runs_reached = counts.iter().filter(|c| c.is_some()).count();
        let labels = (runs_reached > 0).then(|| {
            counts
                .iter()
                .zip(runs)
                .map(|(c, r)| c.unwrap_or_else(|| unreached_cost(&r.reports)) as f64)
                .sum::<f64>()
                / runs.len() as f64
        });
        rows.push(TargetRow {
            strategy: strategy.clone(),
            labels,
            reached: runs_reached == runs.len() && !runs.is_empty(),
            runs: runs.len(),
            runs_reached,
        });
    }
    Ok(rows)
}

/// `strategy,labels,reached` CSV for a table.
pub fn target_table_csv(rows: &[TargetRow]) -> String {
    let mut out = String::from("strategy,labels,reached\n");
    for row in rows {
        let labels = match row.labels {
            Some(l) => format!("{l}"),
            None => "unreached".to_string(),
        };
        out.push_str(&format!("{},{},{}\n", row.strategy, labels, row.reached));
    }
    out
}

/// One JSON object per line.
pub fn reports_to_jsonl(reports: &[RoundReport]) -> String {
    reports
        .iter()
        .map(|r| serde_json::to_string(r).expect("reports serialize") + "\n")
        .collect()
}

pub fn reports_from_jsonl(text: &str) -> Result<Vec<RoundReport>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| DoktError::Config(format!("bad report line: {e}"))))
        .collect()
}

/// Shuffles a copy of `ids` with the given stream; used by callers that
/// need a reproducible permutation.
pub fn shuffled(ids: &[SampleId], seed: u64, stream: &str) -> Vec<SampleId> {
    let mut out = ids.to_vec();
    out.shuffle(&mut seeded_rng(seed, stream));
    out
}
