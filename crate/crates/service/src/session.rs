//! Human-oracle session state: the query queue, label intake with
//! optimistic concurrency, round advance and checkpointing.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use dokt_core::dataset::Dataset;
use dokt_core::sampler::{self, RoundConfig, RoundReport, ScoreRecord};
use dokt_core::{DoktError, Label, PoolState, SampleId};
use serde::{Deserialize, Serialize};

/// Version tag carried by every wire payload and by checkpoints.
pub const API_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "session.json";

const ASSET_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "gif", "webp", "svg"];

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("stale revision {got}; current revision is {current}")]
    StaleRevision { current: u64, got: u64 },
    #[error("sample {0} is not in the current queue")]
    UnknownId(usize),
    #[error("class {class} is outside [0, {n_classes})")]
    ClassOutOfRange { class: usize, n_classes: usize },
    #[error("sample {0} is already labeled")]
    AlreadyLabeled(usize),
    #[error("{0} queue entries are still pending")]
    PendingLabels(usize),
    #[error("label budget exhausted")]
    BudgetExhausted,
    #[error("a round advance is in progress")]
    AdvanceInProgress,
    #[error("checkpoint does not match the loaded manifest: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Core(#[from] DoktError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryStatus {
    Pending,
    Labeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub id: SampleId,
    /// URL of a display asset, when the manifest provides one for this id.
    pub asset: Option<String>,
    pub round: usize,
    pub s_trace: Option<f64>,
    pub d_domain: Option<f64>,
    pub status: EntryStatus,
    pub label: Option<Label>,
}

/// Shape of the dataset a checkpoint was written against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetShape {
    pub n_samples: usize,
    pub n_classes: usize,
    pub tokens_per_sample: usize,
    pub pretext_dim: usize,
}

impl DatasetShape {
    fn of(dataset: &Dataset) -> Self {
        let m = dataset.manifest();
        Self {
            n_samples: m.n_samples,
            n_classes: m.n_classes,
            tokens_per_sample: m.tokens_per_sample,
            pretext_dim: m.pretext_dim,
        }
    }
}

/// Everything needed to resume a session; this is the checkpoint format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub v: u32,
    pub revision: u64,
    pub dataset: DatasetShape,
    pub config: RoundConfig,
    pub pool: PoolState,
    /// Entries queried for the round in progress, in selection order.
    pub queue: Vec<QueueEntry>,
    pub reports: Vec<RoundReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelAck {
    pub id: SampleId,
    pub label: Label,
    pub revision: u64,
    pub pending: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Equal-width bins over `[min, max]`.
    pub bins: Vec<usize>,
}

pub const HISTOGRAM_BINS: usize = 10;

impl Distribution {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let mut bins = vec![0; HISTOGRAM_BINS];
        let width = (max - min) / HISTOGRAM_BINS as f64;
        for v in values {
            let b = if width > 0.0 {
                (((v - min) / width) as usize).min(HISTOGRAM_BINS - 1)
            } else {
                0
            };
            bins[b] += 1;
        }
        Some(Self {
            count: values.len(),
            min,
            max,
            mean,
            bins,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundScores {
    pub round: usize,
    pub s_trace: Option<Distribution>,
    pub d_domain: Option<Distribution>,
}

impl RoundScores {
    fn from_pairs(round: usize, pairs: impl Iterator<Item = (Option<f64>, Option<f64>)>) -> Self {
        let (trace, domain): (Vec<_>, Vec<_>) = pairs.unzip();
        let trace: Vec<f64> = trace.into_iter().flatten().collect();
        let domain: Vec<f64> = domain.into_iter().flatten().collect();
        Self {
            round,
            s_trace: Distribution::of(&trace),
            d_domain: Distribution::of(&domain),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyPoint {
    pub round: usize,
    pub accuracy: f64,
    pub cumulative_labels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub revision: u64,
    /// Round whose queue is currently published.
    pub round: usize,
    pub rounds_done: usize,
    pub n_classes: usize,
    pub strategy: String,
    pub m_per_round: usize,
    pub initial_labeled: usize,
    pub labeled_total: usize,
    pub labels_used: usize,
    pub budget_total: usize,
    pub budget_remaining: usize,
    pub pending: usize,
    pub advancing: bool,
    pub finished: bool,
    pub latest_accuracy: Option<f64>,
    pub accuracy_history: Vec<AccuracyPoint>,
    pub score_distributions: Vec<RoundScores>,
}

/// Work captured by [`Session::begin_advance`]; runs without holding the
/// session so readers stay responsive.
#[derive(Debug, Clone)]
pub struct AdvanceJob {
    dataset: Arc<Dataset>,
    config: RoundConfig,
    pool: PoolState,
    completed: Vec<QueueEntry>,
}

#[derive(Debug, Clone)]
pub struct AdvanceOutcome {
    report: RoundReport,
    next_queue: Vec<QueueEntry>,
}

impl AdvanceJob {
    /// Evaluates the just-completed round and selects the next queue.
    pub fn run(self) -> Result<AdvanceOutcome, SessionError> {
        let start = std::time::Instant::now();
        let round = self.pool.round + 1;
        let target = sampler::train_target(&self.dataset, &self.pool, &self.config, round)?;
        let accuracy = sampler::evaluate(&self.dataset, &target);
        let m = self
            .config
            .m_per_round
            .min(self.pool.budget_remaining())
            .min(self.pool.unlabeled().len());
        let next_queue = if m == 0 {
            Vec::new()
        } else {
            let selection = sampler::select_round(&self.dataset, &self.pool, &self.config, round + 1, m)?;
            entries_for(&self.dataset, round + 1, &selection.scores)
        };
        let report = RoundReport {
            round,
            selected: self.completed.iter().map(|e| e.id).collect(),
            scores: self.completed.iter().map(score_of).collect(),
            accuracy,
            cumulative_labels: self.pool.labeled().len(),
            budget_used: self.pool.budget_used,
            partial: self.completed.len() < self.config.m_per_round,
            wall_time_ms: start.elapsed().as_millis(),
        };
        Ok(AdvanceOutcome { report, next_queue })
    }
}

fn score_of(entry: &QueueEntry) -> ScoreRecord {
    ScoreRecord {
        s_trace: entry.s_trace,
        d_domain: entry.d_domain,
        ..ScoreRecord::bare(entry.id)
    }
}

fn entries_for(dataset: &Dataset, round: usize, scores: &[ScoreRecord]) -> Vec<QueueEntry> {
    scores
        .iter()
        .map(|s| QueueEntry {
            id: s.id,
            asset: asset_path(dataset, s.id).map(|_| format!("/api/assets/{}", s.id)),
            round,
            s_trace: s.s_trace,
            d_domain: s.d_domain,
            status: EntryStatus::Pending,
            label: None,
        })
        .collect()
}

/// The display asset for `id`: a file named `<id>.<ext>` in the manifest's
/// assets directory.
pub fn asset_path(dataset: &Dataset, id: SampleId) -> Option<PathBuf> {
    let dir = dataset.manifest().assets()?;
    ASSET_EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
}

pub struct Session {
    dataset: Arc<Dataset>,
    state: SessionState,
    checkpoint: Option<PathBuf>,
    advancing: bool,
}

impl Session {
    /// Resumes from `checkpoint_dir` when it holds a checkpoint, otherwise
    /// starts a fresh session: draws the initial pool, evaluates it and
    /// publishes the first queue.
    pub fn open(dataset: Arc<Dataset>, config: RoundConfig, checkpoint_dir: Option<&Path>) -> Result<Self, SessionError> {
        let checkpoint = checkpoint_dir.map(|d| d.join(CHECKPOINT_FILE));
        if let Some(path) = checkpoint.as_ref().filter(|p| p.is_file()) {
            let state = read_checkpoint(path)?;
            return Self::resume(dataset, state, checkpoint);
        }
        let state = fresh_state(&dataset, config)?;
        let session = Self {
            dataset,
            state,
            checkpoint,
            advancing: false,
        };
        session.save()?;
        Ok(session)
    }

    /// Rebuilds a session from a checkpointed state.
    pub fn resume(dataset: Arc<Dataset>, state: SessionState, checkpoint: Option<PathBuf>) -> Result<Self, SessionError> {
        if state.v != API_VERSION {
            return Err(SessionError::CheckpointMismatch(format!("unsupported version {}", state.v)));
        }
        let shape = DatasetShape::of(&dataset);
        if state.dataset != shape {
            return Err(SessionError::CheckpointMismatch(format!(
                "checkpoint has {:?}, manifest has {:?}",
                state.dataset, shape
            )));
        }
        if state.pool.n_ids() != dataset.pool_size() {
            return Err(SessionError::CheckpointMismatch("pool size differs".into()));
        }
        state.pool.check_invariants()?;
        Ok(Self {
            dataset,
            state,
            checkpoint,
            advancing: false,
        })
    }

    pub fn dataset(&self) -> &Arc<Dataset> {
        &self.dataset
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn revision(&self) -> u64 {
        self.state.revision
    }

    pub fn is_advancing(&self) -> bool {
        self.advancing
    }

    pub fn pending(&self) -> usize {
        self.state
            .queue
            .iter()
            .filter(|e| e.status == EntryStatus::Pending)
            .count()
    }

    /// Pending entries first, each group in selection order.
    pub fn queue(&self) -> Vec<QueueEntry> {
        let (mut pending, labeled): (Vec<_>, Vec<_>) = self
            .state
            .queue
            .iter()
            .cloned()
            .partition(|e| e.status == EntryStatus::Pending);
        pending.extend(labeled);
        pending
    }

    pub fn post_label(&mut self, id: SampleId, class: usize, revision: u64) -> Result<LabelAck, SessionError> {
        if self.advancing {
            return Err(SessionError::AdvanceInProgress);
        }
        if revision != self.state.revision {
            return Err(SessionError::StaleRevision {
                current: self.state.revision,
                got: revision,
            });
        }
        let n_classes = self.state.dataset.n_classes;
        if class >= n_classes {
            return Err(SessionError::ClassOutOfRange { class, n_classes });
        }
        let idx = self
            .state
            .queue
            .iter()
            .position(|e| e.id == id)
            .ok_or(SessionError::UnknownId(id.0))?;
        if self.state.queue[idx].status == EntryStatus::Labeled {
            return Err(SessionError::AlreadyLabeled(id.0));
        }
        let label = Label(class);
        let mut next = self.state.clone();
        next.pool.assign(id, label)?;
        next.queue[idx].status = EntryStatus::Labeled;
        next.queue[idx].label = Some(label);
        next.revision += 1;
        self.commit(next)?;
        Ok(LabelAck {
            id,
            label,
            revision: self.state.revision,
            pending: self.pending(),
        })
    }

    /// Checks the advance preconditions and marks the session as advancing.
    /// Label posts are rejected until [`Session::finish_advance`].
    pub fn begin_advance(&mut self) -> Result<AdvanceJob, SessionError> {
        if self.advancing {
            return Err(SessionError::AdvanceInProgress);
        }
        let pending = self.pending();
        if pending > 0 {
            return Err(SessionError::PendingLabels(pending));
        }
        if self.state.queue.is_empty() {
            return Err(SessionError::BudgetExhausted);
        }
        self.advancing = true;
        Ok(AdvanceJob {
            dataset: Arc::clone(&self.dataset),
            config: self.state.config.clone(),
            pool: self.state.pool.clone(),
            completed: self.state.queue.clone(),
        })
    }

    /// Publishes the outcome of an advance job, or clears the advancing
    /// flag if it failed.
    pub fn finish_advance(&mut self, outcome: Result<AdvanceOutcome, SessionError>) -> Result<RoundReport, SessionError> {
        self.advancing = false;
        let outcome = outcome?;
        let mut next = self.state.clone();
        next.pool.round = outcome.report.round;
        next.reports.push(outcome.report.clone());
        next.queue = outcome.next_queue;
        next.revision += 1;
        self.commit(next)?;
        Ok(outcome.report)
    }

    /// Synchronous advance: completes the round and publishes the next queue.
    pub fn advance_round(&mut self) -> Result<RoundReport, SessionError> {
        let job = self.begin_advance()?;
        let outcome = job.run();
        self.finish_advance(outcome)
    }

    pub fn stats(&self) -> Stats {
        let s = &self.state;
        let mut score_distributions: Vec<RoundScores> = s
            .reports
            .iter()
            .filter(|r| r.round > 0)
            .map(|r| RoundScores::from_pairs(r.round, r.scores.iter().map(|x| (x.s_trace, x.d_domain))))
            .collect();
        if let Some(round) = s.queue.first().map(|e| e.round) {
            score_distributions.push(RoundScores::from_pairs(
                round,
                s.queue.iter().map(|e| (e.s_trace, e.d_domain)),
            ));
        }
        Stats {
            revision: s.revision,
            round: s.queue.first().map(|e| e.round).unwrap_or(s.pool.round),
            rounds_done: s.pool.round,
            n_classes: s.dataset.n_classes,
            strategy: s.config.strategy.to_string(),
            m_per_round: s.config.m_per_round,
            initial_labeled: s.pool.initial_labeled(),
            labeled_total: s.pool.labeled().len(),
            labels_used: s.pool.budget_used,
            budget_total: s.pool.budget_total,
            budget_remaining: s.pool.budget_remaining(),
            pending: self.pending(),
            advancing: self.advancing,
            finished: s.queue.is_empty(),
            latest_accuracy: s.reports.last().map(|r| r.accuracy),
            accuracy_history: s
                .reports
                .iter()
                .map(|r| AccuracyPoint {
                    round: r.round,
                    accuracy: r.accuracy,
                    cumulative_labels: r.cumulative_labels,
                })
                .collect(),
            score_distributions,
        }
    }

    /// Persists `next` and only then makes it current, so a failed write
    /// leaves the session unchanged.
    fn commit(&mut self, next: SessionState) -> Result<(), SessionError> {
        if let Some(path) = &self.checkpoint {
            write_checkpoint(path, &next)?;
        }
        self.state = next;
        Ok(())
    }

    fn save(&self) -> Result<(), SessionError> {
        if let Some(path) = &self.checkpoint {
            write_checkpoint(path, &self.state)?;
        }
        Ok(())
    }
}

fn fresh_state(dataset: &Arc<Dataset>, config: RoundConfig) -> Result<SessionState, SessionError> {
    config.validate()?;
    let mut oracle = dataset.oracle();
    let pool = sampler::initial_pool(dataset, &config, &mut oracle)?;
    let target = sampler::train_target(dataset, &pool, &config, 0)?;
    let initial = RoundReport {
        round: 0,
        selected: Vec::new(),
        scores: Vec::new(),
        accuracy: sampler::evaluate(dataset, &target),
        cumulative_labels: pool.labeled().len(),
        budget_used: 0,
        partial: false,
        wall_time_ms: 0,
    };
    let m = config.m_per_round.min(pool.budget_remaining()).min(pool.unlabeled().len());
    let queue = if m == 0 {
        Vec::new()
    } else {
        let selection = sampler::select_round(dataset, &pool, &config, 1, m)?;
        entries_for(dataset, 1, &selection.scores)
    };
    Ok(SessionState {
        v: API_VERSION,
        revision: 0,
        dataset: DatasetShape::of(dataset),
        config,
        pool,
        queue,
        reports: vec![initial],
    })
}

pub fn read_checkpoint(path: &Path) -> Result<SessionState, SessionError> {
    let text = fs::read_to_string(path).map_err(|e| DoktError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| DoktError::Checkpoint(format!("{}: {e}", path.display())).into())
}

/// Writes to a sibling temp file and renames it over the checkpoint so a
/// crash never leaves a torn file.
pub fn write_checkpoint(path: &Path, state: &SessionState) -> Result<(), SessionError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| DoktError::io(dir, e))?;
    let tmp = path.with_extension("json.tmp");
    let text = serde_json::to_string(state).map_err(|e| DoktError::Checkpoint(e.to_string()))?;
    fs::write(&tmp, text).map_err(|e| DoktError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| DoktError::io(path, e))?;
    Ok(())
}
