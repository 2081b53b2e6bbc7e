//! JSON-over-HTTP routes for the labeling console.

use std::sync::{Arc, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dokt_core::sampler::RoundReport;
use dokt_core::{Label, SampleId};
use serde::{Deserialize, Serialize};

use crate::session::{asset_path, QueueEntry, Session, SessionError, Stats, API_VERSION};

pub type SharedSession = Arc<RwLock<Session>>;

pub fn router(session: SharedSession) -> Router {
    Router::new()
        .route("/api/queue", get(get_queue))
        .route("/api/labels", post(post_label))
        .route("/api/round/advance", post(advance_round))
        .route("/api/stats", get(get_stats))
        .route("/api/assets/{id}", get(get_asset))
        .with_state(session)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub v: u32,
    pub error: String,
    pub message: String,
    pub revision: u64,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    revision: u64,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>, revision: u64) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            revision,
        }
    }

    fn from_session(err: SessionError, revision: u64) -> Self {
        let (status, code) = match &err {
            SessionError::StaleRevision { .. } => (StatusCode::CONFLICT, "stale_revision"),
            SessionError::UnknownId(_) => (StatusCode::NOT_FOUND, "unknown_id"),
            SessionError::ClassOutOfRange { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "class_out_of_range"),
            SessionError::AlreadyLabeled(_) => (StatusCode::CONFLICT, "already_labeled"),
            SessionError::PendingLabels(_) => (StatusCode::CONFLICT, "pending_labels"),
            SessionError::BudgetExhausted => (StatusCode::CONFLICT, "budget_exhausted"),
            SessionError::AdvanceInProgress => (StatusCode::CONFLICT, "advance_in_progress"),
            SessionError::CheckpointMismatch(_) | SessionError::Core(_) => {
                (StatusCode::INTERNAL_SERVER_ERROR, "internal")
            }
        };
        Self::new(status, code, err.to_string(), revision)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            v: API_VERSION,
            error: self.code.to_string(),
            message: self.message,
            revision: self.revision,
        };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn read(session: &SharedSession) -> std::sync::RwLockReadGuard<'_, Session> {
    session.read().unwrap_or_else(|e| e.into_inner())
}

fn write(session: &SharedSession) -> std::sync::RwLockWriteGuard<'_, Session> {
    session.write().unwrap_or_else(|e| e.into_inner())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueueResponse {
    pub v: u32,
    pub revision: u64,
    pub round: usize,
    pub pending: usize,
    pub advancing: bool,
    pub entries: Vec<QueueEntry>,
}

async fn get_queue(State(session): State<SharedSession>) -> Json<QueueResponse> {
    let s = read(&session);
    let entries = s.queue();
    Json(QueueResponse {
        v: API_VERSION,
        revision: s.revision(),
        round: entries.first().map(|e| e.round).unwrap_or(s.state().pool.round),
        pending: s.pending(),
        advancing: s.is_advancing(),
        entries,
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LabelRequest {
    #[serde(default)]
    pub v: Option<u32>,
    pub id: SampleId,
    pub class: usize,
    pub revision: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LabelResponse {
    pub v: u32,
    pub id: SampleId,
    pub class: Label,
    pub revision: u64,
    pub pending: usize,
}

fn check_version(v: Option<u32>, revision: u64) -> Result<(), ApiError> {
    match v {
        Some(v) if v != API_VERSION => Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "unsupported_version",
            format!("request version {v} is not supported; expected {API_VERSION}"),
            revision,
        )),
        _ => Ok(()),
    }
}

async fn post_label(
    State(session): State<SharedSession>,
    body: Result<Json<LabelRequest>, JsonRejection>,
) -> ApiResult<LabelResponse> {
    let mut s = write(&session);
    let revision = s.revision();
    let Json(req) = body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text(), revision))?;
    check_version(req.v, revision)?;
    let ack = s
        .post_label(req.id, req.class, req.revision)
        .map_err(|e| ApiError::from_session(e, revision))?;
    Ok(Json(LabelResponse {
        v: API_VERSION,
        id: ack.id,
        class: ack.label,
        revision: ack.revision,
        pending: ack.pending,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AdvanceResponse {
    pub v: u32,
    pub revision: u64,
    pub report: RoundReport,
    pub queue_size: usize,
    pub finished: bool,
}

async fn advance_round(State(session): State<SharedSession>) -> ApiResult<AdvanceResponse> {
    let job = {
        let mut s = write(&session);
        let revision = s.revision();
        s.begin_advance().map_err(|e| ApiError::from_session(e, revision))?
    };
    let outcome = match tokio::task::spawn_blocking(move || job.run()).await {
        Ok(outcome) => outcome,
        Err(join) => Err(SessionError::Core(dokt_core::DoktError::Config(format!(
            "round advance aborted: {join}"
        )))),
    };
    let mut s = write(&session);
    let revision = s.revision();
    let report = s
        .finish_advance(outcome)
        .map_err(|e| ApiError::from_session(e, revision))?;
    let queue_size = s.state().queue.len();
    Ok(Json(AdvanceResponse {
        v: API_VERSION,
        revision: s.revision(),
        report,
        queue_size,
        finished: queue_size == 0,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StatsResponse {
    pub v: u32,
    #[serde(flatten)]
    pub stats: Stats,
}

async fn get_stats(State(session): State<SharedSession>) -> Json<StatsResponse> {
    Json(StatsResponse {
        v: API_VERSION,
        stats: read(&session).stats(),
    })
}

/// Returned for samples without an image asset so the console can draw a
/// glyph from the pooled embedding.
#[derive(Debug, Serialize, Deserialize)]
pub struct EmbeddingAsset {
    pub v: u32,
    pub id: SampleId,
    pub kind: String,
    pub pooled: Vec<f64>,
}

fn content_type(path: &std::path::Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("svg") => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

async fn get_asset(State(session): State<SharedSession>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let (dataset, revision) = {
        let s = read(&session);
        (Arc::clone(s.dataset()), s.revision())
    };
    let n = dataset.manifest().n_samples;
    let id = match id.parse::<usize>() {
        Ok(i) if i < n => SampleId(i),
        _ => {
            return Err(ApiError::new(
                StatusCode::NOT_FOUND,
                "unknown_id",
                format!("no sample `{id}`"),
                revision,
            ))
        }
    };
    if let Some(path) = asset_path(&dataset, id) {
        let bytes = tokio::fs::read(&path).await.map_err(|e| {
            ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string(), revision)
        })?;
        return Ok(([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response());
    }
    Ok(Json(EmbeddingAsset {
        v: API_VERSION,
        id,
        kind: "embedding".into(),
        pooled: dataset.embeddings().pooled(id),
    })
    .into_response())
}
