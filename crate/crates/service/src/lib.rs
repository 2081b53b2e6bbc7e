//! Labeling service for human-oracle active-learning sessions.
//!
//! One process hosts one session. State changes go through [`Session`],
//! which checkpoints after every accepted mutation; [`router`] exposes it
//! as a versioned JSON API.

pub mod http;
pub mod session;

pub use http::{router, SharedSession};
pub use session::{
    AdvanceJob, EntryStatus, LabelAck, QueueEntry, Session, SessionError, SessionState, Stats, API_VERSION,
    CHECKPOINT_FILE,
};

use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

/// Serves `session` on `addr` until `shutdown` resolves.
pub async fn serve(
    session: Session,
    addr: SocketAddr,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let app = router(Arc::new(RwLock::new(session)));
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}
