//! Audit-queue service: serves a ranked queue of rooted subgraphs, records
//! auditor verdicts in an append-only log and folds "worth auditing"
//! verdicts back into the nearest-neighbor interesting set on rerank.
//!
//! A state directory holds `service.json`, the embeddings, the subgraph
//! files, an optional SMR model and `labels.jsonl`.

mod api;
mod config;
mod labels;
mod state;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

pub use api::router;
pub use config::{ServiceConfig, CONFIG_FILE, LABELS_FILE};
pub use labels::{AuditLabel, LabelBook, LabelLog, Verdict};
pub use state::{compute_queue, interesting_set, AppState, Artifacts, QueueState};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{}: {reason}", path.display())]
    Startup { path: PathBuf, reason: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl ServiceError {
    pub fn startup(path: &Path, reason: impl ToString) -> Self {
        ServiceError::Startup {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        }
    }
}

/// Loads `state_dir` and builds the router.
pub fn app(state_dir: &Path) -> Result<axum::Router, ServiceError> {
    Ok(router(Arc::new(AppState::open(state_dir)?)))
}

/// Serves until the process is stopped.
pub async fn serve(state_dir: &Path, addr: SocketAddr) -> Result<(), ServiceError> {
    let app = app(state_dir)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app).await?;
    Ok(())
}
