use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{NaiveDate, Utc};
use sentinel_core::corpus::ActionRecord;
use sentinel_core::ranking::{MutationKind, RankMethod, RankingError};
use sentinel_core::sampler::{subgraph_file_name, RootedSubgraph, SubgraphEdge, SubgraphEntity};
use sentinel_core::stats::{credible_interval, AuditOutcome, BetaPrior};
use serde::{Deserialize, Serialize};

use crate::labels::{AuditLabel, Verdict};
use crate::state::{compute_queue, AppState};

const DEFAULT_LIMIT: usize = 50;

pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/queue", get(queue))
        .route("/api/subgraph/{id}", get(subgraph))
        .route("/api/label", post(label))
        .route("/api/rerank", post(rerank))
        .route("/api/stats", get(stats))
        .with_state(state)
}

#[derive(Debug, Deserialize)]
struct QueueParams {
    limit: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueueItem {
    pub subgraph_id: String,
    pub method: RankMethod,
    pub score: f64,
    pub rank: usize,
    /// Combined verdict, if any auditor labeled the item since the last rerank.
    pub label: Option<Verdict>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueueResponse {
    pub generation: u64,
    pub method: RankMethod,
    pub interesting: Vec<String>,
    pub items: Vec<QueueItem>,
}

async fn queue(State(st): State<Arc<AppState>>, Query(p): Query<QueueParams>) -> ApiResult<QueueResponse> {
    let q = st.queue();
    let labels = st.labels();
    let limit = p.limit.unwrap_or(DEFAULT_LIMIT);
    Ok(Json(QueueResponse {
        generation: q.generation,
        method: q.method,
        interesting: q.interesting.ids().to_vec(),
        items: q
            .queue
            .iter()
            .take(limit)
            .map(|f| QueueItem {
                subgraph_id: f.subgraph_id.clone(),
                method: f.method,
                score: f.score,
                rank: f.rank,
                label: labels.status(&f.subgraph_id),
            })
            .collect(),
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ActionView {
    #[serde(flatten)]
    pub record: ActionRecord,
    /// Hours from the root's start; negative before it.
    pub delta_hours: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SubgraphView {
    pub root_id: String,
    pub agent_id: String,
    pub day: NaiveDate,
    pub actions: Vec<ActionView>,
    pub entities: Vec<SubgraphEntity>,
    pub edges: Vec<SubgraphEdge>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mutation: Option<MutationKind>,
}

impl From<RootedSubgraph> for SubgraphView {
    fn from(g: RootedSubgraph) -> Self {
        let origin = g.root_start();
        Self {
            actions: g
                .actions
                .into_iter()
                .map(|record| ActionView {
                    delta_hours: record.delta_hours(origin),
                    record,
                })
                .collect(),
            root_id: g.root_id,
            agent_id: g.agent_id,
            day: g.day,
            entities: g.entities,
            edges: g.edges,
            mutation: g.mutation,
        }
    }
}

async fn subgraph(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<SubgraphView> {
    let not_found = || ApiError::new(StatusCode::NOT_FOUND, format!("no subgraph {id:?}"));
    if !st.artifacts.embeddings.contains_key(&id) {
        return Err(not_found());
    }
    let path = st.artifacts.subgraph_dir.join(subgraph_file_name(&id));
    let text = match tokio::fs::read_to_string(&path).await {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(not_found()),
        Err(e) => return Err(ApiError::internal(e)),
    };
    let g: RootedSubgraph = serde_json::from_str(&text)
        .map_err(|e| ApiError::internal(format!("{}: {e}", path.display())))?;
    Ok(Json(g.into()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LabelRequest {
    pub subgraph_id: String,
    pub verdict: Verdict,
    pub auditor: String,
}

async fn label(State(st): State<Arc<AppState>>, Json(req): Json<LabelRequest>) -> ApiResult<AuditLabel> {
    if !st.artifacts.embeddings.contains_key(&req.subgraph_id) {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            format!("no subgraph {:?}", req.subgraph_id),
        ));
    }
    if req.auditor.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "auditor must not be empty"));
    }
    let label = AuditLabel {
        subgraph_id: req.subgraph_id,
        verdict: req.verdict,
        auditor: req.auditor,
        at: Utc::now(),
    };
    let log = st.writer.lock().await;
    let (file, stored) = (log.clone(), label.clone());
    tokio::task::spawn_blocking(move || file.append(&stored))
        .await
        .map_err(ApiError::internal)?
        .map_err(ApiError::internal)?;
    let mut book = (*st.labels()).clone();
    book.apply(label.clone());
    *st.labels.write().expect("lock not poisoned") = Arc::new(book);
    drop(log);
    Ok(Json(label))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RerankResponse {
    pub generation: u64,
    pub queue_len: usize,
    pub interesting: Vec<String>,
}

async fn rerank(State(st): State<Arc<AppState>>) -> ApiResult<RerankResponse> {
    let log = st.writer.lock().await;
    let book = st.labels();
    let generation = st.queue().generation + 1;
    let art = st.artifacts.clone();
    // Readers keep the previous queue until the swap below.
    let next = tokio::task::spawn_blocking(move || compute_queue(&art, &book, generation))
        .await
        .map_err(ApiError::internal)?
        .map_err(|e| match e {
            RankingError::EmptyInterestingSet => ApiError::new(StatusCode::CONFLICT, e.to_string()),
            e => ApiError::internal(e),
        })?;
    let resp = RerankResponse {
        generation,
        queue_len: next.queue.len(),
        interesting: next.interesting.ids().to_vec(),
    };
    *st.queue.write().expect("lock not poisoned") = Arc::new(next);
    drop(log);
    Ok(Json(resp))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StatsResponse {
    pub k: u64,
    pub w: u64,
    pub precision: Option<f64>,
    pub level: f64,
    pub interval: (f64, f64),
}

async fn stats(State(st): State<Arc<AppState>>) -> ApiResult<StatsResponse> {
    let labeled = st.labels().labeled().into_values().collect::<Vec<_>>();
    let k = labeled.len() as u64;
    let w = labeled.iter().filter(|v| **v == Verdict::WorthAuditing).count() as u64;
    let level = st.artifacts.config.level;
    let outcome = AuditOutcome::new(k, w).map_err(ApiError::internal)?;
    let interval = credible_interval(outcome, level, BetaPrior::UNIFORM).map_err(ApiError::internal)?;
    Ok(Json(StatsResponse {
        k,
        w,
        precision: (k > 0).then(|| w as f64 / k as f64),
        level,
        interval,
    }))
}
