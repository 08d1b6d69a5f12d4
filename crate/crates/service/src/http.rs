//! HTTP+JSON front of the campaign store.
//!
//! - `GET  /campaigns/{id}` progress
//! - `GET  /campaigns/{id}/next?annotator=A` next work item or `null`
//! - `POST /campaigns/{id}/ratings` `{annotator, work_item, labels[6]}`
//! - `GET  /campaigns/{id}/report?n=3` analytics
//!
//! Writes go through one lock per campaign; any other path is served from the
//! optional UI directory.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, RwLock};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cewb_core::Label;
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use crate::campaign::{Ack, Campaign, CampaignError, CampaignReport, Progress, WorkItem};

#[derive(Clone, Default)]
pub struct AppState {
    campaigns: Arc<HashMap<String, Arc<RwLock<Campaign>>>>,
}

impl AppState {
    pub fn new(campaigns: Vec<Campaign>) -> Self {
        let map = campaigns.into_iter().map(|c| (c.config.id.clone(), Arc::new(RwLock::new(c)))).collect();
        AppState { campaigns: Arc::new(map) }
    }

    fn get(&self, id: &str) -> Result<Arc<RwLock<Campaign>>, ApiError> {
        self.campaigns.get(id).cloned().ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown campaign {id}")))
    }
}

#[derive(Debug)]
pub struct ApiError(pub StatusCode, pub String);

#[derive(Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorBody { error: self.1 })).into_response()
    }
}

impl From<CampaignError> for ApiError {
    fn from(e: CampaignError) -> Self {
        let status = match &e {
            CampaignError::UnknownItem(_) => StatusCode::NOT_FOUND,
            CampaignError::Arity { .. } | CampaignError::Invalid(_) => StatusCode::BAD_REQUEST,
            CampaignError::Conflict { .. } => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

fn poisoned() -> ApiError {
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, "campaign lock poisoned".into())
}

#[derive(Deserialize)]
pub struct NextQuery {
    pub annotator: String,
}

#[derive(Serialize, Deserialize)]
pub struct NextResponse {
    pub work_item: Option<WorkItem>,
    pub progress: Progress,
}

#[derive(Serialize, Deserialize)]
pub struct RatingsBody {
    pub annotator: String,
    pub work_item: String,
    pub labels: Vec<Label>,
}

#[derive(Deserialize)]
pub struct ReportQuery {
    pub n: Option<usize>,
}

async fn progress(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<Progress>, ApiError> {
    let c = s.get(&id)?;
    let c = c.read().map_err(|_| poisoned())?;
    Ok(Json(c.progress()))
}

async fn next(
    State(s): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<NextQuery>,
) -> Result<Json<NextResponse>, ApiError> {
    if q.annotator.trim().is_empty() {
        return Err(ApiError(StatusCode::BAD_REQUEST, "annotator must be non-empty".into()));
    }
    let c = s.get(&id)?;
    let c = c.read().map_err(|_| poisoned())?;
    Ok(Json(NextResponse { work_item: c.next_work_item(&q.annotator), progress: c.progress() }))
}

async fn ratings(
    State(s): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<RatingsBody>,
) -> Result<Json<Ack>, ApiError> {
    let c = s.get(&id)?;
    let mut c = c.write().map_err(|_| poisoned())?;
    Ok(Json(c.submit(&body.annotator, &body.work_item, &body.labels)?))
}

async fn report(
    State(s): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<ReportQuery>,
) -> Result<Json<CampaignReport>, ApiError> {
    let n = q.n.unwrap_or(3);
    if n == 0 || n % 2 == 0 {
        return Err(ApiError(StatusCode::BAD_REQUEST, format!("n = {n} must be odd")));
    }
    let c = s.get(&id)?;
    let c = c.read().map_err(|_| poisoned())?;
    Ok(Json(c.report(n)))
}

pub fn router(state: AppState, ui_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/campaigns/{id}", get(progress))
        .route("/campaigns/{id}/next", get(next))
        .route("/campaigns/{id}/ratings", post(ratings))
        .route("/campaigns/{id}/report", get(report))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve(state: AppState, ui_dir: Option<&Path>, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state, ui_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
