//! JSON HTTP API over an [`Orchestrator`].
//!
//! Errors use the envelope `{"code": ..., "message": ...}`. Read endpoints
//! never extract, consolidate or summarize.

use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tower_http::cors::{Any, CorsLayer};

use revsum_core::orchestrator::{IngestError, Orchestrator, TriggerDecision};
use revsum_core::store::StoreError;
use revsum_core::{Review, Sentiment};

/// How triggered pipeline runs are executed after an ingest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// Spawned on the blocking pool; the response does not wait.
    Background,
    /// Completed before the response is sent.
    Inline,
}

#[derive(Clone)]
pub struct AppState {
    pub orchestrator: Arc<Orchestrator>,
    pub schedule: Schedule,
}

#[derive(Debug, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    fn not_found(what: &str, product_id: &str) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no {what} for product {product_id}"))
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

/// Request body for a new review; `product_id` defaults to the path and
/// `created_at` to the time of receipt.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReviewBody {
    pub review_id: String,
    #[serde(default)]
    pub product_id: Option<String>,
    pub text: String,
    #[serde(default)]
    pub created_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub verified_purchaser: Option<bool>,
    #[serde(default)]
    pub language: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct IngestResponse {
    pub accepted: bool,
    pub trigger: TriggerDecision,
}

#[derive(Debug, Deserialize)]
pub struct FilterQuery {
    pub aspect: Option<String>,
    pub sentiment: Option<String>,
    pub page: Option<String>,
}

pub fn router(state: AppState, cors_origin: Option<&str>) -> Router {
    let cors = match cors_origin.and_then(|o| HeaderValue::from_str(o).ok()) {
        Some(origin) => CorsLayer::new().allow_origin(origin),
        None => CorsLayer::new().allow_origin(Any),
    }
    .allow_methods(Any)
    .allow_headers(Any);
    Router::new()
        .route("/products/{id}/reviews", post(ingest).get(filter_reviews))
        .route("/products/{id}/summary", get(summary))
        .route("/products/{id}/aspects", get(aspects))
        .layer(cors)
        .with_state(state)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))
}

async fn ingest(
    State(state): State<AppState>,
    Path(product_id): Path<String>,
    body: Result<Json<ReviewBody>, JsonRejection>,
) -> Result<(StatusCode, Json<IngestResponse>), ApiError> {
    let Json(body) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    if let Some(p) = &body.product_id {
        if *p != product_id {
            return Err(ApiError::bad_request(format!(
                "body product_id {p:?} does not match path {product_id:?}"
            )));
        }
    }
    let review = Review {
        review_id: body.review_id,
        product_id: product_id.clone(),
        text: body.text,
        created_at: body.created_at.unwrap_or_else(Utc::now),
        verified_purchaser: body.verified_purchaser,
        language: body.language,
    };
    let orch = state.orchestrator.clone();
    let decision = blocking(move || orch.ingest(&review))
        .await?
        .map_err(|e| match e {
            IngestError::Store(StoreError::DuplicateReview(id)) => {
                ApiError::new(StatusCode::CONFLICT, "duplicate_review", format!("review {id} already exists"))
            }
            IngestError::Store(e) => ApiError::internal(e.to_string()),
            other => ApiError::bad_request(other.to_string()),
        })?;
    if decision.fires() {
        let orch = state.orchestrator.clone();
        let pid = product_id.clone();
        let run = tokio::task::spawn_blocking(move || match orch.try_run_pipeline(&pid) {
            Some(Err(e)) => tracing::warn!(%e, "triggered run failed"),
            Some(Ok(_)) => {}
            None => tracing::info!(product_id = %pid, "run already in flight"),
        });
        if state.schedule == Schedule::Inline {
            run.await.map_err(|e| ApiError::internal(e.to_string()))?;
        }
    }
    Ok((
        StatusCode::ACCEPTED,
        Json(IngestResponse {
            accepted: true,
            trigger: decision,
        }),
    ))
}

async fn summary(State(state): State<AppState>, Path(product_id): Path<String>) -> Response {
    match state.orchestrator.store().get_summary(&product_id) {
        Some(record) => Json(record).into_response(),
        None => ApiError::not_found("summary", &product_id).into_response(),
    }
}

async fn aspects(State(state): State<AppState>, Path(product_id): Path<String>) -> Result<Response, ApiError> {
    let orch = state.orchestrator.clone();
    let pid = product_id.clone();
    match blocking(move || orch.product_aspects(&pid)).await? {
        Some(list) => Ok(Json(list).into_response()),
        None => Err(ApiError::not_found("aspect profile", &product_id)),
    }
}

async fn filter_reviews(
    State(state): State<AppState>,
    Path(product_id): Path<String>,
    Query(q): Query<FilterQuery>,
) -> Result<Response, ApiError> {
    let sentiment = q
        .sentiment
        .as_deref()
        .filter(|s| !s.is_empty())
        .map(str::parse::<Sentiment>)
        .transpose()
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    let page = match q.page.as_deref() {
        None | Some("") => 1,
        Some(p) => p
            .parse::<usize>()
            .map_err(|_| ApiError::bad_request(format!("page must be a positive integer, got {p:?}")))?,
    };
    let aspect = q.aspect.filter(|a| !a.trim().is_empty());
    let orch = state.orchestrator.clone();
    let page = blocking(move || orch.filter_reviews(&product_id, aspect.as_deref(), sentiment, page))
        .await?
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(Json(page).into_response())
}
