//! HTTP routes. Every error body is `{"code": ..., "message": ...}`.

use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode, Uri};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use memstrata_core::model::Timestamp;
use memstrata_core::Error;
use serde::Deserialize;
use serde_json::json;

use crate::registry::{ServiceError, SessionRegistry, Tier};

#[derive(Clone)]
pub struct AppState {
    pub registry: Arc<SessionRegistry>,
    pub bearer_token: Option<Arc<str>>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"code": self.code, "message": self.message}))).into_response()
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let message = e.to_string();
        match e {
            ServiceError::InvalidUserId(_) => Self::new(StatusCode::BAD_REQUEST, "invalid_user_id", message),
            ServiceError::InvalidTier(_) => Self::new(StatusCode::BAD_REQUEST, "invalid_tier", message),
            ServiceError::Engine(e) => {
                let (status, code) = match e {
                    Error::InvalidArgument(_) => (StatusCode::BAD_REQUEST, "invalid_argument"),
                    Error::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
                    Error::ProviderUnavailable(_) => (StatusCode::SERVICE_UNAVAILABLE, "provider_unavailable"),
                    Error::ClockRegression { .. } => (StatusCode::CONFLICT, "clock_regression"),
                    Error::Corrupt { .. } | Error::UnsupportedVersion { .. } | Error::Parse { .. } => {
                        (StatusCode::INTERNAL_SERVER_ERROR, "corrupt_snapshot")
                    }
                    Error::Io { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "storage_error"),
                    Error::Config { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "config_error"),
                };
                if status.is_server_error() {
                    tracing::error!(%code, error = %message, "request failed");
                }
                Self::new(status, code, message)
            }
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_body", r.body_text())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Run blocking engine work off the async workers.
async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> Result<T, ServiceError> + Send + 'static,
    T: Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(result) => result.map(Json).map_err(ApiError::from),
        Err(join) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", join.to_string())),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RespondBody {
    pub query: String,
    #[serde(default)]
    pub timestamp: Option<Timestamp>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MessageBody {
    pub query: String,
    #[serde(default)]
    pub response: String,
    #[serde(default)]
    pub timestamp: Option<Timestamp>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieveBody {
    pub query: String,
    #[serde(default)]
    pub touch: bool,
}

#[derive(Debug, Deserialize)]
pub struct InspectParams {
    pub now: Option<Timestamp>,
}

async fn healthz() -> Json<serde_json::Value> {
    Json(json!({"status": "ok"}))
}

async fn respond(
    State(state): State<AppState>,
    Path(user_id): Path<String>,
    body: Result<Json<RespondBody>, JsonRejection>,
) -> ApiResult<crate::registry::RespondReply> {
    let Json(body) = body?;
    let registry = state.registry;
    blocking(move || registry.respond(&user_id, &body.query, body.timestamp)).await
}

async fn ingest(
    State(state): State<AppState>,
    Path(user_id): Path<String>,
    body: Result<Json<MessageBody>, JsonRejection>,
) -> ApiResult<crate::registry::IngestReply> {
    let Json(body) = body?;
    let registry = state.registry;
    blocking(move || registry.ingest(&user_id, &body.query, &body.response, body.timestamp)).await
}

async fn retrieve(
    State(state): State<AppState>,
    Path(user_id): Path<String>,
    body: Result<Json<RetrieveBody>, JsonRejection>,
) -> ApiResult<crate::registry::RetrieveReply> {
    let Json(body) = body?;
    let registry = state.registry;
    blocking(move || registry.retrieve(&user_id, &body.query, body.touch)).await
}

async fn inspect(
    State(state): State<AppState>,
    Path((user_id, tier)): Path<(String, String)>,
    Query(params): Query<InspectParams>,
) -> ApiResult<serde_json::Value> {
    let tier: Tier = tier.parse()?;
    let registry = state.registry;
    blocking(move || registry.inspect(&user_id, tier, params.now)).await
}

async fn wipe(State(state): State<AppState>, Path(user_id): Path<String>) -> ApiResult<serde_json::Value> {
    let registry = state.registry;
    let uid = user_id.clone();
    let Json(existed) = blocking(move || registry.wipe(&uid)).await?;
    Ok(Json(json!({"user_id": user_id, "existed": existed})))
}

async fn require_token(State(state): State<AppState>, request: Request, next: Next) -> Response {
    if let Some(expected) = &state.bearer_token {
        let presented = request
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(expected.as_ref()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token")
                .into_response();
        }
    }
    next.run(request).await
}

async fn fallback(uri: Uri) -> ApiError {
    // `/v1/users//respond` never matches a route; report the empty id.
    if uri.path().starts_with("/v1/users//") || uri.path() == "/v1/users/" {
        return ApiError::new(StatusCode::BAD_REQUEST, "invalid_user_id", "user id must be non-empty");
    }
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route")
}

pub fn router(state: AppState) -> Router {
    let users = Router::new()
        .route("/v1/users/{id}/respond", post(respond))
        .route("/v1/users/{id}/retrieve", post(retrieve))
        .route("/v1/users/{id}/messages", post(ingest))
        .route("/v1/users/{id}/memory/{tier}", get(inspect))
        .route("/v1/users/{id}", delete(wipe))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/healthz", get(healthz))
        .merge(users)
        .fallback(fallback)
        .with_state(state)
}
