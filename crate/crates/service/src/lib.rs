//! HTTP/JSON service running the recommendation pipeline per session.
//!
//! | method | path | success |
//! |--------|------|---------|
//! | POST | `/sessions` | 201 `{"session_id"}` |
//! | POST | `/sessions/{id}/turns` | 200 [`TurnResult`] |
//! | GET | `/sessions/{id}/transcript` | 200 [`Transcript`] |
//!
//! Errors are `{"error": "..."}` with 404 (unknown session), 422 (invalid
//! body) or 503 (no model loaded).

pub mod session;

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use egcr_core::engine::EngineError;
use serde::Deserialize;
use serde_json::json;
use thiserror::Error;
use tracing::error;

pub use session::{ExplanationView, RecommendationView, SessionManager, Transcript, TranscriptTurn, TurnResult};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown session")]
    NotFound,
    #[error("{0}")]
    Validation(String),
    #[error("model not loaded")]
    ModelUnavailable,
    #[error("pipeline failed: {0}")]
    Pipeline(#[from] EngineError),
    #[error("session store: {0}")]
    Store(#[from] std::io::Error),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            Self::NotFound => StatusCode::NOT_FOUND,
            Self::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Self::ModelUnavailable => StatusCode::SERVICE_UNAVAILABLE,
            Self::Pipeline(_) | Self::Store(_) | Self::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = self.status();
        if status.is_server_error() && status != StatusCode::SERVICE_UNAVAILABLE {
            error!(error = %self, "request failed");
        }
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

pub type AppState = Arc<SessionManager>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/turns", post(post_turn))
        .route("/sessions/{id}/transcript", get(transcript))
        .fallback(|| async { (StatusCode::NOT_FOUND, Json(json!({ "error": "no such route" }))) })
        .with_state(state)
}

/// Serves `app` on `listener` until Ctrl-C.
pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn create_session(State(state): State<AppState>) -> Result<impl IntoResponse, ServiceError> {
    let id = state.create_session().await?;
    Ok((StatusCode::CREATED, Json(json!({ "session_id": id }))))
}

#[derive(Debug, Deserialize)]
struct TurnRequest {
    text: String,
}

// The body is parsed by hand so malformed JSON also gets a JSON error.
async fn post_turn(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<TurnResult>, ServiceError> {
    let req: TurnRequest = serde_json::from_slice(&body)
        .map_err(|e| ServiceError::Validation(format!("body must be {{\"text\": string}}: {e}")))?;
    Ok(Json(state.post_turn(&id, &req.text).await?))
}

async fn transcript(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Transcript>, ServiceError> {
    Ok(Json(state.transcript(&id).await?))
}
