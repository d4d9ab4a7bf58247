//! HTTP service for live sessions with real decision-makers.
//!
//! | method | path                     | body / result                      |
//! |--------|--------------------------|------------------------------------|
//! | POST   | `/sessions`              | [`CreateSession`] → [`Created`]    |
//! | GET    | `/sessions/{id}/next`    | [`Trial`]                          |
//! | POST   | `/sessions/{id}/answer`  | [`AnswerRequest`] → [`Answered`]   |
//! | GET    | `/sessions/{id}/snapshot`| [`SessionSnapshot`]                |
//! | GET    | `/sessions/{id}/log`     | JSON lines of interaction records  |
//! | GET    | `/datasets`              | list of [`DatasetInfo`]            |
//!
//! Errors are `{"error": <code>, "message": <text>}` with status 400, 404,
//! 409, 410 or 500.

mod store;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use store::{Answered, CreateSession, Created, DatasetInfo, SessionHeader, SessionSnapshot, SessionStore, Trial};

pub const DATA_DIR_ENV: &str = "SUPPORT_POLICY_DATA_DIR";
pub const BIND_ENV: &str = "SUPPORT_POLICY_BIND";
pub const DEFAULT_BIND: &str = "127.0.0.1:8080";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ServiceError {
    #[error("session {0} not found")]
    SessionNotFound(String),
    #[error("unknown dataset {0}")]
    UnknownDataset(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("session is exhausted")]
    SessionExhausted,
    #[error("no trial is pending")]
    NoPendingTrial,
    #[error("answer is for item {got} but the pending item is {expected}")]
    ItemMismatch { expected: String, got: String },
    #[error("label {label} is out of range for {label_count} labels")]
    LabelOutOfRange { label: usize, label_count: usize },
    #[error("storage error: {0}")]
    Storage(String),
    #[error("corrupt session data: {0}")]
    Corrupt(String),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::SessionNotFound(_) => "SessionNotFound",
            ServiceError::UnknownDataset(_) => "UnknownDataset",
            ServiceError::InvalidParams(_) => "InvalidParams",
            ServiceError::SessionExhausted => "SessionExhausted",
            ServiceError::NoPendingTrial => "NoPendingTrial",
            ServiceError::ItemMismatch { .. } => "ItemMismatch",
            ServiceError::LabelOutOfRange { .. } => "LabelOutOfRange",
            ServiceError::Storage(_) => "Storage",
            ServiceError::Corrupt(_) => "Corrupt",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::SessionNotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::UnknownDataset(_) | ServiceError::InvalidParams(_) | ServiceError::LabelOutOfRange { .. } => {
                StatusCode::BAD_REQUEST
            }
            ServiceError::SessionExhausted => StatusCode::GONE,
            ServiceError::NoPendingTrial | ServiceError::ItemMismatch { .. } => StatusCode::CONFLICT,
            ServiceError::Storage(_) | ServiceError::Corrupt(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = ErrorBody { error: self.code().into(), message: self.to_string() };
        (self.status(), Json(body)).into_response()
    }
}

/// Body of `POST /sessions/{id}/answer`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerRequest {
    pub item_id: String,
    pub human_label: usize,
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ServiceError> {
    payload.map(|Json(v)| v).map_err(|e| ServiceError::InvalidParams(e.body_text()))
}

async fn create(
    State(store): State<Arc<SessionStore>>,
    payload: Result<Json<CreateSession>, JsonRejection>,
) -> Result<Json<Created>, ServiceError> {
    store.create(body(payload)?).map(Json)
}

async fn next(State(store): State<Arc<SessionStore>>, Path(id): Path<String>) -> Result<Json<Trial>, ServiceError> {
    store.next_trial(&id).map(Json)
}

async fn answer(
    State(store): State<Arc<SessionStore>>,
    Path(id): Path<String>,
    payload: Result<Json<AnswerRequest>, JsonRejection>,
) -> Result<Json<Answered>, ServiceError> {
    let req = body(payload)?;
    store.submit_answer(&id, &req.item_id, req.human_label).map(Json)
}

async fn snapshot(
    State(store): State<Arc<SessionStore>>,
    Path(id): Path<String>,
) -> Result<Json<SessionSnapshot>, ServiceError> {
    store.snapshot(&id).map(Json)
}

async fn log(State(store): State<Arc<SessionStore>>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    let text = store.log_jsonl(&id)?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], text).into_response())
}

async fn datasets(State(store): State<Arc<SessionStore>>) -> Json<Vec<DatasetInfo>> {
    Json(store.datasets())
}

pub fn router(store: Arc<SessionStore>) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}/next", get(next))
        .route("/sessions/{id}/answer", post(answer))
        .route("/sessions/{id}/snapshot", get(snapshot))
        .route("/sessions/{id}/log", get(log))
        .route("/datasets", get(datasets))
        .with_state(store)
}

/// Data directory and bind address from the environment.
pub fn env_settings() -> (PathBuf, String) {
    let dir = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"));
    let bind = std::env::var(BIND_ENV).unwrap_or_else(|_| DEFAULT_BIND.into());
    (dir, bind)
}

/// Serves until interrupted.
pub async fn serve(data_dir: PathBuf, bind: &str) -> anyhow::Result<()> {
    let store = Arc::new(SessionStore::open(&data_dir)?);
    let addr: SocketAddr = bind.parse()?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on {} (data: {})", listener.local_addr()?, data_dir.display());
    axum::serve(listener, router(store))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
