//! HTTP JSON API over [`LabService`].

use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use jnd_core::session::{LabService, Response as Answer, StagePayload};
use jnd_core::Error;
use serde::Deserialize;
use serde_json::json;

/// Shared handle; one lock serializes all session mutations.
#[derive(Clone)]
pub struct AppState {
    pub service: Arc<Mutex<LabService>>,
}

impl AppState {
    pub fn new(service: LabService) -> Self {
        Self {
            service: Arc::new(Mutex::new(service)),
        }
    }

    pub fn lock(&self) -> MutexGuard<'_, LabService> {
        self.service.lock().unwrap_or_else(|e| e.into_inner())
    }
}

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self(e)
    }
}

fn status_of(e: &Error) -> StatusCode {
    match e {
        Error::UnknownSession(_) | Error::MissingReference(_) => StatusCode::NOT_FOUND,
        Error::AnswerPending
        | Error::StageMismatch { .. }
        | Error::StaleTrial(_)
        | Error::SessionFinished
        | Error::SessionClosed(_)
        | Error::IncompleteSession { .. } => StatusCode::CONFLICT,
        Error::InvalidParameter(_) | Error::Json(_) => StatusCode::BAD_REQUEST,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = status_of(&self.0);
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            log::error!("{}", self.0);
        }
        (status, Json(json!({ "error": self.0.to_string() }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Deserialize)]
pub struct AnswerBody {
    pub trial_id: u32,
    pub response: Answer,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(session_state))
        .route("/api/sessions/{id}/stage", post(submit_stage))
        .route("/api/sessions/{id}/trial", get(next_trial))
        .route("/api/sessions/{id}/answer", post(submit_answer))
        .route("/api/audio/{file}", get(audio))
        .with_state(state)
}

async fn create_session(State(s): State<AppState>) -> ApiResult<jnd_core::session::CreatedSession> {
    Ok(Json(s.lock().create_session()?))
}

async fn session_state(
    State(s): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<jnd_core::session::PublicState> {
    Ok(Json(s.lock().public_state(&id)?))
}

async fn submit_stage(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Json(payload): Json<StagePayload>,
) -> ApiResult<jnd_core::session::SessionInfo> {
    Ok(Json(s.lock().submit_stage(&id, payload)?))
}

async fn next_trial(
    State(s): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<jnd_core::session::TrialDescriptor> {
    Ok(Json(s.lock().next_trial(&id)?))
}

async fn submit_answer(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<AnswerBody>,
) -> ApiResult<jnd_core::session::AnswerAck> {
    Ok(Json(s.lock().submit_answer(
        &id,
        body.trial_id,
        body.response,
    )?))
}

async fn audio(State(s): State<AppState>, Path(file): Path<String>) -> Response {
    let Some(key) = file.strip_suffix(".wav") else {
        return (StatusCode::NOT_FOUND, Json(json!({ "error": "not found" }))).into_response();
    };
    let (spec, renderer) = {
        let service = s.lock();
        (service.stimulus(key), service.renderer())
    };
    let Some(spec) = spec else {
        let msg = format!("unknown audio key {key}");
        return (StatusCode::NOT_FOUND, Json(json!({ "error": msg }))).into_response();
    };
    match tokio::task::spawn_blocking(move || renderer.render(&spec)).await {
        Ok(Ok(bytes)) => (
            [(header::CONTENT_TYPE, "audio/wav")],
            bytes.as_ref().clone(),
        )
            .into_response(),
        Ok(Err(e)) => ApiError(e).into_response(),
        Err(e) => (
            StatusCode::INTERNAL_SERVER_ERROR,
            Json(json!({ "error": e.to_string() })),
        )
            .into_response(),
    }
}
