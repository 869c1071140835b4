//! HTTP API of the listening test.
//!
//! | method | path                        | body / query          | response |
//! |--------|-----------------------------|-----------------------|----------|
//! | GET    | `/api/sessions`             |                       | `[{session_id, n_sections}]` |
//! | GET    | `/api/sessions/{id}`        | `?subject=<id>`       | blinded session with prompts and `answered` flags |
//! | GET    | `/api/audio/{token}`        |                       | `audio/wav` bytes |
//! | POST   | `/api/choices`              | `{session_id, section, part, choice, subject_id}` | `201 {accepted, record}` |
//! | GET    | `/api/admin/aggregate`      | header `x-admin-token` | unblinded [`AggregateTable`] |
//!
//! Errors are `{"error": kind, "message": text}` with status 400 (validation),
//! 401 (admin token), 404 (unknown id or token), 409 (duplicate answer) or 500.

use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use super::sessions::{aggregate_results, AggregateTable, AudioTokens, ChoiceRequest, Part, ResponseRecord, ResponseStore, SessionSet};
use crate::error::Error;

pub const ADMIN_HEADER: &str = "x-admin-token";

#[derive(Clone)]
pub struct AppState {
    pub sessions: Arc<SessionSet>,
    pub store: Arc<ResponseStore>,
    pub admin_token: Arc<String>,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/sessions", get(list_sessions))
        .route("/api/sessions/{id}", get(session_detail))
        .route("/api/audio/{token}", get(audio))
        .route("/api/choices", post(choose))
        .route("/api/admin/aggregate", get(aggregate))
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(addr: std::net::SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}

#[derive(Serialize, Deserialize)]
pub struct ApiError {
    pub error: String,
    pub message: String,
}

struct Failure(StatusCode, &'static str, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (status, kind) = match &e {
            Error::Validation(_) => (StatusCode::BAD_REQUEST, "validation"),
            Error::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            Error::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Failure(status, kind, e.to_string())
    }
}

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        let body = ApiError {
            error: self.1.into(),
            message: self.2,
        };
        (self.0, Json(body)).into_response()
    }
}

#[derive(Serialize, Deserialize, Debug, PartialEq, Eq)]
pub struct SessionSummary {
    pub session_id: String,
    pub n_sections: usize,
}

async fn list_sessions(State(s): State<AppState>) -> Json<Vec<SessionSummary>> {
    Json(
        s.sessions
            .sessions
            .iter()
            .map(|x| SessionSummary {
                session_id: x.session_id.clone(),
                n_sections: x.sections.len(),
            })
            .collect(),
    )
}

#[derive(Serialize, Deserialize, Debug, PartialEq, Eq)]
pub struct PartView {
    pub part: Part,
    pub prompt: String,
    pub answered: bool,
}

#[derive(Serialize, Deserialize, Debug, PartialEq, Eq)]
pub struct SectionDetail {
    pub index: usize,
    pub audio: AudioTokens,
    pub parts: Vec<PartView>,
}

#[derive(Serialize, Deserialize, Debug, PartialEq, Eq)]
pub struct SessionDetail {
    pub session_id: String,
    pub sections: Vec<SectionDetail>,
}

#[derive(Deserialize)]
struct SubjectQuery {
    subject: Option<String>,
}

async fn session_detail(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<SubjectQuery>,
) -> Result<Json<SessionDetail>, Failure> {
    let session = s.sessions.session(&id)?;
    let answered = q
        .subject
        .map(|sub| s.store.answered(&id, &sub))
        .unwrap_or_default();
    let sections = session
        .sections
        .iter()
        .map(|sec| SectionDetail {
            index: sec.index,
            audio: sec.audio.clone(),
            parts: sec
                .parts
                .iter()
                .map(|p| PartView {
                    part: *p,
                    prompt: p.prompt().into(),
                    answered: answered.contains(&(sec.index, *p)),
                })
                .collect(),
        })
        .collect();
    Ok(Json(SessionDetail {
        session_id: session.session_id.clone(),
        sections,
    }))
}

async fn audio(State(s): State<AppState>, Path(token): Path<String>) -> Result<Response, Failure> {
    let path = s.sessions.audio_path(&token)?.to_path_buf();
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|_| Failure(StatusCode::NOT_FOUND, "not_found", "audio unavailable".into()))?;
    Ok(([(header::CONTENT_TYPE, "audio/wav")], bytes).into_response())
}

#[derive(Serialize, Deserialize, Debug)]
pub struct Ack {
    pub accepted: bool,
    pub record: ResponseRecord,
}

async fn choose(
    State(s): State<AppState>,
    Json(req): Json<ChoiceRequest>,
) -> Result<(StatusCode, Json<Ack>), Failure> {
    let store = s.store.clone();
    let sessions = s.sessions.clone();
    let record = tokio::task::spawn_blocking(move || store.record_choice(&sessions, &req))
        .await
        .map_err(|e| Failure(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok((
        StatusCode::CREATED,
        Json(Ack {
            accepted: true,
            record,
        }),
    ))
}

async fn aggregate(State(s): State<AppState>, headers: HeaderMap) -> Result<Json<AggregateTable>, Failure> {
    let supplied = headers.get(ADMIN_HEADER).and_then(|v| v.to_str().ok());
    if supplied != Some(s.admin_token.as_str()) {
        return Err(Failure(
            StatusCode::UNAUTHORIZED,
            "unauthorized",
            "admin token required".into(),
        ));
    }
    Ok(Json(aggregate_results(&s.sessions, &s.store.records())?))
}
