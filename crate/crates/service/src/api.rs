//! HTTP routes. Bodies are UTF-8 JSON; errors are `{code, message}`.

use std::future::Future;
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, PathRejection};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};
use crate::session::{
    Acknowledgment, Aggregate, AbandonRequest, Answers, SessionView, StepRequest, StepResponse,
    StudyService,
};

type AppState = Arc<StudyService>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
}

fn body<T>(payload: std::result::Result<Json<T>, JsonRejection>) -> Result<T> {
    payload
        .map(|Json(v)| v)
        .map_err(|e| ServiceError::BadRequest(e.body_text()))
}

fn path<T>(p: std::result::Result<Path<T>, PathRejection>) -> Result<T> {
    p.map(|Path(v)| v).map_err(|e| ServiceError::BadRequest(e.body_text()))
}

async fn health(State(s): State<AppState>) -> Response {
    if s.is_ready() {
        Json(Health { status: "ready".into() }).into_response()
    } else {
        (StatusCode::SERVICE_UNAVAILABLE, Json(Health { status: "loading".into() })).into_response()
    }
}

async fn create_session(State(s): State<AppState>) -> Result<(StatusCode, Json<SessionView>)> {
    Ok((StatusCode::CREATED, Json(s.create_session()?)))
}

async fn get_session(
    State(s): State<AppState>,
    id: std::result::Result<Path<String>, PathRejection>,
) -> Result<Json<SessionView>> {
    Ok(Json(s.session_view(&path(id)?)?))
}

async fn post_step(
    State(s): State<AppState>,
    p: std::result::Result<Path<(String, usize)>, PathRejection>,
    req: std::result::Result<Json<StepRequest>, JsonRejection>,
) -> Result<Json<StepResponse>> {
    let (id, round) = path(p)?;
    Ok(Json(s.step(&id, round, &body(req)?)?))
}

async fn post_abandon(
    State(s): State<AppState>,
    p: std::result::Result<Path<(String, usize)>, PathRejection>,
    req: std::result::Result<Json<AbandonRequest>, JsonRejection>,
) -> Result<Json<StepResponse>> {
    let (id, round) = path(p)?;
    Ok(Json(s.abandon(&id, round, &body(req)?)?))
}

async fn post_questionnaire(
    State(s): State<AppState>,
    id: std::result::Result<Path<String>, PathRejection>,
    req: std::result::Result<Json<Answers>, JsonRejection>,
) -> Result<Json<Acknowledgment>> {
    Ok(Json(s.submit_questionnaire(&path(id)?, body(req)?)?))
}

async fn aggregate(State(s): State<AppState>) -> Json<Aggregate> {
    Json(s.aggregate())
}

async fn not_found() -> ServiceError {
    ServiceError::NotFound("no such route".into())
}

pub fn router(service: Arc<StudyService>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/rounds/{r}/steps", post(post_step))
        .route("/sessions/{id}/rounds/{r}/abandon", post(post_abandon))
        .route("/sessions/{id}/questionnaire", post(post_questionnaire))
        .route("/aggregate", get(aggregate))
        .fallback(not_found)
        .with_state(service)
}

/// Serve until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    service: Arc<StudyService>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(service)).with_graceful_shutdown(shutdown).await
}
