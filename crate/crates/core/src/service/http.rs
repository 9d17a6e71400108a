//! JSON-over-HTTP routes for [`Service`].

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::{Path, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::Deserialize;
use serde_json::json;

use super::{ResponseSubmission, Role, Service, ServiceError, Stage, DEFAULT_QUESTIONNAIRE_ID};
use crate::hierarchy::IndicatorVector;
use crate::inference::LikertElicitation;

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Invalid(_) => StatusCode::BAD_REQUEST,
            ServiceError::Duplicate(_) | ServiceError::SessionState { .. } | ServiceError::JobRunning(_) => StatusCode::CONFLICT,
            ServiceError::Precondition(_) => StatusCode::PRECONDITION_FAILED,
            ServiceError::Unauthorized => StatusCode::UNAUTHORIZED,
            ServiceError::Pipeline(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Store(_) | ServiceError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = self.status();
        if status.is_server_error() {
            log::error!("{self}");
        }
        (status, Json(json!({ "error": { "code": self.code(), "message": self.to_string() } }))).into_response()
    }
}

type ApiResult<T> = Result<T, ServiceError>;

#[derive(Debug, Deserialize)]
struct CreateSession {
    respondent_id: String,
    role: Role,
    #[serde(default = "default_questionnaire")]
    questionnaire_id: String,
}

fn default_questionnaire() -> String {
    DEFAULT_QUESTIONNAIRE_ID.to_string()
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    Many(Vec<LikertElicitation>),
    One(LikertElicitation),
}

#[derive(Debug, Deserialize)]
struct ObservationBody {
    values: BTreeMap<String, u8>,
    #[serde(default)]
    observed_at: Option<DateTime<Utc>>,
}

fn idempotency_key(headers: &HeaderMap) -> Option<String> {
    headers.get(IDEMPOTENCY_HEADER).and_then(|v| v.to_str().ok()).map(str::to_string)
}

/// Parses a JSON body into a 400 on failure rather than axum's default 422.
fn parse<T: serde::de::DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ServiceError::Invalid(format!("request body: {e}")))
}

async fn health(State(svc): State<Arc<Service>>) -> Json<serde_json::Value> {
    let st = svc.snapshot();
    Json(json!({ "status": "ok", "last_sequence": st.last_seq }))
}

async fn create_session(State(svc): State<Arc<Service>>, headers: HeaderMap, body: axum::body::Bytes) -> ApiResult<impl IntoResponse> {
    let req: CreateSession = parse(&body)?;
    let key = idempotency_key(&headers);
    let s = svc.create_session(&req.respondent_id, req.role, &req.questionnaire_id, key.as_deref())?;
    Ok((StatusCode::CREATED, Json(s)))
}

async fn get_questionnaire(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(svc.questionnaire(&id)?.clone()))
}

async fn record_response(
    State(svc): State<Arc<Service>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: axum::body::Bytes,
) -> ApiResult<impl IntoResponse> {
    let sub: ResponseSubmission = parse(&body)?;
    let key = idempotency_key(&headers);
    Ok((StatusCode::CREATED, Json(svc.record_timed_response(&id, &sub, key.as_deref())?)))
}

async fn submit_session(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(svc.submit_session(&id)?))
}

async fn record_elicitations(State(svc): State<Arc<Service>>, body: axum::body::Bytes) -> ApiResult<impl IntoResponse> {
    let items = match parse::<OneOrMany>(&body)? {
        OneOrMany::Many(v) => v,
        OneOrMany::One(e) => vec![e],
    };
    let seq = svc.record_elicitations(&items)?;
    Ok((StatusCode::CREATED, Json(json!({ "recorded": items.len(), "sequence": seq }))))
}

async fn record_observation(State(svc): State<Arc<Service>>, Path(child): Path<String>, body: axum::body::Bytes) -> ApiResult<impl IntoResponse> {
    let b: ObservationBody = parse(&body)?;
    let observed_at = b.observed_at.unwrap_or_else(|| (svc.clock)());
    let seq = svc.record_observation(IndicatorVector { child_id: child.clone(), values: b.values, observed_at })?;
    Ok((StatusCode::CREATED, Json(json!({ "child_id": child, "sequence": seq }))))
}

async fn run_inference(State(svc): State<Arc<Service>>, Path(stage): Path<String>) -> ApiResult<impl IntoResponse> {
    let stage: Stage = stage.parse()?;
    let job = tokio::task::spawn_blocking(move || svc.run_inference(stage))
        .await
        .map_err(|e| ServiceError::Io(std::io::Error::other(e.to_string())))??;
    Ok(Json(job))
}

async fn get_report(State(svc): State<Arc<Service>>, Path(child): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(svc.get_index_report(&child)?))
}

async fn require_token(State(svc): State<Arc<Service>>, req: Request, next: Next) -> Response {
    let Some(token) = svc.config().server.auth_token.as_deref() else {
        return next.run(req).await;
    };
    if req.uri().path() == "/health" {
        return next.run(req).await;
    }
    let ok = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .is_some_and(|t| t == token);
    if ok {
        next.run(req).await
    } else {
        ServiceError::Unauthorized.into_response()
    }
}

pub fn router(svc: Arc<Service>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/responses", post(record_response))
        .route("/sessions/{id}/submit", post(submit_session))
        .route("/questionnaires/{id}", get(get_questionnaire))
        .route("/elicitations", post(record_elicitations))
        .route("/children/{id}/indicators", post(record_observation))
        .route("/children/{id}/report", get(get_report))
        .route("/inference/{stage}", post(run_inference))
        .layer(middleware::from_fn_with_state(svc.clone(), require_token))
        .with_state(svc)
}

/// Serves until ctrl-c. `on_bound` receives the actual local address, which
/// matters when binding port 0.
pub async fn serve(svc: Arc<Service>, on_bound: impl FnOnce(std::net::SocketAddr)) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(&svc.config().server.bind).await?;
    on_bound(listener.local_addr()?);
    axum::serve(listener, router(svc))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
