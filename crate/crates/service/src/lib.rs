//! HTTP/JSON service exposing the planner jobs. Every job is CPU bound and
//! runs on the blocking pool.

use std::net::SocketAddr;

use axum::body::Bytes;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use contact_core::error::JobError;
use contact_core::jobs;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

/// Body of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: String,
    pub error: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, kind: &str, error: impl ToString) -> Self {
        Self { status, body: ErrorBody { kind: kind.into(), error: error.to_string() } }
    }
}

impl From<JobError> for ApiError {
    fn from(e: JobError) -> Self {
        let kind = match &e {
            JobError::Invalid(_) => "invalid",
            JobError::Scene(_) => "scene",
            JobError::Search(_) => "search",
            JobError::Learn(_) => "learn",
        };
        let status = if e.is_input_error() { StatusCode::BAD_REQUEST } else { StatusCode::UNPROCESSABLE_ENTITY };
        Self::new(status, kind, e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

async fn health() -> Json<Health> {
    Json(Health { status: "ok".into(), version: env!("CARGO_PKG_VERSION").into() })
}

// Bodies are parsed by hand so malformed JSON gets the same error shape as
// every other failure.
async fn run<Req, Resp>(body: Bytes, job: fn(&Req) -> Result<Resp, JobError>) -> Result<Json<Resp>, ApiError>
where
    Req: DeserializeOwned + Send + 'static,
    Resp: Send + 'static,
{
    let req: Req = serde_json::from_slice(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "parse", e))?;
    let out = tokio::task::spawn_blocking(move || job(&req))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e))??;
    Ok(Json(out))
}

async fn plan(body: Bytes) -> Result<Json<jobs::PlanResponse>, ApiError> {
    run(body, jobs::plan).await
}

async fn train(body: Bytes) -> Result<Json<jobs::TrainResponse>, ApiError> {
    run(body, jobs::train).await
}

async fn bench(body: Bytes) -> Result<Json<jobs::BenchResponse>, ApiError> {
    run(body, jobs::bench).await
}

async fn validate(body: Bytes) -> Result<Json<jobs::ValidateReport>, ApiError> {
    run(body, jobs::validate).await
}

async fn evaluate(body: Bytes) -> Result<Json<jobs::EvaluateResponse>, ApiError> {
    run(body, jobs::evaluate_schedule).await
}

pub fn router() -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/plan", post(plan))
        .route("/v1/train", post(train))
        .route("/v1/bench", post(bench))
        .route("/v1/validate", post(validate))
        .route("/v1/evaluate", post(evaluate))
}

pub async fn serve(listener: TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router()).await
}

/// Binds `addr` (port 0 picks a free one) and serves in the background.
pub async fn spawn(addr: SocketAddr) -> std::io::Result<(SocketAddr, JoinHandle<std::io::Result<()>>)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    Ok((local, tokio::spawn(serve(listener))))
}

/// Serves on a free loopback port.
pub async fn spawn_local() -> std::io::Result<(SocketAddr, JoinHandle<std::io::Result<()>>)> {
    spawn(SocketAddr::from(([127, 0, 0, 1], 0))).await
}
