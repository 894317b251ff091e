//! Thin async client for the planner service.

use contact_core::jobs::{
    BenchRequest, BenchResponse, EvaluateRequest, EvaluateResponse, PlanRequest, PlanResponse, TrainRequest,
    TrainResponse, ValidateReport, ValidateRequest,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(#[from] reqwest::Error),
    /// The service answered with an error body.
    #[error("{status} ({kind}): {message}")]
    Api { status: u16, kind: String, message: String },
}

impl ClientError {
    /// Rejected because the request was malformed or inconsistent.
    pub fn is_bad_request(&self) -> bool {
        matches!(self, Self::Api { status: 400, .. })
    }
}

#[derive(Debug, Deserialize)]
struct ErrorBody {
    kind: String,
    error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

#[derive(Debug, Clone)]
pub struct Client {
    http: reqwest::Client,
    base: String,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Self { http: reqwest::Client::new(), base: base.into().trim_end_matches('/').to_string() }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn decode<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T, ClientError> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let text = resp.text().await?;
        let (kind, message) = match serde_json::from_str::<ErrorBody>(&text) {
            Ok(b) => (b.kind, b.error),
            Err(_) => ("unknown".to_string(), text),
        };
        Err(ClientError::Api { status: status.as_u16(), kind, message })
    }

    async fn post<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, req: &Req) -> Result<Resp, ClientError> {
        let resp = self.http.post(format!("{}{path}", self.base)).json(req).send().await?;
        Self::decode(resp).await
    }

    pub async fn health(&self) -> Result<Health, ClientError> {
        let resp = self.http.get(format!("{}/health", self.base)).send().await?;
        Self::decode(resp).await
    }

    pub async fn plan(&self, req: &PlanRequest) -> Result<PlanResponse, ClientError> {
        self.post("/v1/plan", req).await
    }

    pub async fn train(&self, req: &TrainRequest) -> Result<TrainResponse, ClientError> {
        self.post("/v1/train", req).await
    }

    pub async fn bench(&self, req: &BenchRequest) -> Result<BenchResponse, ClientError> {
        self.post("/v1/bench", req).await
    }

    pub async fn validate(&self, req: &ValidateRequest) -> Result<ValidateReport, ClientError> {
        self.post("/v1/validate", req).await
    }

    pub async fn evaluate(&self, req: &EvaluateRequest) -> Result<EvaluateResponse, ClientError> {
        self.post("/v1/evaluate", req).await
    }
}
