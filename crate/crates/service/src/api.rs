//! JSON over HTTP.
//!
//! | method | path | body / result |
//! |---|---|---|
//! | POST | `/runs` | `{run_id?, oracle?, config}` → `RunHandle` (201) |
//! | GET | `/runs` | list of `RunHandle` |
//! | GET | `/runs/{id}` | `RunHandle` |
//! | GET | `/runs/{id}/queue` | pending `LabelRequest`s, most uncertain first |
//! | POST | `/runs/{id}/labels` | `{labels: [{pair_id, y, annotator?, submitted_at?}]}` → ack |
//! | GET | `/runs/{id}/reports` | `RoundReport`s |
//! | GET | `/runs/{id}/export` | pairs with final predictions and clusters |

use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dedup_core::active::{LabelSubmission, Rejection, RunStatus};
use dedup_core::config::RunConfig;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::registry::{OracleMode, Registry, ServiceError};

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let (code, body) = match self {
            ServiceError::NotFound(message) => (StatusCode::NOT_FOUND, json!({ "error": message })),
            ServiceError::Conflict { message, status } => (StatusCode::CONFLICT, json!({ "error": message, "status": status })),
            ServiceError::Invalid { message, field } => (StatusCode::BAD_REQUEST, json!({ "error": message, "field": field })),
            ServiceError::Internal(e) => {
                log::error!("{e:#}");
                (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": format!("{e:#}") }))
            }
        };
        (code, Json(body)).into_response()
    }
}

#[derive(Debug, Deserialize)]
struct StartRequest {
    #[serde(default)]
    run_id: Option<String>,
    #[serde(default)]
    oracle: OracleMode,
    config: Value,
}

#[derive(Debug, Deserialize)]
struct RawLabel {
    pair_id: String,
    y: Value,
    #[serde(default)]
    annotator: Option<String>,
    #[serde(default)]
    submitted_at: Option<String>,
}

#[derive(Debug, Deserialize)]
struct LabelBatch {
    labels: Vec<RawLabel>,
}

#[derive(Debug, Serialize)]
struct LabelAck {
    accepted: Vec<String>,
    rejected: Vec<Rejection>,
    remaining: usize,
    status: RunStatus,
}

/// Parses a JSON body, reporting the path of the offending field.
fn parse<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ServiceError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ServiceError::Invalid {
            message: e.inner().to_string(),
            field: (path != ".").then_some(path),
        }
    })
}

async fn start_run(State(registry): State<Arc<Registry>>, body: axum::body::Bytes) -> Result<Response, ServiceError> {
    let req: StartRequest = parse(&body)?;
    let config_bytes = serde_json::to_vec(&req.config).map_err(|e| ServiceError::Internal(e.into()))?;
    let config: RunConfig = parse(&config_bytes)?;
    let handle = registry.start(req.run_id, config, req.oracle).await?;
    Ok((StatusCode::CREATED, Json(handle)).into_response())
}

async fn list_runs(State(registry): State<Arc<Registry>>) -> Response {
    Json(registry.list()).into_response()
}

async fn get_run(State(registry): State<Arc<Registry>>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    Ok(Json(registry.get(&id)?.handle()).into_response())
}

async fn get_queue(State(registry): State<Arc<Registry>>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    Ok(Json(registry.queue(&id)?).into_response())
}

async fn post_labels(
    State(registry): State<Arc<Registry>>,
    Path(id): Path<String>,
    body: axum::body::Bytes,
) -> Result<Response, ServiceError> {
    let batch: LabelBatch = parse(&body)?;
    let mut malformed = Vec::new();
    let mut labels = Vec::new();
    for raw in batch.labels {
        match raw.y.as_i64() {
            Some(y) => labels.push(LabelSubmission {
                pair_id: raw.pair_id,
                y,
                annotator: raw.annotator,
                submitted_at: raw.submitted_at,
            }),
            None => malformed.push(Rejection {
                pair_id: raw.pair_id,
                reason: format!("label must be 0 or 1, got {}", raw.y),
            }),
        }
    }
    let (outcome, status) = registry.submit(&id, labels).await?;
    let mut rejected = outcome.rejected;
    rejected.extend(malformed);
    Ok(Json(LabelAck {
        accepted: outcome.accepted,
        rejected,
        remaining: outcome.remaining,
        status,
    })
    .into_response())
}

async fn get_reports(State(registry): State<Arc<Registry>>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    Ok(Json(registry.reports(&id)?).into_response())
}

async fn get_export(State(registry): State<Arc<Registry>>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    Ok(Json(registry.export(&id).await?).into_response())
}

pub fn router(registry: Arc<Registry>) -> Router {
    Router::new()
        .route("/runs", post(start_run).get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/queue", get(get_queue))
        .route("/runs/{id}/labels", post(post_labels))
        .route("/runs/{id}/reports", get(get_reports))
        .route("/runs/{id}/export", get(get_export))
        .with_state(registry)
}
