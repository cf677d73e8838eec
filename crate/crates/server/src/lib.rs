//! HTTP service over one loaded CDR dataset. Clients submit parameter sets
//! and read back events, time series and analyst statistics per run.

pub mod error;
pub mod pois;
pub mod runs;

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use crowdlens_core::pipeline::CrowdRecord;
use crowdlens_core::Params;
use serde::{Deserialize, Serialize};
use serde_json::error::Category;
use tower_http::services::ServeDir;

pub use error::{ApiError, ErrorBody};
pub use pois::{PoiError, PoiTable};
pub use runs::{AppState, Loaded, RunInfo, RunStatus, SubmitError, Worker};

use runs::RunResults;

pub fn router(state: AppState, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/antennas", get(antennas))
        .route("/runs", get(list_runs).post(create_run))
        .route("/runs/{id}", get(run_status))
        .route("/runs/{id}/timeseries", get(run_timeseries))
        .route("/runs/{id}/events", get(run_events))
        .route("/runs/{id}/stats/analyst", get(run_analyst))
        .route("/runs/{id}/clusters", get(run_clusters))
        .route("/runs/{id}/crowds", get(run_crowds))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves `app` on `listener` until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn health() -> &'static str {
    "ok"
}

#[derive(Debug, Serialize)]
struct AntennaSite<'a> {
    antenna_id: &'a str,
    longitude: f64,
    latitude: f64,
    pois: Vec<String>,
}

async fn antennas(State(state): State<AppState>) -> Result<Response, ApiError> {
    let loaded = state.data().ok_or_else(ApiError::no_dataset)?;
    let sites: Vec<AntennaSite<'_>> = loaded
        .dataset
        .registry
        .iter()
        .map(|(idx, a)| AntennaSite {
            antenna_id: &a.id,
            longitude: a.lon,
            latitude: a.lat,
            pois: loaded.pois.at(idx),
        })
        .collect();
    Ok(Json(sites).into_response())
}

async fn list_runs(State(state): State<AppState>) -> Json<Vec<RunInfo>> {
    Json(state.list())
}

async fn create_run(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let params = if body.iter().all(u8::is_ascii_whitespace) {
        Params::default()
    } else {
        serde_json::from_slice::<Params>(&body).map_err(|e| match e.classify() {
            Category::Data => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_params", vec![e.to_string()]),
            _ => ApiError::new(StatusCode::BAD_REQUEST, "malformed_json", e.to_string()),
        })?
    };
    match state.submit(params) {
        Ok(info) => Ok((StatusCode::ACCEPTED, Json(info)).into_response()),
        Err(SubmitError::NoDataset) => Err(ApiError::no_dataset()),
        Err(SubmitError::Invalid(violations)) => {
            Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_params", violations))
        }
        Err(SubmitError::QueueFull) => Err(ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "queue_full",
            format!("{} runs already queued", runs::QUEUE_CAPACITY),
        )),
    }
}

async fn run_status(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<RunInfo>, ApiError> {
    let entry = state.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    Ok(Json(entry.info()))
}

/// Results of a finished run, or the response to send instead: 202 with the
/// status while it is pending, an error once it failed.
fn finished(state: &AppState, id: &str) -> Result<Result<Arc<RunResults>, Response>, ApiError> {
    let entry = state.get(id).ok_or_else(|| ApiError::not_found(id))?;
    match (entry.status, &entry.results) {
        (runs::RunStatus::Done, Some(results)) => Ok(Ok(results.clone())),
        (runs::RunStatus::Failed, _) => Err(ApiError::new(
            StatusCode::CONFLICT,
            "run_failed",
            entry.error.clone().unwrap_or_default(),
        )),
        _ => Ok(Err((StatusCode::ACCEPTED, Json(entry.info())).into_response())),
    }
}

fn json_bytes(bytes: &[u8]) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], bytes.to_vec()).into_response()
}

async fn run_timeseries(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(match finished(&state, &id)? {
        Ok(r) => json_bytes(&r.timeseries),
        Err(pending) => pending,
    })
}

async fn run_events(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(match finished(&state, &id)? {
        Ok(r) => json_bytes(&r.events),
        Err(pending) => pending,
    })
}

async fn run_analyst(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(match finished(&state, &id)? {
        Ok(r) => json_bytes(&r.analyst),
        Err(pending) => pending,
    })
}

#[derive(Debug, Deserialize)]
pub struct AtTimestamp {
    pub t: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSite {
    pub t: usize,
    pub antenna_id: String,
    pub users: usize,
}

async fn run_clusters(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(at): Query<AtTimestamp>,
) -> Result<Response, ApiError> {
    let r = match finished(&state, &id)? {
        Ok(r) => r,
        Err(pending) => return Ok(pending),
    };
    let registry = &state.data().ok_or_else(ApiError::no_dataset)?.dataset.registry;
    let sites: Vec<ClusterSite> = r
        .artifacts
        .clusters
        .iter()
        .filter(|c| at.t.is_none_or(|t| c.t == t))
        .map(|c| ClusterSite {
            t: c.t,
            antenna_id: registry.name(c.antenna).to_owned(),
            users: c.len(),
        })
        .collect();
    Ok(Json(sites).into_response())
}

async fn run_crowds(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(at): Query<AtTimestamp>,
) -> Result<Response, ApiError> {
    let r = match finished(&state, &id)? {
        Ok(r) => r,
        Err(pending) => return Ok(pending),
    };
    let dataset = &state.data().ok_or_else(ApiError::no_dataset)?.dataset;
    let records: Vec<CrowdRecord> = r
        .artifacts
        .crowd_records(dataset)
        .into_iter()
        .filter(|c| at.t.is_none_or(|t| c.crowd.start <= t && t <= c.crowd.end))
        .collect();
    Ok(Json(records).into_response())
}
