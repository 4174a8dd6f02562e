//! HTTP elicitation service.
//!
//! Serves choice sets drawn from the session's candidate density, records
//! rankings, trains flows in the background and exposes density views.

pub mod error;
pub mod store;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use prefflow_core::experiments::{self, Marginal};
use prefflow_core::flow::{DensityModel, FlowArchitecture};
use prefflow_core::preference::ObjectiveConfig;
use prefflow_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use error::{codes, ApiError, ErrorBody};
pub use store::{CreateSession, JobState, SessionConfig, Store, TrainStatus};

pub const DEFAULT_TRAIN_ITERATIONS: usize = 2000;
pub const MAX_RESOLUTION: usize = 256;
pub const MAX_SAMPLES: usize = 100_000;

type AppState = Arc<Store>;
type ApiResult<T> = Result<T, ApiError>;

pub fn router(store: Arc<Store>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/query", get(next_query))
        .route("/sessions/{id}/responses", post(submit_response))
        .route("/sessions/{id}/train", post(start_training))
        .route("/sessions/{id}/train/status", get(training_status))
        .route("/sessions/{id}/density", get(density))
        .route("/sessions/{id}/marginals", get(marginals))
        .route("/sessions/{id}/samples", get(samples))
        .route("/sessions/{id}/export", get(export))
        .with_state(store)
}

/// Binds and serves until the process is stopped.
pub async fn serve(addr: SocketAddr, data_dir: PathBuf) -> std::io::Result<()> {
    let store = Arc::new(Store::open(data_dir)?);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(store)).await
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> ApiResult<T> {
    payload.map(|Json(v)| v).map_err(|e| ApiError::bad_request(e.body_text()))
}

fn blocking_failed(e: tokio::task::JoinError) -> ApiError {
    ApiError::internal(format!("worker failed: {e}"))
}

async fn create_session(
    State(store): State<AppState>,
    payload: Result<Json<CreateSession>, JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let req = body(payload)?;
    let session = store.create(req)?;
    Ok((
        StatusCode::CREATED,
        Json(json!({ "id": session.config.id, "config": session.config })),
    ))
}

#[derive(Serialize)]
struct SessionView {
    config: SessionConfig,
    observations: usize,
    pending_queries: usize,
    has_model: bool,
    training: TrainStatus,
}

async fn get_session(State(store): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    let s = store.get(&id)?;
    let data = s.data.lock().await;
    Ok(Json(SessionView {
        config: s.config.clone(),
        observations: data.dataset.len(),
        pending_queries: store::Session::pending_count(&data),
        has_model: s.model().is_some(),
        training: s.status(),
    }))
}

async fn next_query(State(store): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<store::Query>> {
    let s = store.get(&id)?;
    let mut data = s.data.lock().await;
    Ok(Json(s.next_query(&mut data)?))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Submission {
    query_id: String,
    ranking: Vec<i64>,
}

async fn submit_response(
    State(store): State<AppState>,
    Path(id): Path<String>,
    payload: Result<Json<Submission>, JsonRejection>,
) -> ApiResult<Json<Value>> {
    let s = store.get(&id)?;
    let sub = body(payload)?;
    // negative indices are permutation errors, not malformed bodies
    let ranking: Vec<usize> = sub.ranking.iter().map(|&i| usize::try_from(i).unwrap_or(usize::MAX)).collect();
    let mut data = s.data.lock().await;
    let size = s.submit(&mut data, &sub.query_id, &ranking)?;
    Ok(Json(json!({ "query_id": sub.query_id, "dataset_size": size })))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainRequest {
    iterations: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    weight_decay: Option<f64>,
    seed: Option<u64>,
    prior: Option<bool>,
}

async fn start_training(
    State(store): State<AppState>,
    Path(id): Path<String>,
    payload: Option<Json<TrainRequest>>,
) -> ApiResult<impl IntoResponse> {
    let s = store.get(&id)?;
    let req = payload.map(|Json(r)| r).unwrap_or_default();
    let dataset = s.data.lock().await.dataset.clone();
    if dataset.is_empty() {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            codes::EMPTY_DATASET,
            "the session has no observations to train on",
        ));
    }
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        iterations: req.iterations.unwrap_or(DEFAULT_TRAIN_ITERATIONS),
        batch_size: req.batch_size.unwrap_or(defaults.batch_size).min(dataset.len()),
        learning_rate: req.learning_rate.unwrap_or(defaults.learning_rate),
        weight_decay: req.weight_decay.unwrap_or(defaults.weight_decay),
        seed: req.seed.unwrap_or(s.config.seed),
        trace_every: (req.iterations.unwrap_or(DEFAULT_TRAIN_ITERATIONS) / 100).clamp(1, defaults.trace_every),
        ..defaults
    };
    cfg.validate().map_err(|e| ApiError::validation("train", e.to_string()))?;
    let objective = ObjectiveConfig {
        s_lik: s.config.s_lik,
        prior: req.prior.unwrap_or(true),
    };
    s.begin_training(cfg.iterations, dataset.len())?;
    let total = cfg.iterations;
    let job = s.clone();
    tokio::task::spawn_blocking(move || job.run_training(dataset, cfg, objective));
    Ok((StatusCode::ACCEPTED, Json(json!({ "state": JobState::Running, "total": total }))))
}

async fn training_status(State(store): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<TrainStatus>> {
    Ok(Json(store.get(&id)?.status()))
}

fn parse_param<T: std::str::FromStr>(q: &HashMap<String, String>, name: &str, default: T) -> ApiResult<T> {
    match q.get(name) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| ApiError::validation(name, format!("cannot parse {name}={v:?}"))),
    }
}

fn resolution(q: &HashMap<String, String>) -> ApiResult<usize> {
    let res = parse_param(q, "res", 32usize)?;
    if !(experiments::MIN_RESOLUTION..=MAX_RESOLUTION).contains(&res) {
        return Err(ApiError::validation(
            "res",
            format!("res must be in {}..={MAX_RESOLUTION}", experiments::MIN_RESOLUTION),
        ));
    }
    Ok(res)
}

async fn density(
    State(store): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<experiments::PairGrid>> {
    let s = store.get(&id)?;
    let model = s.model().ok_or_else(ApiError::no_model)?;
    let res = resolution(&q)?;
    let axes_text = q.get("axes").map(String::as_str).unwrap_or("0,1");
    let axes: Vec<usize> = axes_text
        .split(',')
        .map(|a| a.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| ApiError::validation("axes", format!("cannot parse axes={axes_text:?}")))?;
    let d = model.dim();
    if axes.len() != 2 || axes[0] == axes[1] || axes.iter().any(|&a| a >= d) {
        return Err(ApiError::validation("axes", format!("need two distinct axes below {d}")));
    }
    let seed = parse_param(&q, "seed", 0u64)?;
    let grid = tokio::task::spawn_blocking(move || experiments::pair_grid(model.as_ref(), [axes[0], axes[1]], res, seed))
        .await
        .map_err(blocking_failed)?
        .map_err(ApiError::internal)?;
    Ok(Json(grid))
}

#[derive(Serialize)]
struct MarginalsView {
    names: Vec<String>,
    marginals: Vec<Marginal>,
}

async fn marginals(
    State(store): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<MarginalsView>> {
    let s = store.get(&id)?;
    let model = s.model().ok_or_else(ApiError::no_model)?;
    let res = resolution(&q)?;
    let seed = parse_param(&q, "seed", 0u64)?;
    let marginals = tokio::task::spawn_blocking(move || experiments::marginals(model.as_ref(), res, seed))
        .await
        .map_err(blocking_failed)?
        .map_err(ApiError::internal)?;
    Ok(Json(MarginalsView {
        names: s.config.names.clone(),
        marginals,
    }))
}

async fn samples(
    State(store): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<Value>> {
    let s = store.get(&id)?;
    let model = s.model().ok_or_else(ApiError::no_model)?;
    let n = parse_param(&q, "n", 1000usize)?;
    if !(1..=MAX_SAMPLES).contains(&n) {
        return Err(ApiError::validation("n", format!("n must be in 1..={MAX_SAMPLES}")));
    }
    let seed = parse_param(&q, "seed", 0u64)?;
    let points = tokio::task::spawn_blocking(move || model.sample(n, seed))
        .await
        .map_err(blocking_failed)?
        .map_err(ApiError::internal)?;
    Ok(Json(json!({ "names": s.config.names, "points": points })))
}

async fn export(State(store): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let s = store.get(&id)?;
    let text = s.export(&*s.data.lock().await);
    Ok((
        [
            (header::CONTENT_TYPE, "application/x-ndjson".to_string()),
            (header::CONTENT_DISPOSITION, format!("attachment; filename=\"{id}.jsonl\"")),
        ],
        text,
    ))
}

/// Architecture the service uses for a new `dim`-dimensional session.
pub fn default_architecture(dim: usize) -> FlowArchitecture {
    FlowArchitecture::default_for(dim)
}
