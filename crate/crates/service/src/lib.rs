//! HTTP query service over one loaded model artifact.
//!
//! Endpoints under `/api/v1`: `POST query`, `POST sweep`, `GET model`,
//! `GET health` and `GET schema`. Bodies are JSON. Requests without a seed
//! get one assigned by the server, echoed in the response; identical
//! requests with the same seed return identical bodies. Wall-clock compute
//! time goes in the `x-compute-ms` header so bodies stay reproducible.

pub mod api;

use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use thiserror::Error;
use tokio::net::TcpListener;

use genhai::data::artifact::{load_artifact, ArtifactError, ModelArtifact};
use genhai::patient_model::AdmissionFeatures;
use genhai::queries::{QueryEngine, QuerySpec, SweepAxis};
use genhai::rng::SimRng;
use genhai::simulators::SimLimits;
use genhai::subprograms::Registry;

use api::{field_in_message, ApiError, ApiQueryResponse, ApiSweepResponse, Health, HealthStatus, ModelInfo, ModelRef};

pub const MAX_BODY_BYTES: usize = 64 * 1024;
pub const MAX_REQUEST_SEQUENCES: usize = 1_000_000;
pub const COMPUTE_HEADER: &str = "x-compute-ms";

/// The published schema document for every request and response body.
pub const SCHEMA: &str = include_str!("schema.json");

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub struct LoadedModel {
    pub registry: Registry,
    pub artifact: ModelArtifact,
}

impl LoadedModel {
    pub fn from_artifact(artifact: ModelArtifact) -> Result<Self, ServiceError> {
        let registry = artifact.to_registry()?;
        Ok(Self { registry, artifact })
    }

    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        Self::from_artifact(load_artifact(path)?)
    }
}

/// Shared, read-only service state.
#[derive(Clone)]
pub struct AppState {
    model: Option<Arc<LoadedModel>>,
    pool: Arc<rayon::ThreadPool>,
    limits: SimLimits,
    nonce: u64,
    requests: Arc<AtomicU64>,
}

impl AppState {
    pub fn new(model: Option<LoadedModel>, workers: usize) -> Result<Self, ServiceError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| ServiceError::Pool(e.to_string()))?;
        let nonce = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_nanos() as u64);
        Ok(Self {
            model: model.map(Arc::new),
            pool: Arc::new(pool),
            limits: SimLimits::default(),
            nonce,
            requests: Arc::new(AtomicU64::new(0)),
        })
    }

    pub fn with_limits(mut self, limits: SimLimits) -> Self {
        self.limits = limits;
        self
    }

    fn model(&self) -> Result<Arc<LoadedModel>, ApiError> {
        self.model.clone().ok_or_else(ApiError::not_loaded)
    }

    fn assign_seed(&self) -> u64 {
        let id = self.requests.fetch_add(1, Ordering::Relaxed);
        SimRng::new(self.nonce).split(id).seed()
    }

    /// Fill in the seed, then parse and validate a query document.
    fn resolve(&self, mut doc: serde_json::Value, prefix: &str) -> Result<(QuerySpec, bool), ApiError> {
        let obj = doc
            .as_object_mut()
            .ok_or_else(|| ApiError::invalid(prefix.trim_end_matches('.'), "expected a JSON object"))?;
        let assigned = obj.get("seed").is_none_or(|s| s.is_null());
        if assigned {
            obj.insert("seed".into(), self.assign_seed().into());
        }
        let spec: QuerySpec = serde_path_to_error::deserialize(doc).map_err(|e| {
            let path = e.path().to_string();
            let msg = e.into_inner().to_string();
            let field = if path == "." { field_in_message(&msg) } else { Some(path) };
            ApiError::invalid(format!("{prefix}{}", field.unwrap_or_default()), msg)
        })?;
        spec.validate().map_err(|e| prefixed(e.into(), prefix))?;
        if spec.n_sequences > MAX_REQUEST_SEQUENCES {
            return Err(ApiError::invalid(
                format!("{prefix}n_sequences"),
                format!("at most {MAX_REQUEST_SEQUENCES} sequences per request"),
            ));
        }
        Ok((spec, assigned))
    }

    /// Run `f` with a query engine on the blocking pool.
    async fn run<T, F>(&self, model: Arc<LoadedModel>, f: F) -> Result<T, ApiError>
    where
        T: Send + 'static,
        F: FnOnce(&QueryEngine<'_>) -> Result<T, genhai::queries::QueryError> + Send + 'static,
    {
        let pool = self.pool.clone();
        let limits = self.limits;
        tokio::task::spawn_blocking(move || {
            let engine = QueryEngine::with_pool(&model.registry, pool).with_limits(limits);
            f(&engine)
        })
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(ApiError::from)
    }

    /// Ok iff a model is loaded and a one-sequence query succeeds.
    pub async fn health(&self) -> Health {
        let Some(model) = self.model.clone() else {
            return Health {
                status: HealthStatus::Degraded,
                reason: Some("no model artifact is loaded".into()),
            };
        };
        let alpha = AdmissionFeatures {
            age_years: 50.0,
            ..Default::default()
        };
        let spec = QuerySpec::admission_risk(alpha).with_runs(1, 1, 0);
        match self.run(model, move |e| e.estimate(&spec)).await {
            Ok(_) => Health {
                status: HealthStatus::Ok,
                reason: None,
            },
            Err(e) => Health {
                status: HealthStatus::Degraded,
                reason: Some(format!("smoke query failed: {}", e.body.message)),
            },
        }
    }
}

fn prefixed(mut e: ApiError, prefix: &str) -> ApiError {
    if let Some(f) = &mut e.body.field {
        *f = format!("{prefix}{f}");
    }
    e
}

fn parse_json(body: &Bytes) -> Result<serde_json::Value, ApiError> {
    api::parse_body(body)
}

fn with_compute_time(started: Instant, body: impl serde::Serialize) -> Response {
    let ms = started.elapsed().as_secs_f64() * 1e3;
    let mut resp = Json(body).into_response();
    if let Ok(v) = HeaderValue::from_str(&format!("{ms:.3}")) {
        resp.headers_mut().insert(COMPUTE_HEADER, v);
    }
    resp
}

async fn query(State(st): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let model = st.model()?;
    let (spec, seed_assigned) = st.resolve(parse_json(&body)?, "")?;
    let started = Instant::now();
    let run_spec = spec.clone();
    let result = st.run(model.clone(), move |e| e.estimate(&run_spec)).await?;
    Ok(with_compute_time(
        started,
        ApiQueryResponse {
            result,
            seed: spec.seed,
            seed_assigned,
            inputs: spec,
            model: ModelRef::of(&model.artifact),
        },
    ))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepRequest {
    query: serde_json::Value,
    axis: SweepAxis,
    grid: Vec<f64>,
}

async fn sweep(State(st): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let model = st.model()?;
    let req: SweepRequest = api::parse_body(&body)?;
    let (spec, seed_assigned) = st.resolve(req.query, "query.")?;
    genhai::queries::validate_sweep(&spec, req.axis, &req.grid)?;
    let started = Instant::now();
    let (run_spec, axis, grid) = (spec.clone(), req.axis, req.grid);
    let points = st.run(model.clone(), move |e| e.sweep(&run_spec, axis, &grid)).await?;
    Ok(with_compute_time(
        started,
        ApiSweepResponse {
            axis,
            points,
            seed: spec.seed,
            seed_assigned,
            inputs: spec,
            model: ModelRef::of(&model.artifact),
        },
    ))
}

async fn model_info(State(st): State<AppState>) -> Result<Json<ModelInfo>, ApiError> {
    Ok(Json(ModelInfo::of(&st.model()?.artifact)))
}

async fn health(State(st): State<AppState>) -> Json<Health> {
    Json(st.health().await)
}

async fn schema() -> impl IntoResponse {
    (StatusCode::OK, [(header::CONTENT_TYPE, "application/schema+json")], SCHEMA)
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/v1/query", post(query))
        .route("/api/v1/sweep", post(sweep))
        .route("/api/v1/model", get(model_info))
        .route("/api/v1/health", get(health))
        .route("/api/v1/schema", get(schema))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

pub async fn bind(addr: SocketAddr) -> Result<TcpListener, ServiceError> {
    TcpListener::bind(addr).await.map_err(|source| ServiceError::Bind { addr, source })
}

/// Serve until `shutdown` resolves, then let in-flight requests finish.
pub async fn serve<F>(listener: TcpListener, state: AppState, shutdown: F) -> Result<(), ServiceError>
where
    F: std::future::Future<Output = ()> + Send + 'static,
{
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_is_valid_json() {
        let v: serde_json::Value = serde_json::from_str(SCHEMA).unwrap();
        assert!(v["$defs"].get("ApiQueryRequest").is_some());
    }

    #[test]
    fn field_names_are_pulled_from_serde_messages() {
        assert_eq!(field_in_message("unknown field `foo`, expected one of"), Some("foo".into()));
        assert_eq!(field_in_message("missing field `kind`"), Some("kind".into()));
        assert_eq!(field_in_message("nothing"), None);
    }

    #[test]
    fn assigned_seeds_differ_per_request() {
        let st = AppState::new(None, 1).unwrap();
        assert_ne!(st.assign_seed(), st.assign_seed());
    }
}
