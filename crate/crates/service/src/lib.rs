//! HTTP front end for the floor plan sampler with persistent design sessions.
//!
//! Routes:
//! - `POST /generate` samples candidates under a constraint mode.
//! - `POST /sessions/{id}/refine` pins rooms of an earlier candidate and
//!   samples again in mode `part`.
//! - `GET /sessions/{id}` returns the session record.
//! - `GET /healthz` reports whether a checkpoint is loaded.

pub mod api;
pub mod error;
pub mod store;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use floorgen_core::checkpoint::{load_model, LoadedModel};
use floorgen_core::postprocess::{postprocess, PostConfig};
use floorgen_core::sampler::{generate_plans_seeded, variant_seed, Constraints, SampleOptions};
use floorgen_core::{FloorPlan, Mode};
use tokio::sync::Semaphore;

pub use api::{GenerateRequest, GenerateResponse, Health, RefineRequest, RoomSpec, SampleParams};
pub use error::ApiError;
pub use store::{DesignSession, HistoryEntry, SessionStore};

use store::ConstraintRecord;

/// Requests allowed to wait for a worker before new ones get 429.
pub const QUEUE_DEPTH: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub workers: usize,
    pub queue_depth: usize,
    pub post: PostConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            queue_depth: QUEUE_DEPTH,
            post: PostConfig::default(),
        }
    }
}

/// Shared service state. The model is read-only once loaded.
#[derive(Debug)]
pub struct AppState {
    model: RwLock<Option<Arc<LoadedModel>>>,
    pub store: SessionStore,
    config: ServiceConfig,
    workers: Semaphore,
    pending: AtomicUsize,
}

/// Decrements the pending count when a request leaves the queue or a worker.
struct Ticket<'a>(&'a AtomicUsize);

impl Drop for Ticket<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

impl AppState {
    pub fn new(config: ServiceConfig, store: SessionStore) -> Self {
        Self {
            model: RwLock::new(None),
            store,
            workers: Semaphore::new(config.workers.max(1)),
            pending: AtomicUsize::new(0),
            config,
        }
    }

    pub fn set_model(&self, model: LoadedModel) {
        *self.model.write().expect("model lock") = Some(Arc::new(model));
    }

    pub fn model(&self) -> Option<Arc<LoadedModel>> {
        self.model.read().expect("model lock").clone()
    }

    fn admit(&self) -> Result<Ticket<'_>, ApiError> {
        let limit = self.config.workers.max(1) + self.config.queue_depth;
        if self.pending.fetch_add(1, Ordering::SeqCst) >= limit {
            self.pending.fetch_sub(1, Ordering::SeqCst);
            return Err(ApiError::new(StatusCode::TOO_MANY_REQUESTS, "generation queue is full"));
        }
        Ok(Ticket(&self.pending))
    }

    /// Runs one generation on a worker thread, behind the admission queue.
    async fn run(
        self: &Arc<Self>,
        constraints: Constraints,
        mode: Mode,
        params: SampleParams,
    ) -> Result<(Vec<FloorPlan>, Vec<u64>, String), ApiError> {
        let model = self
            .model()
            .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "no checkpoint loaded"))?;
        let _ticket = self.admit()?;
        let _permit = self.workers.acquire().await.map_err(|e| ApiError::internal(e.to_string()))?;
        let post = self.config.post.clone();
        tokio::task::spawn_blocking(move || sample(&model, &constraints, mode, &params, Some(&post)))
            .await
            .map_err(|e| ApiError::internal(e.to_string()))?
    }
}

/// Samples candidates and, given a config, post-processes them. Rooms whose
/// location the user gave stay fixed during alignment.
pub fn sample(
    model: &LoadedModel,
    constraints: &Constraints,
    mode: Mode,
    params: &SampleParams,
    post: Option<&PostConfig>,
) -> Result<(Vec<FloorPlan>, Vec<u64>, String), ApiError> {
    let seed = params.seed.unwrap_or(0);
    let seeds: Vec<u64> = (0..params.k).map(|i| variant_seed(seed, i)).collect();
    let opts = SampleOptions {
        k: params.k,
        seed,
        noise_inject: params.noise_inject,
        alpha: params.alpha,
    };
    let raw = generate_plans_seeded(
        &model.denoiser,
        &model.schedule,
        constraints,
        mode,
        model.meta.boundary_enabled,
        &seeds,
        &opts,
    )?;
    let Some(post) = post else {
        return Ok((raw, seeds, model.schedule.fingerprint()));
    };
    let pinned: Vec<&floorgen_core::Room> = match mode {
        Mode::TypesLocations => constraints.rooms.iter().collect(),
        Mode::Partial => constraints.fixed.iter().map(|&i| &constraints.rooms[i]).collect(),
        _ => Vec::new(),
    };
    let plans = raw
        .iter()
        .map(|p| {
            let frozen: Vec<bool> = p
                .rooms
                .iter()
                .map(|r| match mode {
                    Mode::TypesLocations => true,
                    _ => pinned.contains(&r),
                })
                .collect();
            postprocess(p, post, &frozen, params.merge).plan
        })
        .collect();
    Ok((plans, seeds, model.schedule.fingerprint()))
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    payload.map(|Json(v)| v).map_err(|e| ApiError::bad_request(e.body_text()))
}

async fn generate(
    State(state): State<Arc<AppState>>,
    payload: Result<Json<GenerateRequest>, JsonRejection>,
) -> Result<Json<GenerateResponse>, ApiError> {
    let req = body(payload)?;
    let mut constraints = req.constraints()?;
    let id = match &req.session_id {
        Some(id) => {
            let session = state
                .store
                .get(id)
                .ok_or_else(|| ApiError::not_found(format!("session {id} not found")))?;
            if constraints.boundary.is_none() {
                constraints.boundary = session.boundary;
                constraints.entrance = session.entrance;
            }
            id.clone()
        }
        None => SessionStore::new_id(),
    };
    let params = SampleParams {
        seed: Some(req.params.seed.unwrap_or_else(rand_seed)),
        ..req.params
    };
    let (candidates, seeds, fingerprint) = state.run(constraints.clone(), req.mode, params).await?;
    record(&state, &id, req.boundary.clone(), req.entrance, req.mode, &constraints, params, &candidates, &seeds, &fingerprint)?;
    Ok(Json(GenerateResponse {
        session_id: id,
        candidates,
        seeds,
        fingerprint,
    }))
}

#[allow(clippy::too_many_arguments)]
fn record(
    state: &AppState,
    id: &str,
    boundary: Option<Vec<floorgen_core::Point>>,
    entrance: Option<[floorgen_core::Point; 4]>,
    mode: Mode,
    constraints: &Constraints,
    params: SampleParams,
    candidates: &[FloorPlan],
    seeds: &[u64],
    fingerprint: &str,
) -> Result<(), ApiError> {
    let entry = HistoryEntry {
        constraints: ConstraintRecord {
            mode,
            rooms: constraints.rooms.clone(),
            fixed: constraints.fixed.clone(),
            params,
        },
        fingerprint: fingerprint.to_string(),
        seeds: seeds.to_vec(),
        candidates: candidates.to_vec(),
    };
    state
        .store
        .append(id, boundary, entrance, entry)
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(())
}

fn rand_seed() -> u64 {
    uuid::Uuid::new_v4().as_u64_pair().0
}

async fn refine(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    payload: Result<Json<RefineRequest>, JsonRejection>,
) -> Result<Json<GenerateResponse>, ApiError> {
    let req = body(payload)?;
    req.params.validate()?;
    let session = state
        .store
        .get(&id)
        .ok_or_else(|| ApiError::not_found(format!("session {id} not found")))?;
    let set_idx = req.set.unwrap_or(session.history.len().saturating_sub(1));
    let candidate = session
        .history
        .get(set_idx)
        .and_then(|e| e.candidates.get(req.candidate))
        .ok_or_else(|| ApiError::not_found(format!("candidate {} of set {set_idx} not found", req.candidate)))?;
    if let Some(&bad) = req.pin.iter().find(|&&i| i >= candidate.rooms.len()) {
        return Err(ApiError::unprocessable(format!("candidate has no room {bad}")));
    }
    // Merge annotations belong to the old candidate, not to the constraint.
    let rooms = candidate
        .rooms
        .iter()
        .map(|r| floorgen_core::Room::new(r.room_type, r.cx, r.cy, r.w, r.h))
        .collect();
    let constraints = Constraints {
        rooms,
        fixed: req.pin.clone(),
        boundary: session.boundary.clone(),
        entrance: session.entrance,
    };
    let params = SampleParams {
        seed: Some(req.params.seed.unwrap_or_else(rand_seed)),
        ..req.params
    };
    let (candidates, seeds, fingerprint) = state.run(constraints.clone(), Mode::Partial, params).await?;
    record(&state, &id, None, None, Mode::Partial, &constraints, params, &candidates, &seeds, &fingerprint)?;
    Ok(Json(GenerateResponse {
        session_id: id,
        candidates,
        seeds,
        fingerprint,
    }))
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<DesignSession>, ApiError> {
    state
        .store
        .get(&id)
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("session {id} not found")))
}

async fn healthz(State(state): State<Arc<AppState>>) -> impl IntoResponse {
    match state.model() {
        Some(m) => (
            StatusCode::OK,
            Json(Health {
                status: "ok".into(),
                fingerprint: Some(m.schedule.fingerprint()),
            }),
        ),
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(Health {
                status: "loading".into(),
                fingerprint: None,
            }),
        ),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/generate", post(generate))
        .route("/sessions/{id}/refine", post(refine))
        .route("/sessions/{id}", get(get_session))
        .route("/healthz", get(healthz))
        .with_state(state)
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Store(#[from] store::StoreError),
    #[error("bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("server: {0}")]
    Server(std::io::Error),
}

/// Serves until interrupted. The checkpoint loads in the background, so
/// health checks answer 503 until it is ready.
pub async fn serve(addr: SocketAddr, checkpoint: PathBuf, store: Option<PathBuf>, config: ServiceConfig) -> Result<(), ServeError> {
    let store = match store {
        Some(p) => SessionStore::open(&p)?,
        None => SessionStore::in_memory(),
    };
    let state = Arc::new(AppState::new(config, store));
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| ServeError::Bind { addr, source })?;
    let loader = state.clone();
    tokio::task::spawn_blocking(move || match load_model(&checkpoint, None) {
        Ok(m) => {
            tracing::info!(fingerprint = %m.schedule.fingerprint(), "checkpoint loaded");
            loader.set_model(m);
        }
        Err(e) => tracing::error!(error = %e, "checkpoint failed to load"),
    });
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(ServeError::Server)
}
