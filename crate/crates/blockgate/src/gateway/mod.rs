//! The deployable frontend: HTTP wire protocol over the routing pipeline,
//! admin allocation endpoints, status listings, and the federation demo.

pub mod config;
pub mod demo;

use crate::certkit::{Certificate, Timestamp, TrustStore};
use crate::pqueue::{JobState, QueueError};
use crate::registry::Registry;
use crate::router::{route, JobIdGen, JobRequest, RouteError};
use crate::sim::{SimError, SimState};
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use base64::Engine;
use config::GatewayConfig;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

pub use config::ConfigError;

/// Time source: wall clock in production, a settable instant in tests and
/// the demo so runs are reproducible.
#[derive(Debug, Clone)]
pub enum GatewayClock {
    System,
    Fixed(Arc<AtomicI64>),
}

impl GatewayClock {
    pub fn fixed(at: Timestamp) -> GatewayClock {
        GatewayClock::Fixed(Arc::new(AtomicI64::new(at)))
    }

    pub fn now(&self) -> Timestamp {
        match self {
            GatewayClock::System => std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .expect("clock before epoch")
                .as_secs() as Timestamp,
            GatewayClock::Fixed(t) => t.load(Ordering::SeqCst),
        }
    }

    pub fn advance(&self, secs: i64) {
        if let GatewayClock::Fixed(t) = self {
            t.fetch_add(secs, Ordering::SeqCst);
        }
    }
}

/// Shared service state. Registry mutations go through the write lock
/// (single writer); the simulator and its queues are serialized behind
/// one mutex.
pub struct AppState {
    pub config: GatewayConfig,
    pub trust: TrustStore,
    pub registry: RwLock<Registry>,
    pub sim: Mutex<SimState>,
    pub ids: JobIdGen,
    pub proxy_key: Vec<u8>,
    pub clock: GatewayClock,
    /// Jobs journaled as queued in a previous process life that never
    /// started: reported Rejected(RestartLost), never silently dropped.
    pub lost_jobs: Mutex<BTreeMap<String, String>>,
    journal_path: PathBuf,
    journal: Mutex<()>,
}

#[derive(Debug, thiserror::Error)]
pub enum InitError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("snapshot: {0}")]
    Snapshot(#[from] crate::registry::SnapshotError),
    #[error("trust store: {0}")]
    Trust(#[from] crate::certkit::CertError),
    #[error("queue restore: {0}")]
    Queue(#[from] QueueError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl AppState {
    /// Build gateway state from config, restoring the registry snapshot
    /// and the queued-job journal when they exist.
    pub fn initialize(config: GatewayConfig, clock: GatewayClock) -> Result<Arc<AppState>, InitError> {
        let mut trust = TrustStore::new();
        for (ca_id, key) in &config.ca_trust {
            trust.add(ca_id, key)?;
        }

        let registry = if config.snapshot_path.exists() {
            Registry::load_snapshot(&config.snapshot_path)?
        } else {
            Registry::with_nodes(&config.node_prefix, config.total_nodes)
        };

        let mut proxy_key = vec![0u8; 32];
        rand::thread_rng().fill_bytes(&mut proxy_key);

        let mut sim = SimState::new(&proxy_key);
        for alloc in registry.allocations() {
            sim.register_block(alloc)?;
        }

        let journal_path = journal_path_for(&config.snapshot_path);
        let lost_jobs = read_lost_jobs(&journal_path)?;

        Ok(Arc::new(AppState {
            config,
            trust,
            registry: RwLock::new(registry),
            sim: Mutex::new(sim),
            ids: JobIdGen::new(),
            proxy_key,
            clock,
            lost_jobs: Mutex::new(lost_jobs),
            journal_path,
            journal: Mutex::new(()),
        }))
    }

    fn journal_append(&self, line: &str) {
        let _guard = self.journal.lock().expect("journal lock");
        if let Ok(mut f) = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.journal_path)
        {
            let _ = writeln!(f, "{line}");
        }
    }

    fn persist_registry(&self, reg: &Registry) {
        // admin handlers snapshot after each mutation; failures surface in logs
        if let Err(e) = reg.save_snapshot(&self.config.snapshot_path) {
            eprintln!("snapshot save failed: {e}");
        }
    }

    /// Advance the simulator one second and journal starts/completions.
    pub fn tick(&self) {
        let events = self.sim.lock().expect("sim lock").step();
        for e in &events {
            match e.kind {
                crate::sim::EventKind::JobStarted => self.journal_append(&format!("STARTED {}", e.job_id)),
                crate::sim::EventKind::JobCompleted => self.journal_append(&format!("DONE {}", e.job_id)),
                crate::sim::EventKind::JobRejected => {}
            }
        }
    }
}

fn journal_path_for(snapshot: &std::path::Path) -> PathBuf {
    let mut p = snapshot.as_os_str().to_owned();
    p.push(".jobs");
    PathBuf::from(p)
}

fn read_lost_jobs(path: &std::path::Path) -> std::io::Result<BTreeMap<String, String>> {
    let mut queued: BTreeMap<String, bool> = BTreeMap::new(); // id -> ever started
    if path.exists() {
        for line in std::fs::read_to_string(path)?.lines() {
            match line.split_once(' ') {
                Some(("QUEUED", id)) => {
                    queued.entry(id.to_string()).or_insert(false);
                }
                Some(("STARTED", id)) | Some(("DONE", id)) => {
                    queued.insert(id.to_string(), true);
                }
                _ => {}
            }
        }
    }
    Ok(queued
        .into_iter()
        .filter(|(_, started)| !started)
        .map(|(id, _)| (id, "RestartLost".to_string()))
        .collect())
}

// ---------------------------------------------------------------------------
// wire schema
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
pub struct SubmitBody {
    pub username: String,
    #[serde(rename = "userCA")]
    pub user_ca: String,
    pub middleware: String,
    pub job: SubmitJob,
}

#[derive(Debug, Deserialize)]
pub struct SubmitJob {
    pub command: String,
    pub nodes: usize,
    pub walltime_s: u64,
}

#[derive(Debug, Serialize)]
pub struct SubmitAccepted {
    pub job_id: String,
    pub queue: String,
    pub block_id: String,
    pub middleware_path: String,
}

#[derive(Debug, Deserialize)]
pub struct ApproveBody {
    pub username: String,
    pub nodes: usize,
    pub middleware: String,
    pub lease_start: Timestamp,
    pub lease_end: Timestamp,
}

fn error_response(status: StatusCode, code: &str, detail: impl ToString) -> Response {
    (status, Json(json!({"error": code, "detail": detail.to_string()}))).into_response()
}

fn route_error_response(err: &RouteError) -> Response {
    let status = match err {
        RouteError::AuthRejected(_) | RouteError::UsernameMismatch { .. } => StatusCode::UNAUTHORIZED,
        RouteError::NoAllocation(_) => StatusCode::NOT_FOUND,
        RouteError::LeaseExpired(_) => StatusCode::FORBIDDEN,
        RouteError::MiddlewareMismatch { .. } | RouteError::UnknownMiddleware(_) => StatusCode::CONFLICT,
        RouteError::InvalidRequest(_) => StatusCode::BAD_REQUEST,
    };
    error_response(status, err.code(), err)
}

fn queue_error_response(err: &QueueError) -> Response {
    let (status, code) = match err {
        QueueError::NotAuthorized { .. } => (StatusCode::FORBIDDEN, "NotAuthorized"),
        QueueError::Proxy(f) => (StatusCode::UNAUTHORIZED, f.code()),
        QueueError::OversizedJob { .. } => (StatusCode::CONFLICT, "OversizedJob"),
        QueueError::UnknownQueue(_) => (StatusCode::NOT_FOUND, "UnknownQueue"),
        _ => (StatusCode::BAD_REQUEST, "BadState"),
    };
    error_response(status, code, err)
}

// ---------------------------------------------------------------------------
// handlers
// ---------------------------------------------------------------------------

async fn handle_submit(
    State(state): State<Arc<AppState>>,
    body: Result<Json<SubmitBody>, JsonRejection>,
) -> Response {
    let Json(body) = match body {
        Ok(b) => b,
        Err(rej) => return error_response(StatusCode::BAD_REQUEST, "MalformedBody", rej),
    };
    if body.job.nodes == 0 || body.job.walltime_s == 0 {
        return error_response(
            StatusCode::BAD_REQUEST,
            "MalformedBody",
            "nodes and walltime_s must be >= 1",
        );
    }
    let blob = match base64::engine::general_purpose::STANDARD.decode(&body.user_ca) {
        Ok(b) => b,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, "MalformedBody", e),
    };
    let certificate = match Certificate::from_wire(&blob) {
        Ok(c) => c,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, "MalformedBody", e),
    };

    let req = JobRequest {
        claimed_username: body.username,
        certificate,
        middleware: body.middleware,
        command: body.job.command,
        nodes_requested: body.job.nodes,
        walltime_s: body.job.walltime_s,
    };

    let now = state.clock.now();
    let routed = {
        let reg = state.registry.read().expect("registry lock");
        route(
            &req,
            &state.trust,
            &reg,
            &state.config.catalog,
            &state.proxy_key,
            &state.ids,
            state.config.proxy_ttl_s,
            now,
        )
    };
    let (decision, job) = match routed {
        Ok(ok) => ok,
        Err(e) => return route_error_response(&e),
    };

    let submitted = state.sim.lock().expect("sim lock").submit(&decision, job, now);
    match submitted {
        Ok(job_id) => {
            state.journal_append(&format!("QUEUED {job_id}"));
            (
                StatusCode::ACCEPTED,
                Json(SubmitAccepted {
                    job_id,
                    queue: decision.queue_name,
                    block_id: decision.block_id,
                    middleware_path: decision.middleware_path,
                }),
            )
                .into_response()
        }
        Err(SimError::Queue(qe)) => queue_error_response(&qe),
        Err(other) => error_response(StatusCode::BAD_REQUEST, "InternalInconsistency", other),
    }
}

fn admin_authorized(state: &AppState, headers: &HeaderMap) -> bool {
    headers
        .get("X-Admin-Token")
        .and_then(|v| v.to_str().ok())
        .map(|t| t == state.config.admin_token)
        .unwrap_or(false)
}

async fn handle_admin_approve(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Result<Json<ApproveBody>, JsonRejection>,
) -> Response {
    if !admin_authorized(&state, &headers) {
        return error_response(StatusCode::UNAUTHORIZED, "BadAdminToken", "invalid admin token");
    }
    let Json(body) = match body {
        Ok(b) => b,
        Err(rej) => return error_response(StatusCode::BAD_REQUEST, "MalformedBody", rej),
    };

    let mut reg = state.registry.write().expect("registry lock");
    let alloc = match reg.approve_user(
        &body.username,
        body.nodes,
        &body.middleware,
        &state.config.catalog,
        body.lease_start,
        body.lease_end,
    ) {
        Ok(a) => a,
        Err(e) => {
            use crate::registry::RegistryError as RE;
            let (status, code) = match &e {
                RE::DuplicateAllocation(_) => (StatusCode::CONFLICT, "DuplicateAllocation"),
                RE::InsufficientNodes { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "InsufficientNodes"),
                RE::UnknownMiddleware(_) => (StatusCode::UNPROCESSABLE_ENTITY, "UnknownMiddleware"),
                RE::InvalidLease => (StatusCode::UNPROCESSABLE_ENTITY, "InvalidLease"),
                RE::InvalidUsername(_) => (StatusCode::UNPROCESSABLE_ENTITY, "InvalidUsername"),
                _ => (StatusCode::UNPROCESSABLE_ENTITY, "InvalidRequest"),
            };
            return error_response(status, code, e);
        }
    };

    // allocation and queue creation are one atomic admin action
    if let Err(e) = state.sim.lock().expect("sim lock").register_block(&alloc) {
        let _ = reg.release(&alloc.owner_username);
        return error_response(StatusCode::CONFLICT, "DuplicateQueue", e);
    }
    state.persist_registry(&reg);
    (
        StatusCode::CREATED,
        Json(json!({
            "username": alloc.owner_username,
            "block_id": alloc.block_id,
            "queue_name": alloc.queue_name,
            "middleware": alloc.middleware,
            "node_ids": alloc.node_ids,
            "lease_start": alloc.lease_start,
            "lease_end": alloc.lease_end,
        })),
    )
        .into_response()
}

async fn handle_admin_release(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    UrlPath(username): UrlPath<String>,
) -> Response {
    if !admin_authorized(&state, &headers) {
        return error_response(StatusCode::UNAUTHORIZED, "BadAdminToken", "invalid admin token");
    }
    let mut reg = state.registry.write().expect("registry lock");
    match reg.release(&username) {
        Ok(alloc) => {
            state.sim.lock().expect("sim lock").remove_block(&alloc.queue_name);
            state.persist_registry(&reg);
            StatusCode::NO_CONTENT.into_response()
        }
        Err(e) => error_response(StatusCode::NOT_FOUND, "NoAllocation", e),
    }
}

async fn handle_job_status(
    State(state): State<Arc<AppState>>,
    UrlPath(job_id): UrlPath<String>,
) -> Response {
    let sim = state.sim.lock().expect("sim lock");
    if let Some(job) = sim.queues().job(&job_id) {
        let mut doc = json!({
            "job_id": job.job_id,
            "requester": job.requester,
            "nodes_requested": job.nodes_requested,
            "walltime_s": job.walltime_s,
            "state": job.state().label(),
        });
        match job.state() {
            JobState::Running { nodes, start } => {
                doc["nodes"] = json!(nodes);
                doc["start"] = json!(start);
            }
            JobState::Completed { end } => doc["end"] = json!(end),
            JobState::Rejected { reason } => doc["reason"] = json!(reason),
            _ => {}
        }
        return (StatusCode::OK, Json(doc)).into_response();
    }
    drop(sim);
    if let Some(reason) = state.lost_jobs.lock().expect("lost lock").get(&job_id) {
        return (
            StatusCode::OK,
            Json(json!({"job_id": job_id, "state": "Rejected", "reason": reason})),
        )
            .into_response();
    }
    error_response(StatusCode::NOT_FOUND, "UnknownJob", format!("no job {job_id:?}"))
}

async fn handle_blocks(State(state): State<Arc<AppState>>) -> Response {
    let reg = state.registry.read().expect("registry lock");
    let blocks: Vec<_> = reg
        .allocations()
        .map(|a| {
            json!({
                "username": a.owner_username,
                "block_id": a.block_id,
                "queue_name": a.queue_name,
                "middleware": a.middleware,
                "node_ids": a.node_ids,
                "lease_start": a.lease_start,
                "lease_end": a.lease_end,
            })
        })
        .collect();
    (StatusCode::OK, Json(json!({"blocks": blocks}))).into_response()
}

pub fn app(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/wspc/request", post(handle_submit))
        .route("/admin/approve", post(handle_admin_approve))
        .route("/admin/allocation/:username", delete(handle_admin_release))
        .route("/jobs/:job_id", get(handle_job_status))
        .route("/blocks", get(handle_blocks))
        .with_state(state)
}

/// Run the service: bind the configured address and advance the simulator
/// once per wall-clock second.
pub async fn serve(state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(&state.config.listen_address).await?;
    eprintln!("blockgate listening on {}", listener.local_addr()?);
    let ticker_state = state.clone();
    tokio::spawn(async move {
        let mut interval = tokio::time::interval(std::time::Duration::from_secs(1));
        loop {
            interval.tick().await;
            ticker_state.tick();
        }
    });
    axum::serve(listener, app(state)).await
}
