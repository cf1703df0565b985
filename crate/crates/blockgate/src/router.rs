//! The routing pipeline: authenticate an incoming request, retrieve the
//! username from its certificate, map it to the owner's queue, resolve the
//! middleware path, and emit a routing decision carrying the second-stage
//! proxy credential.
//!
//! Routing is read-only with respect to the registry; enqueueing the job
//! is the caller's next step.

use crate::certkit::{
    extract_username, issue_proxy, verify_certificate, AuthFailure, Certificate, ProxyCredential,
    Timestamp, TrustStore,
};
use crate::pqueue::{JobRecord, JobState};
use crate::registry::{BlockAllocation, MiddlewareCatalog, Registry, RegistryError};
use std::sync::atomic::{AtomicU64, Ordering};
use thiserror::Error;

/// Inbound job request: the claimed username, the certificate backing it,
/// the desired middleware, and the job body.
#[derive(Debug, Clone)]
pub struct JobRequest {
    pub claimed_username: String,
    pub certificate: Certificate,
    pub middleware: String,
    pub command: String,
    pub nodes_requested: usize,
    pub walltime_s: u64,
}

/// Output of a successful routing pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingDecision {
    pub job_id: String,
    pub queue_name: String,
    pub block_id: String,
    pub middleware_path: String,
    pub proxy: ProxyCredential,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RouteError {
    #[error("certificate rejected")]
    AuthRejected(AuthFailure),
    #[error("claimed username {claimed:?} does not match certificate subject {subject:?}")]
    UsernameMismatch { claimed: String, subject: String },
    #[error("no allocation for user {0:?}")]
    NoAllocation(String),
    #[error("allocation for user {0:?} is outside its lease")]
    LeaseExpired(String),
    #[error("requested middleware {requested:?} but the block was activated with {activated:?}")]
    MiddlewareMismatch { requested: String, activated: String },
    #[error("activated middleware {0:?} is missing from the catalog")]
    UnknownMiddleware(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl RouteError {
    /// Machine-readable error class, stable on the wire.
    pub fn code(&self) -> &'static str {
        match self {
            RouteError::AuthRejected(f) => f.code(),
            RouteError::UsernameMismatch { .. } => "UsernameMismatch",
            RouteError::NoAllocation(_) => "NoAllocation",
            RouteError::LeaseExpired(_) => "LeaseExpired",
            RouteError::MiddlewareMismatch { .. } => "MiddlewareMismatch",
            RouteError::UnknownMiddleware(_) => "UnknownMiddleware",
            RouteError::InvalidRequest(_) => "InvalidRequest",
        }
    }
}

/// Collision-free job id source: `<username>-<generation>-<counter>`.
#[derive(Debug, Default)]
pub struct JobIdGen {
    counter: AtomicU64,
}

impl JobIdGen {
    pub fn new() -> JobIdGen {
        JobIdGen::default()
    }

    pub fn next(&self, username: &str, generation: u64) -> String {
        let n = self.counter.fetch_add(1, Ordering::Relaxed) + 1;
        format!("{username}-{generation}-{n}")
    }
}

/// Middleware path resolution: the request must name the middleware the
/// block was activated with; the path comes from the catalog.
pub fn resolve_middleware(
    allocation: &BlockAllocation,
    requested: &str,
    catalog: &MiddlewareCatalog,
) -> Result<String, RouteError> {
    if requested != allocation.middleware {
        return Err(RouteError::MiddlewareMismatch {
            requested: requested.to_string(),
            activated: allocation.middleware.clone(),
        });
    }
    catalog
        .path_of(&allocation.middleware)
        .map(|p| p.to_string())
        .ok_or_else(|| RouteError::UnknownMiddleware(allocation.middleware.clone()))
}

/// Run the pipeline, short-circuiting on the first failure:
/// verify certificate, extract username, check it against the claimed
/// name, look up the owner's queue, resolve the middleware path, and
/// issue the proxy credential. Mutates nothing.
pub fn route(
    req: &JobRequest,
    store: &TrustStore,
    reg: &Registry,
    catalog: &MiddlewareCatalog,
    proxy_key: &[u8],
    ids: &JobIdGen,
    proxy_ttl_s: u64,
    now: Timestamp,
) -> Result<(RoutingDecision, JobRecord), RouteError> {
    // stage one: certificate authentication
    verify_certificate(&req.certificate, store, now).map_err(RouteError::AuthRejected)?;
    let username = extract_username(&req.certificate);
    // the certificate is authoritative; a disagreeing claim is rejected
    if req.claimed_username != username {
        return Err(RouteError::UsernameMismatch {
            claimed: req.claimed_username.clone(),
            subject: username.to_string(),
        });
    }
    let (queue_name, block_id, _middleware) = reg.lookup_queue(username, now).map_err(|e| match e {
        RegistryError::NoAllocation(u) => RouteError::NoAllocation(u),
        RegistryError::LeaseExpired(u) => RouteError::LeaseExpired(u),
        other => RouteError::InvalidRequest(other.to_string()),
    })?;
    let allocation = reg.allocation_of(username).expect("lookup_queue succeeded");
    let middleware_path = resolve_middleware(allocation, &req.middleware, catalog)?;
    // stage two: proxy credential for the queue boundary
    let proxy = issue_proxy(&req.certificate, now, proxy_ttl_s, proxy_key)
        .map_err(|e| RouteError::InvalidRequest(e.to_string()))?;

    let job_id = ids.next(username, reg.generation());
    let mut job = JobRecord::new(&job_id, username, &req.command, req.nodes_requested, req.walltime_s);
    job.transition(JobState::Authenticated).expect("Received -> Authenticated");
    job.transition(JobState::Routed).expect("Authenticated -> Routed");

    Ok((
        RoutingDecision {
            job_id,
            queue_name: queue_name.to_string(),
            block_id: block_id.to_string(),
            middleware_path,
            proxy,
        },
        job,
    ))
}
