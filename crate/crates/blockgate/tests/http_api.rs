//! Wire-protocol tests against a live in-process gateway.

use base64::Engine;
use blockgate::certkit::{ca_issue, ca_keygen, CAIdentity};
use blockgate::gateway::config::GatewayConfig;
use blockgate::gateway::{app, AppState, GatewayClock};
use serde_json::{json, Value};
use std::fmt::Write as _;
use std::sync::Arc;

const NOW: i64 = 1000;
const ADMIN: &str = "test-admin";

struct TestGateway {
    base: String,
    state: Arc<AppState>,
    client: reqwest::Client,
    _dir: tempfile::TempDir,
}

async fn start_gateway(cas: &[&CAIdentity]) -> TestGateway {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from(
        "listen_address = 127.0.0.1:0\n\
         total_nodes = 8\n\
         node_prefix = n\n\
         middleware = gt4 /opt/mw/gt4\n\
         middleware = mpich-g2 /opt/mw/mpich-g2\n\
         proxy_ttl_s = 600\n",
    );
    let _ = writeln!(text, "admin_token = {ADMIN}");
    let _ = writeln!(text, "snapshot_path = {}", dir.path().join("reg.snap").display());
    for ca in cas {
        let _ = writeln!(text, "ca = {} {}", ca.ca_id, hex::encode(ca.verifying_key_bytes()));
    }
    let config = GatewayConfig::parse(&text).unwrap();
    let state = AppState::initialize(config, GatewayClock::fixed(NOW)).unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let server_state = state.clone();
    tokio::spawn(async move {
        axum::serve(listener, app(server_state)).await.unwrap();
    });
    TestGateway {
        base,
        state,
        client: reqwest::Client::new(),
        _dir: dir,
    }
}

impl TestGateway {
    async fn approve(&self, user: &str, nodes: usize, middleware: &str) -> (u16, Value) {
        let resp = self
            .client
            .post(format!("{}/admin/approve", self.base))
            .header("X-Admin-Token", ADMIN)
            .json(&json!({
                "username": user,
                "nodes": nodes,
                "middleware": middleware,
                "lease_start": 0,
                "lease_end": 1_000_000,
            }))
            .send()
            .await
            .unwrap();
        let status = resp.status().as_u16();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    async fn submit(&self, body: Value) -> (u16, Value) {
        let resp = self
            .client
            .post(format!("{}/wspc/request", self.base))
            .json(&body)
            .send()
            .await
            .unwrap();
        let status = resp.status().as_u16();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    async fn get(&self, path: &str) -> (u16, Value) {
        let resp = self.client.get(format!("{}{path}", self.base)).send().await.unwrap();
        let status = resp.status().as_u16();
        (status, resp.json().await.unwrap_or(Value::Null))
    }
}

fn cert_blob(ca: &CAIdentity, user: &str) -> String {
    let cert = ca_issue(ca, user, 0, 1_000_000).unwrap();
    base64::engine::general_purpose::STANDARD.encode(cert.to_wire())
}

fn submit_body(user: &str, blob: &str, middleware: &str, nodes: usize) -> Value {
    json!({
        "username": user,
        "userCA": blob,
        "middleware": middleware,
        "job": {"command": "/bin/true", "nodes": nodes, "walltime_s": 10},
    })
}

#[tokio::test]
async fn submit_happy_path() {
    let grid1 = ca_keygen("grid1", 1).unwrap();
    let gw = start_gateway(&[&grid1]).await;
    let (status, _) = gw.approve("alice", 4, "gt4").await;
    assert_eq!(status, 201);

    let (status, body) = gw
        .submit(submit_body("alice", &cert_blob(&grid1, "alice"), "gt4", 2))
        .await;
    assert_eq!(status, 202, "{body}");
    assert_eq!(body["queue"], "alice");
    assert_eq!(body["middleware_path"], "/opt/mw/gt4");
    let job_id = body["job_id"].as_str().unwrap();

    let (status, job) = gw.get(&format!("/jobs/{job_id}")).await;
    assert_eq!(status, 200);
    assert_eq!(job["state"], "Queued");

    // drive the simulator: start, then complete after walltime
    for _ in 0..11 {
        gw.state.tick();
    }
    let (_, job) = gw.get(&format!("/jobs/{job_id}")).await;
    assert_eq!(job["state"], "Completed");
}

#[tokio::test]
async fn error_status_mapping_is_exact() {
    let grid1 = ca_keygen("grid1", 1).unwrap();
    let grid2 = ca_keygen("grid2", 2).unwrap();
    let gw = start_gateway(&[&grid1]).await;
    gw.approve("alice", 4, "gt4").await;
    let alice = cert_blob(&grid1, "alice");

    // 400: missing userCA field
    let (status, body) = gw
        .submit(json!({"username": "alice", "middleware": "gt4",
                       "job": {"command": "x", "nodes": 1, "walltime_s": 1}}))
        .await;
    assert_eq!((status, body["error"].as_str().unwrap()), (400, "MalformedBody"));

    // 400: undecodable certificate
    let (status, body) = gw.submit(submit_body("alice", "!!!", "gt4", 1)).await;
    assert_eq!((status, body["error"].as_str().unwrap()), (400, "MalformedBody"));

    // 401: untrusted CA
    let (status, body) = gw
        .submit(submit_body("bob", &cert_blob(&grid2, "bob"), "gt4", 1))
        .await;
    assert_eq!((status, body["error"].as_str().unwrap()), (401, "UnknownCA"));

    // 401: claimed username disagrees with certificate subject
    let (status, body) = gw.submit(submit_body("bob", &alice, "gt4", 1)).await;
    assert_eq!((status, body["error"].as_str().unwrap()), (401, "UsernameMismatch"));

    // 404: no allocation
    let (status, body) = gw
        .submit(submit_body("carol", &cert_blob(&grid1, "carol"), "gt4", 1))
        .await;
    assert_eq!((status, body["error"].as_str().unwrap()), (404, "NoAllocation"));

    // 409: middleware mismatch
    let (status, body) = gw.submit(submit_body("alice", &alice, "mpich-g2", 1)).await;
    assert_eq!((status, body["error"].as_str().unwrap()), (409, "MiddlewareMismatch"));

    // 409: job larger than the block
    let (status, body) = gw.submit(submit_body("alice", &alice, "gt4", 5)).await;
    assert_eq!((status, body["error"].as_str().unwrap()), (409, "OversizedJob"));
}

#[tokio::test]
async fn rejected_submission_changes_nothing() {
    let grid1 = ca_keygen("grid1", 1).unwrap();
    let gw = start_gateway(&[&grid1]).await;
    gw.approve("alice", 4, "gt4").await;
    let gen_before = gw.state.registry.read().unwrap().generation();
    let queue_before = gw.state.sim.lock().unwrap().queues().queue("alice").unwrap().len();

    gw.submit(submit_body("bob", &cert_blob(&grid1, "alice"), "gt4", 1)).await;
    gw.submit(submit_body("carol", &cert_blob(&grid1, "carol"), "gt4", 1)).await;

    assert_eq!(gw.state.registry.read().unwrap().generation(), gen_before);
    assert_eq!(
        gw.state.sim.lock().unwrap().queues().queue("alice").unwrap().len(),
        queue_before
    );
}

#[tokio::test]
async fn admin_token_and_atomicity() {
    let grid1 = ca_keygen("grid1", 1).unwrap();
    let gw = start_gateway(&[&grid1]).await;

    // wrong token: 401, generation unchanged
    let resp = gw
        .client
        .post(format!("{}/admin/approve", gw.base))
        .header("X-Admin-Token", "wrong")
        .json(&json!({"username": "alice", "nodes": 4, "middleware": "gt4",
                      "lease_start": 0, "lease_end": 10}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status().as_u16(), 401);
    assert_eq!(gw.state.registry.read().unwrap().generation(), 0);

    // a failed approve creates no queue
    let (status, _) = gw.approve("alice", 99, "gt4").await;
    assert_eq!(status, 422);
    assert!(gw.state.sim.lock().unwrap().queues().queue("alice").is_none());

    let (status, _) = gw.approve("alice", 4, "gt4").await;
    assert_eq!(status, 201);
    let (status, _) = gw.approve("alice", 2, "gt4").await;
    assert_eq!(status, 409);
}

#[tokio::test]
async fn release_and_listings() {
    let grid1 = ca_keygen("grid1", 1).unwrap();
    let gw = start_gateway(&[&grid1]).await;
    gw.approve("alice", 4, "gt4").await;
    gw.approve("bob", 2, "mpich-g2").await;

    let (status, body) = gw.get("/blocks").await;
    assert_eq!(status, 200);
    let blocks = body["blocks"].as_array().unwrap();
    assert_eq!(blocks.len(), 2);
    let mut all_nodes: Vec<String> = blocks
        .iter()
        .flat_map(|b| b["node_ids"].as_array().unwrap().iter())
        .map(|n| n.as_str().unwrap().to_string())
        .collect();
    let before = all_nodes.len();
    all_nodes.sort();
    all_nodes.dedup();
    assert_eq!(all_nodes.len(), before, "blocks overlap");

    let resp = gw
        .client
        .delete(format!("{}/admin/allocation/alice", gw.base))
        .header("X-Admin-Token", ADMIN)
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status().as_u16(), 204);
    let (_, body) = gw.get("/blocks").await;
    assert_eq!(body["blocks"].as_array().unwrap().len(), 1);

    let resp = gw
        .client
        .delete(format!("{}/admin/allocation/ghost", gw.base))
        .header("X-Admin-Token", ADMIN)
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status().as_u16(), 404);

    let (status, _) = gw.get("/jobs/nope-1-1").await;
    assert_eq!(status, 404);
}

#[tokio::test]
async fn restart_preserves_blocks_and_marks_queued_jobs_lost() {
    let grid1 = ca_keygen("grid1", 1).unwrap();
    let gw = start_gateway(&[&grid1]).await;
    gw.approve("alice", 4, "gt4").await;
    let (status, body) = gw
        .submit(submit_body("alice", &cert_blob(&grid1, "alice"), "gt4", 2))
        .await;
    assert_eq!(status, 202);
    let job_id = body["job_id"].as_str().unwrap().to_string();
    let (_, blocks_before) = gw.get("/blocks").await;

    // restart: same config directory, fresh process state
    let config = gw.state.config.clone();
    let restarted = AppState::initialize(config, GatewayClock::fixed(NOW)).unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let server_state = restarted.clone();
    tokio::spawn(async move {
        axum::serve(listener, app(server_state)).await.unwrap();
    });

    let client = reqwest::Client::new();
    let blocks_after: Value = client
        .get(format!("{base}/blocks"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(blocks_before, blocks_after);

    let job: Value = client
        .get(format!("{base}/jobs/{job_id}"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(job["state"], "Rejected");
    assert_eq!(job["reason"], "RestartLost");
}
