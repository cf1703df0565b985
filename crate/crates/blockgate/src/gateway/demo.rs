//! Federation demo: two grids, two blocks of one cluster, an interleaved
//! mix of valid and adversarial submissions driven through the full wire
//! path, then simulated to completion and checked for block isolation.

use crate::certkit::{ca_issue, ca_keygen, CAIdentity, Certificate};
use crate::gateway::config::GatewayConfig;
use crate::gateway::{app, AppState, GatewayClock};
use crate::sim::EventKind;
use base64::Engine;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

const DEMO_NOW: i64 = 1000;
const CERT_END: i64 = 1_000_000;

struct DemoRequest {
    label: &'static str,
    username: String,
    cert: Certificate,
    middleware: &'static str,
    nodes: usize,
    walltime_s: u64,
    /// None: expect 202; Some(code): expect this wire error class.
    expect: Option<&'static str>,
}

fn encode(cert: &Certificate) -> String {
    base64::engine::general_purpose::STANDARD.encode(cert.to_wire())
}

fn build_requests(
    grid1: &CAIdentity,
    grid2: &CAIdentity,
    grid3: &CAIdentity,
    bob_expect: Option<&'static str>,
) -> Vec<DemoRequest> {
    let alice = |nb, na| ca_issue(grid1, "alice", nb, na).unwrap();
    let mut tampered = alice(0, CERT_END);
    tampered.signature[7] ^= 0x10;
    vec![
        DemoRequest {
            label: "alice-job-1",
            username: "alice".into(),
            cert: alice(0, CERT_END),
            middleware: "gt4",
            nodes: 2,
            walltime_s: 5,
            expect: None,
        },
        DemoRequest {
            label: "alice-job-2",
            username: "alice".into(),
            cert: alice(0, CERT_END),
            middleware: "gt4",
            nodes: 4,
            walltime_s: 3,
            expect: None,
        },
        DemoRequest {
            label: "alice-job-3",
            username: "alice".into(),
            cert: alice(0, CERT_END),
            middleware: "gt4",
            nodes: 1,
            walltime_s: 4,
            expect: None,
        },
        DemoRequest {
            label: "bob-job-1",
            username: "bob".into(),
            cert: ca_issue(grid2, "bob", 0, CERT_END).unwrap(),
            middleware: "mpich-g2",
            nodes: 2,
            walltime_s: 6,
            expect: bob_expect,
        },
        DemoRequest {
            label: "bob-job-2",
            username: "bob".into(),
            cert: ca_issue(grid2, "bob", 0, CERT_END).unwrap(),
            middleware: "mpich-g2",
            nodes: 1,
            walltime_s: 2,
            expect: bob_expect,
        },
        DemoRequest {
            label: "untrusted-grid",
            username: "mallory".into(),
            cert: ca_issue(grid3, "mallory", 0, CERT_END).unwrap(),
            middleware: "gt4",
            nodes: 1,
            walltime_s: 1,
            expect: Some("UnknownCA"),
        },
        DemoRequest {
            label: "tampered-signature",
            username: "alice".into(),
            cert: tampered,
            middleware: "gt4",
            nodes: 1,
            walltime_s: 1,
            expect: Some("BadSignature"),
        },
        DemoRequest {
            label: "expired-cert",
            username: "alice".into(),
            cert: alice(0, 500),
            middleware: "gt4",
            nodes: 1,
            walltime_s: 1,
            expect: Some("Expired"),
        },
        DemoRequest {
            label: "not-yet-valid-cert",
            username: "alice".into(),
            cert: alice(2000, 3000),
            middleware: "gt4",
            nodes: 1,
            walltime_s: 1,
            expect: Some("NotYetValid"),
        },
        DemoRequest {
            label: "stolen-cert-wrong-claim",
            username: "bob".into(),
            cert: alice(0, CERT_END),
            middleware: "gt4",
            nodes: 1,
            walltime_s: 1,
            expect: Some("UsernameMismatch"),
        },
        DemoRequest {
            label: "unallocated-user",
            username: "carol".into(),
            cert: ca_issue(grid1, "carol", 0, CERT_END).unwrap(),
            middleware: "gt4",
            nodes: 1,
            walltime_s: 1,
            expect: Some("NoAllocation"),
        },
        DemoRequest {
            label: "wrong-middleware",
            username: "alice".into(),
            cert: alice(0, CERT_END),
            middleware: "mpich-g2",
            nodes: 1,
            walltime_s: 1,
            expect: Some("MiddlewareMismatch"),
        },
        DemoRequest {
            label: "oversized-job",
            username: "alice".into(),
            cert: alice(0, CERT_END),
            middleware: "gt4",
            nodes: 5,
            walltime_s: 1,
            expect: Some("OversizedJob"),
        },
    ]
}

/// Run the scenario. Returns the printable report on success, or the
/// first failed assertion (report included) on failure.
pub fn run_demo(seed: u64, drop_ca: Option<&str>) -> Result<String, String> {
    let grid1 = ca_keygen("grid1", seed).expect("keygen");
    let grid2 = ca_keygen("grid2", seed.wrapping_add(1)).expect("keygen");
    let grid3 = ca_keygen("grid3", seed.wrapping_add(2)).expect("keygen");

    let trusted: Vec<&CAIdentity> = [&grid1, &grid2]
        .into_iter()
        .filter(|ca| Some(ca.ca_id.as_str()) != drop_ca)
        .collect();
    let bob_expect = if drop_ca == Some("grid2") { Some("UnknownCA") } else { None };

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut config_text = String::from(
        "listen_address = 127.0.0.1:0\n\
         total_nodes = 8\n\
         node_prefix = n\n\
         middleware = gt4 /opt/mw/gt4\n\
         middleware = mpich-g2 /opt/mw/mpich-g2\n\
         proxy_ttl_s = 600\n\
         admin_token = demo-admin\n",
    );
    let _ = writeln!(config_text, "snapshot_path = {}", dir.path().join("demo.snap").display());
    for ca in &trusted {
        let _ = writeln!(config_text, "ca = {} {}", ca.ca_id, hex::encode(ca.verifying_key_bytes()));
    }
    let config = GatewayConfig::parse(&config_text).map_err(|e| e.to_string())?;
    let state = AppState::initialize(config, GatewayClock::fixed(DEMO_NOW)).map_err(|e| e.to_string())?;

    // serve on an ephemeral port; requests go through the real wire path
    let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    let listener = runtime
        .block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))
        .map_err(|e| e.to_string())?;
    let addr = listener.local_addr().map_err(|e| e.to_string())?;
    let server_state = state.clone();
    runtime.spawn(async move {
        let _ = axum::serve(listener, app(server_state)).await;
    });
    let base = format!("http://{addr}");
    let client = reqwest::blocking::Client::new();

    // block approvals: alice on grid1's side, bob on grid2's
    for (user, nodes, middleware) in [("alice", 4, "gt4"), ("bob", 2, "mpich-g2")] {
        let resp = client
            .post(format!("{base}/admin/approve"))
            .header("X-Admin-Token", "demo-admin")
            .json(&serde_json::json!({
                "username": user,
                "nodes": nodes,
                "middleware": middleware,
                "lease_start": 0,
                "lease_end": CERT_END,
            }))
            .send()
            .map_err(|e| e.to_string())?;
        if resp.status().as_u16() != 201 {
            return Err(format!("approve {user} failed: {}", resp.status()));
        }
    }

    let mut requests = build_requests(&grid1, &grid2, &grid3, bob_expect);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    requests.shuffle(&mut rng);

    let mut report = String::new();
    let _ = writeln!(report, "blockgate federation demo (seed {seed})");
    let mut ids: Vec<&str> = trusted.iter().map(|ca| ca.ca_id.as_str()).collect();
    ids.sort();
    let _ = writeln!(report, "trusted grids: {}", ids.join(","));

    let mut accepted: Vec<(String, String)> = Vec::new(); // (label, job_id)
    let mut rejections: BTreeMap<String, usize> = BTreeMap::new();
    let mut failures: Vec<String> = Vec::new();

    for req in &requests {
        let resp = client
            .post(format!("{base}/wspc/request"))
            .json(&serde_json::json!({
                "username": req.username,
                "userCA": encode(&req.cert),
                "middleware": req.middleware,
                "job": {"command": "/bin/demo-task", "nodes": req.nodes, "walltime_s": req.walltime_s},
            }))
            .send()
            .map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body: serde_json::Value = resp.json().map_err(|e| e.to_string())?;
        match (&req.expect, status) {
            (None, 202) => {
                accepted.push((req.label.to_string(), body["job_id"].as_str().unwrap_or("").to_string()));
            }
            (Some(code), s) if s >= 400 && body["error"] == **code => {
                *rejections.entry(code.to_string()).or_default() += 1;
            }
            _ => failures.push(format!(
                "{}: expected {:?}, got status {status} body {body}",
                req.label, req.expect
            )),
        }
    }

    // drain the simulator
    {
        let mut sim = state.sim.lock().expect("sim lock");
        if let Err(e) = sim.run_to_completion(10_000) {
            failures.push(format!("simulation did not drain: {e}"));
        }
    }

    // isolation check against the allocation table
    let owned_nodes: BTreeMap<String, BTreeSet<String>> = {
        let reg = state.registry.read().expect("registry lock");
        reg.allocations()
            .map(|a| (a.queue_name.clone(), a.node_ids.iter().cloned().collect()))
            .collect()
    };
    let sim = state.sim.lock().expect("sim lock");
    let mut cross_block = 0usize;
    let mut completed_per_block: BTreeMap<String, usize> = BTreeMap::new();
    for e in sim.events() {
        match e.kind {
            EventKind::JobStarted => {
                let owned = owned_nodes.get(&e.queue);
                if !e.nodes.iter().all(|n| owned.map(|s| s.contains(n)).unwrap_or(false)) {
                    cross_block += 1;
                }
            }
            EventKind::JobCompleted => {
                *completed_per_block.entry(e.queue.clone()).or_default() += 1;
            }
            EventKind::JobRejected => {}
        }
    }
    for (label, job_id) in &accepted {
        match sim.queues().job(job_id).map(|j| j.state().label()) {
            Some("Completed") => {}
            other => failures.push(format!("{label} ({job_id}) ended as {other:?}, not Completed")),
        }
    }

    let _ = writeln!(
        report,
        "submissions: {} accepted: {} rejected: {}",
        requests.len(),
        accepted.len(),
        rejections.values().sum::<usize>()
    );
    let _ = writeln!(report, "rejections by error class:");
    for (code, n) in &rejections {
        let _ = writeln!(report, "  {code} {n}");
    }
    let _ = writeln!(report, "completed jobs per block:");
    for (queue, n) in &completed_per_block {
        let _ = writeln!(report, "  {queue} {n}");
    }
    let _ = writeln!(report, "cross-block executions: {cross_block}");
    let _ = writeln!(report, "event log:");
    report.push_str(&sim.event_log());

    if cross_block != 0 {
        failures.push(format!("{cross_block} jobs escaped their block"));
    }
    if drop_ca.is_none() {
        let expected: BTreeMap<String, usize> = [
            ("UnknownCA", 1),
            ("BadSignature", 1),
            ("Expired", 1),
            ("NotYetValid", 1),
            ("UsernameMismatch", 1),
            ("NoAllocation", 1),
            ("MiddlewareMismatch", 1),
            ("OversizedJob", 1),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        if rejections != expected {
            failures.push(format!("rejection tally {rejections:?} != expected {expected:?}"));
        }
    } else if drop_ca == Some("grid2") && rejections.get("UnknownCA").copied().unwrap_or(0) != 3 {
        // bob's two jobs plus the always-untrusted grid3 request
        failures.push(format!("expected 3 UnknownCA rejections, saw {rejections:?}"));
    }

    if let Some(first) = failures.first() {
        Err(format!("{report}result: FAIL\nassertion failed: {first}"))
    } else {
        Ok(format!("{report}result: OK"))
    }
}
