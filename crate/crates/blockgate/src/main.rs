use base64::Engine;
use blockgate::certkit::{ca_issue, ca_keygen};
use blockgate::gateway::config::GatewayConfig;
use blockgate::gateway::{demo, serve, AppState, GatewayClock};
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "blockgate", about = "Gateway connecting blocks of a public cluster to multiple grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the gateway service
    Serve {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Certificate authority operations
    Ca {
        #[command(subcommand)]
        command: CaCommand,
    },
    /// Administrative operations against a running gateway
    Admin {
        #[command(subcommand)]
        command: AdminCommand,
    },
    /// Submit a job request
    Submit {
        #[arg(long, default_value = "http://127.0.0.1:8420")]
        gateway: String,
        #[arg(long)]
        username: String,
        /// base64 certificate blob, as printed by `ca issue`
        #[arg(long)]
        cert: String,
        #[arg(long)]
        middleware: String,
        #[arg(long)]
        command: String,
        #[arg(long)]
        nodes: usize,
        #[arg(long)]
        walltime_s: u64,
    },
    /// Query job state or list blocks
    Status {
        #[arg(long, default_value = "http://127.0.0.1:8420")]
        gateway: String,
        /// job id to query; without it, active blocks are listed
        #[arg(long)]
        job_id: Option<String>,
    },
    /// Run the two-grid federation scenario
    Demo {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// remove this CA from the trust store before running
        #[arg(long)]
        drop_ca: Option<String>,
    },
}

#[derive(Subcommand)]
enum CaCommand {
    /// Deterministically generate a CA key pair and print the verifying key
    Keygen {
        #[arg(long)]
        ca_id: String,
        #[arg(long)]
        seed: u64,
    },
    /// Issue a certificate and print its base64 wire blob
    Issue {
        #[arg(long)]
        ca_id: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        username: String,
        #[arg(long, default_value_t = 0)]
        not_before: i64,
        #[arg(long)]
        not_after: i64,
    },
}

#[derive(Subcommand)]
enum AdminCommand {
    /// Approve a user: lease a block and create its queue
    Approve {
        #[arg(long, default_value = "http://127.0.0.1:8420")]
        gateway: String,
        #[arg(long)]
        token: String,
        #[arg(long)]
        username: String,
        #[arg(long)]
        nodes: usize,
        #[arg(long)]
        middleware: String,
        #[arg(long, default_value_t = 0)]
        lease_start: i64,
        #[arg(long)]
        lease_end: i64,
    },
    /// Release a user's block
    Release {
        #[arg(long, default_value = "http://127.0.0.1:8420")]
        gateway: String,
        #[arg(long)]
        token: String,
        #[arg(long)]
        username: String,
    },
}

fn print_response(resp: reqwest::blocking::Response) -> ExitCode {
    let status = resp.status();
    match resp.text() {
        Ok(body) if !body.is_empty() => println!("{status}\n{body}"),
        _ => println!("{status}"),
    }
    if status.is_success() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn fail(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let client = reqwest::blocking::Client::new();
    match cli.command {
        Command::Serve { config } => {
            let config = match GatewayConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            let state = match AppState::initialize(config, GatewayClock::System) {
                Ok(s) => s,
                Err(e) => return fail(e),
            };
            let runtime = tokio::runtime::Runtime::new().expect("tokio runtime");
            match runtime.block_on(serve(state)) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(e),
            }
        }
        Command::Ca { command } => match command {
            CaCommand::Keygen { ca_id, seed } => match ca_keygen(&ca_id, seed) {
                Ok(ca) => {
                    println!("ca = {} {}", ca.ca_id, hex::encode(ca.verifying_key_bytes()));
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            },
            CaCommand::Issue { ca_id, seed, username, not_before, not_after } => {
                let ca = match ca_keygen(&ca_id, seed) {
                    Ok(ca) => ca,
                    Err(e) => return fail(e),
                };
                match ca_issue(&ca, &username, not_before, not_after) {
                    Ok(cert) => {
                        println!("{}", base64::engine::general_purpose::STANDARD.encode(cert.to_wire()));
                        ExitCode::SUCCESS
                    }
                    Err(e) => fail(e),
                }
            }
        },
        Command::Admin { command } => match command {
            AdminCommand::Approve { gateway, token, username, nodes, middleware, lease_start, lease_end } => {
                let resp = client
                    .post(format!("{gateway}/admin/approve"))
                    .header("X-Admin-Token", token)
                    .json(&serde_json::json!({
                        "username": username,
                        "nodes": nodes,
                        "middleware": middleware,
                        "lease_start": lease_start,
                        "lease_end": lease_end,
                    }))
                    .send();
                match resp {
                    Ok(r) => print_response(r),
                    Err(e) => fail(e),
                }
            }
            AdminCommand::Release { gateway, token, username } => {
                let resp = client
                    .delete(format!("{gateway}/admin/allocation/{username}"))
                    .header("X-Admin-Token", token)
                    .send();
                match resp {
                    Ok(r) => print_response(r),
                    Err(e) => fail(e),
                }
            }
        },
        Command::Submit { gateway, username, cert, middleware, command, nodes, walltime_s } => {
            let resp = client
                .post(format!("{gateway}/wspc/request"))
                .json(&serde_json::json!({
                    "username": username,
                    "userCA": cert,
                    "middleware": middleware,
                    "job": {"command": command, "nodes": nodes, "walltime_s": walltime_s},
                }))
                .send();
            match resp {
                Ok(r) => print_response(r),
                Err(e) => fail(e),
            }
        }
        Command::Status { gateway, job_id } => {
            let url = match job_id {
                Some(id) => format!("{gateway}/jobs/{id}"),
                None => format!("{gateway}/blocks"),
            };
            match client.get(url).send() {
                Ok(r) => print_response(r),
                Err(e) => fail(e),
            }
        }
        Command::Demo { seed, drop_ca } => match demo::run_demo(seed, drop_ca.as_deref()) {
            Ok(report) => {
                println!("{report}");
                ExitCode::SUCCESS
            }
            Err(report) => {
                println!("{report}");
                ExitCode::FAILURE
            }
        },
    }
}
