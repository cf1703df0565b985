//! Deterministic discrete-time execution engine standing in for the grid
//! toolkit's job-run service. Queued jobs start on their block's free
//! nodes and complete after exactly their walltime.
//!
//! Time advances in synchronous one-second steps. Within a step, queues
//! are scanned in lexicographic name order and nodes are assigned
//! first-fit, so identical submission traces produce identical event logs.

use crate::certkit::Timestamp;
use crate::pqueue::{JobState, QueueError, QueueSet};
use crate::registry::{first_fit, BlockAllocation};
use crate::router::RoutingDecision;
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("decision job id {decision:?} does not match job record {job:?}")]
    InternalInconsistency { decision: String, job: String },
    #[error("work remained after {0} steps")]
    Timeout(u64),
    #[error("unknown job {0:?}")]
    UnknownJob(String),
    #[error(transparent)]
    Queue(#[from] QueueError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    JobStarted,
    JobCompleted,
    JobRejected,
}

impl EventKind {
    fn label(&self) -> &'static str {
        match self {
            EventKind::JobStarted => "JobStarted",
            EventKind::JobCompleted => "JobCompleted",
            EventKind::JobRejected => "JobRejected",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub time: Timestamp,
    pub kind: EventKind,
    pub job_id: String,
    pub queue: String,
    pub nodes: Vec<String>,
}

impl Event {
    /// One line per event: `<time> <kind> <job_id> <queue> <node,...>`.
    pub fn to_line(&self) -> String {
        let nodes = if self.nodes.is_empty() {
            "-".to_string()
        } else {
            self.nodes.join(",")
        };
        format!(
            "{} {} {} {} {}",
            self.time,
            self.kind.label(),
            self.job_id,
            self.queue,
            nodes
        )
    }
}

#[derive(Debug, Clone)]
struct Block {
    block_id: String,
    free: BTreeSet<String>,
}

#[derive(Debug, Clone)]
struct RunningJob {
    queue: String,
    nodes: Vec<String>,
    end: Timestamp,
}

/// Per-job and per-block summary produced by [`SimState::run_to_completion`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimReport {
    pub steps: u64,
    pub jobs: Vec<JobSummary>,
    /// queue name → busy node-seconds of completed jobs
    pub block_busy: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobSummary {
    pub job_id: String,
    pub queue: String,
    pub start: Timestamp,
    pub end: Timestamp,
    pub nodes: Vec<String>,
}

/// The simulator: queues, per-block free-node sets, running jobs, and the
/// ordered event log. Single-threaded by contract.
#[derive(Debug, Default)]
pub struct SimState {
    clock: Timestamp,
    queues: QueueSet,
    blocks: BTreeMap<String, Block>, // keyed by queue name (= owner)
    running: BTreeMap<String, RunningJob>,
    events: Vec<Event>,
    proxy_key: Vec<u8>,
}

impl SimState {
    pub fn new(proxy_key: &[u8]) -> SimState {
        SimState {
            proxy_key: proxy_key.to_vec(),
            ..SimState::default()
        }
    }

    pub fn clock(&self) -> Timestamp {
        self.clock
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn event_log(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&e.to_line());
            out.push('\n');
        }
        out
    }

    pub fn queues(&self) -> &QueueSet {
        &self.queues
    }

    /// Create the queue and free-node pool for a freshly approved block.
    pub fn register_block(&mut self, alloc: &BlockAllocation) -> Result<(), QueueError> {
        self.queues
            .create_queue(&alloc.queue_name, &alloc.node_ids, &alloc.owner_username)?;
        self.blocks.insert(
            alloc.queue_name.clone(),
            Block {
                block_id: alloc.block_id.clone(),
                free: alloc.node_ids.iter().cloned().collect(),
            },
        );
        Ok(())
    }

    /// Tear down a released block's queue and node pool.
    pub fn remove_block(&mut self, queue_name: &str) {
        self.queues.remove_queue(queue_name);
        self.blocks.remove(queue_name);
    }

    /// Hand a routed job to the owner's queue. Enqueue re-verifies the
    /// proxy credential, so tampering after routing is caught here.
    pub fn submit(
        &mut self,
        decision: &RoutingDecision,
        job: crate::pqueue::JobRecord,
        now: Timestamp,
    ) -> Result<String, SimError> {
        if decision.job_id != job.job_id {
            return Err(SimError::InternalInconsistency {
                decision: decision.job_id.clone(),
                job: job.job_id.clone(),
            });
        }
        let job_id = job.job_id.clone();
        match self
            .queues
            .enqueue(&decision.queue_name, job, &decision.proxy, &self.proxy_key, now)
        {
            Ok(id) => Ok(id),
            Err(e) => {
                self.events.push(Event {
                    time: self.clock,
                    kind: EventKind::JobRejected,
                    job_id,
                    queue: decision.queue_name.clone(),
                    nodes: vec![],
                });
                Err(SimError::Queue(e))
            }
        }
    }

    /// Advance the clock one second: complete due jobs, then start queue
    /// heads that fit, in lexicographic queue order. Returns the events
    /// appended during this step.
    pub fn step(&mut self) -> Vec<Event> {
        self.clock += 1;
        let step_start = self.events.len();

        // completions first, in job-id order for a stable log
        let due: Vec<String> = self
            .running
            .iter()
            .filter(|(_, r)| r.end == self.clock)
            .map(|(id, _)| id.clone())
            .collect();
        for job_id in due {
            let run = self.running.remove(&job_id).expect("collected above");
            if let Some(block) = self.blocks.get_mut(&run.queue) {
                for n in &run.nodes {
                    block.free.insert(n.clone());
                }
            }
            if let Some(job) = self.queues.job_mut(&job_id) {
                job.transition(JobState::Completed { end: self.clock })
                    .expect("Running -> Completed");
            }
            self.events.push(Event {
                time: self.clock,
                kind: EventKind::JobCompleted,
                job_id,
                queue: run.queue,
                nodes: run.nodes,
            });
        }

        // then starts, lexicographic queue order, first-fit nodes
        let queue_names: Vec<String> = self.blocks.keys().cloned().collect();
        for qname in queue_names {
            loop {
                let free = &self.blocks[&qname].free;
                let Some(head) = self.queues.next_runnable(&qname, free) else {
                    break;
                };
                let job_id = head.job_id.clone();
                let wanted = head.nodes_requested;
                let walltime = head.walltime_s;
                let free_sorted: Vec<String> = free.iter().cloned().collect();
                let assigned = first_fit(&free_sorted, wanted).expect("next_runnable checked fit");
                let block = self.blocks.get_mut(&qname).expect("queue has a block");
                for n in &assigned {
                    block.free.remove(n);
                }
                self.queues.pop_head(&qname);
                self.queues
                    .job_mut(&job_id)
                    .expect("queued job exists")
                    .transition(JobState::Running {
                        nodes: assigned.clone(),
                        start: self.clock,
                    })
                    .expect("Queued -> Running");
                self.running.insert(
                    job_id.clone(),
                    RunningJob {
                        queue: qname.clone(),
                        nodes: assigned.clone(),
                        end: self.clock + walltime as Timestamp,
                    },
                );
                self.events.push(Event {
                    time: self.clock,
                    kind: EventKind::JobStarted,
                    job_id,
                    queue: qname.clone(),
                    nodes: assigned,
                });
            }
        }

        self.events[step_start..].to_vec()
    }

    fn work_remains(&self) -> bool {
        !self.running.is_empty() || self.queues.queue_names().any(|q| {
            self.queues.queue(q).map(|q| !q.is_empty()).unwrap_or(false)
        })
    }

    /// Step until the system drains or `max_steps` is hit.
    pub fn run_to_completion(&mut self, max_steps: u64) -> Result<SimReport, SimError> {
        let mut steps = 0u64;
        while self.work_remains() {
            if steps >= max_steps {
                return Err(SimError::Timeout(max_steps));
            }
            self.step();
            steps += 1;
        }
        Ok(self.report(steps))
    }

    fn report(&self, steps: u64) -> SimReport {
        let mut jobs = Vec::new();
        let mut block_busy: BTreeMap<String, u64> = BTreeMap::new();
        for job in self.queues.jobs() {
            if let JobState::Completed { end } = job.state() {
                // start and nodes come from the Running entry in history
                let running = job
                    .history()
                    .iter()
                    .find_map(|s| match s {
                        JobState::Running { nodes, start } => Some((nodes.clone(), *start)),
                        _ => None,
                    })
                    .expect("completed job ran");
                let queue = job.requester.clone();
                *block_busy.entry(queue.clone()).or_default() +=
                    running.0.len() as u64 * (end - running.1) as u64;
                jobs.push(JobSummary {
                    job_id: job.job_id.clone(),
                    queue,
                    start: running.1,
                    end: *end,
                    nodes: running.0,
                });
            }
        }
        jobs.sort_by(|a, b| a.job_id.cmp(&b.job_id));
        SimReport { steps, jobs, block_busy }
    }

    pub fn job_status(&self, job_id: &str) -> Result<&JobState, SimError> {
        self.queues
            .job(job_id)
            .map(|j| j.state())
            .ok_or_else(|| SimError::UnknownJob(job_id.to_string()))
    }

    /// Block id serving a queue, for status listings.
    pub fn block_id_of(&self, queue_name: &str) -> Option<&str> {
        self.blocks.get(queue_name).map(|b| b.block_id.as_str())
    }
}
