//! Per-block job queues, PBS style: one queue per allocation, named by
//! the owner, restricted to the block's nodes, strict FIFO, owner-only.

use crate::certkit::{verify_proxy, AuthFailure, ProxyCredential, Timestamp};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QueueError {
    #[error("queue name {name:?} must equal the authorized user {user:?}")]
    NameMismatch { name: String, user: String },
    #[error("queue {0:?} already exists")]
    DuplicateQueue(String),
    #[error("queue must own at least one node")]
    EmptyNodeSet,
    #[error("user {requester:?} is not the owner of queue {queue:?}")]
    NotAuthorized { queue: String, requester: String },
    #[error("second-stage authentication failed")]
    Proxy(AuthFailure),
    #[error("job wants {requested} nodes but the block has only {block}")]
    OversizedJob { requested: usize, block: usize },
    #[error("job is in state {0:?}, expected Routed")]
    BadState(String),
    #[error("no queue named {0:?}")]
    UnknownQueue(String),
    #[error("illegal transition {from:?} -> {to:?}")]
    IllegalTransition { from: String, to: String },
}

/// Lifecycle stages of a job, mirroring the request flow: received at the
/// gateway, authenticated, routed to a queue, queued, running on nodes,
/// then completed — or rejected anywhere before it runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JobState {
    Received,
    Authenticated,
    Routed,
    Queued,
    Running { nodes: Vec<String>, start: Timestamp },
    Completed { end: Timestamp },
    Rejected { reason: String },
}

impl JobState {
    pub fn label(&self) -> &'static str {
        match self {
            JobState::Received => "Received",
            JobState::Authenticated => "Authenticated",
            JobState::Routed => "Routed",
            JobState::Queued => "Queued",
            JobState::Running { .. } => "Running",
            JobState::Completed { .. } => "Completed",
            JobState::Rejected { .. } => "Rejected",
        }
    }

    fn rank(&self) -> u8 {
        match self {
            JobState::Received => 0,
            JobState::Authenticated => 1,
            JobState::Routed => 2,
            JobState::Queued => 3,
            JobState::Running { .. } => 4,
            JobState::Completed { .. } => 5,
            JobState::Rejected { .. } => 6,
        }
    }
}

/// True iff `from -> to` is one of the legal arrows.
pub fn legal_transition(from: &JobState, to: &JobState) -> bool {
    match to {
        JobState::Rejected { .. } => from.rank() < 4, // any pre-Running state
        _ => to.rank() == from.rank() + 1 && from.rank() < 5,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobRecord {
    pub job_id: String,
    pub requester: String,
    pub command: String,
    pub nodes_requested: usize,
    pub walltime_s: u64,
    state: JobState,
    history: Vec<JobState>,
}

impl JobRecord {
    pub fn new(
        job_id: &str,
        requester: &str,
        command: &str,
        nodes_requested: usize,
        walltime_s: u64,
    ) -> JobRecord {
        JobRecord {
            job_id: job_id.to_string(),
            requester: requester.to_string(),
            command: command.to_string(),
            nodes_requested,
            walltime_s,
            state: JobState::Received,
            history: vec![JobState::Received],
        }
    }

    pub fn state(&self) -> &JobState {
        &self.state
    }

    /// Full state history, earliest first. Every adjacent pair is a legal
    /// arrow by construction.
    pub fn history(&self) -> &[JobState] {
        &self.history
    }

    pub fn transition(&mut self, to: JobState) -> Result<(), QueueError> {
        if !legal_transition(&self.state, &to) {
            return Err(QueueError::IllegalTransition {
                from: self.state.label().to_string(),
                to: to.label().to_string(),
            });
        }
        self.state = to.clone();
        self.history.push(to);
        Ok(())
    }
}

/// One owner's FIFO queue over the block's nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Queue {
    pub name: String,
    pub authorized_user: String,
    pub allowed_nodes: BTreeSet<String>,
    pending: VecDeque<String>,
}

impl Queue {
    pub fn pending(&self) -> impl Iterator<Item = &str> {
        self.pending.iter().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }
}

/// All queues of one gateway plus the job table they reference.
#[derive(Debug, Clone, Default)]
pub struct QueueSet {
    queues: BTreeMap<String, Queue>,
    jobs: BTreeMap<String, JobRecord>,
}

impl QueueSet {
    pub fn new() -> QueueSet {
        QueueSet::default()
    }

    pub fn create_queue(
        &mut self,
        name: &str,
        allowed_nodes: &[String],
        authorized_user: &str,
    ) -> Result<(), QueueError> {
        if name != authorized_user {
            return Err(QueueError::NameMismatch {
                name: name.to_string(),
                user: authorized_user.to_string(),
            });
        }
        if allowed_nodes.is_empty() {
            return Err(QueueError::EmptyNodeSet);
        }
        if self.queues.contains_key(name) {
            return Err(QueueError::DuplicateQueue(name.to_string()));
        }
        self.queues.insert(
            name.to_string(),
            Queue {
                name: name.to_string(),
                authorized_user: authorized_user.to_string(),
                allowed_nodes: allowed_nodes.iter().cloned().collect(),
                pending: VecDeque::new(),
            },
        );
        Ok(())
    }

    pub fn remove_queue(&mut self, name: &str) -> Option<Queue> {
        self.queues.remove(name)
    }

    pub fn queue(&self, name: &str) -> Option<&Queue> {
        self.queues.get(name)
    }

    pub fn queue_names(&self) -> impl Iterator<Item = &str> {
        self.queues.keys().map(|s| s.as_str())
    }

    pub fn job(&self, job_id: &str) -> Option<&JobRecord> {
        self.jobs.get(job_id)
    }

    pub fn job_mut(&mut self, job_id: &str) -> Option<&mut JobRecord> {
        self.jobs.get_mut(job_id)
    }

    pub fn jobs(&self) -> impl Iterator<Item = &JobRecord> {
        self.jobs.values()
    }

    /// Record a job that was rejected before reaching any queue.
    pub fn record_rejected(&mut self, mut job: JobRecord, reason: &str) {
        let _ = job.transition(JobState::Rejected {
            reason: reason.to_string(),
        });
        self.jobs.insert(job.job_id.clone(), job);
    }

    /// Admit a routed job to the owner's queue. The proxy credential is
    /// re-verified here — the second authentication stage.
    pub fn enqueue(
        &mut self,
        queue_name: &str,
        mut job: JobRecord,
        proxy: &ProxyCredential,
        proxy_key: &[u8],
        now: Timestamp,
    ) -> Result<String, QueueError> {
        let reject = |this: &mut Self, mut job: JobRecord, err: QueueError| {
            let _ = job.transition(JobState::Rejected {
                reason: format!("{err}"),
            });
            this.jobs.insert(job.job_id.clone(), job);
            Err(err)
        };

        let q = match self.queues.get(queue_name) {
            Some(q) => q,
            None => return reject(self, job, QueueError::UnknownQueue(queue_name.to_string())),
        };
        if *job.state() != JobState::Routed {
            let err = QueueError::BadState(job.state().label().to_string());
            return reject(self, job, err);
        }
        if let Err(f) = verify_proxy(proxy, now, proxy_key) {
            return reject(self, job, QueueError::Proxy(f));
        }
        if proxy.subject_username != q.authorized_user || job.requester != q.authorized_user {
            let err = QueueError::NotAuthorized {
                queue: queue_name.to_string(),
                requester: job.requester.clone(),
            };
            return reject(self, job, err);
        }
        if job.nodes_requested > q.allowed_nodes.len() {
            let err = QueueError::OversizedJob {
                requested: job.nodes_requested,
                block: q.allowed_nodes.len(),
            };
            return reject(self, job, err);
        }

        job.transition(JobState::Queued)?;
        let id = job.job_id.clone();
        self.jobs.insert(id.clone(), job);
        self.queues
            .get_mut(queue_name)
            .expect("queue checked above")
            .pending
            .push_back(id.clone());
        Ok(id)
    }

    /// Head job of the queue iff its demand fits the free nodes. Strict
    /// FIFO: a blocked head blocks the whole queue. Pure read.
    pub fn next_runnable(&self, queue_name: &str, free_in_block: &BTreeSet<String>) -> Option<&JobRecord> {
        let q = self.queues.get(queue_name)?;
        debug_assert!(free_in_block.is_subset(&q.allowed_nodes));
        let head_id = q.pending.front()?;
        let head = self.jobs.get(head_id)?;
        if head.nodes_requested <= free_in_block.len() {
            Some(head)
        } else {
            None
        }
    }

    /// Pop the head (called by the simulator when it starts the job).
    pub fn pop_head(&mut self, queue_name: &str) -> Option<String> {
        self.queues.get_mut(queue_name)?.pending.pop_front()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certkit::{ca_issue, ca_keygen, issue_proxy};

    const KEY: &[u8] = b"test-proxy-key";

    fn proxy_for(user: &str) -> ProxyCredential {
        let ca = ca_keygen("grid1", 1).unwrap();
        let cert = ca_issue(&ca, user, 0, 1_000_000).unwrap();
        issue_proxy(&cert, 100, 10_000, KEY).unwrap()
    }

    fn routed_job(id: &str, user: &str, nodes: usize) -> JobRecord {
        let mut j = JobRecord::new(id, user, "/bin/true", nodes, 10);
        j.transition(JobState::Authenticated).unwrap();
        j.transition(JobState::Routed).unwrap();
        j
    }

    fn nodes(ids: &[&str]) -> Vec<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn create_queue_enforces_naming_rule() {
        let mut qs = QueueSet::new();
        qs.create_queue("alice", &nodes(&["n0", "n1", "n2", "n3"]), "alice").unwrap();
        assert!(qs.queue("alice").unwrap().is_empty());
        assert!(matches!(
            qs.create_queue("q1", &nodes(&["n0"]), "alice"),
            Err(QueueError::NameMismatch { .. })
        ));
        assert_eq!(
            qs.create_queue("alice", &[], "alice"),
            Err(QueueError::EmptyNodeSet)
        );
        assert!(matches!(
            qs.create_queue("alice", &nodes(&["n4"]), "alice"),
            Err(QueueError::DuplicateQueue(_))
        ));
    }

    #[test]
    fn enqueue_admits_owner_job() {
        let mut qs = QueueSet::new();
        qs.create_queue("alice", &nodes(&["n0", "n1", "n2", "n3"]), "alice").unwrap();
        let id = qs
            .enqueue("alice", routed_job("alice-1-1", "alice", 2), &proxy_for("alice"), KEY, 200)
            .unwrap();
        assert_eq!(qs.job(&id).unwrap().state().label(), "Queued");
        assert_eq!(qs.queue("alice").unwrap().len(), 1);
    }

    #[test]
    fn enqueue_rejects_non_owner() {
        let mut qs = QueueSet::new();
        qs.create_queue("alice", &nodes(&["n0", "n1"]), "alice").unwrap();
        let err = qs
            .enqueue("alice", routed_job("bob-1-1", "bob", 1), &proxy_for("bob"), KEY, 200)
            .unwrap_err();
        assert!(matches!(err, QueueError::NotAuthorized { .. }));
        assert_eq!(qs.job("bob-1-1").unwrap().state().label(), "Rejected");
        assert!(qs.queue("alice").unwrap().is_empty());
    }

    #[test]
    fn enqueue_rejects_oversized_job() {
        let mut qs = QueueSet::new();
        qs.create_queue("alice", &nodes(&["n0", "n1", "n2", "n3"]), "alice").unwrap();
        let err = qs
            .enqueue("alice", routed_job("alice-1-1", "alice", 5), &proxy_for("alice"), KEY, 200)
            .unwrap_err();
        assert!(matches!(err, QueueError::OversizedJob { requested: 5, block: 4 }));
    }

    #[test]
    fn enqueue_rejects_forged_and_expired_proxy() {
        let mut qs = QueueSet::new();
        qs.create_queue("alice", &nodes(&["n0", "n1"]), "alice").unwrap();
        let mut forged = proxy_for("alice");
        forged.token[3] ^= 0x40;
        assert!(matches!(
            qs.enqueue("alice", routed_job("alice-1-1", "alice", 1), &forged, KEY, 200),
            Err(QueueError::Proxy(AuthFailure::ProxyForged))
        ));
        let stale = proxy_for("alice");
        assert!(matches!(
            qs.enqueue("alice", routed_job("alice-1-2", "alice", 1), &stale, KEY, stale.expires_at),
            Err(QueueError::Proxy(AuthFailure::ProxyExpired))
        ));
    }

    #[test]
    fn enqueue_requires_routed_state() {
        let mut qs = QueueSet::new();
        qs.create_queue("alice", &nodes(&["n0"]), "alice").unwrap();
        let fresh = JobRecord::new("alice-1-1", "alice", "x", 1, 1);
        assert!(matches!(
            qs.enqueue("alice", fresh, &proxy_for("alice"), KEY, 200),
            Err(QueueError::BadState(_))
        ));
    }

    #[test]
    fn next_runnable_is_strict_fifo() {
        let mut qs = QueueSet::new();
        qs.create_queue("alice", &nodes(&["n0", "n1", "n2", "n3"]), "alice").unwrap();
        let p = proxy_for("alice");
        qs.enqueue("alice", routed_job("alice-1-1", "alice", 4), &p, KEY, 200).unwrap();
        qs.enqueue("alice", routed_job("alice-1-2", "alice", 1), &p, KEY, 200).unwrap();
        let two_free: BTreeSet<String> = ["n0", "n1"].iter().map(|s| s.to_string()).collect();
        // head wants 4, only 2 free: nothing runs, no backfill past the head
        assert!(qs.next_runnable("alice", &two_free).is_none());
        let all_free: BTreeSet<String> =
            ["n0", "n1", "n2", "n3"].iter().map(|s| s.to_string()).collect();
        assert_eq!(qs.next_runnable("alice", &all_free).unwrap().job_id, "alice-1-1");
        // empty queue
        qs.pop_head("alice");
        qs.pop_head("alice");
        assert!(qs.next_runnable("alice", &all_free).is_none());
    }

    #[test]
    fn state_machine_rejects_illegal_arrows() {
        let mut j = JobRecord::new("j", "alice", "x", 1, 1);
        assert!(j.transition(JobState::Queued).is_err());
        j.transition(JobState::Authenticated).unwrap();
        assert!(j.transition(JobState::Received).is_err());
        j.transition(JobState::Routed).unwrap();
        j.transition(JobState::Queued).unwrap();
        j.transition(JobState::Running { nodes: vec!["n0".into()], start: 5 }).unwrap();
        // Rejected is not reachable once running
        assert!(j
            .transition(JobState::Rejected { reason: "late".into() })
            .is_err());
        j.transition(JobState::Completed { end: 15 }).unwrap();
        assert!(j.transition(JobState::Queued).is_err());
        for w in j.history().windows(2) {
            assert!(legal_transition(&w[0], &w[1]));
        }
    }
}
