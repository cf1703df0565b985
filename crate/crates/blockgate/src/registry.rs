//! Node inventory, block allocations, and the username-to-queue mapping.
//!
//! The registry does not schedule across users. An allocation leases a
//! disjoint set of nodes to one username, names the queue after that
//! username, and records which middleware the block was activated with.

use crate::certkit::{valid_username, Timestamp};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistryError {
    #[error("user {0:?} already holds an allocation")]
    DuplicateAllocation(String),
    #[error("requested {requested} nodes but only {free} are free")]
    InsufficientNodes { requested: usize, free: usize },
    #[error("middleware {0:?} is not in the catalog")]
    UnknownMiddleware(String),
    #[error("lease window is empty or inverted")]
    InvalidLease,
    #[error("invalid username {0:?}")]
    InvalidUsername(String),
    #[error("no allocation for user {0:?}")]
    NoAllocation(String),
    #[error("allocation for user {0:?} is outside its lease")]
    LeaseExpired(String),
}

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
    #[error("snapshot io failure")]
    IoFailure(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeState {
    Free,
    Allocated(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub node_id: String,
    pub state: NodeState,
}

/// Lease binding one username to a node set, a middleware choice, and the
/// queue named after the user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockAllocation {
    pub owner_username: String,
    pub block_id: String,
    pub node_ids: Vec<String>,
    pub middleware: String,
    pub queue_name: String,
    pub lease_start: Timestamp,
    pub lease_end: Timestamp,
}

impl BlockAllocation {
    pub fn lease_contains(&self, now: Timestamp) -> bool {
        self.lease_start <= now && now < self.lease_end
    }
}

/// Middleware name → installation directory.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MiddlewareCatalog {
    entries: BTreeMap<String, String>,
}

impl MiddlewareCatalog {
    pub fn new() -> MiddlewareCatalog {
        MiddlewareCatalog::default()
    }

    pub fn insert(&mut self, name: &str, path: &str) -> bool {
        if name.is_empty() || path.is_empty() {
            return false;
        }
        if self.entries.values().any(|p| p == path) {
            return false;
        }
        self.entries.insert(name.to_string(), path.to_string()).is_none()
    }

    pub fn path_of(&self, name: &str) -> Option<&str> {
        self.entries.get(name).map(|s| s.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

/// Cluster state: every node, every active allocation, and a generation
/// counter bumped on each mutation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Registry {
    nodes: BTreeMap<String, NodeState>,
    allocations: BTreeMap<String, BlockAllocation>,
    generation: u64,
    next_block: u64,
}

/// First-fit: the first `k` ids in ascending lexicographic order.
pub fn first_fit(free_node_ids: &[String], k: usize) -> Result<Vec<String>, RegistryError> {
    if k > free_node_ids.len() {
        return Err(RegistryError::InsufficientNodes {
            requested: k,
            free: free_node_ids.len(),
        });
    }
    let mut sorted: Vec<String> = free_node_ids.to_vec();
    sorted.sort();
    sorted.truncate(k);
    Ok(sorted)
}

impl Registry {
    /// Build a registry with `total` free nodes named `<prefix>00..`.
    pub fn with_nodes(prefix: &str, total: usize) -> Registry {
        let width = total.to_string().len().max(2);
        let nodes = (0..total)
            .map(|i| (format!("{prefix}{i:0width$}"), NodeState::Free))
            .collect();
        Registry {
            nodes,
            allocations: BTreeMap::new(),
            generation: 0,
            next_block: 0,
        }
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn total_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn free_node_ids(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|(_, s)| **s == NodeState::Free)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn node_state(&self, node_id: &str) -> Option<&NodeState> {
        self.nodes.get(node_id)
    }

    pub fn allocations(&self) -> impl Iterator<Item = &BlockAllocation> {
        self.allocations.values()
    }

    pub fn allocation_of(&self, username: &str) -> Option<&BlockAllocation> {
        self.allocations.get(username)
    }

    /// Lease a block to `username`, flipping the chosen nodes to Allocated
    /// and naming the queue after the user.
    pub fn approve_user(
        &mut self,
        username: &str,
        node_count: usize,
        middleware: &str,
        catalog: &MiddlewareCatalog,
        lease_start: Timestamp,
        lease_end: Timestamp,
    ) -> Result<BlockAllocation, RegistryError> {
        if !valid_username(username) {
            return Err(RegistryError::InvalidUsername(username.to_string()));
        }
        if self.allocations.contains_key(username) {
            return Err(RegistryError::DuplicateAllocation(username.to_string()));
        }
        if !catalog.contains(middleware) {
            return Err(RegistryError::UnknownMiddleware(middleware.to_string()));
        }
        if lease_start >= lease_end {
            return Err(RegistryError::InvalidLease);
        }
        if node_count == 0 {
            return Err(RegistryError::InsufficientNodes { requested: 0, free: 0 });
        }
        let free = self.free_node_ids();
        let chosen = first_fit(&free, node_count)?;
        for id in &chosen {
            self.nodes
                .insert(id.clone(), NodeState::Allocated(username.to_string()));
        }
        let block_id = format!("blk{:03}", self.next_block);
        self.next_block += 1;
        self.generation += 1;
        let alloc = BlockAllocation {
            owner_username: username.to_string(),
            block_id,
            node_ids: chosen,
            middleware: middleware.to_string(),
            queue_name: username.to_string(),
            lease_start,
            lease_end,
        };
        self.allocations.insert(username.to_string(), alloc.clone());
        Ok(alloc)
    }

    /// Queue lookup used by the router. Pure; half-open lease check.
    pub fn lookup_queue(
        &self,
        username: &str,
        now: Timestamp,
    ) -> Result<(&str, &str, &str), RegistryError> {
        let alloc = self
            .allocations
            .get(username)
            .ok_or_else(|| RegistryError::NoAllocation(username.to_string()))?;
        if !alloc.lease_contains(now) {
            return Err(RegistryError::LeaseExpired(username.to_string()));
        }
        Ok((&alloc.queue_name, &alloc.block_id, &alloc.middleware))
    }

    /// Return the block's nodes to the free pool.
    pub fn release(&mut self, username: &str) -> Result<BlockAllocation, RegistryError> {
        let alloc = self
            .allocations
            .remove(username)
            .ok_or_else(|| RegistryError::NoAllocation(username.to_string()))?;
        for id in &alloc.node_ids {
            self.nodes.insert(id.clone(), NodeState::Free);
        }
        self.generation += 1;
        Ok(alloc)
    }

    pub fn save_snapshot(&self, path: &Path) -> Result<(), SnapshotError> {
        let body = self.snapshot_body();
        let checksum = crc32fast::hash(body.as_bytes());
        let header = format!("BLOCKGATE-REGISTRY v1 {} {:08x}\n", self.generation, checksum);
        // Write to a sibling temp file, then rename over the target.
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(header.as_bytes())?;
        tmp.write_all(body.as_bytes())?;
        tmp.flush()?;
        tmp.persist(path).map_err(|e| SnapshotError::IoFailure(e.error))?;
        Ok(())
    }

    fn snapshot_body(&self) -> String {
        let mut body = String::new();
        for (id, state) in &self.nodes {
            match state {
                NodeState::Free => body.push_str(&format!("NODE {id} FREE\n")),
                NodeState::Allocated(user) => body.push_str(&format!("NODE {id} ALLOC {user}\n")),
            }
        }
        for alloc in self.allocations.values() {
            body.push_str(&format!(
                "ALLOC {} {} {} {} {} {}\n",
                alloc.owner_username,
                alloc.block_id,
                alloc.middleware,
                alloc.lease_start,
                alloc.lease_end,
                alloc.node_ids.join(",")
            ));
        }
        body
    }

    pub fn load_snapshot(path: &Path) -> Result<Registry, SnapshotError> {
        let raw = std::fs::read_to_string(path)?;
        let (header, body) = raw
            .split_once('\n')
            .ok_or_else(|| SnapshotError::CorruptSnapshot("missing header".into()))?;
        let parts: Vec<&str> = header.split(' ').collect();
        if parts.len() != 4 || parts[0] != "BLOCKGATE-REGISTRY" {
            return Err(SnapshotError::CorruptSnapshot("bad magic".into()));
        }
        if parts[1] != "v1" {
            return Err(SnapshotError::CorruptSnapshot(format!(
                "unsupported version {}",
                parts[1]
            )));
        }
        let generation: u64 = parts[2]
            .parse()
            .map_err(|_| SnapshotError::CorruptSnapshot("bad generation".into()))?;
        let stated: u32 = u32::from_str_radix(parts[3], 16)
            .map_err(|_| SnapshotError::CorruptSnapshot("bad checksum field".into()))?;
        if crc32fast::hash(body.as_bytes()) != stated {
            return Err(SnapshotError::CorruptSnapshot("checksum mismatch".into()));
        }

        let mut nodes = BTreeMap::new();
        let mut allocations = BTreeMap::new();
        let mut max_block = 0u64;
        for line in body.lines() {
            let fields: Vec<&str> = line.split(' ').collect();
            match fields.as_slice() {
                ["NODE", id, "FREE"] => {
                    nodes.insert(id.to_string(), NodeState::Free);
                }
                ["NODE", id, "ALLOC", user] => {
                    nodes.insert(id.to_string(), NodeState::Allocated(user.to_string()));
                }
                ["ALLOC", user, block_id, middleware, start, end, node_list] => {
                    let lease_start = start
                        .parse()
                        .map_err(|_| SnapshotError::CorruptSnapshot("bad lease_start".into()))?;
                    let lease_end = end
                        .parse()
                        .map_err(|_| SnapshotError::CorruptSnapshot("bad lease_end".into()))?;
                    let node_ids: Vec<String> =
                        node_list.split(',').map(|s| s.to_string()).collect();
                    if let Some(num) = block_id.strip_prefix("blk") {
                        if let Ok(n) = num.parse::<u64>() {
                            max_block = max_block.max(n + 1);
                        }
                    }
                    allocations.insert(
                        user.to_string(),
                        BlockAllocation {
                            owner_username: user.to_string(),
                            block_id: block_id.to_string(),
                            node_ids,
                            middleware: middleware.to_string(),
                            queue_name: user.to_string(),
                            lease_start,
                            lease_end,
                        },
                    );
                }
                _ => {
                    return Err(SnapshotError::CorruptSnapshot(format!(
                        "unrecognized record {line:?}"
                    )))
                }
            }
        }
        let reg = Registry {
            nodes,
            allocations,
            generation,
            next_block: max_block,
        };
        reg.check_consistency()
            .map_err(SnapshotError::CorruptSnapshot)?;
        Ok(reg)
    }

    /// Conservation and disjointness checks used after load and in tests.
    pub fn check_consistency(&self) -> Result<(), String> {
        let mut seen = std::collections::BTreeSet::new();
        let mut allocated_total = 0usize;
        for alloc in self.allocations.values() {
            if alloc.queue_name != alloc.owner_username {
                return Err(format!("queue {} != owner {}", alloc.queue_name, alloc.owner_username));
            }
            if alloc.node_ids.is_empty() {
                return Err(format!("empty block for {}", alloc.owner_username));
            }
            for id in &alloc.node_ids {
                if !seen.insert(id.clone()) {
                    return Err(format!("node {id} in two blocks"));
                }
                match self.nodes.get(id) {
                    Some(NodeState::Allocated(u)) if *u == alloc.owner_username => {}
                    other => return Err(format!("node {id} state {other:?} disagrees with alloc")),
                }
            }
            allocated_total += alloc.node_ids.len();
        }
        let free = self
            .nodes
            .values()
            .filter(|s| **s == NodeState::Free)
            .count();
        if free + allocated_total != self.nodes.len() {
            return Err(format!(
                "conservation violated: {free} free + {allocated_total} allocated != {}",
                self.nodes.len()
            ));
        }
        Ok(())
    }
}
