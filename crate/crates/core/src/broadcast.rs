//! Reliable multicast Broadcast.
//!
//! The root chunks its buffer into MTU datagrams (or UC chunks) spread over
//! `S` subgroup trees. Leaves land datagrams in a staging ring, copy them to
//! the user buffer at the offset given by the PSN and track arrivals in a
//! bitmap. Missing chunks are read from the left ring neighbour once the
//! cutoff timer fires; a final handshake around the ring releases the
//! buffers.

use bytes::Bytes;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::allgather::map_blocks;
use crate::collective::{self, CollectiveError, CollectiveOutcome, Plan, SourcePlan};
use crate::fabric::FabricConfig;
use crate::topology::Topology;
use crate::transport::TransportKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BroadcastConfig {
    pub root: usize,
    /// Ranks `0..participants`, rank `r` on node `r`.
    pub participants: usize,
    pub buffer_size: usize,
    pub mtu: usize,
    pub subgroups: u32,
    /// Cutoff slack in seconds; `None` uses ten hop latencies per participant.
    pub alpha: Option<f64>,
    pub transport: TransportKind,
    pub uc_chunk_size: usize,
    pub collective_id: u32,
    pub rnr_barrier: bool,
    /// Without the barrier: when leaves post their receive credits.
    pub leaf_post_delay: f64,
}

impl Default for BroadcastConfig {
    fn default() -> Self {
        BroadcastConfig {
            root: 0,
            participants: 16,
            buffer_size: 64 * 1024,
            mtu: 4096,
            subgroups: 1,
            alpha: None,
            transport: TransportKind::Ud,
            uc_chunk_size: 64 * 1024,
            collective_id: 0,
            rnr_barrier: true,
            leaf_post_delay: 50e-6,
        }
    }
}

impl BroadcastConfig {
    pub fn chunk_size(&self) -> usize {
        match self.transport {
            TransportKind::Ud => self.mtu,
            TransportKind::Uc => self.uc_chunk_size,
        }
    }

    pub fn chunk_count(&self) -> u64 {
        (self.buffer_size as u64).div_ceil(self.chunk_size() as u64)
    }
}

/// Receive-side deadline, measured from entering the receiving phase.
pub fn cutoff_deadline(buffer_bytes: u64, link_bandwidth: f64, alpha: f64) -> Result<f64, CollectiveError> {
    if !(link_bandwidth > 0.0 && link_bandwidth.is_finite()) {
        return Err(CollectiveError::Config(format!(
            "link bandwidth must be positive, got {link_bandwidth}"
        )));
    }
    if !(alpha >= 0.0) {
        return Err(CollectiveError::Config(format!("alpha must be >= 0, got {alpha}")));
    }
    Ok(buffer_bytes as f64 / link_bandwidth + alpha)
}

pub fn default_alpha(participants: usize, hop_latency: f64) -> f64 {
    10.0 * participants as f64 * hop_latency
}

/// One bit per chunk with a cached population count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkBitmap {
    words: Vec<u64>,
    len: u64,
    count: u64,
}

impl ChunkBitmap {
    pub fn new(len: u64) -> Self {
        ChunkBitmap {
            words: vec![0; len.div_ceil(64) as usize],
            len,
            count: 0,
        }
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Sets bit `i`; returns whether it was newly set.
    ///
    /// # Panics
    /// If `i >= len`.
    pub fn set(&mut self, i: u64) -> bool {
        assert!(i < self.len, "bit {i} out of range {}", self.len);
        let (w, b) = ((i / 64) as usize, i % 64);
        let fresh = self.words[w] & (1 << b) == 0;
        if fresh {
            self.words[w] |= 1 << b;
            self.count += 1;
        }
        fresh
    }

    pub fn get(&self, i: u64) -> bool {
        i < self.len && self.words[(i / 64) as usize] & (1 << (i % 64)) != 0
    }

    pub fn set_all(&mut self) {
        for i in 0..self.len {
            self.set(i);
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn is_complete(&self) -> bool {
        self.count == self.len
    }

    pub fn missing(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.len).filter(|&i| !self.get(i))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("staging area full ({capacity} slots)")]
pub struct StagingFull {
    pub capacity: usize,
}

/// Ring of MTU slots where UD datagrams land before copy-out.
#[derive(Debug, Clone)]
pub struct StagingArea {
    slots: Vec<Option<Bytes>>,
    head: usize,
    len: usize,
}

impl StagingArea {
    pub fn new(capacity: usize) -> Self {
        StagingArea {
            slots: vec![None; capacity],
            head: 0,
            len: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Lands a datagram in the next free slot, returning the slot index.
    pub fn push(&mut self, payload: Bytes) -> Result<usize, StagingFull> {
        if self.len == self.slots.len() {
            return Err(StagingFull {
                capacity: self.slots.len(),
            });
        }
        let tail = (self.head + self.len) % self.slots.len();
        debug_assert!(self.slots[tail].is_none());
        self.slots[tail] = Some(payload);
        self.len += 1;
        Ok(tail)
    }

    /// Releases the oldest slot after its chunk has been copied out.
    pub fn pop(&mut self) -> Option<Bytes> {
        if self.len == 0 {
            return None;
        }
        let out = self.slots[self.head].take();
        self.head = (self.head + 1) % self.slots.len();
        self.len -= 1;
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Idle,
    RnrSync,
    Receiving,
    Recovery,
    Handshake,
    Done,
}

impl Phase {
    pub fn can_enter(self, next: Phase) -> bool {
        use Phase::*;
        matches!(
            (self, next),
            (Idle, RnrSync)
                | (RnrSync, Receiving)
                | (Receiving, Recovery)
                | (Receiving, Handshake)
                | (Recovery, Handshake)
                | (Handshake, Done)
        )
    }

    /// Phases in which arriving datagrams are still consumed.
    pub fn accepts_datagrams(self) -> bool {
        matches!(
            self,
            Phase::RnrSync | Phase::Receiving | Phase::Recovery | Phase::Handshake
        )
    }
}

/// Rounds of the dissemination barrier over `p` ranks.
pub fn barrier_rounds(p: usize) -> u32 {
    if p <= 1 {
        0
    } else {
        usize::BITS - (p - 1).leading_zeros()
    }
}

/// `(send_to, receive_from)` for `rank` in barrier round `round`.
pub fn barrier_peers(rank: usize, round: u32, p: usize) -> (usize, usize) {
    let d = (1usize << round) % p;
    ((rank + d) % p, (rank + p - d) % p)
}

/// Deterministic per-rank buffer contents.
pub fn seeded_buffer(seed: u64, rank: usize, len: usize) -> Bytes {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rank as u64 + 1);
    let mut buf = vec![0u8; len];
    rng.fill_bytes(&mut buf);
    Bytes::from(buf)
}

/// Runs one Broadcast of `data` (which must be `buffer_size` bytes long).
pub fn broadcast(
    config: &BroadcastConfig,
    mut fabric: FabricConfig,
    topology: Topology,
    data: Bytes,
) -> Result<CollectiveOutcome, CollectiveError> {
    let p = config.participants;
    if p == 0 || p > topology.node_count() {
        return Err(CollectiveError::Config(format!(
            "{p} participants on a {}-node topology",
            topology.node_count()
        )));
    }
    if config.root >= p {
        return Err(CollectiveError::Config(format!(
            "root {} is not one of {p} participants",
            config.root
        )));
    }
    if data.len() != config.buffer_size {
        return Err(CollectiveError::Config(format!(
            "send buffer is {} bytes, config says {}",
            data.len(),
            config.buffer_size
        )));
    }
    fabric.mtu = config.mtu;
    let map = map_blocks(config.buffer_size, config.subgroups, config.chunk_size())?;
    let alpha = config
        .alpha
        .unwrap_or_else(|| default_alpha(p, topology.params().hop_latency));
    let plan = Plan {
        participants: p,
        sources: vec![SourcePlan {
            rank: config.root,
            slot: 0,
            data,
        }],
        chains: vec![vec![config.root]],
        recv_len: config.buffer_size,
        map,
        transport: config.transport,
        collective_id: config.collective_id,
        rnr_barrier: config.rnr_barrier,
        leaf_post_delay: config.leaf_post_delay,
        alpha,
    };
    collective::run(plan, fabric, topology)
}
