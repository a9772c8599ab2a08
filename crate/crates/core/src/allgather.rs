//! Bandwidth-optimal Allgather built from concurrent Broadcast chains.
//!
//! Ranks are split into `M` chains of `R = P / M` consecutive ranks. The head
//! of every chain starts multicasting after the RNR barrier; each root hands
//! over to its successor with an activation message once its last datagram
//! has left the NIC. Every rank receives the other ranks' blocks at the
//! offset of their rank in an `N·P` buffer.

use bytes::Bytes;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broadcast::default_alpha;
use crate::collective::{self, CollectiveError, CollectiveOutcome, Plan, SourcePlan};
use crate::fabric::FabricConfig;
use crate::topology::Topology;
use crate::transport::TransportKind;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("participant count must be at least 1")]
    NoParticipants,
    #[error("concurrent root count must be at least 1")]
    NoRoots,
    #[error("{p} participants cannot be split into {m} equal chains ({p} mod {m} = {})", p % m)]
    Indivisible { p: usize, m: usize },
    #[error("subgroup count must be at least 1")]
    NoSubgroups,
    #[error("chunk size must be positive")]
    ZeroChunk,
    #[error("buffer size must be positive")]
    EmptyBuffer,
    #[error("{subgroups} subgroups for only {chunks} chunks")]
    TooManySubgroups { subgroups: u32, chunks: u64 },
    #[error("rack-aligned chains need the {m} chains to match {leaves} occupied leaves of {per_leaf} ranks")]
    RackMismatch { m: usize, leaves: usize, per_leaf: usize },
}

/// `M` chains of `R` ranks; step `i` activates the `i`-th rank of every chain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChainSchedule {
    pub participants: usize,
    pub concurrent_roots: usize,
    pub steps: usize,
    pub chains: Vec<Vec<usize>>,
}

impl ChainSchedule {
    /// Ranks active at step `i`.
    pub fn group(&self, i: usize) -> Vec<usize> {
        self.chains.iter().map(|c| c[i]).collect()
    }

    pub fn chain_of(&self, rank: usize) -> Option<usize> {
        self.chains.iter().position(|c| c.contains(&rank))
    }

    pub fn successor(&self, rank: usize) -> Option<usize> {
        let c = &self.chains[self.chain_of(rank)?];
        let pos = c.iter().position(|&r| r == rank)?;
        c.get(pos + 1).copied()
    }
}

pub fn build_schedule(p: usize, m: usize) -> Result<ChainSchedule, PlanError> {
    if p == 0 {
        return Err(PlanError::NoParticipants);
    }
    if m == 0 {
        return Err(PlanError::NoRoots);
    }
    if !p.is_multiple_of(m) {
        return Err(PlanError::Indivisible { p, m });
    }
    let r = p / m;
    Ok(ChainSchedule {
        participants: p,
        concurrent_roots: m,
        steps: r,
        chains: (0..m).map(|j| (j * r..(j + 1) * r).collect()).collect(),
    })
}

/// Chains made of the ranks under one leaf switch each.
pub fn rack_aligned_schedule(topology: &Topology, p: usize, m: usize) -> Result<ChainSchedule, PlanError> {
    let mut s = build_schedule(p, m)?;
    let per_leaf = topology.nodes_per_leaf();
    let leaves = p.div_ceil(per_leaf);
    if !p.is_multiple_of(per_leaf) || leaves != m {
        return Err(PlanError::RackMismatch { m, leaves, per_leaf });
    }
    s.chains = (0..leaves)
        .map(|l| (0..p).filter(|&r| topology.leaf_of(r) == l).collect())
        .collect();
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgroupBlock {
    pub subgroup: u32,
    pub first_chunk: u64,
    pub chunks: u64,
    pub base: usize,
    pub len: usize,
}

/// Contiguous, chunk-aligned blocks of a send buffer, one per subgroup.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgroupMap {
    pub buffer_size: usize,
    pub chunk_size: usize,
    pub blocks: Vec<SubgroupBlock>,
}

impl SubgroupMap {
    pub fn chunk_count(&self) -> u64 {
        (self.buffer_size as u64).div_ceil(self.chunk_size as u64)
    }

    pub fn subgroups(&self) -> u32 {
        self.blocks.len() as u32
    }

    /// Byte range of chunk `psn` within the buffer.
    pub fn chunk_range(&self, psn: u64) -> std::ops::Range<usize> {
        let start = psn as usize * self.chunk_size;
        start..(start + self.chunk_size).min(self.buffer_size)
    }
}

/// Splits `n` bytes into `s` blocks whose chunk counts differ by at most one,
/// the larger blocks first.
pub fn map_blocks(n: usize, s: u32, chunk_size: usize) -> Result<SubgroupMap, PlanError> {
    if s == 0 {
        return Err(PlanError::NoSubgroups);
    }
    if chunk_size == 0 {
        return Err(PlanError::ZeroChunk);
    }
    if n == 0 {
        return Err(PlanError::EmptyBuffer);
    }
    let chunks = (n as u64).div_ceil(chunk_size as u64);
    if s as u64 > chunks {
        return Err(PlanError::TooManySubgroups { subgroups: s, chunks });
    }
    let (q, rem) = (chunks / s as u64, chunks % s as u64);
    let mut first = 0u64;
    let blocks = (0..s)
        .map(|i| {
            let count = q + u64::from((i as u64) < rem);
            let base = first as usize * chunk_size;
            let end = ((first + count) as usize * chunk_size).min(n);
            let b = SubgroupBlock {
                subgroup: i,
                first_chunk: first,
                chunks: count,
                base,
                len: end - base,
            };
            first += count;
            b
        })
        .collect();
    Ok(SubgroupMap {
        buffer_size: n,
        chunk_size,
        blocks,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainMapping {
    /// Chain `j` holds ranks `jR .. jR+R-1`.
    #[default]
    Consecutive,
    /// One chain per leaf switch.
    RackAligned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllgatherConfig {
    pub participants: usize,
    pub buffer_size: usize,
    pub mtu: usize,
    pub subgroups: u32,
    /// Number of chains, i.e. roots multicasting at once.
    pub concurrent_roots: usize,
    pub alpha: Option<f64>,
    pub transport: TransportKind,
    pub uc_chunk_size: usize,
    pub collective_id: u32,
    pub rnr_barrier: bool,
    pub leaf_post_delay: f64,
    pub chain_mapping: ChainMapping,
}

impl Default for AllgatherConfig {
    fn default() -> Self {
        AllgatherConfig {
            participants: 16,
            buffer_size: 64 * 1024,
            mtu: 4096,
            subgroups: 1,
            concurrent_roots: 1,
            alpha: None,
            transport: TransportKind::Ud,
            uc_chunk_size: 64 * 1024,
            collective_id: 0,
            rnr_barrier: true,
            leaf_post_delay: 50e-6,
            chain_mapping: ChainMapping::Consecutive,
        }
    }
}

impl AllgatherConfig {
    pub fn chunk_size(&self) -> usize {
        match self.transport {
            TransportKind::Ud => self.mtu,
            TransportKind::Uc => self.uc_chunk_size,
        }
    }

    pub fn schedule(&self, topology: &Topology) -> Result<ChainSchedule, PlanError> {
        match self.chain_mapping {
            ChainMapping::Consecutive => build_schedule(self.participants, self.concurrent_roots),
            ChainMapping::RackAligned => {
                rack_aligned_schedule(topology, self.participants, self.concurrent_roots)
            }
        }
    }
}

/// Runs one Allgather; `inputs[r]` is rank `r`'s `buffer_size`-byte block.
pub fn allgather(
    config: &AllgatherConfig,
    mut fabric: FabricConfig,
    topology: Topology,
    inputs: Vec<Bytes>,
) -> Result<CollectiveOutcome, CollectiveError> {
    let p = config.participants;
    if p == 0 || p > topology.node_count() {
        return Err(CollectiveError::Config(format!(
            "{p} participants on a {}-node topology",
            topology.node_count()
        )));
    }
    if inputs.len() != p || inputs.iter().any(|b| b.len() != config.buffer_size) {
        return Err(CollectiveError::Config(format!(
            "expected {p} send buffers of {} bytes",
            config.buffer_size
        )));
    }
    fabric.mtu = config.mtu;
    let schedule = config.schedule(&topology)?;
    let map = map_blocks(config.buffer_size, config.subgroups, config.chunk_size())?;
    let alpha = config
        .alpha
        .unwrap_or_else(|| default_alpha(p, topology.params().hop_latency));
    let plan = Plan {
        participants: p,
        sources: inputs
            .into_iter()
            .enumerate()
            .map(|(rank, data)| SourcePlan {
                rank,
                slot: rank,
                data,
            })
            .collect(),
        chains: schedule.chains,
        recv_len: config.buffer_size * p,
        map,
        transport: config.transport,
        collective_id: config.collective_id,
        rnr_barrier: config.rnr_barrier,
        leaf_post_delay: config.leaf_post_delay,
        alpha,
    };
    collective::run(plan, fabric, topology)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VerifyError {
    #[error("rank {rank} holds {got} bytes, expected {expected}")]
    Length { rank: usize, got: usize, expected: usize },
    #[error("rank {rank}: block of source {source_rank} differs at byte {offset}")]
    Mismatch { rank: usize, source_rank: usize, offset: usize },
}

/// Checks that every buffer is the rank-ordered concatenation of `inputs`.
pub fn verify_allgather<B: AsRef<[u8]>>(buffers: &[B], inputs: &[Bytes]) -> Result<(), VerifyError> {
    let expected: usize = inputs.iter().map(Bytes::len).sum();
    for (rank, buf) in buffers.iter().enumerate() {
        let buf = buf.as_ref();
        if buf.len() != expected {
            return Err(VerifyError::Length {
                rank,
                got: buf.len(),
                expected,
            });
        }
        let mut base = 0;
        for (source, input) in inputs.iter().enumerate() {
            let got = &buf[base..base + input.len()];
            if let Some(offset) = got.iter().zip(input.iter()).position(|(a, b)| a != b) {
                return Err(VerifyError::Mismatch {
                    rank,
                    source_rank: source,
                    offset,
                });
            }
            base += input.len();
        }
    }
    Ok(())
}
