//! The event-driven engine shared by Broadcast and Allgather.
//!
//! A run is a set of sources (one for Broadcast, every rank for Allgather)
//! organised into chains. Each rank owns a receive buffer with one slot per
//! source, a bitmap per (source, subgroup) block and a staging ring per
//! subgroup queue.

use std::collections::BTreeSet;
use std::fmt;

use bytes::Bytes;
use serde::Serialize;
use thiserror::Error;

use crate::allgather::{PlanError, SubgroupMap};
use crate::broadcast::{barrier_peers, barrier_rounds, cutoff_deadline, ChunkBitmap, Phase, StagingArea};
use crate::fabric::{Event, FabricConfig, FabricError, Network, Protocol};
use crate::topology::{MulticastTree, NodeId, Topology, TopologyError, TrafficClass, TrafficLedger};
use crate::transport::{RcEndpoint, RingLinks, TransportError, TransportKind, UcEndpoint, UdEndpoint};

#[derive(Debug, Error, PartialEq)]
pub enum CollectiveError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("buffer of {chunks} chunks exceeds the {max} addressable by the PSN field")]
    BufferTooLarge { chunks: u64, max: u64 },
    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

pub(crate) struct SourcePlan {
    pub rank: usize,
    /// Index of this source's slot in every receive buffer.
    pub slot: usize,
    pub data: Bytes,
}

pub(crate) struct Plan {
    pub participants: usize,
    pub sources: Vec<SourcePlan>,
    /// Ranks in activation order; heads start after the barrier.
    pub chains: Vec<Vec<usize>>,
    pub recv_len: usize,
    pub map: SubgroupMap,
    pub transport: TransportKind,
    pub collective_id: u32,
    pub rnr_barrier: bool,
    pub leaf_post_delay: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Msg {
    Barrier(u32),
    StartReceiving,
    Cutoff,
    SendDone,
    Activate,
    Fetch(usize),
    Ack { block: usize, depth: u32 },
    Read { block: usize, psn: u64 },
    Final,
}

/// Interval during which a rank was injecting its fast-path data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RootWindow {
    pub rank: usize,
    pub chain: usize,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankResult {
    pub rank: usize,
    pub buffer: Vec<u8>,
    pub done_at: f64,
    /// Deepest fetch-ring recursion this rank needed for any block.
    pub recovery_depth: u32,
    pub recovered_chunks: u64,
    pub late_datagrams: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CollectiveStats {
    /// Payload bytes summed over all links (fast path only).
    pub fastpath_bytes: u64,
    pub recovery_bytes: u64,
    pub control_bytes: u64,
    pub header_bytes: u64,
    pub control_messages: u64,
    pub rdma_reads: u64,
    pub rnr_drops: u64,
    pub fabric_drops: u64,
    pub protocol_errors: u64,
    pub completion_time: f64,
    pub max_concurrent_roots: usize,
    pub max_recovery_depth: u32,
    /// Fast-path payload leaving each rank's NIC.
    pub per_rank_send: Vec<u64>,
    /// Fast-path payload arriving at each rank's NIC.
    pub per_rank_recv: Vec<u64>,
    pub trace_hash: String,
}

impl CollectiveStats {
    pub fn total_link_bytes(&self) -> u64 {
        self.fastpath_bytes + self.recovery_bytes
    }
}

#[derive(Debug, Clone)]
pub struct CollectiveOutcome {
    pub ranks: Vec<RankResult>,
    pub stats: CollectiveStats,
    pub ledger: TrafficLedger,
    pub root_windows: Vec<RootWindow>,
    pub trace: Option<Vec<String>>,
}

impl CollectiveOutcome {
    /// Largest number of ranks from one chain injecting at the same instant.
    pub fn max_active_per_chain(&self) -> usize {
        max_overlap(&self.root_windows, |w| w.chain)
    }
}

/// Peak number of overlapping windows sharing a key, over all keys.
fn max_overlap(windows: &[RootWindow], key: impl Fn(&RootWindow) -> usize) -> usize {
    let keys: BTreeSet<usize> = windows.iter().map(&key).collect();
    keys.into_iter()
        .map(|k| {
            let mut edges: Vec<(f64, i32)> = windows
                .iter()
                .filter(|w| key(w) == k)
                .flat_map(|w| [(w.start, 1), (w.end, -1)])
                .collect();
            // ends sort before starts at equal times: a hand-over is not overlap
            edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let (mut cur, mut max) = (0i32, 0i32);
            for (_, d) in edges {
                cur += d;
                max = max.max(cur);
            }
            max as usize
        })
        .max()
        .unwrap_or(0)
}

struct RankState {
    phase: Phase,
    recv: Vec<u8>,
    bitmaps: Vec<ChunkBitmap>,
    depth: Vec<u32>,
    ack_depth: Vec<u32>,
    /// Right neighbour asked for this block before we had it.
    deferred: Vec<bool>,
    complete: usize,
    staging: Vec<StagingArea>,
    barrier_round: u32,
    barrier_seen: u64,
    send_done: bool,
    final_from_right: bool,
    done_at: f64,
    recovered_chunks: u64,
    late: u64,
    ud: Option<UdEndpoint>,
    uc: Option<UcEndpoint>,
}

struct Session {
    plan: Plan,
    control_bytes: u64,
    link_bandwidth: f64,
    /// Source index for each rank, if it is a source.
    source_of: Vec<Option<usize>>,
    chain_of: Vec<Option<(usize, usize)>>,
    trees: Vec<MulticastTree>,
    ranks: Vec<RankState>,
    active_roots: usize,
    max_active: usize,
    windows: Vec<RootWindow>,
    open_window: Vec<Option<f64>>,
    protocol_errors: u64,
    control_messages: u64,
    violations: Vec<String>,
}

impl fmt::Debug for Session {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Session")
            .field("participants", &self.plan.participants)
            .field("sources", &self.plan.sources.len())
            .finish_non_exhaustive()
    }
}

impl Session {
    fn subgroups(&self) -> usize {
        self.plan.map.blocks.len()
    }

    fn block_index(&self, source: usize, subgroup: u32) -> usize {
        source * self.subgroups() + subgroup as usize
    }

    fn left(&self, rank: usize) -> usize {
        RingLinks::new(rank, self.plan.participants).left.peer
    }

    fn right(&self, rank: usize) -> usize {
        RingLinks::new(rank, self.plan.participants).right.peer
    }

    fn violation(&mut self, what: impl Into<String>) {
        let what = what.into();
        log::error!("{what}");
        self.violations.push(what);
    }

    fn check<T, E: fmt::Display>(&mut self, r: Result<T, E>) -> Option<T> {
        match r {
            Ok(v) => Some(v),
            Err(e) => {
                self.violation(e.to_string());
                None
            }
        }
    }

    fn enter(&mut self, rank: usize, next: Phase) {
        let cur = self.ranks[rank].phase;
        if !cur.can_enter(next) {
            self.violation(format!("rank {rank}: illegal phase change {cur:?} -> {next:?}"));
        }
        self.ranks[rank].phase = next;
    }

    fn control(&mut self, net: &mut Network<Msg>, from: usize, to: usize, msg: Msg) {
        self.control_messages += 1;
        let r = RcEndpoint::new(from, to).send(net, self.control_bytes, TrafficClass::Control, msg);
        self.check(r);
    }

    /// Receive credits a subgroup queue of `rank` should hold up front.
    fn expected_on_queue(&self, rank: usize, subgroup: usize) -> u64 {
        let others = self
            .plan
            .sources
            .iter()
            .filter(|s| s.rank != rank)
            .count() as u64;
        others * self.plan.map.blocks[subgroup].chunks
    }

    fn post_initial_credits(&mut self, net: &mut Network<Msg>, rank: usize) {
        let depth = net.config().queue_depth as u64;
        for s in 0..self.subgroups() {
            let n = self.expected_on_queue(rank, s).min(depth) as u32;
            if n > 0 {
                let r = net.post_credits(rank, s as u32, n);
                self.check(r);
            }
        }
    }

    fn init(&mut self, net: &mut Network<Msg>) {
        let subgroups: Vec<u32> = (0..self.subgroups() as u32).collect();
        for rank in 0..self.plan.participants {
            match self.plan.transport {
                TransportKind::Ud => {
                    let ep = UdEndpoint::attach(net, rank, subgroups.iter().copied());
                    self.ranks[rank].ud = self.check(ep);
                }
                TransportKind::Uc => {
                    let ep = UcEndpoint::attach(net, rank, subgroups.iter().copied());
                    self.ranks[rank].uc = self.check(ep);
                }
            }
            self.enter(rank, Phase::RnrSync);
            if self.plan.rnr_barrier {
                self.post_initial_credits(net, rank);
            } else {
                net.set_timer(rank, self.plan.leaf_post_delay, Msg::StartReceiving);
            }
        }
        if self.plan.rnr_barrier {
            for rank in 0..self.plan.participants {
                let (to, _) = barrier_peers(rank, 0, self.plan.participants);
                self.control(net, rank, to, Msg::Barrier(0));
            }
        } else {
            for head in self.chain_heads() {
                self.start_send(net, head);
            }
        }
    }

    fn chain_heads(&self) -> Vec<usize> {
        self.plan.chains.iter().filter_map(|c| c.first().copied()).collect()
    }

    fn on_barrier(&mut self, net: &mut Network<Msg>, rank: usize, round: u32) {
        let rounds = barrier_rounds(self.plan.participants);
        self.ranks[rank].barrier_seen |= 1 << round;
        let mut advanced = false;
        loop {
            let st = &mut self.ranks[rank];
            if st.barrier_round >= rounds || st.barrier_seen & (1 << st.barrier_round) == 0 {
                break;
            }
            st.barrier_round += 1;
            advanced = true;
            let next = st.barrier_round;
            if next < rounds {
                let (to, _) = barrier_peers(rank, next, self.plan.participants);
                self.control(net, rank, to, Msg::Barrier(next));
            }
        }
        if advanced && self.ranks[rank].barrier_round == rounds {
            self.start_receiving(net, rank);
            if self.chain_heads().contains(&rank) {
                self.start_send(net, rank);
            }
        }
    }

    fn start_receiving(&mut self, net: &mut Network<Msg>, rank: usize) {
        if !self.plan.rnr_barrier {
            self.post_initial_credits(net, rank);
        }
        self.enter(rank, Phase::Receiving);
        let r = cutoff_deadline(self.plan.recv_len as u64, self.link_bandwidth, self.plan.alpha);
        if let Some(d) = self.check(r) {
            net.set_timer(rank, net.now() + d, Msg::Cutoff);
        }
        self.try_handshake(net, rank);
    }

    /// Posts every chunk of `rank`'s buffer, round-robin over subgroups.
    fn start_send(&mut self, net: &mut Network<Msg>, rank: usize) {
        let Some(src) = self.source_of[rank] else {
            self.violation(format!("rank {rank} activated but has nothing to send"));
            return;
        };
        if self.open_window[rank].is_some() || self.ranks[rank].send_done {
            self.violation(format!("rank {rank} activated twice"));
            return;
        }
        self.active_roots += 1;
        self.max_active = self.max_active.max(self.active_roots);
        self.open_window[rank] = Some(net.now());
        let data = self.plan.sources[src].data.clone();
        let slot_base = self.plan.sources[src].slot * self.plan.map.buffer_size;
        let layout = net.config().layout;
        let longest = self.plan.map.blocks.iter().map(|b| b.chunks).max().unwrap_or(0);
        for i in 0..longest {
            for s in 0..self.subgroups() {
                let b = self.plan.map.blocks[s];
                if i >= b.chunks {
                    continue;
                }
                let psn = b.first_chunk + i;
                let range = self.plan.map.chunk_range(psn);
                let Some(imm) = self.check(layout.encode(psn, self.plan.collective_id)) else {
                    return;
                };
                let tree = &self.trees[self.block_index(src, s as u32)];
                let payload = data.slice(range.clone());
                let r = match self.plan.transport {
                    TransportKind::Ud => self.ranks[rank]
                        .ud
                        .as_ref()
                        .map(|ep| ep.ud_send(net, tree, payload, imm, rank as u32)),
                    TransportKind::Uc => self.ranks[rank].uc.as_ref().map(|ep| {
                        ep.uc_write_with_imm(net, tree, slot_base + range.start, payload, imm, rank as u32)
                    }),
                };
                match r {
                    Some(r) => {
                        self.check(r);
                    }
                    None => self.violation(format!("rank {rank} has no endpoint")),
                }
            }
        }
        let done = net.nic_free_at(rank);
        net.set_timer(rank, done, Msg::SendDone);
    }

    fn on_send_done(&mut self, net: &mut Network<Msg>, rank: usize) {
        self.active_roots -= 1;
        let start = self.open_window[rank].take().unwrap_or(net.now());
        let chain = self.chain_of[rank].map_or(0, |(c, _)| c);
        self.windows.push(RootWindow {
            rank,
            chain,
            start,
            end: net.now(),
        });
        self.ranks[rank].send_done = true;
        if let Some((c, pos)) = self.chain_of[rank] {
            if let Some(&next) = self.plan.chains[c].get(pos + 1) {
                self.control(net, rank, next, Msg::Activate);
            }
        }
        self.try_handshake(net, rank);
    }

    fn on_chunk(&mut self, net: &mut Network<Msg>, rank: usize, source: NodeId, flow: u32, immediate: u32, offset: Option<usize>, payload: Bytes) {
        let st = &self.ranks[rank];
        if !st.phase.accepts_datagrams() {
            self.ranks[rank].late += 1;
            return;
        }
        // the credit is handed back as soon as the chunk leaves the queue
        let r = net.post_credits(rank, flow, 1);
        self.check(r);
        let (psn, cid) = net.config().layout.decode(immediate);
        let psn = psn as u64;
        let Some(src) = self.source_of.get(source).copied().flatten() else {
            self.protocol_errors += 1;
            return;
        };
        if cid != self.plan.collective_id || flow as usize >= self.subgroups() || source == rank {
            self.protocol_errors += 1;
            return;
        }
        let b = self.plan.map.blocks[flow as usize];
        if psn < b.first_chunk || psn >= b.first_chunk + b.chunks {
            self.protocol_errors += 1;
            return;
        }
        let block = self.block_index(src, flow);
        let range = self.plan.map.chunk_range(psn);
        let dst = self.plan.sources[src].slot * self.plan.map.buffer_size + range.start;
        if offset.is_some_and(|o| o != dst) || payload.len() != range.len() {
            self.protocol_errors += 1;
            return;
        }
        let bit = psn - b.first_chunk;
        let st = &mut self.ranks[rank];
        if st.bitmaps[block].get(bit) {
            return;
        }
        let data = if offset.is_some() {
            payload
        } else {
            let staging = &mut st.staging[flow as usize];
            if staging.push(payload).is_err() {
                self.violation(format!("rank {rank}: staging area overrun"));
                return;
            }
            staging.pop().expect("slot just filled")
        };
        st.recv[dst..dst + data.len()].copy_from_slice(&data);
        st.bitmaps[block].set(bit);
        if st.bitmaps[block].is_complete() {
            self.on_block_complete(net, rank, block);
        }
    }

    fn on_block_complete(&mut self, net: &mut Network<Msg>, rank: usize, block: usize) {
        let st = &mut self.ranks[rank];
        st.complete += 1;
        if std::mem::take(&mut st.deferred[block]) {
            let depth = st.depth[block];
            let right = self.right(rank);
            self.control(net, rank, right, Msg::Ack { block, depth });
        }
        self.try_handshake(net, rank);
    }

    fn try_handshake(&mut self, net: &mut Network<Msg>, rank: usize) {
        let st = &self.ranks[rank];
        let ready = matches!(st.phase, Phase::Receiving | Phase::Recovery)
            && st.complete == st.bitmaps.len()
            && st.send_done;
        if !ready {
            return;
        }
        self.enter(rank, Phase::Handshake);
        let left = self.left(rank);
        self.control(net, rank, left, Msg::Final);
        if self.ranks[rank].final_from_right {
            self.finish(net, rank);
        }
    }

    fn finish(&mut self, net: &mut Network<Msg>, rank: usize) {
        self.enter(rank, Phase::Done);
        self.ranks[rank].done_at = net.now();
    }

    fn on_cutoff(&mut self, net: &mut Network<Msg>, rank: usize) {
        let st = &self.ranks[rank];
        if st.phase != Phase::Receiving || st.complete == st.bitmaps.len() {
            return;
        }
        self.enter(rank, Phase::Recovery);
        let missing: Vec<usize> = (0..self.ranks[rank].bitmaps.len())
            .filter(|&b| !self.ranks[rank].bitmaps[b].is_complete())
            .collect();
        log::debug!("rank {rank} recovering {} blocks at {:.9}", missing.len(), net.now());
        let left = self.left(rank);
        for block in missing {
            self.control(net, rank, left, Msg::Fetch(block));
        }
    }

    fn on_fetch(&mut self, net: &mut Network<Msg>, rank: usize, from: usize, block: usize) {
        if from != self.right(rank) {
            self.violation(format!("rank {rank}: fetch from non-neighbour {from}"));
            return;
        }
        let st = &mut self.ranks[rank];
        if st.bitmaps[block].is_complete() {
            let depth = st.depth[block];
            self.control(net, rank, from, Msg::Ack { block, depth });
        } else {
            st.deferred[block] = true;
        }
    }

    fn on_ack(&mut self, net: &mut Network<Msg>, rank: usize, from: usize, block: usize, depth: u32) {
        self.ranks[rank].ack_depth[block] = depth + 1;
        let src = block / self.subgroups();
        let sub = block % self.subgroups();
        let b = self.plan.map.blocks[sub];
        let slot_base = self.plan.sources[src].slot * self.plan.map.buffer_size;
        let missing: Vec<u64> = self.ranks[rank].bitmaps[block].missing().collect();
        for bit in missing {
            let psn = b.first_chunk + bit;
            let range = self.plan.map.chunk_range(psn);
            let at = slot_base + range.start..slot_base + range.end;
            let data = Bytes::copy_from_slice(&self.ranks[from].recv[at]);
            let r = RcEndpoint::new(rank, from).rdma_read(net, data, Msg::Read { block, psn });
            self.check(r);
        }
    }

    fn on_read(&mut self, net: &mut Network<Msg>, rank: usize, block: usize, psn: u64, data: Bytes) {
        let src = block / self.subgroups();
        let b = self.plan.map.blocks[block % self.subgroups()];
        let bit = psn - b.first_chunk;
        let range = self.plan.map.chunk_range(psn);
        let dst = self.plan.sources[src].slot * self.plan.map.buffer_size + range.start;
        let st = &mut self.ranks[rank];
        if !st.bitmaps[block].set(bit) {
            return;
        }
        st.recv[dst..dst + data.len()].copy_from_slice(&data);
        st.recovered_chunks += 1;
        if st.bitmaps[block].is_complete() {
            st.depth[block] = st.ack_depth[block];
            self.on_block_complete(net, rank, block);
        }
    }

    fn on_final(&mut self, net: &mut Network<Msg>, rank: usize, from: usize) {
        if from != self.right(rank) {
            self.violation(format!("rank {rank}: final packet from non-neighbour {from}"));
            return;
        }
        self.ranks[rank].final_from_right = true;
        if self.ranks[rank].phase == Phase::Handshake {
            self.finish(net, rank);
        }
    }
}

impl Protocol<Msg> for Session {
    fn handle(&mut self, net: &mut Network<Msg>, event: Event<Msg>) {
        match event {
            Event::Datagram { node, datagram } => self.on_chunk(
                net,
                node,
                datagram.source,
                datagram.flow,
                datagram.immediate,
                None,
                datagram.payload,
            ),
            Event::UcWrite { node, write } => self.on_chunk(
                net,
                node,
                write.source,
                write.flow,
                write.immediate,
                Some(write.offset),
                write.payload,
            ),
            Event::ReadComplete { node, data, tag: Msg::Read { block, psn }, .. } => {
                self.on_read(net, node, block, psn, data)
            }
            Event::Timer { node, body } => match body {
                Msg::StartReceiving => self.start_receiving(net, node),
                Msg::Cutoff => self.on_cutoff(net, node),
                Msg::SendDone => self.on_send_done(net, node),
                other => self.violation(format!("unexpected timer {other:?}")),
            },
            Event::Message { node, from, body } => match body {
                Msg::Barrier(round) => self.on_barrier(net, node, round),
                Msg::Activate => self.start_send(net, node),
                Msg::Fetch(block) => self.on_fetch(net, node, from, block),
                Msg::Ack { block, depth } => self.on_ack(net, node, from, block, depth),
                Msg::Final => self.on_final(net, node, from),
                other => self.violation(format!("unexpected message {other:?}")),
            },
            other => self.violation(format!("unexpected event {other:?}")),
        }
    }
}

pub(crate) fn run(plan: Plan, fabric: FabricConfig, topology: Topology) -> Result<CollectiveOutcome, CollectiveError> {
    let p = plan.participants;
    let chunks = plan.map.chunk_count();
    let max = fabric.layout.psn_space();
    fabric.layout.validate()?;
    if chunks > max {
        return Err(CollectiveError::BufferTooLarge { chunks, max });
    }
    if plan.collective_id as u64 >= 1u64 << fabric.layout.collective_id_bits {
        return Err(TransportError::IdOutOfRange {
            id: plan.collective_id,
            bits: fabric.layout.collective_id_bits,
        }
        .into());
    }
    let record = fabric.record_trace;
    if p == 1 {
        return trivial(plan, topology, fabric);
    }
    let mut source_of = vec![None; p];
    for (i, s) in plan.sources.iter().enumerate() {
        source_of[s.rank] = Some(i);
    }
    let mut chain_of = vec![None; p];
    for (c, chain) in plan.chains.iter().enumerate() {
        for (pos, &r) in chain.iter().enumerate() {
            chain_of[r] = Some((c, pos));
        }
    }
    let members: BTreeSet<NodeId> = (0..p).collect();
    let s = plan.map.blocks.len();
    let mut trees = Vec::with_capacity(plan.sources.len() * s);
    for src in &plan.sources {
        for sub in 0..s as u32 {
            trees.push(topology.compute_multicast_tree(src.rank, &members, sub)?);
        }
    }
    let blocks = plan.sources.len() * s;
    let depth = fabric.queue_depth as usize;
    let ranks = (0..p)
        .map(|rank| {
            let mut bitmaps: Vec<ChunkBitmap> = (0..blocks)
                .map(|b| ChunkBitmap::new(plan.map.blocks[b % s].chunks))
                .collect();
            let mut complete = 0;
            let mut recv = vec![0u8; plan.recv_len];
            if let Some(src) = source_of[rank] {
                let sp = &plan.sources[src];
                let base = sp.slot * plan.map.buffer_size;
                recv[base..base + sp.data.len()].copy_from_slice(&sp.data);
                for b in &mut bitmaps[src * s..(src + 1) * s] {
                    b.set_all();
                    complete += 1;
                }
            }
            RankState {
                phase: Phase::Idle,
                recv,
                bitmaps,
                depth: vec![0; blocks],
                ack_depth: vec![0; blocks],
                deferred: vec![false; blocks],
                complete,
                staging: match plan.transport {
                    TransportKind::Ud => (0..s).map(|_| StagingArea::new(depth)).collect(),
                    TransportKind::Uc => Vec::new(),
                },
                barrier_round: 0,
                barrier_seen: 0,
                send_done: source_of[rank].is_none(),
                final_from_right: false,
                done_at: 0.0,
                recovered_chunks: 0,
                late: 0,
                ud: None,
                uc: None,
            }
        })
        .collect();
    let mut session = Session {
        control_bytes: fabric.control_bytes,
        link_bandwidth: topology.params().link_bandwidth,
        source_of,
        chain_of,
        trees,
        ranks,
        active_roots: 0,
        max_active: 0,
        windows: Vec::new(),
        open_window: vec![None; p],
        protocol_errors: 0,
        control_messages: 0,
        violations: Vec::new(),
        plan,
    };
    let mut net: Network<Msg> = Network::new(topology, fabric)?;
    session.init(&mut net);
    net.run(&mut session);

    for (rank, st) in session.ranks.iter().enumerate() {
        if st.phase != Phase::Done {
            session.violations.push(format!(
                "rank {rank} stalled in {:?} with {}/{} blocks",
                st.phase,
                st.complete,
                st.bitmaps.len()
            ));
        }
    }
    if let Some(v) = session.violations.first() {
        return Err(CollectiveError::Invariant(v.clone()));
    }
    let stats = CollectiveStats {
        control_messages: session.control_messages,
        protocol_errors: session.protocol_errors,
        completion_time: session.ranks.iter().map(|r| r.done_at).fold(0.0, f64::max),
        max_concurrent_roots: session.max_active,
        max_recovery_depth: session
            .ranks
            .iter()
            .flat_map(|r| r.depth.iter().copied())
            .max()
            .unwrap_or(0),
        ..ledger_stats(&net, p)
    };
    let ledger = net.ledger().clone();
    let trace = record.then(|| net.trace_lines().unwrap_or_default().to_vec());
    let ranks = session
        .ranks
        .into_iter()
        .enumerate()
        .map(|(rank, st)| RankResult {
            rank,
            recovery_depth: st.depth.iter().copied().max().unwrap_or(0),
            buffer: st.recv,
            done_at: st.done_at,
            recovered_chunks: st.recovered_chunks,
            late_datagrams: st.late,
        })
        .collect();
    Ok(CollectiveOutcome {
        ranks,
        stats,
        ledger,
        root_windows: session.windows,
        trace,
    })
}

/// Stats that follow from the fabric alone.
pub(crate) fn ledger_stats<M>(net: &Network<M>, p: usize) -> CollectiveStats {
    let ledger = net.ledger();
    let t = net.topology();
    CollectiveStats {
        fastpath_bytes: ledger.payload_total(),
        recovery_bytes: ledger.recovery_total(),
        control_bytes: ledger.control_total(),
        header_bytes: ledger.header_total(),
        rdma_reads: net.stats().reads,
        rnr_drops: net.stats().rnr_drops,
        fabric_drops: net.stats().fabric_drops,
        per_rank_send: (0..p).map(|r| ledger.link(t.uplink(r)).payload).collect(),
        per_rank_recv: (0..p).map(|r| ledger.link(t.downlink(r)).payload).collect(),
        trace_hash: net.trace_hash(),
        ..CollectiveStats::default()
    }
}

/// Outcome of a single-participant collective: no traffic at all.
pub(crate) fn idle_outcome(
    buffer: Vec<u8>,
    topology: Topology,
    fabric: FabricConfig,
) -> Result<CollectiveOutcome, CollectiveError> {
    let record = fabric.record_trace;
    let net: Network<()> = Network::new(topology, fabric)?;
    Ok(CollectiveOutcome {
        ranks: vec![RankResult {
            rank: 0,
            buffer,
            done_at: 0.0,
            recovery_depth: 0,
            recovered_chunks: 0,
            late_datagrams: 0,
        }],
        stats: ledger_stats(&net, 1),
        ledger: net.ledger().clone(),
        root_windows: Vec::new(),
        trace: record.then(Vec::new),
    })
}

fn trivial(plan: Plan, topology: Topology, fabric: FabricConfig) -> Result<CollectiveOutcome, CollectiveError> {
    let mut recv = vec![0u8; plan.recv_len];
    for s in &plan.sources {
        let base = s.slot * plan.map.buffer_size;
        recv[base..base + s.data.len()].copy_from_slice(&s.data);
    }
    idle_outcome(recv, topology, fabric)
}
