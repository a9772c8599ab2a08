//! Packet-level discrete-event fabric.
//!
//! A [`Network`] couples a [`Topology`] with an event queue, per-link fault
//! streams, receive-credit accounting and a [`TrafficLedger`]. Protocols
//! implement [`Protocol`] and are driven by [`Network::run`]; every transfer
//! they issue is charged to the ledger when it is posted and surfaces later
//! as an [`Event`].
//!
//! Timing is store-and-forward per hop with no queueing inside the fabric.
//! The only contention modelled is the sender's NIC: transfers from one node
//! leave back to back at link rate.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::topology::{
    LinkId, MulticastTree, NodeId, Topology, TopologyError, TrafficClass, TrafficLedger,
};
use crate::transport::ImmediateLayout;

#[derive(Debug, Error, PartialEq)]
pub enum FabricError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("payload of {size} bytes outside [1, {mtu}]")]
    PayloadSize { size: usize, mtu: usize },
    #[error("message of 0 bytes")]
    EmptyMessage,
    #[error("posting {requested} credits on node {node} subgroup {subgroup} exceeds capacity {capacity} ({posted} already posted)")]
    CreditOverflow {
        node: NodeId,
        subgroup: u32,
        requested: u32,
        posted: u32,
        capacity: u32,
    },
    #[error("no receive queue for node {node} subgroup {subgroup}")]
    NoQueue { node: NodeId, subgroup: u32 },
    #[error("UC multicast is an optional extension and is disabled")]
    UcMulticastDisabled,
    #[error("invalid fabric configuration: {0}")]
    Config(String),
}

/// A single MTU-bounded multicast datagram.
#[derive(Debug, Clone, PartialEq)]
pub struct Datagram {
    /// Subgroup (multicast group) the datagram travels on.
    pub flow: u32,
    pub source: NodeId,
    /// PSN and collective ID, packed per [`ImmediateLayout`].
    pub immediate: u32,
    pub payload: Bytes,
    /// Rank whose buffer the payload belongs to, for ledger attribution.
    pub owner: u32,
}

/// A multi-packet UC RDMA write with immediate, delivered all-or-nothing at
/// `offset` in the receiver's registered buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct UcWrite {
    pub flow: u32,
    pub source: NodeId,
    pub immediate: u32,
    pub offset: usize,
    pub payload: Bytes,
    pub owner: u32,
}

/// Whether a transfer may be lost in the fabric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Delivery {
    /// RC: retransmission is offloaded, delivery always succeeds.
    Reliable,
    /// UC: one lost packet loses the whole message.
    UnreliableMultiPacket,
}

/// Drops a matching packet every time it crosses `link`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ScriptedDrop {
    pub link: LinkId,
    #[serde(default)]
    pub source: Option<NodeId>,
    #[serde(default)]
    pub psn: Option<u32>,
    /// Packet index within a multi-packet message.
    #[serde(default)]
    pub packet: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultModel {
    /// Per-link, per-packet loss probability for unreliable traffic.
    pub drop_prob: f64,
    /// Probability that a multicast delivery is displaced.
    pub reorder_prob: f64,
    /// Upper bound on displacement, in packet serialization times.
    pub max_displacement: u32,
    pub seed: u64,
    pub scripted: Vec<ScriptedDrop>,
}

impl Default for FaultModel {
    fn default() -> Self {
        FaultModel {
            drop_prob: 0.0,
            reorder_prob: 0.0,
            max_displacement: 8,
            seed: 0,
            scripted: Vec::new(),
        }
    }
}

impl FaultModel {
    pub fn lossless(seed: u64) -> Self {
        FaultModel {
            seed,
            ..FaultModel::default()
        }
    }

    fn validate(&self) -> Result<(), FabricError> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.drop_prob) {
            return Err(FabricError::Config(format!(
                "drop_prob {} not in [0, 1]",
                self.drop_prob
            )));
        }
        if !unit(self.reorder_prob) {
            return Err(FabricError::Config(format!(
                "reorder_prob {} not in [0, 1]",
                self.reorder_prob
            )));
        }
        if self.reorder_prob > 0.0 && self.max_displacement == 0 {
            return Err(FabricError::Config(
                "reordering needs max_displacement >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FabricConfig {
    pub mtu: usize,
    /// Per-packet header overhead charged on every link a data packet crosses
    /// (0 = payload only). Control messages are sized by `control_bytes` alone.
    pub header_bytes: u64,
    /// Size of control messages and RDMA read requests.
    pub control_bytes: u64,
    /// Receive queue depth; also the staging-area capacity.
    pub queue_depth: u32,
    pub layout: ImmediateLayout,
    pub faults: FaultModel,
    /// Enables the UC multicast extension.
    pub uc_multicast: bool,
    /// Keep every trace line in memory (the running hash is always kept).
    pub record_trace: bool,
}

impl Default for FabricConfig {
    fn default() -> Self {
        FabricConfig {
            mtu: 4096,
            header_bytes: 0,
            control_bytes: 64,
            queue_depth: 8192,
            layout: ImmediateLayout::default(),
            faults: FaultModel::default(),
            uc_multicast: false,
            record_trace: false,
        }
    }
}

/// Posted receive credits of one endpoint queue.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReceiveQueue {
    pub owner: NodeId,
    pub subgroup: u32,
    credits: u32,
    capacity: u32,
}

impl ReceiveQueue {
    pub fn new(owner: NodeId, subgroup: u32, capacity: u32) -> Self {
        ReceiveQueue {
            owner,
            subgroup,
            credits: 0,
            capacity,
        }
    }

    pub fn credits(&self) -> u32 {
        self.credits
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    pub fn post(&mut self, n: u32) -> Result<(), FabricError> {
        match self.credits.checked_add(n) {
            Some(total) if total <= self.capacity => {
                self.credits = total;
                Ok(())
            }
            _ => Err(FabricError::CreditOverflow {
                node: self.owner,
                subgroup: self.subgroup,
                requested: n,
                posted: self.credits,
                capacity: self.capacity,
            }),
        }
    }

    /// Takes one credit for an arriving packet; `false` means RNR.
    pub fn consume(&mut self) -> bool {
        if self.credits == 0 {
            false
        } else {
            self.credits -= 1;
            true
        }
    }
}

struct Pending<E> {
    time: f64,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Pending<E> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<E> Eq for Pending<E> {}
impl<E> PartialOrd for Pending<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<E> Ord for Pending<E> {
    // Reversed: BinaryHeap is a max-heap and we want the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Pending events ordered by `(time, insertion sequence)`.
pub struct EventQueue<E> {
    heap: BinaryHeap<Pending<E>>,
    seq: u64,
    now: f64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
        }
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    /// Schedules `event`; times in the past are clamped to now.
    pub fn push(&mut self, time: f64, event: E) {
        let time = if time < self.now { self.now } else { time };
        self.heap.push(Pending {
            time,
            seq: self.seq,
            event,
        });
        self.seq += 1;
    }

    /// Pops the earliest event; `None` signals the end of the simulation.
    pub fn pop(&mut self) -> Option<(f64, E)> {
        let p = self.heap.pop()?;
        self.now = p.time;
        Some((p.time, p.event))
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

/// What a protocol handler sees.
#[derive(Debug, Clone, PartialEq)]
pub enum Event<M> {
    Datagram { node: NodeId, datagram: Datagram },
    UcWrite { node: NodeId, write: UcWrite },
    Message { node: NodeId, from: NodeId, body: M },
    ReadComplete { node: NodeId, from: NodeId, data: Bytes, tag: M },
    Timer { node: NodeId, body: M },
}

impl<M> Event<M> {
    pub fn node(&self) -> NodeId {
        match self {
            Event::Datagram { node, .. }
            | Event::UcWrite { node, .. }
            | Event::Message { node, .. }
            | Event::ReadComplete { node, .. }
            | Event::Timer { node, .. } => *node,
        }
    }
}

pub trait Protocol<M> {
    fn handle(&mut self, net: &mut Network<M>, event: Event<M>);
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FabricStats {
    pub multicast_sends: u64,
    pub deliveries: u64,
    pub delivered_bytes: u64,
    pub rnr_drops: u64,
    /// Packet losses on links (one per dropped packet per link).
    pub fabric_drops: u64,
    pub messages: u64,
    pub reads: u64,
}

/// Outcome of one multicast post.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MulticastReport {
    /// Members the datagram will reach (before credit checks).
    pub reached: Vec<NodeId>,
    pub dropped_links: Vec<LinkId>,
}

#[derive(Debug, Serialize)]
pub struct TraceRecord {
    pub time: f64,
    pub event: &'static str,
    pub link: Option<LinkId>,
    pub node: Option<NodeId>,
    pub subgroup: Option<u32>,
    pub psn: Option<u32>,
    pub outcome: &'static str,
}

struct Trace {
    hasher: Sha256,
    lines: Option<Vec<String>>,
    records: u64,
}

impl Trace {
    fn record(&mut self, rec: TraceRecord) {
        let line = serde_json::to_string(&rec).expect("trace record serializes");
        self.hasher.update(line.as_bytes());
        self.hasher.update(b"\n");
        self.records += 1;
        if let Some(lines) = &mut self.lines {
            lines.push(line);
        }
    }
}

pub struct Network<M> {
    topology: Topology,
    config: FabricConfig,
    ledger: TrafficLedger,
    link_rngs: Vec<ChaCha8Rng>,
    queues: BTreeMap<(NodeId, u32), ReceiveQueue>,
    nic_free: Vec<f64>,
    stats: FabricStats,
    trace: Trace,
    events: EventQueue<Event<M>>,
}

impl<M> Network<M> {
    pub fn new(topology: Topology, config: FabricConfig) -> Result<Self, FabricError> {
        config.faults.validate()?;
        if config.mtu == 0 {
            return Err(FabricError::Config("mtu must be positive".into()));
        }
        if config.queue_depth == 0 {
            return Err(FabricError::Config("queue_depth must be positive".into()));
        }
        config
            .layout
            .validate()
            .map_err(|e| FabricError::Config(e.to_string()))?;
        let link_rngs = (0..topology.links().len())
            .map(|id| {
                let mut rng = ChaCha8Rng::seed_from_u64(config.faults.seed);
                rng.set_stream(id as u64);
                rng
            })
            .collect();
        let trace = Trace {
            hasher: Sha256::new(),
            lines: config.record_trace.then(Vec::new),
            records: 0,
        };
        Ok(Network {
            ledger: TrafficLedger::new(topology.links().len()),
            nic_free: vec![0.0; topology.node_count()],
            link_rngs,
            queues: BTreeMap::new(),
            stats: FabricStats::default(),
            trace,
            events: EventQueue::new(),
            topology,
            config,
        })
    }

    pub fn now(&self) -> f64 {
        self.events.now()
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn config(&self) -> &FabricConfig {
        &self.config
    }

    pub fn ledger(&self) -> &TrafficLedger {
        &self.ledger
    }

    pub fn stats(&self) -> &FabricStats {
        &self.stats
    }

    pub fn pending_events(&self) -> usize {
        self.events.len()
    }

    pub fn trace_hash(&self) -> String {
        hex::encode(self.trace.hasher.clone().finalize())
    }

    pub fn trace_records(&self) -> u64 {
        self.trace.records
    }

    pub fn trace_lines(&self) -> Option<&[String]> {
        self.trace.lines.as_deref()
    }

    /// Registers an empty receive queue for `(node, subgroup)`.
    pub fn create_queue(&mut self, node: NodeId, subgroup: u32) -> Result<(), FabricError> {
        self.topology.check_node(node)?;
        self.queues
            .entry((node, subgroup))
            .or_insert_with(|| ReceiveQueue::new(node, subgroup, self.config.queue_depth));
        Ok(())
    }

    pub fn has_queue(&self, node: NodeId, subgroup: u32) -> bool {
        self.queues.contains_key(&(node, subgroup))
    }

    pub fn post_credits(&mut self, node: NodeId, subgroup: u32, n: u32) -> Result<(), FabricError> {
        self.queues
            .get_mut(&(node, subgroup))
            .ok_or(FabricError::NoQueue { node, subgroup })?
            .post(n)
    }

    pub fn credits(&self, node: NodeId, subgroup: u32) -> Option<u32> {
        self.queues.get(&(node, subgroup)).map(ReceiveQueue::credits)
    }

    pub fn set_timer(&mut self, node: NodeId, at: f64, body: M) {
        self.events.push(at, Event::Timer { node, body });
    }

    /// Serializes `wire_bytes` onto `src`'s uplink, returning the departure time.
    fn inject(&mut self, src: NodeId, wire_bytes: u64) -> f64 {
        let bw = self.topology.link(self.topology.uplink(src)).bandwidth;
        let depart = self.nic_free[src].max(self.now());
        self.nic_free[src] = depart + wire_bytes as f64 / bw;
        depart
    }

    /// Earliest time `node`'s NIC can start a new transfer.
    pub fn nic_free_at(&self, node: NodeId) -> f64 {
        self.nic_free[node].max(self.now())
    }

    fn psn_of(&self, immediate: u32) -> u32 {
        self.config.layout.decode(immediate).0
    }

    fn roll_drop(
        &mut self,
        link: LinkId,
        source: NodeId,
        psn: Option<u32>,
        packet: Option<u32>,
    ) -> bool {
        let scripted = self.config.faults.scripted.iter().any(|d| {
            d.link == link
                && d.source.is_none_or(|s| s == source)
                && d.psn.is_none_or(|p| psn == Some(p))
                && d.packet.is_none_or(|k| packet == Some(k))
        });
        if scripted {
            return true;
        }
        let p = self.config.faults.drop_prob;
        p > 0.0 && self.link_rngs[link].gen_bool(p)
    }

    fn reorder_delay(&mut self, member: NodeId, packet_time: f64) -> f64 {
        let q = self.config.faults.reorder_prob;
        if q <= 0.0 {
            return 0.0;
        }
        let rng = &mut self.link_rngs[self.topology.downlink(member)];
        if rng.gen_bool(q) {
            let k = rng.gen_range(1..=self.config.faults.max_displacement);
            k as f64 * packet_time
        } else {
            0.0
        }
    }

    /// Fans one packet out over `tree`, charging every link it crosses.
    /// Returns per-tree-link arrival times (`None` where it never arrived).
    fn fan_out(
        &mut self,
        tree: &MulticastTree,
        depart: f64,
        payload: u64,
        class: TrafficClass,
        psn: Option<u32>,
        packet: Option<u32>,
        report: &mut MulticastReport,
    ) -> Vec<Option<f64>> {
        let wire = payload + self.config.header_bytes;
        let mut arrival: Vec<Option<f64>> = vec![None; tree.links.len()];
        let mut dropped = vec![false; tree.links.len()];
        for (i, tl) in tree.links.iter().enumerate() {
            let start = match tl.parent {
                None => Some(depart),
                Some(p) if !dropped[p] => arrival[p],
                Some(_) => None,
            };
            let Some(start) = start else { continue };
            self.ledger.charge(tl.link, class, payload);
            if self.config.header_bytes > 0 {
                self.ledger.charge_header(tl.link, self.config.header_bytes);
            }
            arrival[i] = Some(start + self.topology.link(tl.link).hop_time(wire));
            if self.roll_drop(tl.link, tree.root, psn, packet) {
                dropped[i] = true;
                self.stats.fabric_drops += 1;
                report.dropped_links.push(tl.link);
                self.trace.record(TraceRecord {
                    time: start,
                    event: "link",
                    link: Some(tl.link),
                    node: None,
                    subgroup: Some(tree.subgroup),
                    psn,
                    outcome: "dropped",
                });
            }
        }
        for (i, slot) in arrival.iter_mut().enumerate() {
            if dropped[i] {
                *slot = None;
            }
        }
        arrival
    }

    /// Posts one datagram on `tree`. A loss on any link suppresses delivery
    /// to the whole subtree below it.
    pub fn multicast_send(
        &mut self,
        tree: &MulticastTree,
        datagram: Datagram,
    ) -> Result<MulticastReport, FabricError> {
        let size = datagram.payload.len();
        if size == 0 || size > self.config.mtu {
            return Err(FabricError::PayloadSize {
                size,
                mtu: self.config.mtu,
            });
        }
        let psn = self.psn_of(datagram.immediate);
        let wire = size as u64 + self.config.header_bytes;
        let depart = self.inject(tree.root, wire);
        self.stats.multicast_sends += 1;
        self.trace.record(TraceRecord {
            time: depart,
            event: "mcast_send",
            link: None,
            node: Some(tree.root),
            subgroup: Some(tree.subgroup),
            psn: Some(psn),
            outcome: "posted",
        });
        let mut report = MulticastReport::default();
        let class = TrafficClass::Payload {
            owner: datagram.owner,
        };
        let arrival = self.fan_out(
            tree,
            depart,
            size as u64,
            class,
            Some(psn),
            None,
            &mut report,
        );
        let packet_time = wire as f64 / self.topology.link(self.topology.uplink(tree.root)).bandwidth;
        for (&member, &idx) in &tree.member_links {
            if let Some(t) = arrival[idx] {
                let t = t + self.reorder_delay(member, packet_time);
                report.reached.push(member);
                self.events.push(
                    t,
                    Event::Datagram {
                        node: member,
                        datagram: datagram.clone(),
                    },
                );
            }
        }
        Ok(report)
    }

    /// Posts a UC multicast RDMA write: segmented into MTU packets, delivered
    /// to a member only if every packet reaches it.
    pub fn multicast_write(
        &mut self,
        tree: &MulticastTree,
        write: UcWrite,
    ) -> Result<MulticastReport, FabricError> {
        if !self.config.uc_multicast {
            return Err(FabricError::UcMulticastDisabled);
        }
        let size = write.payload.len();
        if size == 0 {
            return Err(FabricError::EmptyMessage);
        }
        let psn = self.psn_of(write.immediate);
        let mtu = self.config.mtu;
        let class = TrafficClass::Payload { owner: write.owner };
        let mut report = MulticastReport::default();
        self.stats.multicast_sends += 1;
        let mut last: Vec<Option<f64>> = vec![Some(0.0); tree.links.len()];
        let mut packet_time = 0.0;
        for (k, start) in (0..size).step_by(mtu).enumerate() {
            let len = (size - start).min(mtu) as u64;
            let wire = len + self.config.header_bytes;
            let depart = self.inject(tree.root, wire);
            packet_time = wire as f64 / self.topology.link(self.topology.uplink(tree.root)).bandwidth;
            let arrival = self.fan_out(
                tree,
                depart,
                len,
                class,
                Some(psn),
                Some(k as u32),
                &mut report,
            );
            for (l, a) in last.iter_mut().zip(arrival) {
                *l = match (*l, a) {
                    (Some(x), Some(y)) => Some(x.max(y)),
                    _ => None,
                };
            }
        }
        self.trace.record(TraceRecord {
            time: self.now(),
            event: "uc_write",
            link: None,
            node: Some(tree.root),
            subgroup: Some(tree.subgroup),
            psn: Some(psn),
            outcome: "posted",
        });
        for (&member, &idx) in &tree.member_links {
            if let Some(t) = last[idx] {
                let t = t + self.reorder_delay(member, packet_time);
                report.reached.push(member);
                self.events.push(
                    t,
                    Event::UcWrite {
                        node: member,
                        write: write.clone(),
                    },
                );
            }
        }
        Ok(report)
    }

    /// Charges a `size`-byte message on `path` and returns its arrival time
    /// given departure `depart`. Packets pipeline through the hops.
    fn charge_path(&mut self, path: &[LinkId], depart: f64, size: u64, class: TrafficClass) -> f64 {
        let mtu = self.config.mtu as u64;
        let header = self.config.header_bytes;
        let packets = size.div_ceil(mtu);
        let first_wire = size.min(mtu) + header;
        let wire = size + packets * header;
        let mut t = depart;
        for &link in path {
            self.ledger.charge(link, class, size);
            // control_bytes already stands for a whole control packet
            if header > 0 && !matches!(class, TrafficClass::Control) {
                self.ledger.charge_header(link, packets * header);
            }
            t += self.topology.link(link).hop_time(first_wire);
        }
        let bottleneck = path
            .iter()
            .map(|&l| self.topology.link(l).bandwidth)
            .fold(f64::INFINITY, f64::min);
        t + (wire - first_wire) as f64 / bottleneck
    }

    /// Sends a `size`-byte message from `src` to `dst`.
    ///
    /// Reliable messages always arrive. Unreliable ones are segmented into
    /// MTU packets, each rolled for loss on each link; the message arrives
    /// only if every packet does. Returns whether it will be delivered.
    pub fn unicast_send(
        &mut self,
        src: NodeId,
        dst: NodeId,
        size: u64,
        kind: Delivery,
        class: TrafficClass,
        body: M,
    ) -> Result<bool, FabricError> {
        if size == 0 {
            return Err(FabricError::EmptyMessage);
        }
        let path = self.topology.route_unicast(src, dst)?;
        self.stats.messages += 1;
        let delivered_at = match kind {
            Delivery::Reliable => {
                let wire = size + size.div_ceil(self.config.mtu as u64) * self.config.header_bytes;
                let depart = self.inject(src, wire);
                Some(self.charge_path(&path, depart, size, class))
            }
            Delivery::UnreliableMultiPacket => self.send_unreliable(&path, src, size, class),
        };
        self.trace.record(TraceRecord {
            time: self.now(),
            event: "unicast",
            link: None,
            node: Some(src),
            subgroup: None,
            psn: None,
            outcome: if delivered_at.is_some() { "posted" } else { "lost" },
        });
        match delivered_at {
            Some(t) => {
                self.events.push(
                    t,
                    Event::Message {
                        node: dst,
                        from: src,
                        body,
                    },
                );
                Ok(true)
            }
            None => Ok(false),
        }
    }

    fn send_unreliable(
        &mut self,
        path: &[LinkId],
        src: NodeId,
        size: u64,
        class: TrafficClass,
    ) -> Option<f64> {
        let mtu = self.config.mtu as u64;
        let header = self.config.header_bytes;
        let mut all_arrived = true;
        let mut last = 0.0f64;
        let mut offset = 0;
        let mut k = 0u32;
        while offset < size {
            let len = (size - offset).min(mtu);
            let wire = len + header;
            let mut t = self.inject(src, wire);
            let mut lost = false;
            for &link in path {
                self.ledger.charge(link, class, len);
                if header > 0 && !matches!(class, TrafficClass::Control) {
                    self.ledger.charge_header(link, header);
                }
                t += self.topology.link(link).hop_time(wire);
                if self.roll_drop(link, src, None, Some(k)) {
                    self.stats.fabric_drops += 1;
                    lost = true;
                    break;
                }
            }
            all_arrived &= !lost;
            last = last.max(t);
            offset += len;
            k += 1;
        }
        all_arrived.then_some(last)
    }

    /// One-sided read of `data` from `responder` into `requester`: a control
    /// sized request travels forward, the data comes back charged as recovery.
    pub fn rdma_read(
        &mut self,
        requester: NodeId,
        responder: NodeId,
        data: Bytes,
        tag: M,
    ) -> Result<(), FabricError> {
        let size = data.len() as u64;
        if size == 0 {
            return Err(FabricError::EmptyMessage);
        }
        let fwd = self.topology.route_unicast(requester, responder)?;
        let rev = self.topology.route_unicast(responder, requester)?;
        let req = self.config.control_bytes;
        let depart = self.inject(requester, req + self.config.header_bytes);
        let at_responder = self.charge_path(&fwd, depart, req, TrafficClass::Control);
        let wire = size + size.div_ceil(self.config.mtu as u64) * self.config.header_bytes;
        let reply_depart = self.nic_free[responder].max(at_responder);
        self.nic_free[responder] = reply_depart + wire as f64 / self.topology.link(rev[0]).bandwidth;
        let done = self.charge_path(&rev, reply_depart, size, TrafficClass::Recovery);
        self.stats.reads += 1;
        self.events.push(
            done,
            Event::ReadComplete {
                node: requester,
                from: responder,
                data,
                tag,
            },
        );
        Ok(())
    }

    /// Pops the next event. Datagram and UC arrivals take a receive credit
    /// here; arrivals without one are RNR drops and never reach the handler.
    pub fn advance(&mut self) -> Option<Event<M>> {
        loop {
            let (time, event) = self.events.pop()?;
            let (kind, subgroup, psn) = match &event {
                Event::Datagram { datagram, .. } => (
                    "datagram",
                    Some(datagram.flow),
                    Some(self.psn_of(datagram.immediate)),
                ),
                Event::UcWrite { write, .. } => {
                    ("uc_write", Some(write.flow), Some(self.psn_of(write.immediate)))
                }
                Event::Message { .. } => ("message", None, None),
                Event::ReadComplete { .. } => ("read", None, None),
                Event::Timer { .. } => ("timer", None, None),
            };
            let node = event.node();
            if let (Some(flow), Event::Datagram { .. } | Event::UcWrite { .. }) = (subgroup, &event)
            {
                let bytes = match &event {
                    Event::Datagram { datagram, .. } => datagram.payload.len(),
                    Event::UcWrite { write, .. } => write.payload.len(),
                    _ => unreachable!(),
                } as u64;
                let accepted = self
                    .queues
                    .get_mut(&(node, flow))
                    .is_some_and(ReceiveQueue::consume);
                self.trace.record(TraceRecord {
                    time,
                    event: kind,
                    link: None,
                    node: Some(node),
                    subgroup,
                    psn,
                    outcome: if accepted { "delivered" } else { "rnr_drop" },
                });
                if !accepted {
                    self.stats.rnr_drops += 1;
                    continue;
                }
                self.stats.deliveries += 1;
                self.stats.delivered_bytes += bytes;
                return Some(event);
            }
            self.trace.record(TraceRecord {
                time,
                event: kind,
                link: None,
                node: Some(node),
                subgroup,
                psn,
                outcome: "dispatched",
            });
            return Some(event);
        }
    }

    pub fn run<P: Protocol<M>>(&mut self, protocol: &mut P) {
        while let Some(event) = self.advance() {
            protocol.handle(self, event);
        }
    }
}
