//! Two-level folded Clos topologies, multicast distribution trees, unicast
//! routes and the per-link traffic ledger.
//!
//! # Link numbering
//!
//! Link IDs are assigned deterministically so that ledgers from different
//! runs line up row by row:
//!
//! * node `n` owns links `2n` (node → leaf switch) and `2n + 1`
//!   (leaf switch → node);
//! * the pair (leaf `l`, core `c`) owns links `2P + 2(l·C + c)`
//!   (leaf → core) and `2P + 2(l·C + c) + 1` (core → leaf),
//!
//! where `P = L·p` is the node count and `C` the core-switch count. Every
//! link's reverse is therefore `id ^ 1`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = usize;
pub type LinkId = usize;

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("{0} must be at least 1")]
    ZeroCount(&'static str),
    #[error("topology dimensions overflow")]
    Overflow,
    #[error("link bandwidth must be positive and finite, got {0}")]
    Bandwidth(f64),
    #[error("hop latency must be non-negative and finite, got {0}")]
    Latency(f64),
    #[error("unknown node {node} (topology has {nodes} nodes)")]
    UnknownNode { node: NodeId, nodes: usize },
    #[error("multicast member set is empty")]
    NoMembers,
    #[error("multicast root {0} is not a member of the group")]
    RootNotMember(NodeId),
    #[error("source and destination are the same node ({0})")]
    SelfRoute(NodeId),
}

/// A vertex of the Clos graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Vertex {
    Node(usize),
    Leaf(usize),
    Core(usize),
}

impl fmt::Display for Vertex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Vertex::Node(i) => write!(f, "node{i}"),
            Vertex::Leaf(i) => write!(f, "leaf{i}"),
            Vertex::Core(i) => write!(f, "core{i}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub id: LinkId,
    pub src: Vertex,
    pub dst: Vertex,
    /// Bytes per second.
    pub bandwidth: f64,
    /// Seconds.
    pub latency: f64,
}

impl Link {
    /// Store-and-forward time for `bytes` across this hop.
    pub fn hop_time(&self, bytes: u64) -> f64 {
        self.latency + bytes as f64 / self.bandwidth
    }
}

/// The serializable description a [`Topology`] is rebuilt from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClosParams {
    pub leaf_switches: usize,
    pub nodes_per_leaf: usize,
    pub core_switches: usize,
    /// Bytes per second, identical for every link.
    pub link_bandwidth: f64,
    /// Seconds per hop.
    pub hop_latency: f64,
}

impl Default for ClosParams {
    fn default() -> Self {
        ClosParams {
            leaf_switches: 4,
            nodes_per_leaf: 4,
            core_switches: 2,
            link_bandwidth: 25e9,
            hop_latency: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    params: ClosParams,
    nodes: usize,
    links: Vec<Link>,
}

impl Serialize for Topology {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.params.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Topology {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let params = ClosParams::deserialize(d)?;
        Topology::from_params(params).map_err(serde::de::Error::custom)
    }
}

/// Builds a two-level folded Clos: `leaf_switches × nodes_per_leaf` nodes,
/// every leaf switch wired to every core switch.
pub fn build_clos(
    leaf_switches: usize,
    nodes_per_leaf: usize,
    core_switches: usize,
    link_bandwidth: f64,
    hop_latency: f64,
) -> Result<Topology, TopologyError> {
    Topology::from_params(ClosParams {
        leaf_switches,
        nodes_per_leaf,
        core_switches,
        link_bandwidth,
        hop_latency,
    })
}

impl Topology {
    pub fn from_params(params: ClosParams) -> Result<Self, TopologyError> {
        let ClosParams {
            leaf_switches: l,
            nodes_per_leaf: p,
            core_switches: c,
            link_bandwidth,
            hop_latency,
        } = params;
        if l == 0 {
            return Err(TopologyError::ZeroCount("leaf_switches"));
        }
        if p == 0 {
            return Err(TopologyError::ZeroCount("nodes_per_leaf"));
        }
        if c == 0 {
            return Err(TopologyError::ZeroCount("core_switches"));
        }
        if !(link_bandwidth.is_finite() && link_bandwidth > 0.0) {
            return Err(TopologyError::Bandwidth(link_bandwidth));
        }
        if !(hop_latency.is_finite() && hop_latency >= 0.0) {
            return Err(TopologyError::Latency(hop_latency));
        }
        let nodes = l.checked_mul(p).ok_or(TopologyError::Overflow)?;
        let total = l
            .checked_mul(c)
            .and_then(|lc| lc.checked_add(nodes))
            .and_then(|x| x.checked_mul(2))
            .ok_or(TopologyError::Overflow)?;
        // Refuse anything we could not possibly allocate.
        if total > (1 << 28) {
            return Err(TopologyError::Overflow);
        }

        let mut links = Vec::with_capacity(total);
        let mut push = |src: Vertex, dst: Vertex| {
            let id = links.len();
            links.push(Link {
                id,
                src,
                dst,
                bandwidth: link_bandwidth,
                latency: hop_latency,
            });
        };
        for n in 0..nodes {
            push(Vertex::Node(n), Vertex::Leaf(n / p));
            push(Vertex::Leaf(n / p), Vertex::Node(n));
        }
        for leaf in 0..l {
            for core in 0..c {
                push(Vertex::Leaf(leaf), Vertex::Core(core));
                push(Vertex::Core(core), Vertex::Leaf(leaf));
            }
        }
        debug_assert_eq!(links.len(), total);
        Ok(Topology {
            params,
            nodes,
            links,
        })
    }

    pub fn params(&self) -> &ClosParams {
        &self.params
    }

    pub fn node_count(&self) -> usize {
        self.nodes
    }

    pub fn leaf_switches(&self) -> usize {
        self.params.leaf_switches
    }

    pub fn nodes_per_leaf(&self) -> usize {
        self.params.nodes_per_leaf
    }

    pub fn core_switches(&self) -> usize {
        self.params.core_switches
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn link(&self, id: LinkId) -> &Link {
        &self.links[id]
    }

    pub fn reverse(&self, id: LinkId) -> LinkId {
        id ^ 1
    }

    pub fn leaf_of(&self, node: NodeId) -> usize {
        node / self.params.nodes_per_leaf
    }

    pub fn uplink(&self, node: NodeId) -> LinkId {
        2 * node
    }

    pub fn downlink(&self, node: NodeId) -> LinkId {
        2 * node + 1
    }

    pub fn leaf_to_core(&self, leaf: usize, core: usize) -> LinkId {
        2 * self.nodes + 2 * (leaf * self.params.core_switches + core)
    }

    pub fn core_to_leaf(&self, core: usize, leaf: usize) -> LinkId {
        self.leaf_to_core(leaf, core) + 1
    }

    pub fn check_node(&self, node: NodeId) -> Result<(), TopologyError> {
        if node < self.nodes {
            Ok(())
        } else {
            Err(TopologyError::UnknownNode {
                node,
                nodes: self.nodes,
            })
        }
    }

    /// Deterministic unicast path. Co-located nodes use their shared leaf
    /// switch; otherwise the path crosses core `(src + dst) mod C`.
    pub fn route_unicast(&self, src: NodeId, dst: NodeId) -> Result<Vec<LinkId>, TopologyError> {
        self.check_node(src)?;
        self.check_node(dst)?;
        if src == dst {
            return Err(TopologyError::SelfRoute(src));
        }
        let (ls, ld) = (self.leaf_of(src), self.leaf_of(dst));
        if ls == ld {
            return Ok(vec![self.uplink(src), self.downlink(dst)]);
        }
        let core = (src + dst) % self.params.core_switches;
        Ok(vec![
            self.uplink(src),
            self.leaf_to_core(ls, core),
            self.core_to_leaf(core, ld),
            self.downlink(dst),
        ])
    }

    /// Distribution tree for one subgroup: up from the root's leaf switch to
    /// core `subgroup mod C`, down to every other leaf hosting members, then
    /// down to each member. Groups confined to the root's leaf never touch a
    /// core switch.
    pub fn compute_multicast_tree(
        &self,
        root: NodeId,
        members: &BTreeSet<NodeId>,
        subgroup: u32,
    ) -> Result<MulticastTree, TopologyError> {
        if members.is_empty() {
            return Err(TopologyError::NoMembers);
        }
        for &m in members {
            self.check_node(m)?;
        }
        self.check_node(root)?;
        if !members.contains(&root) {
            return Err(TopologyError::RootNotMember(root));
        }

        let mut tree = MulticastTree {
            subgroup,
            root,
            members: members.clone(),
            links: Vec::new(),
            member_links: BTreeMap::new(),
        };
        let receivers: Vec<NodeId> = members.iter().copied().filter(|&m| m != root).collect();
        if receivers.is_empty() {
            return Ok(tree);
        }

        let root_leaf = self.leaf_of(root);
        tree.links.push(TreeLink {
            link: self.uplink(root),
            parent: None,
        });
        let remote_leaves: BTreeSet<usize> = receivers
            .iter()
            .map(|&m| self.leaf_of(m))
            .filter(|&l| l != root_leaf)
            .collect();
        let mut leaf_entry: BTreeMap<usize, usize> = BTreeMap::new();
        leaf_entry.insert(root_leaf, 0);
        if !remote_leaves.is_empty() {
            let core = subgroup as usize % self.params.core_switches;
            tree.links.push(TreeLink {
                link: self.leaf_to_core(root_leaf, core),
                parent: Some(0),
            });
            for &leaf in &remote_leaves {
                leaf_entry.insert(leaf, tree.links.len());
                tree.links.push(TreeLink {
                    link: self.core_to_leaf(core, leaf),
                    parent: Some(1),
                });
            }
        }
        for &m in &receivers {
            let parent = leaf_entry[&self.leaf_of(m)];
            tree.member_links.insert(m, tree.links.len());
            tree.links.push(TreeLink {
                link: self.downlink(m),
                parent: Some(parent),
            });
        }
        Ok(tree)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeLink {
    pub link: LinkId,
    /// Index (into [`MulticastTree::links`]) of the link feeding this one.
    pub parent: Option<usize>,
}

/// The directed links one subgroup's datagrams fan out over, parents always
/// listed before their children.
#[derive(Debug, Clone, PartialEq)]
pub struct MulticastTree {
    pub subgroup: u32,
    pub root: NodeId,
    pub members: BTreeSet<NodeId>,
    pub links: Vec<TreeLink>,
    /// Receiving member → index of its final downlink.
    pub member_links: BTreeMap<NodeId, usize>,
}

impl MulticastTree {
    pub fn link_ids(&self) -> impl Iterator<Item = LinkId> + '_ {
        self.links.iter().map(|l| l.link)
    }

    /// Link indices from the root down to `member`'s final downlink.
    pub fn path_to(&self, member: NodeId) -> Option<Vec<usize>> {
        let mut idx = *self.member_links.get(&member)?;
        let mut path = vec![idx];
        while let Some(p) = self.links[idx].parent {
            path.push(p);
            idx = p;
        }
        path.reverse();
        Some(path)
    }
}

/// Which counter a transfer is charged to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrafficClass {
    /// Fast-path data, attributed to the rank whose buffer it came from.
    Payload { owner: u32 },
    /// Data moved by the reliability layer.
    Recovery,
    /// Barrier, fetch, ACK, final and activation messages, read requests.
    Control,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LinkCounters {
    pub payload: u64,
    pub recovery: u64,
    pub control: u64,
    /// Fixed per-packet header overhead, when configured.
    pub header: u64,
}

impl LinkCounters {
    pub fn total(&self) -> u64 {
        self.payload + self.recovery + self.control + self.header
    }
}

/// Per-directed-link byte counters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficLedger {
    links: Vec<LinkCounters>,
    attribution: BTreeMap<(LinkId, u32), u64>,
}

impl TrafficLedger {
    pub fn new(link_count: usize) -> Self {
        TrafficLedger {
            links: vec![LinkCounters::default(); link_count],
            attribution: BTreeMap::new(),
        }
    }

    pub fn charge(&mut self, link: LinkId, class: TrafficClass, bytes: u64) {
        let c = &mut self.links[link];
        match class {
            TrafficClass::Payload { owner } => {
                c.payload += bytes;
                *self.attribution.entry((link, owner)).or_default() += bytes;
            }
            TrafficClass::Recovery => c.recovery += bytes,
            TrafficClass::Control => c.control += bytes,
        }
    }

    pub fn charge_header(&mut self, link: LinkId, bytes: u64) {
        self.links[link].header += bytes;
    }

    pub fn link(&self, link: LinkId) -> &LinkCounters {
        &self.links[link]
    }

    pub fn links(&self) -> &[LinkCounters] {
        &self.links
    }

    /// Fast-path payload bytes of `owner`'s buffer carried by `link`.
    pub fn attributed(&self, link: LinkId, owner: u32) -> u64 {
        self.attribution.get(&(link, owner)).copied().unwrap_or(0)
    }

    pub fn attributions(&self) -> impl Iterator<Item = ((LinkId, u32), u64)> + '_ {
        self.attribution.iter().map(|(k, v)| (*k, *v))
    }

    /// Largest per-link byte count attributed to any single owner.
    pub fn max_attributed(&self) -> u64 {
        self.attribution.values().copied().max().unwrap_or(0)
    }

    pub fn payload_total(&self) -> u64 {
        self.links.iter().map(|c| c.payload).sum()
    }

    pub fn recovery_total(&self) -> u64 {
        self.links.iter().map(|c| c.recovery).sum()
    }

    pub fn control_total(&self) -> u64 {
        self.links.iter().map(|c| c.control).sum()
    }

    pub fn header_total(&self) -> u64 {
        self.links.iter().map(|c| c.header).sum()
    }

    /// Data bytes on all links: fast-path payload plus recovery payload.
    pub fn data_total(&self) -> u64 {
        self.payload_total() + self.recovery_total()
    }

    /// Everything that crossed a link, control and headers included.
    pub fn total(&self) -> u64 {
        self.links.iter().map(LinkCounters::total).sum()
    }

    /// Writes `link_id,src,dst,payload_bytes,recovery_bytes,control_bytes`
    /// rows, one per directed link.
    pub fn write_csv<W: io::Write>(&self, topology: &Topology, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "link_id",
            "src",
            "dst",
            "payload_bytes",
            "recovery_bytes",
            "control_bytes",
        ])?;
        for (id, c) in self.links.iter().enumerate() {
            let link = topology.link(id);
            w.write_record([
                id.to_string(),
                link.src.to_string(),
                link.dst.to_string(),
                c.payload.to_string(),
                c.recovery.to_string(),
                c.control.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clos_4x4x2() -> Topology {
        build_clos(4, 4, 2, 25e9, 1e-6).unwrap()
    }

    fn all(n: usize) -> BTreeSet<NodeId> {
        (0..n).collect()
    }

    #[test]
    fn link_count_matches_construction_formula() {
        let t = clos_4x4x2();
        assert_eq!(t.node_count(), 16);
        // 2(L·p + L·c)
        assert_eq!(t.links().len(), 2 * (16 + 8));
        assert_eq!(t.links().len(), 48);
    }

    #[test]
    fn minimal_topology() {
        let t = build_clos(1, 2, 1, 1e9, 0.0).unwrap();
        assert_eq!(t.node_count(), 2);
        assert_eq!(t.links().len(), 6);
        assert_eq!(t.route_unicast(0, 1).unwrap().len(), 2);
    }

    #[test]
    fn zero_and_overflowing_counts_rejected() {
        assert_eq!(
            build_clos(0, 4, 2, 1e9, 0.0),
            Err(TopologyError::ZeroCount("leaf_switches"))
        );
        assert!(build_clos(4, 0, 2, 1e9, 0.0).is_err());
        assert!(build_clos(4, 4, 0, 1e9, 0.0).is_err());
        assert_eq!(
            build_clos(usize::MAX, 2, 1, 1e9, 0.0),
            Err(TopologyError::Overflow)
        );
        assert!(build_clos(2, 2, 1, 0.0, 0.0).is_err());
        assert!(build_clos(2, 2, 1, 1e9, f64::NAN).is_err());
    }

    #[test]
    fn every_link_has_a_reverse_and_unique_id() {
        let t = clos_4x4x2();
        for (i, l) in t.links().iter().enumerate() {
            assert_eq!(l.id, i);
            let r = t.link(t.reverse(i));
            assert_eq!((r.src, r.dst), (l.dst, l.src));
        }
        // every leaf reaches every core
        for leaf in 0..4 {
            for core in 0..2 {
                let l = t.link(t.leaf_to_core(leaf, core));
                assert_eq!((l.src, l.dst), (Vertex::Leaf(leaf), Vertex::Core(core)));
            }
        }
    }

    #[test]
    fn full_group_tree_has_twenty_links() {
        let t = clos_4x4x2();
        let tree = t.compute_multicast_tree(0, &all(16), 0).unwrap();
        // root uplink + leaf→core + 3 core→leaf + 15 node downlinks
        assert_eq!(tree.links.len(), 1 + 1 + 3 + 15);
        assert_eq!(tree.member_links.len(), 15);
    }

    #[test]
    fn singleton_group_has_no_links() {
        let t = clos_4x4x2();
        let tree = t
            .compute_multicast_tree(3, &BTreeSet::from([3]), 0)
            .unwrap();
        assert!(tree.links.is_empty());
    }

    #[test]
    fn local_group_avoids_core() {
        let t = clos_4x4x2();
        let tree = t
            .compute_multicast_tree(0, &BTreeSet::from([0, 1, 2, 3]), 1)
            .unwrap();
        assert_eq!(tree.links.len(), 4);
        for id in tree.link_ids() {
            let l = t.link(id);
            assert!(!matches!(l.dst, Vertex::Core(_)));
        }
    }

    #[test]
    fn subgroups_differ_only_in_core_choice() {
        let t = clos_4x4x2();
        let a = t.compute_multicast_tree(0, &all(16), 0).unwrap();
        let b = t.compute_multicast_tree(0, &all(16), 1).unwrap();
        assert_eq!(a.links.len(), b.links.len());
        let mut differing = 0;
        for (x, y) in a.links.iter().zip(&b.links) {
            if x.link != y.link {
                differing += 1;
                let (lx, ly) = (t.link(x.link), t.link(y.link));
                let core_of = |l: &Link| match (l.src, l.dst) {
                    (Vertex::Core(c), _) | (_, Vertex::Core(c)) => Some(c),
                    _ => None,
                };
                assert_eq!(core_of(lx), Some(0));
                assert_eq!(core_of(ly), Some(1));
            }
        }
        assert_eq!(differing, 4);
    }

    #[test]
    fn tree_rejects_bad_input() {
        let t = clos_4x4x2();
        assert_eq!(
            t.compute_multicast_tree(0, &BTreeSet::new(), 0),
            Err(TopologyError::NoMembers)
        );
        assert_eq!(
            t.compute_multicast_tree(0, &BTreeSet::from([1, 2]), 0),
            Err(TopologyError::RootNotMember(0))
        );
        assert!(matches!(
            t.compute_multicast_tree(0, &BTreeSet::from([0, 99]), 0),
            Err(TopologyError::UnknownNode { node: 99, .. })
        ));
    }

    #[test]
    fn unicast_routes() {
        let t = clos_4x4x2();
        assert_eq!(t.route_unicast(0, 1).unwrap().len(), 2);
        let p = t.route_unicast(0, 15).unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(p[0], t.uplink(0));
        assert_eq!(p[3], t.downlink(15));
        // core (0 + 15) mod 2 = 1
        assert_eq!(p[1], t.leaf_to_core(0, 1));
        assert_eq!(t.route_unicast(15, 0).unwrap().len(), 4);
        assert_eq!(t.route_unicast(3, 3), Err(TopologyError::SelfRoute(3)));
        assert!(t.route_unicast(0, 16).is_err());
    }

    #[test]
    fn route_endpoints_are_consistent() {
        let t = clos_4x4x2();
        for s in 0..16 {
            for d in 0..16 {
                if s == d {
                    continue;
                }
                let path = t.route_unicast(s, d).unwrap();
                assert_eq!(path, t.route_unicast(s, d).unwrap());
                assert_eq!(t.link(path[0]).src, Vertex::Node(s));
                assert_eq!(t.link(*path.last().unwrap()).dst, Vertex::Node(d));
                for w in path.windows(2) {
                    assert_eq!(t.link(w[0]).dst, t.link(w[1]).src);
                }
            }
        }
    }

    #[test]
    fn topology_json_round_trip() {
        let t = clos_4x4x2();
        let json = serde_json::to_string(&t).unwrap();
        assert!(json.contains("\"leaf_switches\":4"));
        let back: Topology = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
        assert!(serde_json::from_str::<Topology>(
            r#"{"leaf_switches":0,"nodes_per_leaf":1,"core_switches":1,"link_bandwidth":1.0,"hop_latency":0.0}"#
        )
        .is_err());
    }

    #[test]
    fn ledger_counts_and_csv() {
        let t = build_clos(1, 2, 1, 1e9, 0.0).unwrap();
        let mut ledger = TrafficLedger::new(t.links().len());
        ledger.charge(0, TrafficClass::Payload { owner: 0 }, 100);
        ledger.charge(0, TrafficClass::Recovery, 10);
        ledger.charge(3, TrafficClass::Control, 1);
        ledger.charge_header(0, 5);
        assert_eq!(ledger.attributed(0, 0), 100);
        assert_eq!(ledger.attributed(0, 1), 0);
        assert_eq!(ledger.data_total(), 110);
        assert_eq!(ledger.total(), 116);
        assert_eq!(
            ledger.total(),
            ledger.links().iter().map(LinkCounters::total).sum::<u64>()
        );
        let mut out = Vec::new();
        ledger.write_csv(&t, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "link_id,src,dst,payload_bytes,recovery_bytes,control_bytes"
        );
        assert_eq!(lines.next().unwrap(), "0,node0,leaf0,100,10,0");
        assert_eq!(text.lines().count(), 1 + 6);
    }
}
