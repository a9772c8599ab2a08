//! Point-to-point reference collectives over the reliable transport: ring
//! and linear Allgather, binary-tree and k-nomial Broadcast.

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use crate::collective::{idle_outcome, ledger_stats, CollectiveError, CollectiveOutcome, RankResult};
use crate::fabric::{Event, FabricConfig, Network, Protocol};
use crate::topology::{Topology, TrafficClass};
use crate::transport::RcEndpoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum P2PAlgorithm {
    RingAllgather,
    LinearAllgather,
    BinaryTreeBcast { root: usize },
    KnomialBcast { root: usize, radix: usize },
}

impl P2PAlgorithm {
    pub fn is_allgather(&self) -> bool {
        matches!(self, P2PAlgorithm::RingAllgather | P2PAlgorithm::LinearAllgather)
    }
}

/// Children of relative rank `rel` in a binary tree over `p` ranks.
pub fn binary_children(rel: usize, p: usize) -> Vec<usize> {
    [2 * rel + 1, 2 * rel + 2].into_iter().filter(|&c| c < p).collect()
}

/// Children of relative rank `rel` in a k-nomial tree over `p` ranks,
/// largest subtree first.
pub fn knomial_children(rel: usize, p: usize, k: usize) -> Vec<usize> {
    assert!(k >= 2, "k-nomial radix must be at least 2");
    // rel owns the digit positions below its lowest nonzero base-k digit
    let mut span = 1usize;
    while span < p && (rel == 0 || rel.is_multiple_of(span * k)) {
        span *= k;
    }
    let mut out = Vec::new();
    let mut stride = span / k;
    while stride >= 1 {
        for i in (1..k).rev() {
            let c = rel + i * stride;
            if c < p {
                out.push(c);
            }
        }
        stride /= k;
    }
    out.sort_by_key(|&c| std::cmp::Reverse(c - rel));
    out
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    index: usize,
    data: Bytes,
}

struct P2P {
    algorithm: P2PAlgorithm,
    p: usize,
    n: usize,
    buffers: Vec<Vec<u8>>,
    have: Vec<Vec<bool>>,
    forwarded: Vec<usize>,
    done_at: Vec<f64>,
    errors: Vec<String>,
}

impl P2P {
    fn send(&mut self, net: &mut Network<Block>, from: usize, to: usize, index: usize) {
        let data = Bytes::copy_from_slice(&self.buffers[from][self.range(index)]);
        let owner = index as u32;
        let owner = match self.algorithm {
            P2PAlgorithm::BinaryTreeBcast { root } | P2PAlgorithm::KnomialBcast { root, .. } => root as u32,
            _ => owner,
        };
        let r = RcEndpoint::new(from, to).send(
            net,
            self.n as u64,
            TrafficClass::Payload { owner },
            Block { index, data },
        );
        if let Err(e) = r {
            self.errors.push(e.to_string());
        }
    }

    fn range(&self, index: usize) -> std::ops::Range<usize> {
        index * self.n..(index + 1) * self.n
    }

    fn children(&self, rank: usize) -> Vec<usize> {
        let (root, kids) = match self.algorithm {
            P2PAlgorithm::BinaryTreeBcast { root } => {
                (root, binary_children((rank + self.p - root) % self.p, self.p))
            }
            P2PAlgorithm::KnomialBcast { root, radix } => (
                root,
                knomial_children((rank + self.p - root) % self.p, self.p, radix),
            ),
            _ => return Vec::new(),
        };
        kids.into_iter().map(|c| (c + root) % self.p).collect()
    }

    fn start(&mut self, net: &mut Network<Block>) {
        match self.algorithm {
            P2PAlgorithm::RingAllgather => {
                for r in 0..self.p {
                    self.forwarded[r] += 1;
                    self.send(net, r, (r + 1) % self.p, r);
                }
            }
            P2PAlgorithm::LinearAllgather => {
                for d in 1..self.p {
                    for r in 0..self.p {
                        self.send(net, r, (r + d) % self.p, r);
                    }
                }
            }
            P2PAlgorithm::BinaryTreeBcast { root } | P2PAlgorithm::KnomialBcast { root, .. } => {
                for c in self.children(root) {
                    self.send(net, root, c, 0);
                }
            }
        }
    }
}

impl Protocol<Block> for P2P {
    fn handle(&mut self, net: &mut Network<Block>, event: Event<Block>) {
        let Event::Message { node, body, .. } = event else {
            self.errors.push(format!("unexpected event {event:?}"));
            return;
        };
        let range = self.range(body.index);
        self.buffers[node][range].copy_from_slice(&body.data);
        if std::mem::replace(&mut self.have[node][body.index], true) {
            self.errors.push(format!("rank {node} got block {} twice", body.index));
        }
        self.done_at[node] = net.now();
        match self.algorithm {
            P2PAlgorithm::RingAllgather => {
                if self.forwarded[node] < self.p - 1 {
                    self.forwarded[node] += 1;
                    self.send(net, node, (node + 1) % self.p, body.index);
                }
            }
            P2PAlgorithm::LinearAllgather => {}
            _ => {
                for c in self.children(node) {
                    self.send(net, node, c, 0);
                }
            }
        }
    }
}

/// Runs a baseline. Allgathers take one `N`-byte input per rank; broadcasts
/// take the root's buffer as the only input.
pub fn run_p2p(
    algorithm: P2PAlgorithm,
    participants: usize,
    fabric: FabricConfig,
    topology: Topology,
    inputs: Vec<Bytes>,
) -> Result<CollectiveOutcome, CollectiveError> {
    let p = participants;
    if p == 0 || p > topology.node_count() {
        return Err(CollectiveError::Config(format!(
            "{p} participants on a {}-node topology",
            topology.node_count()
        )));
    }
    let n = inputs.first().map_or(0, Bytes::len);
    if n == 0 || inputs.iter().any(|b| b.len() != n) {
        return Err(CollectiveError::Config("inputs must be non-empty and equally sized".into()));
    }
    let blocks = if algorithm.is_allgather() { p } else { 1 };
    if inputs.len() != blocks {
        return Err(CollectiveError::Config(format!(
            "{algorithm:?} needs {blocks} inputs, got {}",
            inputs.len()
        )));
    }
    let root = match algorithm {
        P2PAlgorithm::BinaryTreeBcast { root } => Some(root),
        P2PAlgorithm::KnomialBcast { root, radix } => {
            if radix < 2 {
                return Err(CollectiveError::Config(format!("k-nomial radix {radix} < 2")));
            }
            Some(root)
        }
        _ => None,
    };
    if root.is_some_and(|r| r >= p) {
        return Err(CollectiveError::Config(format!("root outside 0..{p}")));
    }
    let mut buffers = vec![vec![0u8; n * blocks]; p];
    let mut have = vec![vec![false; blocks]; p];
    match root {
        Some(r) => {
            buffers[r].copy_from_slice(&inputs[0]);
            have[r][0] = true;
        }
        None => {
            for (r, input) in inputs.iter().enumerate() {
                buffers[r][r * n..(r + 1) * n].copy_from_slice(input);
                have[r][r] = true;
            }
        }
    }
    if p == 1 {
        return idle_outcome(buffers.pop().expect("one rank"), topology, fabric);
    }
    let record = fabric.record_trace;
    let mut net: Network<Block> = Network::new(topology, fabric)?;
    let mut proto = P2P {
        algorithm,
        p,
        n,
        buffers,
        have,
        forwarded: vec![0; p],
        done_at: vec![0.0; p],
        errors: Vec::new(),
    };
    proto.start(&mut net);
    net.run(&mut proto);
    if let Some((rank, _)) = proto
        .have
        .iter()
        .enumerate()
        .find(|(_, h)| h.iter().any(|&x| !x))
    {
        proto.errors.push(format!("rank {rank} never received all blocks"));
    }
    if let Some(e) = proto.errors.first() {
        return Err(CollectiveError::Invariant(e.clone()));
    }
    let stats = crate::collective::CollectiveStats {
        completion_time: proto.done_at.iter().copied().fold(0.0, f64::max),
        control_messages: 0,
        ..ledger_stats(&net, p)
    };
    let ranks = proto
        .buffers
        .into_iter()
        .enumerate()
        .map(|(rank, buffer)| RankResult {
            rank,
            buffer,
            done_at: proto.done_at[rank],
            recovery_depth: 0,
            recovered_chunks: 0,
            late_datagrams: 0,
        })
        .collect();
    Ok(CollectiveOutcome {
        ranks,
        stats,
        ledger: net.ledger().clone(),
        root_windows: Vec::new(),
        trace: record.then(|| net.trace_lines().unwrap_or_default().to_vec()),
    })
}

pub fn ring_allgather(
    fabric: FabricConfig,
    topology: Topology,
    inputs: Vec<Bytes>,
) -> Result<CollectiveOutcome, CollectiveError> {
    let p = inputs.len();
    run_p2p(P2PAlgorithm::RingAllgather, p, fabric, topology, inputs)
}

pub fn linear_allgather(
    fabric: FabricConfig,
    topology: Topology,
    inputs: Vec<Bytes>,
) -> Result<CollectiveOutcome, CollectiveError> {
    let p = inputs.len();
    run_p2p(P2PAlgorithm::LinearAllgather, p, fabric, topology, inputs)
}

pub fn binary_tree_bcast(
    root: usize,
    participants: usize,
    fabric: FabricConfig,
    topology: Topology,
    data: Bytes,
) -> Result<CollectiveOutcome, CollectiveError> {
    run_p2p(P2PAlgorithm::BinaryTreeBcast { root }, participants, fabric, topology, vec![data])
}

pub fn knomial_bcast(
    root: usize,
    radix: usize,
    participants: usize,
    fabric: FabricConfig,
    topology: Topology,
    data: Bytes,
) -> Result<CollectiveOutcome, CollectiveError> {
    run_p2p(
        P2PAlgorithm::KnomialBcast { root, radix },
        participants,
        fabric,
        topology,
        vec![data],
    )
}
