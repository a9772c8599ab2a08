//! Endpoint wrappers over the fabric for the three transports: UD
//! (MTU-sized multicast datagrams), UC (multi-packet multicast writes,
//! optional) and RC (reliable point-to-point messages and RDMA reads).

use std::collections::BTreeSet;

use bytes::Bytes;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fabric::{Datagram, Delivery, FabricError, MulticastReport, Network, UcWrite};
use crate::topology::{MulticastTree, NodeId, TrafficClass};

#[derive(Debug, Error, PartialEq)]
pub enum TransportError {
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error("payload of {size} bytes exceeds the {mtu}-byte MTU")]
    PayloadTooLarge { size: usize, mtu: usize },
    #[error("empty payload")]
    EmptyPayload,
    #[error("endpoint on node {node} is not attached to subgroup {subgroup}")]
    Unattached { node: NodeId, subgroup: u32 },
    #[error("PSN {psn} does not fit in {bits} bits")]
    PsnOutOfRange { psn: u64, bits: u32 },
    #[error("collective ID {id} does not fit in {bits} bits")]
    IdOutOfRange { id: u32, bits: u32 },
    #[error("immediate layout must split exactly 32 bits with a non-empty PSN field, got {psn_bits}+{collective_id_bits}")]
    InvalidLayout { psn_bits: u32, collective_id_bits: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    Ud,
    Uc,
}

/// How the 32-bit immediate is split between packet sequence number (low
/// bits) and collective ID (high bits).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImmediateLayout {
    pub psn_bits: u32,
    pub collective_id_bits: u32,
}

impl Default for ImmediateLayout {
    fn default() -> Self {
        ImmediateLayout {
            psn_bits: 24,
            collective_id_bits: 8,
        }
    }
}

impl ImmediateLayout {
    pub fn validate(&self) -> Result<(), TransportError> {
        if self.psn_bits == 0 || self.psn_bits + self.collective_id_bits != 32 {
            return Err(TransportError::InvalidLayout {
                psn_bits: self.psn_bits,
                collective_id_bits: self.collective_id_bits,
            });
        }
        Ok(())
    }

    /// Number of distinct PSNs, i.e. chunks addressable per buffer.
    pub fn psn_space(&self) -> u64 {
        1u64 << self.psn_bits
    }

    pub fn encode(&self, psn: u64, collective_id: u32) -> Result<u32, TransportError> {
        if psn >= self.psn_space() {
            return Err(TransportError::PsnOutOfRange {
                psn,
                bits: self.psn_bits,
            });
        }
        if (collective_id as u64) >= 1u64 << self.collective_id_bits {
            return Err(TransportError::IdOutOfRange {
                id: collective_id,
                bits: self.collective_id_bits,
            });
        }
        Ok((((collective_id as u64) << self.psn_bits) | psn) as u32)
    }

    /// Returns `(psn, collective_id)`.
    pub fn decode(&self, immediate: u32) -> (u32, u32) {
        let imm = immediate as u64;
        let psn = imm & (self.psn_space() - 1);
        ((psn) as u32, (imm >> self.psn_bits) as u32)
    }
}

/// A UD queue pair joined to a set of multicast subgroups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UdEndpoint {
    pub node: NodeId,
    subgroups: BTreeSet<u32>,
}

impl UdEndpoint {
    /// Joins `subgroups`, creating an (empty) receive queue for each.
    pub fn attach<M>(
        net: &mut Network<M>,
        node: NodeId,
        subgroups: impl IntoIterator<Item = u32>,
    ) -> Result<Self, TransportError> {
        let subgroups: BTreeSet<u32> = subgroups.into_iter().collect();
        for &s in &subgroups {
            net.create_queue(node, s)?;
        }
        Ok(UdEndpoint { node, subgroups })
    }

    pub fn subgroups(&self) -> &BTreeSet<u32> {
        &self.subgroups
    }

    pub fn ud_send<M>(
        &self,
        net: &mut Network<M>,
        tree: &MulticastTree,
        payload: Bytes,
        immediate: u32,
        owner: u32,
    ) -> Result<MulticastReport, TransportError> {
        if !self.subgroups.contains(&tree.subgroup) {
            return Err(TransportError::Unattached {
                node: self.node,
                subgroup: tree.subgroup,
            });
        }
        let mtu = net.config().mtu;
        if payload.is_empty() {
            return Err(TransportError::EmptyPayload);
        }
        if payload.len() > mtu {
            return Err(TransportError::PayloadTooLarge {
                size: payload.len(),
                mtu,
            });
        }
        let datagram = Datagram {
            flow: tree.subgroup,
            source: self.node,
            immediate,
            payload,
            owner,
        };
        Ok(net.multicast_send(tree, datagram)?)
    }
}

/// A UC queue pair joined to multicast subgroups (optional extension).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UcEndpoint {
    pub node: NodeId,
    subgroups: BTreeSet<u32>,
}

impl UcEndpoint {
    pub fn attach<M>(
        net: &mut Network<M>,
        node: NodeId,
        subgroups: impl IntoIterator<Item = u32>,
    ) -> Result<Self, TransportError> {
        if !net.config().uc_multicast {
            return Err(FabricError::UcMulticastDisabled.into());
        }
        let subgroups: BTreeSet<u32> = subgroups.into_iter().collect();
        for &s in &subgroups {
            net.create_queue(node, s)?;
        }
        Ok(UcEndpoint { node, subgroups })
    }

    pub fn subgroups(&self) -> &BTreeSet<u32> {
        &self.subgroups
    }

    pub fn uc_write_with_imm<M>(
        &self,
        net: &mut Network<M>,
        tree: &MulticastTree,
        dest_offset: usize,
        message: Bytes,
        immediate: u32,
        owner: u32,
    ) -> Result<MulticastReport, TransportError> {
        if !self.subgroups.contains(&tree.subgroup) {
            return Err(TransportError::Unattached {
                node: self.node,
                subgroup: tree.subgroup,
            });
        }
        if message.is_empty() {
            return Err(TransportError::EmptyPayload);
        }
        let write = UcWrite {
            flow: tree.subgroup,
            source: self.node,
            immediate,
            offset: dest_offset,
            payload: message,
            owner,
        };
        Ok(net.multicast_write(tree, write)?)
    }
}

/// One side of a reliable connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RcEndpoint {
    pub node: NodeId,
    pub peer: NodeId,
}

impl RcEndpoint {
    pub fn new(node: NodeId, peer: NodeId) -> Self {
        RcEndpoint { node, peer }
    }

    pub fn send<M>(
        &self,
        net: &mut Network<M>,
        size: u64,
        class: TrafficClass,
        body: M,
    ) -> Result<(), TransportError> {
        net.unicast_send(self.node, self.peer, size, Delivery::Reliable, class, body)?;
        Ok(())
    }

    /// Reads `data` (a slice of the peer's registered memory) into this node.
    pub fn rdma_read<M>(&self, net: &mut Network<M>, data: Bytes, tag: M) -> Result<(), TransportError> {
        net.rdma_read(self.node, self.peer, data, tag)?;
        Ok(())
    }
}

/// The two RC connections each rank keeps: to its left and right ring
/// neighbours.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RingLinks {
    pub left: RcEndpoint,
    pub right: RcEndpoint,
}

impl RingLinks {
    pub fn new(rank: NodeId, p: usize) -> Self {
        RingLinks {
            left: RcEndpoint::new(rank, (rank + p - 1) % p),
            right: RcEndpoint::new(rank, (rank + 1) % p),
        }
    }
}
