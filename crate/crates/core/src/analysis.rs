//! Closed-form cost models: bandwidth shares, the multicast + in-network
//! reduction speedup, traffic on a two-level Clos, and memory footprints.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Single-thread receive throughput of the UD datapath, GiB/s.
pub const UD_SINGLE_THREAD_GIBPS: f64 = 5.2;
/// Single-thread receive throughput of the UC datapath, GiB/s.
pub const UC_SINGLE_THREAD_GIBPS: f64 = 11.9;
/// 200 Gbit/s line rate in GiB/s.
pub const LINE_RATE_200G_GIBPS: f64 = 23.28;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("PSN field of {0} bits does not fit a 32-bit immediate")]
    PsnBits(u32),
}

/// Fractions of NIC bandwidth available to each direction of an
/// Allgather / Reduce-Scatter pair running side by side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BandwidthShares {
    pub allgather_send: f64,
    pub allgather_recv: f64,
    pub reduce_scatter_send: f64,
    pub reduce_scatter_recv: f64,
}

/// Ring Allgather next to ring Reduce-Scatter: every direction split evenly.
pub fn bandwidth_shares_ring(p: usize) -> Result<BandwidthShares, AnalysisError> {
    positive(p as f64, "P")?;
    Ok(BandwidthShares {
        allgather_send: 0.5,
        allgather_recv: 0.5,
        reduce_scatter_send: 0.5,
        reduce_scatter_recv: 0.5,
    })
}

/// Multicast Allgather next to in-network Reduce-Scatter: the Allgather
/// sends one block while receiving `P-1`, the reduction does the opposite.
pub fn bandwidth_shares_mc_inc(p: usize) -> Result<BandwidthShares, AnalysisError> {
    positive(p as f64, "P")?;
    let small = 1.0 / p as f64;
    Ok(BandwidthShares {
        allgather_send: small,
        allgather_recv: 1.0 - small,
        reduce_scatter_send: 1.0 - small,
        reduce_scatter_recv: small,
    })
}

/// Speedup of multicast Allgather + in-network Reduce-Scatter over the ring
/// pair: `2 - 2/P`.
pub fn speedup_mc_inc(p: usize) -> Result<f64, AnalysisError> {
    positive(p as f64, "P")?;
    Ok(2.0 - 2.0 / p as f64)
}

/// Ring over multicast Allgather link traffic; the same `2 - 2/P`.
pub fn theoretical_traffic_ratio(p: usize) -> Result<f64, AnalysisError> {
    speedup_mc_inc(p)
}

/// Largest buffer the PSN field can address.
pub fn max_addressable_buffer(psn_bits: u32, mtu: u64) -> Result<u64, AnalysisError> {
    if psn_bits == 0 || psn_bits > 32 {
        return Err(AnalysisError::PsnBits(psn_bits));
    }
    positive(mtu as f64, "mtu")?;
    Ok((1u64 << psn_bits) * mtu)
}

/// Bitmap bytes needed to track `n` bytes in `chunk_size` chunks.
pub fn bitmap_bytes(n: u64, chunk_size: u64) -> Result<u64, AnalysisError> {
    positive(n as f64, "N")?;
    positive(chunk_size as f64, "chunk size")?;
    Ok(n.div_ceil(chunk_size).div_ceil(8))
}

/// Buffer bytes a bitmap of `bitmap_bytes` can track.
pub fn bitmap_addressable_bytes(bitmap_bytes: u64, chunk_size: u64) -> u64 {
    bitmap_bytes * 8 * chunk_size
}

pub fn staging_bytes(queue_depth: u64, mtu: u64) -> Result<u64, AnalysisError> {
    positive(queue_depth as f64, "queue depth")?;
    positive(mtu as f64, "mtu")?;
    Ok(queue_depth * mtu)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelAlgorithm {
    McBroadcast,
    McAllgather,
    RingAllgather,
}

/// Total link bytes on a two-level Clos with ranks placed contiguously,
/// `leaves` being the number of leaf switches hosting participants.
///
/// One multicast tree costs `P + L` links (root uplink, one leaf-to-core,
/// `L - 1` core-to-leaf, `P - 1` downlinks), or `P` when all ranks share a
/// leaf. An ascending ring step costs 2 links inside a leaf and 4 across,
/// with `L` crossings per step.
pub fn theoretical_link_bytes(
    algorithm: ModelAlgorithm,
    p: u64,
    n: u64,
    leaves: u64,
) -> Result<u64, AnalysisError> {
    positive(p as f64, "P")?;
    positive(n as f64, "N")?;
    positive(leaves as f64, "L")?;
    let l = if leaves > 1 { leaves } else { 0 };
    Ok(match algorithm {
        ModelAlgorithm::McBroadcast => n * (p + l),
        ModelAlgorithm::McAllgather => n * p * (p + l),
        ModelAlgorithm::RingAllgather => 2 * n * (p - 1) * (p + l),
    })
}

/// Lower bound on receive workers needed to sustain `target` throughput.
pub fn min_receive_workers(target: f64, single_thread: f64) -> Result<u32, AnalysisError> {
    positive(target, "target throughput")?;
    positive(single_thread, "single-thread throughput")?;
    // guard against 2.0000000001 style rounding
    Ok((target / single_thread - 1e-9).ceil().max(1.0) as u32)
}

fn positive(x: f64, what: &'static str) -> Result<(), AnalysisError> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(AnalysisError::NonPositive(what))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModelInputs {
    pub participants: u64,
    pub buffer_size: u64,
    /// Bytes per second in one NIC direction.
    pub nic_bandwidth: f64,
    pub leaf_switches: u64,
    pub nodes_per_leaf: u64,
    pub core_switches: u64,
    pub psn_bits: u32,
    pub mtu: u64,
    pub llc_bytes: u64,
    pub queue_depth: u64,
}

impl Default for CostModelInputs {
    fn default() -> Self {
        CostModelInputs {
            participants: 16,
            buffer_size: 64 * 1024,
            nic_bandwidth: 25e9,
            leaf_switches: 4,
            nodes_per_leaf: 4,
            core_switches: 2,
            psn_bits: 24,
            mtu: 4096,
            llc_bytes: 1_500_000,
            queue_depth: 8192,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelRow {
    pub quantity: &'static str,
    pub value: f64,
    pub unit: &'static str,
}

impl CostModelInputs {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        positive(self.participants as f64, "participants")?;
        positive(self.buffer_size as f64, "buffer_size")?;
        positive(self.nic_bandwidth, "nic_bandwidth")?;
        positive(self.leaf_switches as f64, "leaf_switches")?;
        positive(self.nodes_per_leaf as f64, "nodes_per_leaf")?;
        positive(self.core_switches as f64, "core_switches")?;
        positive(self.mtu as f64, "mtu")?;
        positive(self.llc_bytes as f64, "llc_bytes")?;
        positive(self.queue_depth as f64, "queue_depth")?;
        if self.psn_bits == 0 || self.psn_bits > 32 {
            return Err(AnalysisError::PsnBits(self.psn_bits));
        }
        Ok(())
    }

    /// Leaves occupied by `participants` ranks placed contiguously.
    pub fn occupied_leaves(&self) -> u64 {
        self.participants.div_ceil(self.nodes_per_leaf).min(self.leaf_switches)
    }

    /// Every model quantity for these inputs.
    pub fn table(&self) -> Result<Vec<ModelRow>, AnalysisError> {
        self.validate()?;
        let p = self.participants;
        let n = self.buffer_size;
        let l = self.occupied_leaves();
        let ring = bandwidth_shares_ring(p as usize)?;
        let mc = bandwidth_shares_mc_inc(p as usize)?;
        let mc_bytes = theoretical_link_bytes(ModelAlgorithm::McAllgather, p, n, l)?;
        let ring_bytes = theoretical_link_bytes(ModelAlgorithm::RingAllgather, p, n, l)?;
        let row = |quantity, value: f64, unit| ModelRow { quantity, value, unit };
        Ok(vec![
            row("speedup_mc_inc", speedup_mc_inc(p as usize)?, "x"),
            row("traffic_ratio_ring_over_mc", theoretical_traffic_ratio(p as usize)?, "x"),
            row("ring_share_per_direction", ring.allgather_send, "B_nic"),
            row("mc_allgather_send_share", mc.allgather_send, "B_nic"),
            row("mc_allgather_recv_share", mc.allgather_recv, "B_nic"),
            row("mc_allgather_link_bytes", mc_bytes as f64, "bytes"),
            row("ring_allgather_link_bytes", ring_bytes as f64, "bytes"),
            row("mc_allgather_send_bytes_per_rank", n as f64, "bytes"),
            row("ring_allgather_send_bytes_per_rank", (n * (p - 1)) as f64, "bytes"),
            row("recv_bytes_per_rank", (n * (p - 1)) as f64, "bytes"),
            row("ring_allgather_time", (n * (p - 1)) as f64 / (ring.allgather_send * self.nic_bandwidth), "s"),
            row("mc_allgather_time", (n * (p - 1)) as f64 / (mc.allgather_recv * self.nic_bandwidth), "s"),
            row("max_addressable_buffer", max_addressable_buffer(self.psn_bits, self.mtu)? as f64, "bytes"),
            row("bitmap_bytes_allgather", bitmap_bytes(n * p, self.mtu)? as f64, "bytes"),
            row("llc_bitmap_addressable", bitmap_addressable_bytes(self.llc_bytes, self.mtu) as f64, "bytes"),
            row("staging_bytes", staging_bytes(self.queue_depth, self.mtu)? as f64, "bytes"),
            row(
                "min_receive_workers_ud",
                min_receive_workers(LINE_RATE_200G_GIBPS, UD_SINGLE_THREAD_GIBPS)? as f64,
                "threads",
            ),
            row(
                "min_receive_workers_uc",
                min_receive_workers(LINE_RATE_200G_GIBPS, UC_SINGLE_THREAD_GIBPS)? as f64,
                "threads",
            ),
        ])
    }
}
