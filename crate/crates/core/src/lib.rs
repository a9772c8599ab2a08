//! Reliable multicast Broadcast and bandwidth-optimal Allgather on a
//! simulated two-level Clos fabric, with point-to-point baselines, a
//! per-link traffic ledger and closed-form cost models.

pub mod allgather;
pub mod analysis;
pub mod baselines;
pub mod broadcast;
pub mod collective;
pub mod fabric;
pub mod harness;
pub mod topology;
pub mod transport;

pub use allgather::{allgather, build_schedule, map_blocks, verify_allgather, AllgatherConfig};
pub use broadcast::{broadcast, seeded_buffer, BroadcastConfig};
pub use collective::{CollectiveError, CollectiveOutcome, CollectiveStats};
pub use fabric::{FabricConfig, FaultModel};
pub use topology::{build_clos, ClosParams, Topology};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/topology.md")]
    mod topology {}
    #[doc = include_str!("../../../book/src/fabric.md")]
    mod fabric {}
    #[doc = include_str!("../../../book/src/transport.md")]
    mod transport {}
    #[doc = include_str!("../../../book/src/broadcast.md")]
    mod broadcast {}
    #[doc = include_str!("../../../book/src/allgather.md")]
    mod allgather {}
    #[doc = include_str!("../../../book/src/baselines.md")]
    mod baselines {}
    #[doc = include_str!("../../../book/src/analysis.md")]
    mod analysis {}
    #[doc = include_str!("../../../book/src/harness.md")]
    mod harness {}
}
