//! Experiment plumbing behind the `mcast` CLI: JSON configs, verified runs,
//! comparisons, parameter sweeps and CSV records.

use std::fmt;
use std::io;
use std::str::FromStr;
use std::time::Instant;

use bytes::Bytes;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::allgather::{allgather, verify_allgather, AllgatherConfig, ChainMapping};
use crate::analysis::{AnalysisError, CostModelInputs, ModelRow};
use crate::baselines::{run_p2p, P2PAlgorithm};
use crate::broadcast::{broadcast, seeded_buffer, BroadcastConfig};
use crate::collective::{CollectiveError, CollectiveOutcome};
use crate::fabric::{FabricConfig, FaultModel, ScriptedDrop};
use crate::topology::{ClosParams, Topology};
use crate::transport::{ImmediateLayout, TransportKind};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("internal invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<CollectiveError> for HarnessError {
    fn from(e: CollectiveError) -> Self {
        match e {
            CollectiveError::Invariant(s) => HarnessError::Invariant(s),
            other => HarnessError::Config(other.to_string()),
        }
    }
}

impl From<AnalysisError> for HarnessError {
    fn from(e: AnalysisError) -> Self {
        HarnessError::Config(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    McBroadcast,
    McAllgather,
    RingAllgather,
    LinearAllgather,
    BinaryTreeBcast,
    KnomialBcast,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::McBroadcast,
        Algorithm::McAllgather,
        Algorithm::RingAllgather,
        Algorithm::LinearAllgather,
        Algorithm::BinaryTreeBcast,
        Algorithm::KnomialBcast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::McBroadcast => "mc_broadcast",
            Algorithm::McAllgather => "mc_allgather",
            Algorithm::RingAllgather => "ring_allgather",
            Algorithm::LinearAllgather => "linear_allgather",
            Algorithm::BinaryTreeBcast => "binary_tree_bcast",
            Algorithm::KnomialBcast => "knomial_bcast",
        }
    }

    pub fn is_multicast(self) -> bool {
        matches!(self, Algorithm::McBroadcast | Algorithm::McAllgather)
    }

    pub fn is_allgather(self) -> bool {
        matches!(
            self,
            Algorithm::McAllgather | Algorithm::RingAllgather | Algorithm::LinearAllgather
        )
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown algorithm {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReorderConfig {
    pub probability: f64,
    pub max_displacement: u32,
}

impl Default for ReorderConfig {
    fn default() -> Self {
        ReorderConfig {
            probability: 0.0,
            max_displacement: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    pub topology: ClosParams,
    pub algorithm: Algorithm,
    pub processes: usize,
    pub buffer_size: usize,
    pub mtu: usize,
    pub subgroups: u32,
    /// Concurrent roots for `mc_allgather`.
    pub chains: usize,
    pub chain_mapping: ChainMapping,
    pub transport: TransportKind,
    pub uc_chunk_size: usize,
    pub uc_multicast: bool,
    pub drop_prob: f64,
    pub reorder: ReorderConfig,
    pub scripted_drops: Vec<ScriptedDrop>,
    pub alpha: Option<f64>,
    pub seed: u64,
    /// Iteration `i` runs with seed `seed + i`.
    pub iterations: u32,
    pub root: usize,
    pub knomial_radix: usize,
    pub header_bytes: u64,
    pub control_bytes: u64,
    pub queue_depth: u32,
    pub immediate: ImmediateLayout,
    pub rnr_barrier: bool,
    pub leaf_post_delay: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment_id: "default".into(),
            topology: ClosParams::default(),
            algorithm: Algorithm::McAllgather,
            processes: 16,
            buffer_size: 64 * 1024,
            mtu: 4096,
            subgroups: 1,
            chains: 1,
            chain_mapping: ChainMapping::Consecutive,
            transport: TransportKind::Ud,
            uc_chunk_size: 64 * 1024,
            uc_multicast: false,
            drop_prob: 0.0,
            reorder: ReorderConfig::default(),
            scripted_drops: Vec::new(),
            alpha: None,
            seed: 0,
            iterations: 1,
            root: 0,
            knomial_radix: 4,
            header_bytes: 0,
            control_bytes: 64,
            queue_depth: 8192,
            immediate: ImmediateLayout::default(),
            rnr_barrier: true,
            leaf_post_delay: 50e-6,
        }
    }
}

fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let config: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| config_err(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let topology = self.build_topology()?;
        let p = self.processes;
        if p == 0 || p > topology.node_count() {
            return Err(config_err(format!(
                "processes = {p} must be in 1..={} (leaf_switches × nodes_per_leaf)",
                topology.node_count()
            )));
        }
        if self.buffer_size == 0 {
            return Err(config_err("buffer_size must be positive"));
        }
        if self.mtu == 0 {
            return Err(config_err("mtu must be positive"));
        }
        if self.iterations == 0 {
            return Err(config_err("iterations must be at least 1"));
        }
        if self.queue_depth == 0 {
            return Err(config_err("queue_depth must be positive"));
        }
        if self.control_bytes == 0 {
            return Err(config_err("control_bytes must be positive"));
        }
        self.immediate
            .validate()
            .map_err(|e| config_err(e.to_string()))?;
        for (name, x) in [("drop_prob", self.drop_prob), ("reorder.probability", self.reorder.probability)] {
            if !(0.0..=1.0).contains(&x) {
                return Err(config_err(format!("{name} = {x} not in [0, 1]")));
            }
        }
        if self.reorder.probability > 0.0 && self.reorder.max_displacement == 0 {
            return Err(config_err("reorder.max_displacement must be >= 1"));
        }
        if self.alpha.is_some_and(|a| !(a >= 0.0)) {
            return Err(config_err("alpha must be >= 0"));
        }
        if !(self.leaf_post_delay >= 0.0) {
            return Err(config_err("leaf_post_delay must be >= 0"));
        }
        if !self.algorithm.is_allgather() && self.root >= p {
            return Err(config_err(format!("root {} outside 0..{p}", self.root)));
        }
        if self.algorithm == Algorithm::KnomialBcast && self.knomial_radix < 2 {
            return Err(config_err("knomial_radix must be at least 2"));
        }
        if self.algorithm.is_multicast() {
            if self.subgroups == 0 {
                return Err(config_err("subgroups must be at least 1"));
            }
            let chunk = match self.transport {
                TransportKind::Ud => self.mtu,
                TransportKind::Uc => {
                    if !self.uc_multicast {
                        return Err(config_err(
                            "transport \"uc\" needs uc_multicast = true (UC multicast is an optional extension)",
                        ));
                    }
                    if self.uc_chunk_size == 0 {
                        return Err(config_err("uc_chunk_size must be positive"));
                    }
                    self.uc_chunk_size
                }
            };
            let chunks = self.buffer_size.div_ceil(chunk) as u64;
            if self.subgroups as u64 > chunks {
                return Err(config_err(format!(
                    "subgroups = {} exceeds the {chunks} chunks of the buffer",
                    self.subgroups
                )));
            }
            if chunks > self.immediate.psn_space() {
                return Err(config_err(format!(
                    "{chunks} chunks exceed the {}-bit PSN space",
                    self.immediate.psn_bits
                )));
            }
        }
        if self.algorithm == Algorithm::McAllgather {
            self.allgather_config()
                .schedule(&topology)
                .map_err(|e| config_err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn build_topology(&self) -> Result<Topology, HarnessError> {
        Topology::from_params(self.topology).map_err(|e| config_err(e.to_string()))
    }

    pub fn fabric_config(&self, seed: u64, record_trace: bool) -> FabricConfig {
        FabricConfig {
            mtu: self.mtu,
            header_bytes: self.header_bytes,
            control_bytes: self.control_bytes,
            queue_depth: self.queue_depth,
            layout: self.immediate,
            faults: FaultModel {
                drop_prob: self.drop_prob,
                reorder_prob: self.reorder.probability,
                max_displacement: self.reorder.max_displacement,
                seed,
                scripted: self.scripted_drops.clone(),
            },
            uc_multicast: self.uc_multicast,
            record_trace,
        }
    }

    pub fn allgather_config(&self) -> AllgatherConfig {
        AllgatherConfig {
            participants: self.processes,
            buffer_size: self.buffer_size,
            mtu: self.mtu,
            subgroups: self.subgroups,
            concurrent_roots: self.chains,
            alpha: self.alpha,
            transport: self.transport,
            uc_chunk_size: self.uc_chunk_size,
            collective_id: 0,
            rnr_barrier: self.rnr_barrier,
            leaf_post_delay: self.leaf_post_delay,
            chain_mapping: self.chain_mapping,
        }
    }

    pub fn broadcast_config(&self) -> BroadcastConfig {
        BroadcastConfig {
            root: self.root,
            participants: self.processes,
            buffer_size: self.buffer_size,
            mtu: self.mtu,
            subgroups: self.subgroups,
            alpha: self.alpha,
            transport: self.transport,
            uc_chunk_size: self.uc_chunk_size,
            collective_id: 0,
            rnr_barrier: self.rnr_barrier,
            leaf_post_delay: self.leaf_post_delay,
        }
    }
}

/// One CSV row: config echo, stats and the oracle verdict.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub experiment_id: String,
    pub algorithm: Algorithm,
    #[serde(rename = "P")]
    pub p: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub mtu: usize,
    #[serde(rename = "S")]
    pub s: u32,
    #[serde(rename = "M")]
    pub m: usize,
    pub transport: TransportKind,
    pub drop_prob: f64,
    pub seed: u64,
    pub iteration: u32,
    pub total_link_bytes: u64,
    pub fastpath_bytes: u64,
    pub recovery_bytes: u64,
    pub control_bytes: u64,
    /// `;`-separated, rank order.
    pub per_rank_send_bytes: String,
    pub per_rank_recv_bytes: String,
    pub rnr_drops: u64,
    pub fabric_drops: u64,
    pub max_concurrent_roots: usize,
    pub sim_time: f64,
    pub verified: bool,
    pub header_bytes: u64,
    pub max_recovery_depth: u32,
    pub trace_hash: String,
    pub schema_version: u32,
    pub wall_clock_s: f64,
}

impl RunRecord {
    /// Data link bytes plus per-packet header overhead. Control traffic is
    /// reported on its own in `control_bytes`.
    pub fn wire_bytes(&self) -> u64 {
        self.total_link_bytes + self.header_bytes
    }

    pub fn send_bytes(&self) -> Vec<u64> {
        parse_list(&self.per_rank_send_bytes)
    }

    pub fn recv_bytes(&self) -> Vec<u64> {
        parse_list(&self.per_rank_recv_bytes)
    }
}

fn parse_list(s: &str) -> Vec<u64> {
    s.split(';').filter(|x| !x.is_empty()).filter_map(|x| x.parse().ok()).collect()
}

fn join(v: &[u64]) -> String {
    v.iter().map(u64::to_string).collect::<Vec<_>>().join(";")
}

/// A single verified iteration, with the raw outcome kept for inspection.
#[derive(Debug, Clone)]
pub struct Run {
    pub record: RunRecord,
    pub outcome: CollectiveOutcome,
    /// First oracle mismatch, if any.
    pub oracle_failure: Option<String>,
}

pub fn run_iteration(config: &ExperimentConfig, iteration: u32, record_trace: bool) -> Result<Run, HarnessError> {
    config.validate()?;
    let started = Instant::now();
    let seed = config.seed.wrapping_add(iteration as u64);
    let topology = config.build_topology()?;
    let fabric = config.fabric_config(seed, record_trace);
    let p = config.processes;
    let n = config.buffer_size;
    let inputs: Vec<Bytes> = if config.algorithm.is_allgather() {
        (0..p).map(|r| seeded_buffer(seed, r, n)).collect()
    } else {
        vec![seeded_buffer(seed, config.root, n)]
    };
    let outcome = match config.algorithm {
        Algorithm::McAllgather => allgather(&config.allgather_config(), fabric, topology, inputs.clone())?,
        Algorithm::McBroadcast => {
            broadcast(&config.broadcast_config(), fabric, topology, inputs[0].clone())?
        }
        Algorithm::RingAllgather => run_p2p(P2PAlgorithm::RingAllgather, p, fabric, topology, inputs.clone())?,
        Algorithm::LinearAllgather => {
            run_p2p(P2PAlgorithm::LinearAllgather, p, fabric, topology, inputs.clone())?
        }
        Algorithm::BinaryTreeBcast => run_p2p(
            P2PAlgorithm::BinaryTreeBcast { root: config.root },
            p,
            fabric,
            topology,
            inputs.clone(),
        )?,
        Algorithm::KnomialBcast => run_p2p(
            P2PAlgorithm::KnomialBcast {
                root: config.root,
                radix: config.knomial_radix,
            },
            p,
            fabric,
            topology,
            inputs.clone(),
        )?,
    };
    let oracle_failure = if config.algorithm.is_allgather() {
        let bufs: Vec<&Vec<u8>> = outcome.ranks.iter().map(|r| &r.buffer).collect();
        verify_allgather(&bufs, &inputs).err().map(|e| e.to_string())
    } else {
        outcome
            .ranks
            .iter()
            .find(|r| r.buffer != inputs[0].as_ref())
            .map(|r| format!("rank {} buffer differs from the root's", r.rank))
    };
    if let Some(f) = &oracle_failure {
        log::error!("{}: iteration {iteration}: {f}", config.experiment_id);
    }
    let st = &outcome.stats;
    let record = RunRecord {
        experiment_id: config.experiment_id.clone(),
        algorithm: config.algorithm,
        p,
        n,
        mtu: config.mtu,
        s: config.subgroups,
        m: config.chains,
        transport: config.transport,
        drop_prob: config.drop_prob,
        seed,
        iteration,
        total_link_bytes: st.total_link_bytes(),
        fastpath_bytes: st.fastpath_bytes,
        recovery_bytes: st.recovery_bytes,
        control_bytes: st.control_bytes,
        per_rank_send_bytes: join(&st.per_rank_send),
        per_rank_recv_bytes: join(&st.per_rank_recv),
        rnr_drops: st.rnr_drops,
        fabric_drops: st.fabric_drops,
        max_concurrent_roots: st.max_concurrent_roots,
        sim_time: st.completion_time,
        verified: oracle_failure.is_none(),
        header_bytes: st.header_bytes,
        max_recovery_depth: st.max_recovery_depth,
        trace_hash: st.trace_hash.clone(),
        schema_version: SCHEMA_VERSION,
        wall_clock_s: started.elapsed().as_secs_f64(),
    };
    Ok(Run {
        record,
        outcome,
        oracle_failure,
    })
}

/// Runs every iteration. Traces are kept only when `record_trace` is set.
pub fn run(config: &ExperimentConfig, record_trace: bool) -> Result<Vec<Run>, HarnessError> {
    (0..config.iterations)
        .map(|i| run_iteration(config, i, record_trace))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub a: RunRecord,
    pub b: RunRecord,
    /// `b` over `a` total link bytes (payload and recovery).
    pub ratio: f64,
    /// Same ratio counting header overhead and control traffic.
    pub wire_ratio: f64,
}

impl CompareReport {
    pub fn verified(&self) -> bool {
        self.a.verified && self.b.verified
    }
}

/// Runs the first iteration of both configs and relates their traffic.
pub fn compare(a: &ExperimentConfig, b: &ExperimentConfig) -> Result<CompareReport, HarnessError> {
    let ra = run_iteration(a, 0, false)?.record;
    let rb = run_iteration(b, 0, false)?.record;
    let ratio = rb.total_link_bytes as f64 / ra.total_link_bytes.max(1) as f64;
    let wire_ratio = rb.wire_bytes() as f64 / ra.wire_bytes().max(1) as f64;
    Ok(CompareReport {
        a: ra,
        b: rb,
        ratio,
        wire_ratio,
    })
}

pub fn compare_algorithms(base: &ExperimentConfig, a: Algorithm, b: Algorithm) -> Result<CompareReport, HarnessError> {
    let with = |alg: Algorithm| ExperimentConfig {
        algorithm: alg,
        ..base.clone()
    };
    compare(&with(a), &with(b))
}

/// Expands `template` over the cartesian product of `params`. Keys are
/// config field names, dotted for nested fields (`topology.leaf_switches`);
/// values are parsed as JSON, falling back to plain strings.
pub fn expand_sweep(template: &ExperimentConfig, params: &[(String, Vec<String>)]) -> Result<Vec<ExperimentConfig>, HarnessError> {
    let mut combos: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (key, values) in params {
        if values.is_empty() {
            return Err(config_err(format!("sweep parameter {key} has no values")));
        }
        combos = combos
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    let base = serde_json::to_value(template)?;
    combos
        .into_iter()
        .map(|combo| {
            let mut doc = base.clone();
            for (key, raw) in &combo {
                let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
                set_path(&mut doc, key, value)?;
            }
            let mut config: ExperimentConfig =
                serde_json::from_value(doc).map_err(|e| config_err(e.to_string()))?;
            if !combo.is_empty() {
                let tag: Vec<String> = combo.iter().map(|(k, v)| format!("{k}={v}")).collect();
                config.experiment_id = format!("{}[{}]", template.experiment_id, tag.join(","));
            }
            config.validate()?;
            Ok(config)
        })
        .collect()
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<(), HarnessError> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| config_err(format!("sweep key {key}: {part} is not inside an object")))?;
        if !obj.contains_key(*part) {
            return Err(config_err(format!("unknown sweep key {key}")));
        }
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*part).expect("checked");
    }
    Ok(())
}

/// Runs every expanded config (in parallel, output in expansion order).
pub fn sweep(template: &ExperimentConfig, params: &[(String, Vec<String>)]) -> Result<Vec<RunRecord>, HarnessError> {
    let configs = expand_sweep(template, params)?;
    let jobs: Vec<(&ExperimentConfig, u32)> = configs
        .iter()
        .flat_map(|c| (0..c.iterations).map(move |i| (c, i)))
        .collect();
    jobs.into_par_iter()
        .map(|(c, i)| run_iteration(c, i, false).map(|r| r.record))
        .collect()
}

pub fn model(inputs: &CostModelInputs) -> Result<Vec<ModelRow>, HarnessError> {
    Ok(inputs.table()?)
}

pub fn write_records<W: io::Write>(records: &[RunRecord], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_model<W: io::Write>(rows: &[ModelRow], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(alg: Algorithm) -> ExperimentConfig {
        ExperimentConfig {
            algorithm: alg,
            processes: 8,
            buffer_size: 16 * 1024,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn json_round_trip_and_unknown_fields() {
        let c = small(Algorithm::McAllgather);
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), c);
        let err = ExperimentConfig::from_json(r#"{"procs": 4}"#).unwrap_err();
        assert!(err.to_string().contains("procs"));
        let partial = ExperimentConfig::from_json(r#"{"algorithm": "ring_allgather", "processes": 4}"#).unwrap();
        assert_eq!(partial.algorithm, Algorithm::RingAllgather);
        assert_eq!(partial.mtu, 4096);
    }

    #[test]
    fn validation_rules() {
        let bad = |c: ExperimentConfig| c.validate().unwrap_err().to_string();
        assert!(bad(ExperimentConfig {
            processes: 6,
            chains: 4,
            ..small(Algorithm::McAllgather)
        })
        .contains("6 mod 4"));
        assert!(bad(ExperimentConfig {
            processes: 17,
            ..small(Algorithm::McAllgather)
        })
        .contains("processes"));
        assert!(bad(ExperimentConfig {
            transport: TransportKind::Uc,
            ..small(Algorithm::McBroadcast)
        })
        .contains("uc_multicast"));
        assert!(bad(ExperimentConfig {
            drop_prob: 1.5,
            ..small(Algorithm::McBroadcast)
        })
        .contains("drop_prob"));
    }

    #[test]
    fn algorithm_names_parse() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
        }
        assert!("ring".parse::<Algorithm>().is_err());
    }

    #[test]
    fn every_algorithm_runs_verified() {
        for a in Algorithm::ALL {
            let run = run_iteration(&small(a), 0, false).unwrap();
            assert!(run.record.verified, "{a}");
            assert_eq!(run.record.send_bytes().len(), 8);
        }
    }

    #[test]
    fn identical_configs_compare_to_one() {
        let c = small(Algorithm::McAllgather);
        let r = compare(&c, &c).unwrap();
        assert_eq!(r.ratio, 1.0);
        assert_eq!(r.a.trace_hash, r.b.trace_hash);
    }

    #[test]
    fn broadcast_beats_binary_tree() {
        let c = ExperimentConfig {
            processes: 16,
            ..small(Algorithm::McBroadcast)
        };
        let r = compare_algorithms(&c, Algorithm::McBroadcast, Algorithm::BinaryTreeBcast).unwrap();
        assert!(r.a.total_link_bytes <= r.b.total_link_bytes);
    }

    #[test]
    fn sweep_expands_in_order() {
        let t = small(Algorithm::RingAllgather);
        let params = vec![
            ("processes".to_string(), vec!["2".into(), "4".into()]),
            ("topology.core_switches".to_string(), vec!["1".into(), "2".into()]),
        ];
        let cs = expand_sweep(&t, &params).unwrap();
        assert_eq!(cs.len(), 4);
        assert_eq!((cs[1].processes, cs[1].topology.core_switches), (2, 2));
        assert_eq!((cs[2].processes, cs[2].topology.core_switches), (4, 1));
        assert_eq!(cs[3].experiment_id, "default[processes=4,topology.core_switches=2]");
        assert!(expand_sweep(&t, &[("nope".into(), vec!["1".into()])]).is_err());
        let recs = sweep(&t, &params).unwrap();
        assert_eq!(recs.iter().map(|r| r.p).collect::<Vec<_>>(), [2, 2, 4, 4]);
    }

    #[test]
    fn csv_has_fixed_header() {
        let run = run_iteration(&small(Algorithm::McBroadcast), 0, false).unwrap();
        let mut out = Vec::new();
        write_records(&[run.record], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let header = text.lines().next().unwrap();
        assert!(header.starts_with(
            "experiment_id,algorithm,P,N,mtu,S,M,transport,drop_prob,seed,iteration,total_link_bytes,\
             fastpath_bytes,recovery_bytes,control_bytes,per_rank_send_bytes,per_rank_recv_bytes,\
             rnr_drops,fabric_drops,max_concurrent_roots,sim_time,verified"
        ));
        assert!(header.ends_with("wall_clock_s"));
    }
}
