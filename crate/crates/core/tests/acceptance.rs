//! Acceptance suite. Runs every criterion and prints one PASS/FAIL line per
//! criterion; exits non-zero if any fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use mcast_collectives::allgather::{build_schedule, ChainMapping};
use mcast_collectives::analysis::{
    bitmap_addressable_bytes, min_receive_workers, speedup_mc_inc, staging_bytes,
    theoretical_link_bytes, ModelAlgorithm, LINE_RATE_200G_GIBPS, UC_SINGLE_THREAD_GIBPS,
    UD_SINGLE_THREAD_GIBPS,
};
use mcast_collectives::harness::{
    compare_algorithms, run, run_iteration, write_records, Algorithm, ExperimentConfig,
    ReorderConfig, Run,
};
use mcast_collectives::topology::{ClosParams, Topology};
use mcast_collectives::transport::{ImmediateLayout, TransportKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KIB: usize = 1024;
const MIB: usize = 1024 * 1024;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

/// A lossless multicast run, kept for the suite-wide checks.
struct Observation {
    label: String,
    n: u64,
    max_attributed: u64,
    /// Each sender's bytes, summed over links, equal N times its tree size.
    exact_on_tree: bool,
    rnr_drops: u64,
    barrier: bool,
}

#[derive(Default)]
struct Suite {
    lossless: Vec<Observation>,
}

impl Suite {
    fn run(&mut self, label: &str, config: &ExperimentConfig) -> Result<Run, String> {
        let run = run_iteration(config, 0, false).map_err(|e| format!("{label}: {e}"))?;
        ensure!(
            run.record.verified,
            "{label}: oracle failed: {}",
            run.oracle_failure.clone().unwrap_or_default()
        );
        self.observe(label, config, &run);
        Ok(run)
    }

    fn observe(&mut self, label: &str, config: &ExperimentConfig, run: &Run) {
        let lossless = config.drop_prob == 0.0 && config.scripted_drops.is_empty();
        if !(lossless && config.algorithm.is_multicast()) {
            return;
        }
        let n = config.buffer_size as u64;
        let ledger = &run.outcome.ledger;
        let topology = config.build_topology().expect("validated config");
        let mut per_owner = std::collections::BTreeMap::<u32, u64>::new();
        for ((_, owner), b) in ledger.attributions() {
            *per_owner.entry(owner).or_default() += b;
        }
        // dense placement: every root's tree has the same size
        let tree = tree_size(&topology, config.processes, 0) * n;
        self.lossless.push(Observation {
            label: label.to_string(),
            n,
            max_attributed: ledger.max_attributed(),
            exact_on_tree: !per_owner.is_empty() && per_owner.values().all(|&b| b == tree),
            rnr_drops: run.record.rnr_drops,
            barrier: config.rnr_barrier,
        });
    }
}

fn config(algorithm: Algorithm, p: usize, n: usize) -> ExperimentConfig {
    ExperimentConfig {
        algorithm,
        processes: p,
        buffer_size: n,
        ..ExperimentConfig::default()
    }
}

/// Links in the multicast tree rooted at `root` over ranks `0..p`.
fn tree_size(t: &Topology, p: usize, root: usize) -> u64 {
    let leaves: BTreeSet<usize> = (0..p).map(|r| t.leaf_of(r)).collect();
    let remote = leaves.iter().filter(|&&l| l != t.leaf_of(root)).count() as u64;
    let mut links = 1 + (p as u64 - 1);
    if remote > 0 {
        links += 1 + remote;
    }
    links
}

fn enumerate_mc_allgather(t: &Topology, p: usize, n: u64) -> u64 {
    (0..p).map(|s| tree_size(t, p, s)).sum::<u64>() * n
}

/// Ascending ring: P-1 steps, each moving N over every neighbour path.
fn enumerate_ring(t: &Topology, p: usize, n: u64) -> u64 {
    let per_step: u64 = (0..p)
        .map(|r| if t.leaf_of(r) == t.leaf_of((r + 1) % p) { 2 } else { 4 })
        .sum();
    per_step * n * (p as u64 - 1)
}

fn criterion_1(suite: &mut Suite) -> Result<String, String> {
    let n = 64 * KIB;
    let mut notes = Vec::new();
    for p in [16usize, 8, 4] {
        let base = config(Algorithm::McAllgather, p, n);
        let t = base.build_topology().map_err(|e| e.to_string())?;
        let started = Instant::now();
        let report = compare_algorithms(&base, Algorithm::McAllgather, Algorithm::RingAllgather)
            .map_err(|e| e.to_string())?;
        let elapsed = started.elapsed().as_secs_f64();
        ensure!(report.verified(), "P={p}: oracle failed");
        ensure!(elapsed < 5.0, "P={p}: comparison took {elapsed:.2}s");
        let (mc, ring) = (report.a.total_link_bytes, report.b.total_link_bytes);
        let (want_mc, want_ring) = (enumerate_mc_allgather(&t, p, n as u64), enumerate_ring(&t, p, n as u64));
        ensure!(mc == want_mc, "P={p}: multicast moved {mc} link bytes, enumeration says {want_mc}");
        ensure!(ring == want_ring, "P={p}: ring moved {ring} link bytes, enumeration says {want_ring}");
        let leaves = p.div_ceil(4) as u64;
        ensure!(
            theoretical_link_bytes(ModelAlgorithm::McAllgather, p as u64, n as u64, leaves) == Ok(mc)
                && theoretical_link_bytes(ModelAlgorithm::RingAllgather, p as u64, n as u64, leaves) == Ok(ring),
            "P={p}: closed form disagrees with ledger"
        );
        ensure!(
            ring * p as u64 == mc * (2 * p as u64 - 2),
            "P={p}: ratio {ring}/{mc} is not 2 - 2/P"
        );
        let want = 2.0 - 2.0 / p as f64;
        ensure!(report.ratio == want, "P={p}: reported ratio {} != {want}", report.ratio);

        let with_headers = ExperimentConfig {
            header_bytes: 64,
            ..base.clone()
        };
        let r = compare_algorithms(&with_headers, Algorithm::McAllgather, Algorithm::RingAllgather)
            .map_err(|e| e.to_string())?;
        ensure!(
            (1.5..=2.0).contains(&r.wire_ratio),
            "P={p}: ratio with headers {} outside [1.5, 2.0]",
            r.wire_ratio
        );
        suite.run(&format!("criterion 1 mc P={p}"), &base)?;
        notes.push(format!("P={p} ratio {} ({:.2}s), with headers {:.4}", report.ratio, elapsed, r.wire_ratio));
    }
    Ok(notes.join("; "))
}

fn criterion_2(suite: &mut Suite) -> Result<String, String> {
    let mut extra = vec![
        ("bcast P=2", config(Algorithm::McBroadcast, 2, 64 * KIB)),
        (
            "bcast P=16 S=4 root=9",
            ExperimentConfig {
                subgroups: 4,
                root: 9,
                ..config(Algorithm::McBroadcast, 16, 256 * KIB)
            },
        ),
        (
            "allgather P=16 S=4 M=4",
            ExperimentConfig {
                subgroups: 4,
                chains: 4,
                ..config(Algorithm::McAllgather, 16, 64 * KIB)
            },
        ),
        (
            "allgather P=16 rack-aligned",
            ExperimentConfig {
                chains: 4,
                chain_mapping: ChainMapping::RackAligned,
                ..config(Algorithm::McAllgather, 16, 32 * KIB)
            },
        ),
        (
            "allgather P=12 odd tail",
            ExperimentConfig {
                subgroups: 3,
                chains: 3,
                ..config(Algorithm::McAllgather, 12, 50_000)
            },
        ),
    ];
    for alg in [Algorithm::McBroadcast, Algorithm::McAllgather] {
        extra.push((
            if alg == Algorithm::McBroadcast { "UC bcast" } else { "UC allgather" },
            ExperimentConfig {
                transport: TransportKind::Uc,
                uc_multicast: true,
                uc_chunk_size: 16 * KIB,
                subgroups: 2,
                ..config(alg, 8, 128 * KIB)
            },
        ));
    }
    for (label, c) in &extra {
        suite.run(label, c)?;
    }
    ensure!(suite.lossless.len() >= 10, "only {} lossless runs observed", suite.lossless.len());
    for o in &suite.lossless {
        ensure!(
            o.max_attributed <= o.n,
            "{}: a link carried {} bytes of one sender (N = {})",
            o.label,
            o.max_attributed,
            o.n
        );
        ensure!(o.exact_on_tree, "{}: a sender's bytes do not cover its tree exactly once", o.label);
    }
    Ok(format!("{} lossless multicast runs, max per-sender link bytes = N", suite.lossless.len()))
}

fn criterion_3(suite: &mut Suite) -> Result<String, String> {
    let n = 64 * KIB as u64;
    for p in [2usize, 4, 8, 16] {
        let mc = suite.run(&format!("criterion 3 mc P={p}"), &config(Algorithm::McAllgather, p, n as usize))?;
        ensure!(
            mc.record.send_bytes().iter().all(|&b| b == n),
            "P={p}: multicast per-rank send {:?}",
            mc.record.send_bytes()
        );
        let ring = suite.run(&format!("criterion 3 ring P={p}"), &config(Algorithm::RingAllgather, p, n as usize))?;
        let want = n * (p as u64 - 1);
        ensure!(
            ring.record.send_bytes().iter().all(|&b| b == want),
            "P={p}: ring per-rank send {:?}, want {want}",
            ring.record.send_bytes()
        );
    }
    let big = ExperimentConfig {
        subgroups: 4,
        chains: 4,
        ..config(Algorithm::McAllgather, 16, 8 * MIB)
    };
    let started = Instant::now();
    let run = suite.run("criterion 3 P=16 N=8MiB", &big)?;
    let recv = run.record.recv_bytes();
    ensure!(
        recv.iter().all(|&b| b == 120 * MIB as u64),
        "per-rank receive {recv:?}, want 120 MiB"
    );
    ensure!(
        run.record.send_bytes().iter().all(|&b| b == 8 * MIB as u64),
        "per-rank send is not 8 MiB"
    );
    Ok(format!(
        "send = N for P in 2..16, ring = N(P-1); P=16 N=8MiB receives 120 MiB per rank ({:.1}s)",
        started.elapsed().as_secs_f64()
    ))
}

fn criterion_4(_: &mut Suite) -> Result<String, String> {
    let started = Instant::now();
    let (mut lossy, mut max_depth, mut recovered) = (0, 0, 0u64);
    for seed in 0u64..200 {
        let s = seed as usize;
        let p = [4, 8, 16][(s / 3) % 3];
        let c = ExperimentConfig {
            drop_prob: [0.001, 0.01, 0.05][s % 3],
            reorder: ReorderConfig {
                probability: 0.1,
                max_displacement: 8,
            },
            chains: [1, 2, 4][(s / 18) % 3],
            subgroups: [1, 2, 4][(s / 54) % 3],
            seed,
            ..config(Algorithm::McAllgather, p, [16 * KIB, 256 * KIB][(s / 9) % 2])
        };
        let run = run_iteration(&c, 0, false).map_err(|e| format!("seed {seed}: {e}"))?;
        let r = &run.record;
        ensure!(r.verified, "seed {seed}: {}", run.oracle_failure.unwrap_or_default());
        if r.fabric_drops > 0 {
            lossy += 1;
            ensure!(r.recovery_bytes > 0, "seed {seed}: drops without recovery traffic");
        }
        ensure!(
            (r.max_recovery_depth as usize) < p,
            "seed {seed}: recursion depth {} > P-1",
            r.max_recovery_depth
        );
        max_depth = max_depth.max(r.max_recovery_depth);
        recovered += r.recovery_bytes;
    }
    let elapsed = started.elapsed().as_secs_f64();
    ensure!(elapsed < 120.0, "fuzzing took {elapsed:.1}s");
    Ok(format!(
        "200/200 verified, {lossy} with drops, {recovered} recovery bytes, max depth {max_depth} ({elapsed:.1}s)"
    ))
}

fn criterion_5(_: &mut Suite) -> Result<String, String> {
    let s = build_schedule(6, 2).map_err(|e| e.to_string())?;
    ensure!(
        (0..3).map(|i| s.group(i)).collect::<Vec<_>>() == [vec![0, 3], vec![1, 4], vec![2, 5]],
        "build_schedule(6, 2) gave {:?}",
        s.chains
    );
    let topology = ClosParams {
        leaf_switches: 8,
        nodes_per_leaf: 4,
        ..ClosParams::default()
    };
    let mut pairs = 0;
    for p in 1..=32usize {
        for m in (1..=p).filter(|m| p % m == 0) {
            let s = build_schedule(p, m).map_err(|e| e.to_string())?;
            let r = p / m;
            let mut seen = BTreeSet::new();
            for i in 0..r {
                let want: Vec<usize> = (0..m).map(|j| j * r + i).collect();
                ensure!(s.group(i) == want, "P={p} M={m}: G^{i} = {:?}", s.group(i));
                seen.extend(want);
            }
            ensure!(seen == (0..p).collect(), "P={p} M={m}: groups do not partition ranks");
            let c = ExperimentConfig {
                topology,
                chains: m,
                ..config(Algorithm::McAllgather, p, 8 * KIB)
            };
            let run = run_iteration(&c, 0, false).map_err(|e| format!("P={p} M={m}: {e}"))?;
            ensure!(run.record.verified, "P={p} M={m}: oracle failed");
            ensure!(
                run.record.max_concurrent_roots <= m,
                "P={p} M={m}: {} roots at once",
                run.record.max_concurrent_roots
            );
            ensure!(
                run.outcome.max_active_per_chain() <= 1,
                "P={p} M={m}: two roots of one chain overlapped"
            );
            pairs += 1;
        }
    }
    Ok(format!("{pairs} (P, M) pairs, G^0..G^2 of (6, 2) = {{0,3}} {{1,4}} {{2,5}}"))
}

fn criterion_6(_: &mut Suite) -> Result<String, String> {
    ensure!(speedup_mc_inc(2) == Ok(1.0), "speedup(2) != 1");
    for p in [1, 2, 3, 4, 8, 16, 64, 1024, 1 << 20] {
        let s = speedup_mc_inc(p).map_err(|e| e.to_string())?;
        ensure!(s < 2.0, "speedup({p}) = {s}");
    }
    ensure!(staging_bytes(8192, 4096) == Ok(32 * MIB as u64), "staging area size");
    let addressable = bitmap_addressable_bytes(1_500_000, 4096);
    ensure!(
        (49e9..=50e9).contains(&(addressable as f64)),
        "1.5 MB bitmap addresses {addressable} bytes"
    );
    let layout = ImmediateLayout::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100_000 {
        let psn = rng.gen_range(0..layout.psn_space());
        let id = rng.gen_range(0..1u32 << layout.collective_id_bits);
        let imm = layout.encode(psn, id).map_err(|e| e.to_string())?;
        ensure!(layout.decode(imm) == (psn as u32, id), "round trip of ({psn}, {id})");
    }
    Ok(format!("1.5 MB bitmap addresses {:.2} GB; 1e5 immediates round-trip", addressable as f64 / 1e9))
}

fn criterion_7(suite: &mut Suite) -> Result<String, String> {
    let with_barrier: Vec<&Observation> = suite.lossless.iter().filter(|o| o.barrier).collect();
    ensure!(!with_barrier.is_empty(), "no lossless runs observed");
    for o in &with_barrier {
        ensure!(o.rnr_drops == 0, "{}: {} RNR drops with the barrier on", o.label, o.rnr_drops);
    }
    let mut early = Vec::new();
    for alg in [Algorithm::McAllgather, Algorithm::McBroadcast] {
        let c = ExperimentConfig {
            rnr_barrier: false,
            leaf_post_delay: 20e-6,
            ..config(alg, 8, 64 * KIB)
        };
        let run = run_iteration(&c, 0, false).map_err(|e| e.to_string())?;
        ensure!(run.record.rnr_drops > 0, "{alg}: no RNR drops without the barrier");
        ensure!(run.record.verified, "{alg}: oracle failed without the barrier");
        ensure!(run.record.recovery_bytes > 0, "{alg}: nothing recovered");
        early.push(format!("{alg} {} RNR drops", run.record.rnr_drops));
    }
    Ok(format!(
        "0 RNR drops over {} barrier runs; without barrier: {}, recovered",
        with_barrier.len(),
        early.join(", ")
    ))
}

fn criterion_8(_: &mut Suite) -> Result<String, String> {
    let ud = min_receive_workers(LINE_RATE_200G_GIBPS, UD_SINGLE_THREAD_GIBPS).map_err(|e| e.to_string())?;
    let uc = min_receive_workers(LINE_RATE_200G_GIBPS, UC_SINGLE_THREAD_GIBPS).map_err(|e| e.to_string())?;
    ensure!(ud == 5 && ud <= 8, "UD lower bound {ud}");
    ensure!(uc == 2 && uc <= 4, "UC lower bound {uc}");
    Ok(format!(
        "absolute throughput and thread scaling are hardware results and are not reproduced; \
         lower bounds UD {ud} <= 8, UC {uc} <= 4 threads"
    ))
}

fn csv_without_wall_clock(runs: &[Run]) -> Result<String, String> {
    let records: Vec<_> = runs
        .iter()
        .map(|r| {
            let mut rec = r.record.clone();
            rec.wall_clock_s = 0.0;
            rec
        })
        .collect();
    let mut out = Vec::new();
    write_records(&records, &mut out).map_err(|e| e.to_string())?;
    String::from_utf8(out).map_err(|e| e.to_string())
}

fn criterion_9(_: &mut Suite) -> Result<String, String> {
    let configs = [
        ExperimentConfig {
            drop_prob: 0.01,
            reorder: ReorderConfig {
                probability: 0.2,
                max_displacement: 8,
            },
            chains: 2,
            subgroups: 2,
            seed: 42,
            iterations: 2,
            ..config(Algorithm::McAllgather, 8, 64 * KIB)
        },
        ExperimentConfig {
            drop_prob: 0.01,
            iterations: 2,
            ..config(Algorithm::McBroadcast, 16, 64 * KIB)
        },
        config(Algorithm::RingAllgather, 16, 16 * KIB),
        config(Algorithm::KnomialBcast, 16, 16 * KIB),
    ];
    for c in &configs {
        let first = run(c, true).map_err(|e| e.to_string())?;
        let second = run(c, true).map_err(|e| e.to_string())?;
        ensure!(
            csv_without_wall_clock(&first)? == csv_without_wall_clock(&second)?,
            "{}: CSV differs between runs",
            c.algorithm
        );
        for (a, b) in first.iter().zip(&second) {
            ensure!(a.record.trace_hash == b.record.trace_hash, "{}: trace hash differs", c.algorithm);
            ensure!(a.outcome.trace == b.outcome.trace, "{}: traces differ", c.algorithm);
        }
    }
    Ok(format!("{} configs repeated: identical CSV and trace hashes", configs.len()))
}

fn main() -> ExitCode {
    type Check = fn(&mut Suite) -> Result<String, String>;
    let checks: [(u32, &str, Check); 9] = [
        (1, "traffic reduction", criterion_1),
        (2, "bandwidth optimality", criterion_2),
        (3, "per-process send work", criterion_3),
        (4, "reliability fuzzing", criterion_4),
        (5, "scheduler conformance", criterion_5),
        (6, "analytic constants", criterion_6),
        (7, "RNR avoidance", criterion_7),
        (8, "hardware-only results", criterion_8),
        (9, "determinism", criterion_9),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut suite = Suite::default();
    let mut failed = 0;
    for (id, name, check) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str()) || *f == id.to_string()) {
            continue;
        }
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| check(&mut suite)))
            .unwrap_or_else(|_| Err("panicked".to_string()));
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {id} ({name}): PASS [{secs:.1}s] {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {id} ({name}): FAIL [{secs:.1}s] {why}");
            }
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
