use mcast_collectives::analysis::{theoretical_link_bytes, ModelAlgorithm};
use mcast_collectives::harness::{compare_algorithms, run_iteration, Algorithm, ExperimentConfig};
use mcast_collectives::topology::ClosParams;
use proptest::prelude::*;

fn on_leaves(algorithm: Algorithm, p: usize, leaves: usize, n: usize) -> ExperimentConfig {
    ExperimentConfig {
        algorithm,
        processes: p,
        buffer_size: n,
        topology: ClosParams {
            leaf_switches: leaves,
            nodes_per_leaf: p.div_ceil(leaves),
            ..ClosParams::default()
        },
        ..ExperimentConfig::default()
    }
}

#[test]
fn ledger_matches_closed_form() {
    for p in [2usize, 4, 8, 16] {
        for leaves in [1usize, 2, 4] {
            if leaves > p {
                continue;
            }
            for (alg, model) in [
                (Algorithm::McAllgather, ModelAlgorithm::McAllgather),
                (Algorithm::RingAllgather, ModelAlgorithm::RingAllgather),
                (Algorithm::McBroadcast, ModelAlgorithm::McBroadcast),
            ] {
                let n = 12_288;
                let run = run_iteration(&on_leaves(alg, p, leaves, n), 0, false).unwrap();
                assert!(run.record.verified);
                let want = theoretical_link_bytes(model, p as u64, n as u64, leaves as u64).unwrap();
                assert_eq!(run.record.total_link_bytes, want, "{alg} P={p} L={leaves}");
            }
        }
    }
}

#[test]
fn multicast_broadcast_beats_trees() {
    let base = ExperimentConfig {
        processes: 16,
        buffer_size: 64 * 1024,
        ..ExperimentConfig::default()
    };
    for tree in [Algorithm::BinaryTreeBcast, Algorithm::KnomialBcast] {
        let report = compare_algorithms(&base, Algorithm::McBroadcast, tree).unwrap();
        assert!(report.verified());
        assert!(report.a.total_link_bytes <= report.b.total_link_bytes, "{tree}");
    }
}

#[test]
fn identical_configs_compare_to_one() {
    let base = ExperimentConfig {
        processes: 8,
        buffer_size: 8192,
        ..ExperimentConfig::default()
    };
    let report = compare_algorithms(&base, Algorithm::McAllgather, Algorithm::McAllgather).unwrap();
    assert_eq!(report.ratio, 1.0);
}

#[test]
fn linear_allgather_moves_as_much_as_ring_or_more() {
    let base = ExperimentConfig {
        processes: 8,
        buffer_size: 8192,
        ..ExperimentConfig::default()
    };
    let report = compare_algorithms(&base, Algorithm::RingAllgather, Algorithm::LinearAllgather).unwrap();
    assert!(report.verified());
    assert!(report.ratio >= 1.0);
    assert_eq!(report.a.send_bytes(), report.b.send_bytes());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn lossy_runs_always_verify(
        seed in 0u64..1_000,
        p in prop::sample::select(vec![2usize, 3, 5, 8, 12]),
        n in 1usize..40_000,
        drop in 0.0f64..0.1,
        broadcast in any::<bool>(),
    ) {
        let c = ExperimentConfig {
            algorithm: if broadcast { Algorithm::McBroadcast } else { Algorithm::McAllgather },
            processes: p,
            buffer_size: n,
            drop_prob: drop,
            root: seed as usize % p,
            seed,
            ..ExperimentConfig::default()
        };
        let run = run_iteration(&c, 0, false).unwrap();
        prop_assert!(run.record.verified, "{:?}", run.oracle_failure);
        prop_assert!(run.record.max_recovery_depth as usize <= p.saturating_sub(1));
    }
}
