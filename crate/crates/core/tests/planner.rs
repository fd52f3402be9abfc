mod common;

use posemem::graphcore::{is_valid_partition, ComputationGraph};
use posemem::memplanner::{
    apply_rev_substitutions, find_rev_candidates, plan, plan_checkpoints, plan_report, simulate_trace, ExecMode,
    PartitionPlan,
};
use posemem::synthgraph::{random_dag, unet_graph, UnetSpec};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dag(seed: u64, max_nodes: usize) -> ComputationGraph {
    random_dag(&mut ChaCha8Rng::seed_from_u64(seed), max_nodes)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn labels_follow_edges(seed in any::<u64>()) {
        let g = dag(seed, 50);
        for (a, b) in g.edges() {
            prop_assert!(g.label(a) < g.label(b));
        }
        let order = g.topological_order();
        prop_assert_eq!(order.len(), g.len());
        prop_assert_eq!(*order.last().unwrap(), g.output());
    }

    #[test]
    fn planned_peak_never_exceeds_plain(seed in any::<u64>()) {
        let g = dag(seed, 50);
        let plain = PartitionPlan::all_plain(&g).peak_bytes;
        let p = plan(&g);
        prop_assert!(is_valid_partition(&g, &p.parts));
        prop_assert!(p.peak_bytes <= plain);
        prop_assert!(plan_checkpoints(&g, None).peak_bytes <= plain);
    }

    #[test]
    fn planning_is_deterministic(seed in any::<u64>()) {
        let g = dag(seed, 30);
        prop_assert_eq!(plan(&g), plan(&g));
    }

    #[test]
    fn substitution_is_monotone(seed in any::<u64>()) {
        let g = dag(seed, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let cands = find_rev_candidates(&g);
        for base in [PartitionPlan::all_plain(&g), plan_checkpoints(&g, None), common::random_plan(&g, &mut rng)] {
            prop_assert!(apply_rev_substitutions(&g, &base, &cands).peak_bytes <= base.peak_bytes);
        }
    }

    #[test]
    fn random_plans_price_like_their_trace(seed in any::<u64>()) {
        let g = dag(seed, 16);
        let p = common::random_plan(&g, &mut ChaCha8Rng::seed_from_u64(seed));
        let trace = simulate_trace(&g, &p.parts, &p.modes).unwrap();
        prop_assert_eq!(trace.peak(), p.peak_bytes);
        prop_assert_eq!(trace.final_live(), 0);
    }

    #[test]
    fn graph_json_roundtrip(seed in any::<u64>()) {
        let g = dag(seed, 20);
        prop_assert_eq!(ComputationGraph::from_json(&g.to_json()).unwrap(), g);
    }
}

#[test]
fn matches_brute_force_on_small_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..40 {
        let g = random_dag(&mut rng, 9);
        assert_eq!(plan(&g).peak_bytes, common::brute_force_peak(&g), "{}", g.to_json());
    }
}

#[test]
fn toy_unet_uses_every_mode() {
    let g = unet_graph(&UnetSpec::toy());
    let p = plan(&g);
    assert!(p.count(ExecMode::Reversible) > 0);
    assert!(p.count(ExecMode::Checkpoint) > 0);
    let r = plan_report(&g, &p);
    assert_eq!(r.peak_bytes, p.peak_bytes);
    assert!(r.percent_of_plain < 100.0);
    assert!(r.rematerialized_bytes > 0);
}
