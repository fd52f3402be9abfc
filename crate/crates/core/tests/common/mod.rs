//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use posemem::adexec::{Gradients, Parameters, TensorValue};
use posemem::graphcore::{is_valid_partition, is_valid_subgraph, ComputationGraph, NodeId, Subgraph};
use posemem::memplanner::{find_rev_candidates, is_rev_eligible, simulate_peak_memory, ExecMode, PartitionPlan};
use rand::Rng;

/// Minimum modeled peak over every set partition of the nodes and every
/// eligible mode per part. Exponential; keep graphs at ten nodes or fewer.
pub fn brute_force_peak(g: &ComputationGraph) -> u64 {
    let ids = g.topological_order().to_vec();
    let n = ids.len();
    if n == 1 {
        return PartitionPlan::all_plain(g).peak_bytes;
    }
    // restricted growth strings enumerate set partitions
    let mut rgs = vec![0usize; n];
    let mut best = u64::MAX;
    loop {
        let k = rgs.iter().max().unwrap() + 1;
        let parts: Vec<Subgraph> = (0..k)
            .map(|p| Subgraph::new(g, (0..n).filter(|&i| rgs[i] == p).map(|i| ids[i])).unwrap())
            .collect();
        if is_valid_partition(g, &parts) {
            let opts: Vec<Vec<ExecMode>> = parts
                .iter()
                .map(|p| {
                    let mut o = vec![ExecMode::Plain, ExecMode::Checkpoint];
                    if is_rev_eligible(g, p) {
                        o.push(ExecMode::Reversible);
                    }
                    o
                })
                .collect();
            let mut pick = vec![0usize; k];
            loop {
                let modes: Vec<ExecMode> = pick.iter().zip(&opts).map(|(&i, o)| o[i]).collect();
                if let Ok(peak) = simulate_peak_memory(g, &parts, &modes) {
                    best = best.min(peak);
                }
                let mut j = 0;
                while j < k {
                    pick[j] += 1;
                    if pick[j] < opts[j].len() {
                        break;
                    }
                    pick[j] = 0;
                    j += 1;
                }
                if j == k {
                    break;
                }
            }
        }
        let mut i = n;
        loop {
            if i == 1 {
                return best;
            }
            i -= 1;
            let m = rgs[..i].iter().max().unwrap() + 1;
            if rgs[i] < m {
                rgs[i] += 1;
                for r in &mut rgs[i + 1..] {
                    *r = 0;
                }
                break;
            }
        }
    }
}

fn plain_or_checkpoint<R: Rng>(rng: &mut R) -> ExecMode {
    if rng.random_bool(0.5) {
        ExecMode::Checkpoint
    } else {
        ExecMode::Plain
    }
}

/// A random valid plan: some coupling blocks run reversibly, the rest of
/// the nodes go into short topological runs with random plain/checkpoint
/// modes. Runs that are not valid subgraphs fall back to singletons.
pub fn random_plan<R: Rng>(g: &ComputationGraph, rng: &mut R) -> PartitionPlan {
    let chosen: Vec<Subgraph> =
        find_rev_candidates(g).into_iter().filter(|_| rng.random_bool(0.7)).map(|c| c.part).collect();
    let taken: BTreeSet<NodeId> = chosen.iter().flat_map(|p| p.nodes().iter().copied()).collect();
    let rest: Vec<NodeId> = g.topological_order().iter().copied().filter(|v| !taken.contains(v)).collect();

    let mut parts = Vec::new();
    let mut modes = Vec::new();
    let mut i = 0;
    while i < rest.len() {
        let len = rng.random_range(1..=3.min(rest.len() - i));
        let seg = Subgraph::new(g, rest[i..i + len].iter().copied()).unwrap();
        if is_valid_subgraph(g, &seg).unwrap() {
            parts.push(seg);
            modes.push(plain_or_checkpoint(rng));
        } else {
            for &v in &rest[i..i + len] {
                parts.push(Subgraph::singleton(v));
                modes.push(plain_or_checkpoint(rng));
            }
        }
        i += len;
    }
    for p in chosen {
        parts.push(p);
        modes.push(ExecMode::Reversible);
    }
    PartitionPlan::new(g, parts, modes).unwrap_or_else(|_| PartitionPlan::all_plain(g))
}

/// Random parameters, inputs and output cotangent for `g`.
pub fn random_case<R: Rng>(g: &ComputationGraph, rng: &mut R) -> (Parameters, Vec<TensorValue>, TensorValue) {
    let params = Parameters::random(g, rng, 1.0);
    let inputs = g.inputs().iter().map(|&v| TensorValue::random(&g.node(v).shape, rng)).collect();
    let seed = TensorValue::random(&g.node(g.output()).shape, rng);
    (params, inputs, seed)
}

/// Parameter gradients followed by input gradients, flattened.
pub fn flat_grads(gr: &Gradients) -> Vec<f64> {
    let mut out = gr.params.flatten();
    for t in &gr.inputs {
        out.extend_from_slice(&t.data);
    }
    out
}

pub fn flat_fd(fd: &(Vec<f64>, Vec<Vec<f64>>)) -> Vec<f64> {
    let mut out = fd.0.clone();
    for d in &fd.1 {
        out.extend_from_slice(d);
    }
    out
}
