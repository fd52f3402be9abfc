//! Execution-mode planning and the peak-memory model.
//!
//! A plan is a valid partition plus one [`ExecMode`] per part. Memory is
//! modeled by replaying a forward pass followed by a backward pass and
//! tracking every live activation and gradient buffer:
//!
//! * a value is kept after the forward pass when some consumer's part will
//!   need it: any consumer in a `Plain` part, or a consumer in a
//!   `Checkpoint` part the value does not belong to. Consumers in a
//!   `Reversible` part never keep their input alive;
//! * the graph output is kept until backward begins, and the output of a
//!   reversible part is kept (or reconstructed by the next reversible part)
//!   until its own backward step, since reconstruction starts from it;
//! * backward walks parts by descending output label. A `Checkpoint` part
//!   first recomputes its non-output nodes; a `Reversible` part first
//!   reconstructs its input and every non-output node from its output, then
//!   drops the output. Each node then allocates gradients for inputs that
//!   lack one, drops its own gradient and releases inputs whose backward
//!   uses are exhausted.
//!
//! Gradient buffers are as large as the activation they belong to.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphcore::{is_valid_partition, ComputationGraph, NodeId, OpKind, Subgraph};

/// Partitions times mode choices above which the exact search gives way to
/// the beam search.
pub const EXACT_LIMIT: usize = 50_000;
pub const BEAM_WIDTH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    Plain = 1,
    Checkpoint = 2,
    Reversible = 3,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error("parts do not form a valid partition of the graph")]
    InvalidPartition,
    #[error("plan has {parts} parts but {modes} modes")]
    ModeCount { parts: usize, modes: usize },
    #[error("part {0} is not an eligible reversible block")]
    IneligibleReversible(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Produce,
    Free,
    Recompute,
    Reconstruct,
    Grad,
    FreeGrad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TraceEvent {
    pub kind: EventKind,
    pub node: NodeId,
    /// Live bytes right after the event.
    pub live_bytes: u64,
}

/// Ordered allocation events of one forward+backward run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub events: Vec<TraceEvent>,
}

impl ExecutionTrace {
    pub fn peak(&self) -> u64 {
        self.events.iter().map(|e| e.live_bytes).max().unwrap_or(0)
    }

    pub fn final_live(&self) -> u64 {
        self.events.last().map_or(0, |e| e.live_bytes)
    }

    /// Total bytes brought back by recomputation or reconstruction.
    pub fn rematerialized_bytes(&self, g: &ComputationGraph) -> u64 {
        self.events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::Recompute | EventKind::Reconstruct))
            .map(|e| g.size_of(e.node))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub parts: Vec<Subgraph>,
    pub modes: Vec<ExecMode>,
    pub peak_bytes: u64,
}

impl PartitionPlan {
    /// Validates the partition and mode eligibility, then prices the plan.
    pub fn new(g: &ComputationGraph, parts: Vec<Subgraph>, modes: Vec<ExecMode>) -> Result<Self, PlanError> {
        let peak_bytes = simulate_peak_memory(g, &parts, &modes)?;
        Ok(PartitionPlan { parts, modes, peak_bytes })
    }

    pub fn all_plain(g: &ComputationGraph) -> Self {
        let parts: Vec<Subgraph> = g.topological_order().iter().map(|&v| Subgraph::singleton(v)).collect();
        let modes = vec![ExecMode::Plain; parts.len()];
        PartitionPlan::new(g, parts, modes).expect("singletons are always valid")
    }

    pub fn mode_of(&self, id: NodeId) -> Option<ExecMode> {
        self.parts.iter().position(|p| p.contains(id)).map(|i| self.modes[i])
    }

    pub fn count(&self, mode: ExecMode) -> usize {
        self.modes.iter().filter(|&&m| m == mode).count()
    }
}

/// An additive coupling block found in the graph.
///
/// The block reads `input`, splits it into halves `splits[0]` and `splits[1]`,
/// forms `adds[0] = splits[0] + F(splits[1])` and
/// `adds[1] = splits[1] + G(adds[0])` and concatenates both into `merge`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevCandidate {
    pub part: Subgraph,
    pub input: NodeId,
    pub split_channels: usize,
    pub splits: [NodeId; 2],
    pub f_chain: Vec<NodeId>,
    pub g_chain: Vec<NodeId>,
    pub adds: [NodeId; 2],
    pub merge: NodeId,
}

fn consumers_are(g: &ComputationGraph, v: NodeId, expected: &[NodeId]) -> bool {
    let mut a = g.consumers(v).to_vec();
    let mut b = expected.to_vec();
    a.sort_unstable();
    b.sort_unstable();
    a == b
}

fn unary_chain(g: &ComputationGraph, from: NodeId, first: NodeId, end: NodeId) -> Option<Vec<NodeId>> {
    let mut chain = Vec::new();
    let (mut prev, mut cur) = (from, first);
    loop {
        let node = g.node(cur);
        if !node.op.is_unary_body() || node.inputs != [prev] || chain.len() > g.len() {
            return None;
        }
        chain.push(cur);
        let next = g.consumers(cur);
        if next.len() != 1 {
            return None;
        }
        if next[0] == end {
            return Some(chain);
        }
        prev = cur;
        cur = next[0];
    }
}

/// Matches the coupling pattern whose concat node is `merge`.
pub fn match_coupling(g: &ComputationGraph, merge: NodeId) -> Option<RevCandidate> {
    let y = g.get(merge)?;
    if y.op != OpKind::Concat || y.inputs.len() != 2 || y.inputs[0] == y.inputs[1] {
        return None;
    }
    let (a1, a2) = (y.inputs[0], y.inputs[1]);
    let (n1, n2) = (g.node(a1), g.node(a2));
    if n1.op != OpKind::Add || n2.op != OpKind::Add || n1.inputs.len() != 2 || n2.inputs.len() != 2 {
        return None;
    }
    let pick_split = |ins: &[NodeId], half: u8| -> Option<(NodeId, NodeId)> {
        let is_split = |id: NodeId| g.node(id).op == OpKind::Split && g.node(id).half == Some(half);
        match (is_split(ins[0]), is_split(ins[1])) {
            (true, false) => Some((ins[0], ins[1])),
            (false, true) => Some((ins[1], ins[0])),
            _ => None,
        }
    };
    let (s1, f_last) = pick_split(&n1.inputs, 0)?;
    let (s2, g_last) = pick_split(&n2.inputs, 1)?;
    let x = g.node(s1).inputs[0];
    if g.node(s2).inputs[0] != x || x == merge {
        return None;
    }
    if !consumers_are(g, x, &[s1, s2]) || !consumers_are(g, s1, &[a1]) || !consumers_are(g, a2, &[merge]) {
        return None;
    }
    let f1 = *g.consumers(s2).iter().find(|&&c| c != a2)?;
    if !consumers_are(g, s2, &[f1, a2]) {
        return None;
    }
    let g1 = *g.consumers(a1).iter().find(|&&c| c != merge)?;
    if !consumers_are(g, a1, &[g1, merge]) {
        return None;
    }
    let f_chain = unary_chain(g, s2, f1, a1)?;
    let g_chain = unary_chain(g, a1, g1, a2)?;
    if f_chain.last() != Some(&f_last) || g_chain.last() != Some(&g_last) {
        return None;
    }
    let xs = g.node(x);
    if xs.shape != y.shape || !xs.channels().is_multiple_of(2) {
        return None;
    }
    let mut ids = vec![s1, s2, a1, a2, merge];
    ids.extend(&f_chain);
    ids.extend(&g_chain);
    let part = Subgraph::new(g, ids).ok()?;
    if part.output() != merge {
        return None;
    }
    Some(RevCandidate {
        part,
        input: x,
        split_channels: xs.channels(),
        splits: [s1, s2],
        f_chain,
        g_chain,
        adds: [a1, a2],
        merge,
    })
}

/// Coupling blocks of `g`, node-disjoint, in ascending order of their
/// smallest topological label.
pub fn find_rev_candidates(g: &ComputationGraph) -> Vec<RevCandidate> {
    let mut found: Vec<RevCandidate> = g
        .topological_order()
        .iter()
        .filter_map(|&v| match_coupling(g, v))
        .collect();
    let min_label = |c: &RevCandidate| c.part.nodes().iter().map(|&v| g.label(v)).min().unwrap_or(0);
    found.sort_by_key(min_label);
    let mut taken = BTreeSet::new();
    found.retain(|c| {
        if c.part.nodes().iter().any(|v| taken.contains(v)) {
            return false;
        }
        taken.extend(c.part.nodes().iter().copied());
        true
    });
    found
}

pub fn is_rev_eligible(g: &ComputationGraph, part: &Subgraph) -> bool {
    match_coupling(g, part.output()).is_some_and(|c| c.part == *part)
}

/// Label-space roles of a coupling block's nodes.
#[derive(Debug, Clone)]
struct Roles {
    input: usize,
    splits: [usize; 2],
    f_chain: Vec<usize>,
    adds: [usize; 2],
    g_chain: Vec<usize>,
}

/// Label-indexed view of a graph for fast repeated simulation.
struct Indexed {
    ids: Vec<NodeId>,
    size: Vec<u64>,
    ins: Vec<Vec<usize>>,
    outs: Vec<Vec<usize>>,
    /// Coupling roles keyed by the label of the block's concat node.
    roles: BTreeMap<usize, Roles>,
}

impl Indexed {
    fn new(g: &ComputationGraph) -> Self {
        let ids = g.topological_order().to_vec();
        let size = ids.iter().map(|&v| g.size_of(v)).collect();
        let ins = ids
            .iter()
            .map(|&v| g.distinct_inputs(v).iter().map(|&u| g.label(u)).collect())
            .collect();
        let outs = ids
            .iter()
            .map(|&v| g.consumers(v).iter().map(|&c| g.label(c)).collect())
            .collect();
        let l = |v: NodeId| g.label(v);
        let roles = ids
            .iter()
            .filter_map(|&v| match_coupling(g, v))
            .map(|c| {
                let r = Roles {
                    input: l(c.input),
                    splits: c.splits.map(l),
                    f_chain: c.f_chain.iter().map(|&v| l(v)).collect(),
                    adds: c.adds.map(l),
                    g_chain: c.g_chain.iter().map(|&v| l(v)).collect(),
                };
                (l(c.merge), r)
            })
            .collect();
        Indexed { ids, size, ins, outs, roles }
    }

    fn len(&self) -> usize {
        self.ids.len()
    }
}

/// Partition in label space: members of each part ascending, one mode each.
#[derive(Clone)]
struct Assignment {
    members: Vec<Vec<usize>>,
    modes: Vec<ExecMode>,
}

impl Assignment {
    fn part_of(&self, n: usize) -> Vec<usize> {
        let mut part_of = vec![usize::MAX; n];
        for (p, m) in self.members.iter().enumerate() {
            for &v in m {
                part_of[v] = p;
            }
        }
        part_of
    }

    fn to_plan(&self, ix: &Indexed, g: &ComputationGraph, peak: u64) -> PartitionPlan {
        let mut order: Vec<usize> = (0..self.members.len()).collect();
        order.sort_by_key(|&p| *self.members[p].last().expect("nonempty part"));
        let parts = order
            .iter()
            .map(|&p| Subgraph::new(g, self.members[p].iter().map(|&v| ix.ids[v])).expect("known ids"))
            .collect();
        let modes = order.iter().map(|&p| self.modes[p]).collect();
        PartitionPlan { parts, modes, peak_bytes: peak }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Cost {
    peak: u64,
    remat: u64,
}

struct Sim<'a> {
    ix: &'a Indexed,
    live: Vec<bool>,
    grad: Vec<bool>,
    /// Values that must survive until a reversible part rebuilds from them.
    pending: Vec<bool>,
    uses: Vec<usize>,
    bytes: u64,
    peak: u64,
    remat: u64,
    log: Option<&'a mut Vec<TraceEvent>>,
}

impl Sim<'_> {
    fn event(&mut self, kind: EventKind, v: usize) {
        match kind {
            EventKind::Free | EventKind::FreeGrad => self.bytes -= self.ix.size[v],
            _ => self.bytes += self.ix.size[v],
        }
        match kind {
            EventKind::Produce | EventKind::Recompute | EventKind::Reconstruct => self.live[v] = true,
            EventKind::Free => self.live[v] = false,
            EventKind::Grad => self.grad[v] = true,
            EventKind::FreeGrad => self.grad[v] = false,
        }
        if matches!(kind, EventKind::Recompute | EventKind::Reconstruct) {
            self.remat += self.ix.size[v];
        }
        self.peak = self.peak.max(self.bytes);
        if let Some(log) = self.log.as_deref_mut() {
            log.push(TraceEvent { kind, node: self.ix.ids[v], live_bytes: self.bytes });
        }
    }

    fn release(&mut self, v: usize) {
        if self.live[v] && self.uses[v] == 0 && !self.pending[v] {
            self.event(EventKind::Free, v);
        }
    }

    fn rebuild(&mut self, v: usize) {
        debug_assert!(!self.live[v]);
        self.event(EventKind::Reconstruct, v);
    }

    /// Backward through one node: input gradients, then drop its own.
    fn step(&mut self, v: usize) {
        let ix = self.ix;
        for &u in &ix.ins[v] {
            if !self.grad[u] {
                self.event(EventKind::Grad, u);
            }
        }
        self.event(EventKind::FreeGrad, v);
        for &u in &ix.ins[v] {
            self.uses[u] -= 1;
            self.release(u);
        }
    }

    /// Backward through a coupling block from its output alone: rebuild and
    /// differentiate the G half, then rebuild and differentiate the F half.
    fn reversible(&mut self, y: usize, r: &Roles) {
        let [s1, s2] = r.splits;
        let [a1, a2] = r.adds;
        self.pending[a1] = true;
        self.pending[a2] = true;
        self.rebuild(a1);
        self.rebuild(a2);
        self.pending[y] = false;
        self.release(y);
        self.step(y);
        for &v in &r.g_chain {
            self.rebuild(v);
        }
        self.rebuild(s2);
        self.pending[a2] = false;
        self.release(a2);
        self.step(a2);
        for &v in r.g_chain.iter().rev() {
            self.step(v);
        }
        for &v in &r.f_chain {
            self.rebuild(v);
        }
        self.rebuild(s1);
        self.pending[a1] = false;
        self.release(a1);
        if self.pending[r.input] && !self.live[r.input] {
            self.rebuild(r.input);
        }
        self.step(a1);
        for &v in r.f_chain.iter().rev() {
            self.step(v);
        }
        let (hi, lo) = if s1 > s2 { (s1, s2) } else { (s2, s1) };
        self.step(hi);
        self.step(lo);
    }
}

fn simulate(ix: &Indexed, a: &Assignment, log: Option<&mut Vec<TraceEvent>>) -> Cost {
    let n = ix.len();
    let part_of = a.part_of(n);
    let out_of = |p: usize| *a.members[p].last().expect("nonempty part");
    let sink = n - 1;

    let mut rebuilt_input = vec![false; n];
    let mut pending = vec![false; n];
    for (p, &m) in a.modes.iter().enumerate() {
        if m == ExecMode::Reversible {
            pending[out_of(p)] = true;
            rebuilt_input[ix.roles[&out_of(p)].input] = true;
        }
    }
    let stored: Vec<bool> = (0..n)
        .map(|u| {
            let p = part_of[u];
            let for_consumer = ix.outs[u].iter().any(|&c| match a.modes[part_of[c]] {
                ExecMode::Plain => true,
                ExecMode::Checkpoint => part_of[c] != p,
                ExecMode::Reversible => false,
            });
            let rev_out = a.modes[p] == ExecMode::Reversible && u == out_of(p) && !rebuilt_input[u];
            for_consumer || rev_out || u == sink
        })
        .collect();

    let mut sim = Sim {
        ix,
        live: vec![false; n],
        grad: vec![false; n],
        pending,
        uses: ix.outs.iter().map(Vec::len).collect(),
        bytes: 0,
        peak: 0,
        remat: 0,
        log,
    };
    for v in 0..n {
        sim.event(EventKind::Produce, v);
        for &u in &ix.ins[v] {
            if !stored[u] && ix.outs[u].last() == Some(&v) {
                sim.event(EventKind::Free, u);
            }
        }
    }

    sim.event(EventKind::Grad, sink);
    sim.release(sink);
    let mut order: Vec<usize> = (0..a.members.len()).collect();
    order.sort_by_key(|&p| std::cmp::Reverse(out_of(p)));
    for p in order {
        let members = &a.members[p];
        match a.modes[p] {
            ExecMode::Plain => {
                for &v in members.iter().rev() {
                    sim.step(v);
                }
            }
            ExecMode::Checkpoint => {
                for &v in &members[..members.len() - 1] {
                    debug_assert!(!sim.live[v]);
                    sim.event(EventKind::Recompute, v);
                }
                for &v in members.iter().rev() {
                    sim.step(v);
                }
            }
            ExecMode::Reversible => sim.reversible(out_of(p), &ix.roles[&out_of(p)]),
        }
    }
    debug_assert_eq!(sim.bytes, 0);
    Cost { peak: sim.peak, remat: sim.remat }
}

fn assignment_of(g: &ComputationGraph, parts: &[Subgraph], modes: &[ExecMode]) -> Result<Assignment, PlanError> {
    if parts.len() != modes.len() {
        return Err(PlanError::ModeCount { parts: parts.len(), modes: modes.len() });
    }
    if !is_valid_partition(g, parts) {
        return Err(PlanError::InvalidPartition);
    }
    for (i, (p, &m)) in parts.iter().zip(modes).enumerate() {
        if m == ExecMode::Reversible && !is_rev_eligible(g, p) {
            return Err(PlanError::IneligibleReversible(i));
        }
    }
    let members = parts
        .iter()
        .map(|p| {
            let mut m: Vec<usize> = p.nodes().iter().map(|&v| g.label(v)).collect();
            m.sort_unstable();
            m
        })
        .collect();
    Ok(Assignment { members, modes: modes.to_vec() })
}

/// Modeled peak live bytes of a full training step under the given plan.
pub fn simulate_peak_memory(g: &ComputationGraph, parts: &[Subgraph], modes: &[ExecMode]) -> Result<u64, PlanError> {
    let a = assignment_of(g, parts, modes)?;
    Ok(simulate(&Indexed::new(g), &a, None).peak)
}

/// The event log behind [`simulate_peak_memory`].
pub fn simulate_trace(g: &ComputationGraph, parts: &[Subgraph], modes: &[ExecMode]) -> Result<ExecutionTrace, PlanError> {
    let a = assignment_of(g, parts, modes)?;
    let mut events = Vec::new();
    simulate(&Indexed::new(g), &a, Some(&mut events));
    Ok(ExecutionTrace { events })
}

/// Ordering key: peaks within the budget are all equally good, after which
/// less rematerialization wins.
fn rank(cost: Cost, budget: Option<u64>) -> (u64, u64, u64) {
    match budget {
        Some(b) => (cost.peak.max(b), cost.remat, cost.peak),
        None => (cost.peak, cost.remat, 0),
    }
}

struct Search<'a> {
    ix: &'a Indexed,
    /// Candidate members keyed by output label.
    rev: BTreeMap<usize, Vec<usize>>,
    budget: Option<u64>,
}

type Beam = (Vec<(usize, usize, ExecMode)>, Cost);

impl Search<'_> {
    fn modes_for(&self, members: &[usize]) -> Vec<ExecMode> {
        let mut m = vec![ExecMode::Plain];
        if members.len() > 1 {
            m.push(ExecMode::Checkpoint);
        }
        if self.rev.get(members.last().expect("nonempty")).is_some_and(|c| c == members) {
            m.push(ExecMode::Reversible);
        }
        m
    }

    /// Every valid partition, built from the sink down: each node either
    /// opens a part or joins the part already holding all of its consumers.
    fn partitions(&self, limit: usize) -> Option<Vec<Vec<Vec<usize>>>> {
        let n = self.ix.len();
        let mut out = Vec::new();
        let mut part_of = vec![usize::MAX; n];
        let mut combos = 0usize;
        if self.grow(n, &mut part_of, 0, &mut out, &mut combos, limit) {
            Some(out)
        } else {
            None
        }
    }

    fn grow(
        &self,
        v: usize,
        part_of: &mut Vec<usize>,
        nparts: usize,
        out: &mut Vec<Vec<Vec<usize>>>,
        combos: &mut usize,
        limit: usize,
    ) -> bool {
        if v == 0 {
            let mut members = vec![Vec::new(); nparts];
            for (u, &p) in part_of.iter().enumerate() {
                members[p].push(u);
            }
            let c: usize = members.iter().map(|m| self.modes_for(m).len()).product();
            *combos += c;
            out.push(members);
            return *combos <= limit;
        }
        let u = v - 1;
        let cons = &self.ix.outs[u];
        if let Some(&first) = cons.first() {
            let p = part_of[first];
            if cons.iter().all(|&c| part_of[c] == p) {
                part_of[u] = p;
                if !self.grow(u, part_of, nparts, out, combos, limit) {
                    return false;
                }
            }
        }
        part_of[u] = nparts;
        self.grow(u, part_of, nparts + 1, out, combos, limit)
    }

    fn exact(&self, partitions: Vec<Vec<Vec<usize>>>) -> (Assignment, Cost) {
        let mut best: Option<(Assignment, Cost)> = None;
        for members in partitions {
            let options: Vec<Vec<ExecMode>> = members.iter().map(|m| self.modes_for(m)).collect();
            let mut pick = vec![0usize; members.len()];
            loop {
                let a = Assignment {
                    members: members.clone(),
                    modes: pick.iter().zip(&options).map(|(&i, o)| o[i]).collect(),
                };
                let cost = simulate(self.ix, &a, None);
                if best.as_ref().is_none_or(|(_, b)| rank(cost, self.budget) < rank(*b, self.budget)) {
                    best = Some((a, cost));
                }
                let mut k = 0;
                while k < pick.len() {
                    pick[k] += 1;
                    if pick[k] < options[k].len() {
                        break;
                    }
                    pick[k] = 0;
                    k += 1;
                }
                if k == pick.len() {
                    break;
                }
            }
        }
        best.expect("at least one partition")
    }

    /// Beam search over contiguous label segments. Undecided nodes are
    /// priced as plain singletons.
    fn beam(&self) -> (Assignment, Cost) {
        let n = self.ix.len();
        let max_cons: Vec<usize> = (0..n).map(|v| self.ix.outs[v].last().copied().unwrap_or(v)).collect();
        type State = Vec<(usize, usize, ExecMode)>;
        let complete = |s: &State| -> Assignment {
            let mut members = Vec::new();
            let mut modes = Vec::new();
            let mut next = 0;
            for &(i, j, m) in s {
                members.push((i..=j).collect());
                modes.push(m);
                next = j + 1;
            }
            for v in next..n {
                members.push(vec![v]);
                modes.push(ExecMode::Plain);
            }
            Assignment { members, modes }
        };
        let mut beams: Vec<Vec<(State, Cost)>> = vec![Vec::new(); n + 1];
        let empty: State = Vec::new();
        let c0 = simulate(self.ix, &complete(&empty), None);
        beams[0].push((empty, c0));
        for i in 0..n {
            self.prune(&mut beams[i]);
            let current = std::mem::take(&mut beams[i]);
            for (state, _) in &current {
                let mut reach = 0;
                for j in i..n {
                    let seg: Vec<usize> = (i..=j).collect();
                    let modes = if j == i {
                        vec![ExecMode::Plain]
                    } else if reach <= j {
                        self.modes_for(&seg)
                    } else {
                        Vec::new()
                    };
                    reach = reach.max(max_cons[j]);
                    for m in modes.into_iter().filter(|&m| j == i || m != ExecMode::Plain) {
                        let mut next = state.clone();
                        next.push((i, j, m));
                        let cost = simulate(self.ix, &complete(&next), None);
                        beams[j + 1].push((next, cost));
                    }
                }
            }
            for b in beams.iter_mut().skip(i + 1) {
                if b.len() > BEAM_WIDTH * 4 {
                    self.prune(b);
                }
            }
        }
        self.prune(&mut beams[n]);
        let (state, cost) = beams[n].first().cloned().expect("beam reaches the end");
        (complete(&state), cost)
    }

    fn prune(&self, b: &mut Vec<Beam>) {
        b.sort_by(|x, y| rank(x.1, self.budget).cmp(&rank(y.1, self.budget)).then_with(|| x.0.cmp(&y.0)));
        b.dedup_by(|x, y| x.0 == y.0);
        b.truncate(BEAM_WIDTH);
    }

    fn run(&self) -> (Assignment, Cost) {
        match self.partitions(EXACT_LIMIT) {
            Some(parts) => self.exact(parts),
            None => self.beam(),
        }
    }
}

fn search(g: &ComputationGraph, candidates: &[RevCandidate], budget: Option<u64>) -> PartitionPlan {
    let ix = Indexed::new(g);
    let rev = candidates
        .iter()
        .map(|c| {
            let mut m: Vec<usize> = c.part.nodes().iter().map(|&v| g.label(v)).collect();
            m.sort_unstable();
            (*m.last().expect("nonempty"), m)
        })
        .collect();
    let s = Search { ix: &ix, rev, budget };
    let (a, cost) = s.run();
    a.to_plan(&ix, g, cost.peak)
}

fn plan_cost(g: &ComputationGraph, plan: &PartitionPlan) -> Cost {
    let a = assignment_of(g, &plan.parts, &plan.modes).expect("plan is valid");
    simulate(&Indexed::new(g), &a, None)
}

/// Best plan using only plain and checkpointed parts.
///
/// With a budget, any plan whose peak fits is acceptable and the one
/// rematerializing the fewest bytes is returned.
pub fn plan_checkpoints(g: &ComputationGraph, budget: Option<u64>) -> PartitionPlan {
    search(g, &[], budget)
}

/// Carves each candidate out of the parts it overlaps and keeps the result
/// when every remaining piece is still valid and the peak strictly drops.
pub fn apply_rev_substitutions(g: &ComputationGraph, base: &PartitionPlan, candidates: &[RevCandidate]) -> PartitionPlan {
    let mut current = base.clone();
    for c in candidates {
        let mut parts = Vec::new();
        let mut modes = Vec::new();
        let mut ok = true;
        for (p, &m) in current.parts.iter().zip(&current.modes) {
            let rest: Vec<NodeId> = p.nodes().iter().copied().filter(|v| !c.part.contains(*v)).collect();
            if rest.len() == p.len() {
                parts.push(p.clone());
                modes.push(m);
                continue;
            }
            if m == ExecMode::Reversible {
                ok = false;
                break;
            }
            if rest.is_empty() {
                continue;
            }
            let carved = Subgraph::new(g, rest).expect("known ids");
            if !crate::graphcore::is_valid_subgraph(g, &carved).unwrap_or(false) {
                ok = false;
                break;
            }
            parts.push(carved);
            modes.push(m);
        }
        if !ok {
            continue;
        }
        parts.push(c.part.clone());
        modes.push(ExecMode::Reversible);
        let mut order: Vec<usize> = (0..parts.len()).collect();
        order.sort_by_key(|&i| g.label(parts[i].output()));
        let parts: Vec<Subgraph> = order.iter().map(|&i| parts[i].clone()).collect();
        let modes: Vec<ExecMode> = order.iter().map(|&i| modes[i]).collect();
        if let Ok(next) = PartitionPlan::new(g, parts, modes) {
            if next.peak_bytes < current.peak_bytes {
                current = next;
            }
        }
    }
    current
}

/// Checkpoint planning, reversible substitution, and a joint search over
/// all three modes; the cheapest of the two results wins.
pub fn plan(g: &ComputationGraph) -> PartitionPlan {
    let base = plan_checkpoints(g, None);
    let candidates = find_rev_candidates(g);
    let substituted = apply_rev_substitutions(g, &base, &candidates);
    if candidates.is_empty() {
        return substituted;
    }
    let joint = search(g, &candidates, None);
    if rank(plan_cost(g, &joint), None) < rank(plan_cost(g, &substituted), None) {
        joint
    } else {
        substituted
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartReport {
    pub nodes: Vec<NodeId>,
    pub output: NodeId,
    pub mode: ExecMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub parts: Vec<PartReport>,
    pub peak_bytes: u64,
    pub plain_peak_bytes: u64,
    /// Peak as a percentage of the all-plain peak.
    pub percent_of_plain: f64,
    pub rematerialized_bytes: u64,
    pub trace: Vec<TraceEvent>,
}

pub fn plan_report(g: &ComputationGraph, plan: &PartitionPlan) -> PlanReport {
    let trace = simulate_trace(g, &plan.parts, &plan.modes).expect("plan is valid");
    let plain = PartitionPlan::all_plain(g).peak_bytes;
    PlanReport {
        parts: plan
            .parts
            .iter()
            .zip(&plan.modes)
            .map(|(p, &mode)| PartReport { nodes: p.ordered(g), output: p.output(), mode })
            .collect(),
        peak_bytes: plan.peak_bytes,
        plain_peak_bytes: plain,
        percent_of_plain: 100.0 * plan.peak_bytes as f64 / plain as f64,
        rematerialized_bytes: trace.rematerialized_bytes(g),
        trace: trace.events,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphcore::NodeSpec;

    fn chain(n: u32, c: usize) -> ComputationGraph {
        let mut nodes = vec![NodeSpec::new(0, OpKind::Input, vec![], vec![c])];
        for i in 1..n {
            nodes.push(NodeSpec::new(i, OpKind::Nonlinearity, vec![i - 1], vec![c]));
        }
        ComputationGraph::new(nodes).unwrap()
    }

    /// input -> coupling block (F, G of the given lengths) -> output
    pub(crate) fn coupling(channels: usize, f_len: usize, g_len: usize) -> ComputationGraph {
        let c = channels;
        let h = c / 2;
        let mut nodes = vec![NodeSpec::new(0, OpKind::Input, vec![], vec![c, 2])];
        nodes.push(NodeSpec { half: Some(0), ..NodeSpec::new(1, OpKind::Split, vec![0], vec![h, 2]) });
        nodes.push(NodeSpec { half: Some(1), ..NodeSpec::new(2, OpKind::Split, vec![0], vec![h, 2]) });
        let mut id = 3;
        let mut prev = 2;
        let kinds = [OpKind::Affine, OpKind::Nonlinearity];
        for k in 0..f_len {
            nodes.push(NodeSpec::new(id, kinds[k % 2], vec![prev], vec![h, 2]));
            prev = id;
            id += 1;
        }
        let a1 = id;
        nodes.push(NodeSpec::new(a1, OpKind::Add, vec![1, prev], vec![h, 2]));
        id += 1;
        prev = a1;
        for k in 0..g_len {
            nodes.push(NodeSpec::new(id, kinds[k % 2], vec![prev], vec![h, 2]));
            prev = id;
            id += 1;
        }
        let a2 = id;
        nodes.push(NodeSpec::new(a2, OpKind::Add, vec![2, prev], vec![h, 2]));
        nodes.push(NodeSpec::new(a2 + 1, OpKind::Concat, vec![a1, a2], vec![c, 2]));
        nodes.push(NodeSpec::new(a2 + 2, OpKind::Output, vec![a2 + 1], vec![c, 2]));
        ComputationGraph::new(nodes).unwrap()
    }

    fn segments(g: &ComputationGraph, cuts: &[&[NodeId]], modes: &[ExecMode]) -> (Vec<Subgraph>, Vec<ExecMode>) {
        (cuts.iter().map(|c| Subgraph::new(g, c.iter().copied()).unwrap()).collect(), modes.to_vec())
    }

    #[test]
    fn single_node_peak_is_value_plus_grad() {
        let g = ComputationGraph::new(vec![NodeSpec::new(0, OpKind::Input, vec![], vec![10])]).unwrap();
        let plan = PartitionPlan::all_plain(&g);
        assert_eq!(plan.peak_bytes, 2 * g.size_of(0));
        assert_eq!(plan_checkpoints(&g, None), plan);
        assert_eq!(super::plan(&g), plan);
    }

    #[test]
    fn checkpoint_segment_lowers_chain_peak() {
        let g = chain(4, 4);
        let s = g.size_of(0);
        assert_eq!(PartitionPlan::all_plain(&g).peak_bytes, 5 * s);
        let (p, m) = segments(
            &g,
            &[&[0], &[1, 2], &[3]],
            &[ExecMode::Plain, ExecMode::Checkpoint, ExecMode::Plain],
        );
        assert_eq!(simulate_peak_memory(&g, &p, &m).unwrap(), 4 * s);
    }

    #[test]
    fn two_node_graph_stays_plain() {
        let g = chain(2, 4);
        let plan = super::plan(&g);
        assert!(plan.modes.iter().all(|&m| m == ExecMode::Plain));
        assert_eq!(plan.peak_bytes, 3 * g.size_of(0));
    }

    #[test]
    fn trace_is_balanced() {
        let g = chain(6, 4);
        let (p, m) = segments(
            &g,
            &[&[0, 1], &[2, 3, 4], &[5]],
            &[ExecMode::Checkpoint, ExecMode::Checkpoint, ExecMode::Plain],
        );
        let t = simulate_trace(&g, &p, &m).unwrap();
        assert_eq!(t.final_live(), 0);
        assert_eq!(t.peak(), simulate_peak_memory(&g, &p, &m).unwrap());
        let recomputed: Vec<NodeId> = t
            .events
            .iter()
            .filter(|e| e.kind == EventKind::Recompute)
            .map(|e| e.node)
            .collect();
        assert_eq!(recomputed, vec![2, 3, 0]);
    }

    #[test]
    fn rejects_bad_plans() {
        let g = chain(3, 2);
        let p = vec![Subgraph::new(&g, [0, 1]).unwrap()];
        assert_eq!(simulate_peak_memory(&g, &p, &[ExecMode::Plain]), Err(PlanError::InvalidPartition));
        let p = vec![Subgraph::new(&g, [0, 1, 2]).unwrap()];
        assert_eq!(
            simulate_peak_memory(&g, &p, &[ExecMode::Reversible]),
            Err(PlanError::IneligibleReversible(0))
        );
        assert!(matches!(simulate_peak_memory(&g, &p, &[]), Err(PlanError::ModeCount { .. })));
    }

    #[test]
    fn finds_coupling_block() {
        let g = coupling(8, 2, 2);
        let c = find_rev_candidates(&g);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].split_channels, 8);
        assert_eq!(c[0].input, 0);
        assert_eq!(c[0].f_chain, vec![3, 4]);
        assert_eq!(c[0].g_chain, vec![6, 7]);
        assert_eq!(c[0].part.len(), 9);
        assert!(find_rev_candidates(&chain(5, 8)).is_empty());
    }

    #[test]
    fn reversible_part_drops_its_input_after_forward() {
        let g = coupling(8, 2, 2);
        let cand = &find_rev_candidates(&g)[0];
        let parts = vec![Subgraph::singleton(0), cand.part.clone(), Subgraph::singleton(10)];
        let modes = vec![ExecMode::Plain, ExecMode::Reversible, ExecMode::Plain];
        let t = simulate_trace(&g, &parts, &modes).unwrap();
        let forward_end = t.events.iter().position(|e| e.kind == EventKind::Grad).unwrap();
        assert!(t.events[..forward_end]
            .iter()
            .any(|e| e.kind == EventKind::Free && e.node == 0));
        // split backward needs no input value, so x stays dropped
        assert!(!t.events.iter().any(|e| e.kind == EventKind::Reconstruct && e.node == 0));
        assert_eq!(t.final_live(), 0);
        let plain = PartitionPlan::all_plain(&g).peak_bytes;
        assert!(t.peak() < plain);
    }

    #[test]
    fn substitution_never_raises_peak() {
        let g = coupling(4, 3, 1);
        let base = plan_checkpoints(&g, None);
        let cands = find_rev_candidates(&g);
        assert_eq!(apply_rev_substitutions(&g, &base, &[]), base);
        let sub = apply_rev_substitutions(&g, &base, &cands);
        assert!(sub.peak_bytes <= base.peak_bytes);
        let p = super::plan(&g);
        assert!(p.peak_bytes <= sub.peak_bytes);
        assert_eq!(p, super::plan(&g));
    }

    #[test]
    fn budget_prefers_less_recompute() {
        let g = chain(9, 4);
        let tight = plan_checkpoints(&g, None);
        let loose = plan_checkpoints(&g, Some(PartitionPlan::all_plain(&g).peak_bytes));
        assert_eq!(loose.count(ExecMode::Checkpoint), 0);
        assert!(tight.peak_bytes < loose.peak_bytes);
    }

    #[test]
    fn beam_matches_exact_on_chain() {
        let g = chain(9, 4);
        let ix = Indexed::new(&g);
        let s = Search { ix: &ix, rev: BTreeMap::new(), budget: None };
        let exact = s.exact(s.partitions(usize::MAX).unwrap()).1;
        let beam = s.beam().1;
        assert_eq!(exact.peak, beam.peak);
    }
}
