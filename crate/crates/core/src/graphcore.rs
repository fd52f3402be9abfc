//! Computation graphs, topological labeling and the subgraph validity predicate.
//!
//! A graph is a DAG of tensor-producing nodes. Every node carries its output
//! shape (leading extent is the channel axis) and element width, which is all
//! the memory planner needs. The executor in [`crate::adexec`] gives each
//! [`OpKind`] its numeric meaning.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::cmp::Reverse;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = u32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("graph contains a cycle through node {0}")]
    CycleDetected(NodeId),
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error("node {0} lists itself as an input")]
    SelfReference(NodeId),
    #[error("node {id}: {reason}")]
    InvalidNode { id: NodeId, reason: String },
    #[error("graph must have exactly one output node, found {0}")]
    OutputCount(usize),
    #[error("graph has no nodes")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Input,
    Affine,
    Nonlinearity,
    /// Per-channel standardization with statistics of the current activation.
    Norm,
    Add,
    Split,
    Concat,
    Downsample,
    Upsample,
    Output,
}

impl OpKind {
    /// Single-input ops that keep spatial extents; these build coupling bodies.
    pub fn is_unary_body(self) -> bool {
        matches!(self, OpKind::Affine | OpKind::Nonlinearity | OpKind::Norm)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: NodeId,
    pub op: OpKind,
    pub inputs: Vec<NodeId>,
    pub shape: Vec<usize>,
    pub elem_bytes: usize,
    /// Channel half taken by a `split` node (0 = leading half).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub half: Option<u8>,
}

impl NodeSpec {
    pub fn new(id: NodeId, op: OpKind, inputs: Vec<NodeId>, shape: Vec<usize>) -> Self {
        NodeSpec { id, op, inputs, shape, elem_bytes: 4, half: None }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn size_bytes(&self) -> u64 {
        (self.numel() * self.elem_bytes) as u64
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn spatial(&self) -> &[usize] {
        &self.shape[1..]
    }
}

/// Deterministic Kahn ordering of raw node specs, ties broken by ascending id.
pub fn topological_order(nodes: &[NodeSpec]) -> Result<Vec<NodeId>, GraphError> {
    let mut index = BTreeMap::new();
    for (pos, n) in nodes.iter().enumerate() {
        if index.insert(n.id, pos).is_some() {
            return Err(GraphError::DuplicateNode(n.id));
        }
    }
    let mut indegree = vec![0usize; nodes.len()];
    let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    for (pos, n) in nodes.iter().enumerate() {
        let distinct: BTreeSet<NodeId> = n.inputs.iter().copied().collect();
        for src in distinct {
            let &src_pos = index.get(&src).ok_or(GraphError::UnknownNode(src))?;
            indegree[pos] += 1;
            consumers[src_pos].push(pos);
        }
    }
    let mut ready: BinaryHeap<Reverse<(NodeId, usize)>> = nodes
        .iter()
        .enumerate()
        .filter(|(pos, _)| indegree[*pos] == 0)
        .map(|(pos, n)| Reverse((n.id, pos)))
        .collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(Reverse((id, pos))) = ready.pop() {
        order.push(id);
        for &c in &consumers[pos] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.push(Reverse((nodes[c].id, c)));
            }
        }
    }
    if order.len() != nodes.len() {
        let stuck = nodes
            .iter()
            .enumerate()
            .filter(|(pos, _)| indegree[*pos] > 0)
            .map(|(_, n)| n.id)
            .min()
            .unwrap_or_default();
        return Err(GraphError::CycleDetected(stuck));
    }
    Ok(order)
}

/// A validated DAG with its topological labels precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct ComputationGraph {
    nodes: Vec<NodeSpec>,
    index: BTreeMap<NodeId, usize>,
    order: Vec<NodeId>,
    label: BTreeMap<NodeId, usize>,
    consumers: BTreeMap<NodeId, Vec<NodeId>>,
    output: NodeId,
}

impl ComputationGraph {
    pub fn new(nodes: Vec<NodeSpec>) -> Result<Self, GraphError> {
        if nodes.is_empty() {
            return Err(GraphError::Empty);
        }
        for n in &nodes {
            if n.inputs.contains(&n.id) {
                return Err(GraphError::SelfReference(n.id));
            }
        }
        let order = topological_order(&nodes)?;
        let index: BTreeMap<NodeId, usize> =
            nodes.iter().enumerate().map(|(pos, n)| (n.id, pos)).collect();
        let label: BTreeMap<NodeId, usize> =
            order.iter().enumerate().map(|(l, &id)| (id, l)).collect();
        let mut consumers: BTreeMap<NodeId, Vec<NodeId>> =
            nodes.iter().map(|n| (n.id, Vec::new())).collect();
        for n in &nodes {
            let distinct: BTreeSet<NodeId> = n.inputs.iter().copied().collect();
            for src in distinct {
                consumers.get_mut(&src).expect("checked by sort").push(n.id);
            }
        }
        for list in consumers.values_mut() {
            list.sort_by_key(|id| label[id]);
        }
        let sinks: Vec<NodeId> = order
            .iter()
            .copied()
            .filter(|id| consumers[id].is_empty())
            .collect();
        if sinks.len() != 1 {
            return Err(GraphError::OutputCount(sinks.len()));
        }
        let g = ComputationGraph { nodes, index, order, label, consumers, output: sinks[0] };
        for n in &g.nodes {
            g.check_node(n)?;
        }
        Ok(g)
    }

    fn check_node(&self, n: &NodeSpec) -> Result<(), GraphError> {
        let bad = |reason: &str| GraphError::InvalidNode { id: n.id, reason: reason.to_string() };
        if n.shape.is_empty() || n.shape.contains(&0) {
            return Err(bad("shape extents must be >= 1 and rank >= 1"));
        }
        if n.elem_bytes == 0 {
            return Err(bad("elem_bytes must be positive"));
        }
        if n.half.is_some() && n.op != OpKind::Split {
            return Err(bad("only split nodes carry a half index"));
        }
        let ins: Vec<&NodeSpec> = n.inputs.iter().map(|id| self.node(*id)).collect();
        let unary = |op: &str| -> Result<&NodeSpec, GraphError> {
            if ins.len() != 1 {
                return Err(bad(&format!("{op} takes exactly one input")));
            }
            Ok(ins[0])
        };
        match n.op {
            OpKind::Input => {
                if !ins.is_empty() {
                    return Err(bad("input nodes take no inputs"));
                }
            }
            OpKind::Affine => {
                let x = unary("affine")?;
                if x.spatial() != n.spatial() {
                    return Err(bad("affine keeps spatial extents"));
                }
            }
            OpKind::Nonlinearity | OpKind::Norm | OpKind::Output => {
                let x = unary("elementwise op")?;
                if x.shape != n.shape {
                    return Err(bad("shape must equal input shape"));
                }
            }
            OpKind::Add => {
                if ins.len() < 2 {
                    return Err(bad("add takes at least two inputs"));
                }
                if ins.iter().any(|x| x.shape != n.shape) {
                    return Err(bad("add operands must match the output shape"));
                }
            }
            OpKind::Split => {
                let x = unary("split")?;
                if x.channels() % 2 != 0 {
                    return Err(bad("split requires an even channel extent"));
                }
                if n.channels() * 2 != x.channels() || x.spatial() != n.spatial() {
                    return Err(bad("split output is half of the input channels"));
                }
                if !matches!(n.half, Some(0) | Some(1)) {
                    return Err(bad("split needs half = 0 or 1"));
                }
            }
            OpKind::Concat => {
                if ins.len() < 2 {
                    return Err(bad("concat takes at least two inputs"));
                }
                if ins.iter().any(|x| x.spatial() != n.spatial()) {
                    return Err(bad("concat operands must agree except in channels"));
                }
                if ins.iter().map(|x| x.channels()).sum::<usize>() != n.channels() {
                    return Err(bad("concat channels must sum to the output channels"));
                }
            }
            OpKind::Downsample => {
                let x = unary("downsample")?;
                let ok = x.shape.len() == n.shape.len()
                    && x.channels() == n.channels()
                    && x.spatial().iter().zip(n.spatial()).all(|(&a, &b)| a % 2 == 0 && a / 2 == b);
                if !ok {
                    return Err(bad("downsample halves every even spatial extent"));
                }
            }
            OpKind::Upsample => {
                let x = unary("upsample")?;
                let ok = x.shape.len() == n.shape.len()
                    && x.channels() == n.channels()
                    && x.spatial().iter().zip(n.spatial()).all(|(&a, &b)| a * 2 == b);
                if !ok {
                    return Err(bad("upsample doubles every spatial extent"));
                }
            }
        }
        Ok(())
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.index.contains_key(&id)
    }

    /// Panics on unknown ids; use [`ComputationGraph::get`] for fallible lookup.
    pub fn node(&self, id: NodeId) -> &NodeSpec {
        &self.nodes[self.index[&id]]
    }

    pub fn get(&self, id: NodeId) -> Option<&NodeSpec> {
        self.index.get(&id).map(|&pos| &self.nodes[pos])
    }

    pub fn size_of(&self, id: NodeId) -> u64 {
        self.node(id).size_bytes()
    }

    pub fn topological_order(&self) -> &[NodeId] {
        &self.order
    }

    pub fn label(&self, id: NodeId) -> usize {
        self.label[&id]
    }

    /// Distinct consumers of `id`, in label order.
    pub fn consumers(&self, id: NodeId) -> &[NodeId] {
        &self.consumers[&id]
    }

    /// Distinct inputs of `id`, in label order.
    pub fn distinct_inputs(&self, id: NodeId) -> Vec<NodeId> {
        let mut v: Vec<NodeId> = self.node(id).inputs.clone();
        v.sort_by_key(|i| self.label[i]);
        v.dedup();
        v
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    /// Input nodes in ascending id order.
    pub fn inputs(&self) -> Vec<NodeId> {
        let mut v: Vec<NodeId> =
            self.nodes.iter().filter(|n| n.op == OpKind::Input).map(|n| n.id).collect();
        v.sort_unstable();
        v
    }

    pub fn edges(&self) -> Vec<(NodeId, NodeId)> {
        let mut e: Vec<(NodeId, NodeId)> = self
            .order
            .iter()
            .flat_map(|&v| self.distinct_inputs(v).into_iter().map(move |u| (u, v)))
            .collect();
        e.sort_unstable();
        e
    }

    pub fn total_bytes(&self) -> u64 {
        self.nodes.iter().map(NodeSpec::size_bytes).sum()
    }

    pub fn to_json(&self) -> String {
        let file = GraphFile { nodes: self.nodes.clone() };
        let mut s = serde_json::to_string_pretty(&file).expect("graph serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, GraphFileError> {
        let file: GraphFile = serde_json::from_str(text)?;
        Ok(ComputationGraph::new(file.nodes)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GraphFileError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GraphFileError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

/// On-disk graph document: `{"nodes": [{id, op, inputs, shape, elem_bytes}]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphFile {
    pub nodes: Vec<NodeSpec>,
}

#[derive(Debug, Error)]
pub enum GraphFileError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// A nonempty node set together with its topologically last member.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Subgraph {
    nodes: BTreeSet<NodeId>,
    output: NodeId,
}

impl Subgraph {
    pub fn new(g: &ComputationGraph, ids: impl IntoIterator<Item = NodeId>) -> Result<Self, GraphError> {
        let nodes: BTreeSet<NodeId> = ids.into_iter().collect();
        if let Some(&bad) = nodes.iter().find(|id| !g.contains(**id)) {
            return Err(GraphError::UnknownNode(bad));
        }
        let output = *nodes
            .iter()
            .max_by_key(|id| g.label(**id))
            .ok_or(GraphError::Empty)?;
        Ok(Subgraph { nodes, output })
    }

    pub fn singleton(id: NodeId) -> Self {
        Subgraph { nodes: BTreeSet::from([id]), output: id }
    }

    pub fn nodes(&self) -> &BTreeSet<NodeId> {
        &self.nodes
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.nodes.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Members sorted by topological label.
    pub fn ordered(&self, g: &ComputationGraph) -> Vec<NodeId> {
        let mut v: Vec<NodeId> = self.nodes.iter().copied().collect();
        v.sort_by_key(|id| g.label(*id));
        v
    }

    /// Nodes outside the set that feed a member.
    pub fn external_inputs(&self, g: &ComputationGraph) -> BTreeSet<NodeId> {
        self.nodes
            .iter()
            .flat_map(|&v| g.node(v).inputs.iter().copied())
            .filter(|u| !self.nodes.contains(u))
            .collect()
    }
}

/// True iff only the output node of `s` has consumers outside `s`.
pub fn is_valid_subgraph(g: &ComputationGraph, s: &Subgraph) -> Result<bool, GraphError> {
    if let Some(&bad) = s.nodes.iter().find(|id| !g.contains(**id)) {
        return Err(GraphError::UnknownNode(bad));
    }
    Ok(s
        .nodes
        .iter()
        .filter(|&&v| v != s.output)
        .all(|&v| g.consumers(v).iter().all(|c| s.nodes.contains(c))))
}

/// Pairwise disjoint, covering, and every part valid.
pub fn is_valid_partition(g: &ComputationGraph, parts: &[Subgraph]) -> bool {
    let mut seen = BTreeSet::new();
    for p in parts {
        for &v in &p.nodes {
            if !g.contains(v) || !seen.insert(v) {
                return false;
            }
        }
    }
    seen.len() == g.len() && parts.iter().all(|p| is_valid_subgraph(g, p).unwrap_or(false))
}
