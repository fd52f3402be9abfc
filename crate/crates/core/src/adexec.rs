//! A small reverse-mode engine that executes graphs under a partition plan.
//!
//! Values and gradients live in per-node slots, and every allocation or
//! release is logged, so the returned [`ExecutionTrace`] reflects the
//! tensors the engine actually held. Retention follows the plan's modes the
//! same way the planner's model describes, but is derived here
//! independently from the plan.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphcore::{ComputationGraph, NodeId, NodeSpec, OpKind};
use crate::memplanner::{match_coupling, EventKind, ExecMode, ExecutionTrace, PartitionPlan, PlanError, TraceEvent};

pub const NORM_EPS: f64 = 1e-5;
pub const LEAK: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExecError {
    #[error("shape mismatch at node {node}: expected {expected:?}, got {got:?}")]
    ShapeMismatch { node: NodeId, expected: Vec<usize>, got: Vec<usize> },
    #[error("expected {expected} input tensors, got {got}")]
    InputCount { expected: usize, got: usize },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("odd channel extent {0} cannot be split evenly")]
    OddChannels(usize),
    #[error("missing or malformed parameters for affine node {0}")]
    Params(NodeId),
    #[error(transparent)]
    Plan(#[from] PlanError),
}

/// Dense f64 tensor with a leading channel axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorValue {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorValue {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, ExecError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(ExecError::DataLength { len: data.len(), shape });
        }
        Ok(TensorValue { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        TensorValue { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn random<R: Rng>(shape: &[usize], rng: &mut R) -> Self {
        let data = (0..shape.iter().product::<usize>()).map(|_| StandardNormal.sample(rng)).collect();
        TensorValue { shape: shape.to_vec(), data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    /// Elements per channel.
    pub fn plane(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &TensorValue) -> f64 {
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn dot(&self, other: &TensorValue) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn add_assign(&mut self, other: &TensorValue) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sub(&self, other: &TensorValue) -> TensorValue {
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        TensorValue { shape: self.shape.clone(), data }
    }

    pub fn add(&self, other: &TensorValue) -> TensorValue {
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        TensorValue { shape: self.shape.clone(), data }
    }

    /// Channels `lo..hi`.
    pub fn channel_range(&self, lo: usize, hi: usize) -> TensorValue {
        let p = self.plane();
        let mut shape = self.shape.clone();
        shape[0] = hi - lo;
        TensorValue { shape, data: self.data[lo * p..hi * p].to_vec() }
    }

    pub fn concat(parts: &[&TensorValue]) -> TensorValue {
        let mut shape = parts[0].shape.clone();
        shape[0] = parts.iter().map(|t| t.channels()).sum();
        let data = parts.iter().flat_map(|t| t.data.iter().copied()).collect();
        TensorValue { shape, data }
    }
}

/// Max over elements of |a - b| / max(|b|, floor * max|b|).
pub fn relative_deviation(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tiny = (floor * scale).max(f64::MIN_POSITIVE);
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs() / y.abs().max(tiny)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub out_channels: usize,
    pub in_channels: usize,
    /// Row-major `out_channels x in_channels`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl AffineParams {
    pub fn zeros(out_channels: usize, in_channels: usize) -> Self {
        AffineParams {
            out_channels,
            in_channels,
            weight: vec![0.0; out_channels * in_channels],
            bias: vec![0.0; out_channels],
        }
    }
}

/// Weights and biases of every affine node.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub affine: BTreeMap<NodeId, AffineParams>,
}

impl Parameters {
    pub fn zeros(g: &ComputationGraph) -> Self {
        let affine = g
            .nodes()
            .iter()
            .filter(|n| n.op == OpKind::Affine)
            .map(|n| (n.id, AffineParams::zeros(n.channels(), g.node(n.inputs[0]).channels())))
            .collect();
        Parameters { affine }
    }

    /// Gaussian weights with variance `scale^2 / fan_in` and small biases.
    pub fn random<R: Rng>(g: &ComputationGraph, rng: &mut R, scale: f64) -> Self {
        let mut p = Self::zeros(g);
        for a in p.affine.values_mut() {
            let s = scale / (a.in_channels as f64).sqrt();
            for w in &mut a.weight {
                *w = s * { let z: f64 = StandardNormal.sample(rng); z };
            }
            for b in &mut a.bias {
                *b = 0.1 * { let z: f64 = StandardNormal.sample(rng); z };
            }
        }
        p
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.affine.values().flat_map(|a| a.weight.iter().chain(&a.bias).copied()).collect()
    }

    pub fn len(&self) -> usize {
        self.affine.values().map(|a| a.weight.len() + a.bias.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mutable access to the k-th scalar in [`Parameters::flatten`] order.
    pub fn scalar_mut(&mut self, mut k: usize) -> &mut f64 {
        for a in self.affine.values_mut() {
            if k < a.weight.len() {
                return &mut a.weight[k];
            }
            k -= a.weight.len();
            if k < a.bias.len() {
                return &mut a.bias[k];
            }
            k -= a.bias.len();
        }
        panic!("parameter index out of range")
    }

    fn check(&self, g: &ComputationGraph) -> Result<(), ExecError> {
        for n in g.nodes().iter().filter(|n| n.op == OpKind::Affine) {
            let ok = self.affine.get(&n.id).is_some_and(|a| {
                a.out_channels == n.channels()
                    && a.in_channels == g.node(n.inputs[0]).channels()
                    && a.weight.len() == a.out_channels * a.in_channels
                    && a.bias.len() == a.out_channels
            });
            if !ok {
                return Err(ExecError::Params(n.id));
            }
        }
        Ok(())
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Smooth leaky activation: slope 0.01 far left, 1 far right, zero at zero.
pub fn leaky(x: f64) -> f64 {
    LEAK * x + (1.0 - LEAK) * (softplus(x) - std::f64::consts::LN_2)
}

pub fn leaky_grad(x: f64) -> f64 {
    LEAK + (1.0 - LEAK) * sigmoid(x)
}

/// For each fine-grid element, the flat index of its coarse-grid parent.
fn coarse_index(fine: &[usize]) -> Vec<usize> {
    let coarse: Vec<usize> = fine.iter().map(|&e| e / 2).collect();
    let total: usize = fine.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; fine.len()];
    for _ in 0..total {
        let mut flat = 0;
        for (d, &i) in idx.iter().enumerate() {
            flat = flat * coarse[d] + i / 2;
        }
        out.push(flat);
        for d in (0..fine.len()).rev() {
            idx[d] += 1;
            if idx[d] < fine[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

fn norm_stats(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + NORM_EPS).sqrt())
}

/// Forward kernel of one node.
pub fn op_forward(node: &NodeSpec, params: Option<&AffineParams>, ins: &[&TensorValue]) -> TensorValue {
    let mut y = TensorValue::zeros(&node.shape);
    match node.op {
        OpKind::Input => unreachable!("inputs are supplied, not computed"),
        OpKind::Output => y.data.copy_from_slice(&ins[0].data),
        OpKind::Affine => {
            let a = params.expect("affine parameters");
            let x = ins[0];
            for o in 0..a.out_channels {
                let row = &a.weight[o * a.in_channels..(o + 1) * a.in_channels];
                let out = y.channel_mut(o);
                out.fill(a.bias[o]);
                for (i, &w) in row.iter().enumerate() {
                    if w != 0.0 {
                        for (yo, xi) in out.iter_mut().zip(x.channel(i)) {
                            *yo += w * xi;
                        }
                    }
                }
            }
        }
        OpKind::Nonlinearity => {
            for (yo, &xi) in y.data.iter_mut().zip(&ins[0].data) {
                *yo = leaky(xi);
            }
        }
        OpKind::Norm => {
            let x = ins[0];
            for c in 0..x.channels() {
                let (mean, inv) = norm_stats(x.channel(c));
                for (yo, xi) in y.channel_mut(c).iter_mut().zip(x.channel(c)) {
                    *yo = (xi - mean) * inv;
                }
            }
        }
        OpKind::Add => {
            for x in ins {
                y.add_assign(x);
            }
        }
        OpKind::Split => {
            let x = ins[0];
            let h = x.channels() / 2;
            let lo = if node.half == Some(0) { 0 } else { h };
            y = x.channel_range(lo, lo + h);
        }
        OpKind::Concat => y = TensorValue::concat(ins),
        OpKind::Downsample => {
            let x = ins[0];
            let map = coarse_index(&x.shape[1..]);
            let w = 1.0 / (1usize << (x.shape.len() - 1)) as f64;
            for c in 0..x.channels() {
                let src = x.channel(c);
                let dst = y.channel_mut(c);
                for (i, &o) in map.iter().enumerate() {
                    dst[o] += w * src[i];
                }
            }
        }
        OpKind::Upsample => {
            let x = ins[0];
            let map = coarse_index(&node.shape[1..]);
            for c in 0..x.channels() {
                let src = x.channel(c);
                for (yo, &o) in y.channel_mut(c).iter_mut().zip(&map) {
                    *yo = src[o];
                }
            }
        }
    }
    y
}

/// Whether a node's backward reads its input values.
pub fn backward_reads_inputs(op: OpKind) -> bool {
    matches!(op, OpKind::Affine | OpKind::Nonlinearity | OpKind::Norm)
}

/// Backward kernel. Input position `k` accumulates into `dins[slot[k]]`,
/// so repeated inputs share one buffer; parameter gradients go to
/// `dparams`.
pub fn op_backward(
    node: &NodeSpec,
    params: Option<&AffineParams>,
    ins: &[Option<&TensorValue>],
    dy: &TensorValue,
    dins: &mut [TensorValue],
    slot: &[usize],
    dparams: Option<&mut AffineParams>,
) {
    let value = |k: usize| ins[k].expect("backward needs this input value");
    match node.op {
        OpKind::Input => {}
        OpKind::Output => dins[slot[0]].add_assign(dy),
        OpKind::Affine => {
            let a = params.expect("affine parameters");
            let x = value(0);
            let da = dparams.expect("affine gradient slot");
            for o in 0..a.out_channels {
                let g = dy.channel(o);
                da.bias[o] += g.iter().sum::<f64>();
                for i in 0..a.in_channels {
                    da.weight[o * a.in_channels + i] += g.iter().zip(x.channel(i)).map(|(p, q)| p * q).sum::<f64>();
                    let w = a.weight[o * a.in_channels + i];
                    if w != 0.0 {
                        for (d, gv) in dins[slot[0]].channel_mut(i).iter_mut().zip(g) {
                            *d += w * gv;
                        }
                    }
                }
            }
        }
        OpKind::Nonlinearity => {
            for ((d, &g), &x) in dins[slot[0]].data.iter_mut().zip(&dy.data).zip(&value(0).data) {
                *d += g * leaky_grad(x);
            }
        }
        OpKind::Norm => {
            let x = value(0);
            for c in 0..x.channels() {
                let xc = x.channel(c);
                let gc = dy.channel(c);
                let (mean, inv) = norm_stats(xc);
                let n = xc.len() as f64;
                let g_mean = gc.iter().sum::<f64>() / n;
                let gx_mean = gc.iter().zip(xc).map(|(g, v)| g * (v - mean) * inv).sum::<f64>() / n;
                for ((d, g), v) in dins[slot[0]].channel_mut(c).iter_mut().zip(gc).zip(xc) {
                    *d += inv * (g - g_mean - (v - mean) * inv * gx_mean);
                }
            }
        }
        OpKind::Add => {
            for &s in slot {
                dins[s].add_assign(dy);
            }
        }
        OpKind::Split => {
            let h = node.channels();
            let lo = if node.half == Some(0) { 0 } else { h };
            let p = dy.plane();
            for (d, g) in dins[slot[0]].data[lo * p..(lo + h) * p].iter_mut().zip(&dy.data) {
                *d += g;
            }
        }
        OpKind::Concat => {
            let mut off = 0;
            for &s in slot {
                let d = &mut dins[s];
                let len = d.len();
                for (dv, g) in d.data.iter_mut().zip(&dy.data[off..off + len]) {
                    *dv += g;
                }
                off += len;
            }
        }
        OpKind::Downsample => {
            let map = coarse_index(&dins[slot[0]].shape[1..]);
            let w = 1.0 / (1usize << (dins[slot[0]].shape.len() - 1)) as f64;
            for c in 0..dy.channels() {
                let g = dy.channel(c).to_vec();
                for (d, &o) in dins[slot[0]].channel_mut(c).iter_mut().zip(&map) {
                    *d += w * g[o];
                }
            }
        }
        OpKind::Upsample => {
            let map = coarse_index(&node.shape[1..]);
            for c in 0..dy.channels() {
                let g = dy.channel(c);
                let d = dins[slot[0]].channel_mut(c);
                for (i, &o) in map.iter().enumerate() {
                    d[o] += g[i];
                }
            }
        }
    }
}

/// Additive coupling `y = concat(x1 + F(x2), x2 + G(x1 + F(x2)))`.
pub fn rev_forward(
    x: &TensorValue,
    f: impl Fn(&TensorValue) -> TensorValue,
    g: impl Fn(&TensorValue) -> TensorValue,
) -> Result<TensorValue, ExecError> {
    let c = x.channels();
    if !c.is_multiple_of(2) {
        return Err(ExecError::OddChannels(c));
    }
    let (x1, x2) = (x.channel_range(0, c / 2), x.channel_range(c / 2, c));
    let y1 = x1.add(&f(&x2));
    let y2 = x2.add(&g(&y1));
    Ok(TensorValue::concat(&[&y1, &y2]))
}

/// Inverse of [`rev_forward`] for the same `F` and `G`.
pub fn rev_inverse(
    y: &TensorValue,
    f: impl Fn(&TensorValue) -> TensorValue,
    g: impl Fn(&TensorValue) -> TensorValue,
) -> Result<TensorValue, ExecError> {
    let c = y.channels();
    if !c.is_multiple_of(2) {
        return Err(ExecError::OddChannels(c));
    }
    let (y1, y2) = (y.channel_range(0, c / 2), y.channel_range(c / 2, c));
    let x2 = y2.sub(&g(&y1));
    let x1 = y1.sub(&f(&x2));
    Ok(TensorValue::concat(&[&x1, &x2]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Parameters,
    /// One per input node, ascending id.
    pub inputs: Vec<TensorValue>,
    pub trace: ExecutionTrace,
}

struct Block {
    input: NodeId,
    splits: [NodeId; 2],
    f_chain: Vec<NodeId>,
    adds: [NodeId; 2],
    g_chain: Vec<NodeId>,
}

struct Engine<'a> {
    g: &'a ComputationGraph,
    params: &'a Parameters,
    feeds: BTreeMap<NodeId, &'a TensorValue>,
    values: BTreeMap<NodeId, Cow<'a, TensorValue>>,
    input_grads: BTreeMap<NodeId, TensorValue>,
    grads: BTreeMap<NodeId, TensorValue>,
    dparams: Parameters,
    uses: BTreeMap<NodeId, usize>,
    hold: BTreeSet<NodeId>,
    bytes: u64,
    trace: ExecutionTrace,
}

impl<'a> Engine<'a> {
    fn new(g: &'a ComputationGraph, params: &'a Parameters, inputs: &'a [TensorValue]) -> Result<Self, ExecError> {
        params.check(g)?;
        let ids = g.inputs();
        if ids.len() != inputs.len() {
            return Err(ExecError::InputCount { expected: ids.len(), got: inputs.len() });
        }
        for (&id, t) in ids.iter().zip(inputs) {
            if t.shape != g.node(id).shape || t.len() != g.node(id).numel() {
                return Err(ExecError::ShapeMismatch { node: id, expected: g.node(id).shape.clone(), got: t.shape.clone() });
            }
        }
        Ok(Engine {
            g,
            params,
            feeds: ids.into_iter().zip(inputs).collect(),
            values: BTreeMap::new(),
            input_grads: BTreeMap::new(),
            grads: BTreeMap::new(),
            dparams: Parameters::zeros(g),
            uses: g.topological_order().iter().map(|&v| (v, g.consumers(v).len())).collect(),
            hold: BTreeSet::new(),
            bytes: 0,
            trace: ExecutionTrace::default(),
        })
    }

    fn bytes_of(&self, v: NodeId, t: &TensorValue) -> u64 {
        (t.len() * self.g.node(v).elem_bytes) as u64
    }

    fn log(&mut self, kind: EventKind, node: NodeId) {
        self.trace.events.push(TraceEvent { kind, node, live_bytes: self.bytes });
    }

    fn put(&mut self, kind: EventKind, v: NodeId, t: Cow<'a, TensorValue>) {
        self.bytes += self.bytes_of(v, &t);
        let prev = self.values.insert(v, t);
        debug_assert!(prev.is_none(), "value of node {v} materialized twice");
        self.log(kind, v);
    }

    fn drop_value(&mut self, v: NodeId) {
        let t = self.values.remove(&v).expect("value is live");
        self.bytes -= self.bytes_of(v, &t);
        self.log(EventKind::Free, v);
    }

    fn release(&mut self, v: NodeId) {
        if self.uses[&v] == 0 && !self.hold.contains(&v) && self.values.contains_key(&v) {
            self.drop_value(v);
        }
    }

    fn value(&self, v: NodeId) -> &TensorValue {
        self.values[&v].as_ref()
    }

    fn compute(&self, v: NodeId) -> Cow<'a, TensorValue> {
        let node = self.g.node(v);
        if node.op == OpKind::Input {
            return Cow::Borrowed(self.feeds[&v]);
        }
        let ins: Vec<&TensorValue> = node.inputs.iter().map(|u| self.value(*u)).collect();
        Cow::Owned(op_forward(node, self.params.affine.get(&v), &ins))
    }

    fn step(&mut self, v: NodeId) {
        let g = self.g;
        let node = g.node(v);
        let distinct = g.distinct_inputs(v);
        for &u in &distinct {
            if !self.grads.contains_key(&u) {
                let t = TensorValue::zeros(&g.node(u).shape);
                self.bytes += self.bytes_of(u, &t);
                self.grads.insert(u, t);
                self.log(EventKind::Grad, u);
            }
        }
        let dy = self.grads.remove(&v).expect("gradient of node is live");
        if !node.inputs.is_empty() {
            let reads = backward_reads_inputs(node.op);
            let ins: Vec<Option<&TensorValue>> =
                node.inputs.iter().map(|u| if reads { self.values.get(u).map(|c| c.as_ref()) } else { None }).collect();
            let mut dins: Vec<TensorValue> =
                distinct.iter().map(|u| self.grads.remove(u).expect("allocated above")).collect();
            let slot: Vec<usize> =
                node.inputs.iter().map(|u| distinct.iter().position(|d| d == u).expect("distinct input")).collect();
            op_backward(node, self.params.affine.get(&v), &ins, &dy, &mut dins, &slot, self.dparams.affine.get_mut(&v));
            for (u, d) in distinct.iter().zip(dins) {
                self.grads.insert(*u, d);
            }
        }
        self.bytes -= self.bytes_of(v, &dy);
        self.log(EventKind::FreeGrad, v);
        if node.op == OpKind::Input {
            self.input_grads.insert(v, dy);
        }
        for &u in &distinct {
            *self.uses.get_mut(&u).expect("known node") -= 1;
            self.release(u);
        }
    }

    fn block(&self, y: NodeId) -> Block {
        let c = match_coupling(self.g, y).expect("reversible parts are coupling blocks");
        Block { input: c.input, splits: c.splits, f_chain: c.f_chain, adds: c.adds, g_chain: c.g_chain }
    }

    fn reversible(&mut self, y: NodeId, needed_input: bool) {
        let b = self.block(y);
        let [s1, s2] = b.splits;
        let [a1, a2] = b.adds;
        let out = self.value(y);
        let h = out.channels() / 2;
        let (lo, hi) = (out.channel_range(0, h), out.channel_range(h, 2 * h));
        self.hold.insert(a1);
        self.hold.insert(a2);
        self.put(EventKind::Reconstruct, a1, Cow::Owned(lo));
        self.put(EventKind::Reconstruct, a2, Cow::Owned(hi));
        self.hold.remove(&y);
        self.release(y);
        self.step(y);
        for &v in &b.g_chain {
            let t = self.compute(v);
            self.put(EventKind::Reconstruct, v, t);
        }
        let g_last = *b.g_chain.last().expect("nonempty chain");
        let t = self.value(a2).sub(self.value(g_last));
        self.put(EventKind::Reconstruct, s2, Cow::Owned(t));
        self.hold.remove(&a2);
        self.release(a2);
        self.step(a2);
        for &v in b.g_chain.iter().rev() {
            self.step(v);
        }
        for &v in &b.f_chain {
            let t = self.compute(v);
            self.put(EventKind::Reconstruct, v, t);
        }
        let f_last = *b.f_chain.last().expect("nonempty chain");
        let t = self.value(a1).sub(self.value(f_last));
        self.put(EventKind::Reconstruct, s1, Cow::Owned(t));
        self.hold.remove(&a1);
        self.release(a1);
        if needed_input && !self.values.contains_key(&b.input) {
            let t = TensorValue::concat(&[self.value(s1), self.value(s2)]);
            self.put(EventKind::Reconstruct, b.input, Cow::Owned(t));
        }
        self.step(a1);
        for &v in b.f_chain.iter().rev() {
            self.step(v);
        }
        let (hi, lo) = if self.g.label(s1) > self.g.label(s2) { (s1, s2) } else { (s2, s1) };
        self.step(hi);
        self.step(lo);
    }
}

/// Which values must outlive the forward pass under `plan`.
fn retention(g: &ComputationGraph, plan: &PartitionPlan) -> (BTreeMap<NodeId, usize>, BTreeSet<NodeId>, BTreeSet<NodeId>) {
    let mut part_of = BTreeMap::new();
    for (i, p) in plan.parts.iter().enumerate() {
        for &v in p.nodes() {
            part_of.insert(v, i);
        }
    }
    let mut rebuilt_by_next = BTreeSet::new();
    let mut rev_outputs = BTreeSet::new();
    for (p, &m) in plan.parts.iter().zip(&plan.modes) {
        if m == ExecMode::Reversible {
            rev_outputs.insert(p.output());
            rebuilt_by_next.extend(p.external_inputs(g));
        }
    }
    let mut keep = BTreeSet::new();
    for &u in g.topological_order() {
        let pu = part_of[&u];
        let needed = g.consumers(u).iter().any(|c| {
            let pc = part_of[c];
            match plan.modes[pc] {
                ExecMode::Plain => true,
                ExecMode::Checkpoint => pc != pu,
                ExecMode::Reversible => false,
            }
        });
        let rev_out = rev_outputs.contains(&u) && !rebuilt_by_next.contains(&u);
        if needed || rev_out || u == g.output() {
            keep.insert(u);
        }
    }
    (part_of, keep, rev_outputs)
}

fn check_plan(g: &ComputationGraph, plan: &PartitionPlan) -> Result<(), ExecError> {
    crate::memplanner::simulate_peak_memory(g, &plan.parts, &plan.modes)?;
    Ok(())
}

fn run_forward(e: &mut Engine, keep: &BTreeSet<NodeId>) {
    let g = e.g;
    for &v in g.topological_order() {
        let t = e.compute(v);
        e.put(EventKind::Produce, v, t);
        for u in g.distinct_inputs(v) {
            if !keep.contains(&u) && g.consumers(u).last() == Some(&v) {
                e.drop_value(u);
            }
        }
    }
}

/// Runs the forward pass under `plan`; the trace ends with every retained
/// value released.
pub fn forward(
    g: &ComputationGraph,
    params: &Parameters,
    inputs: &[TensorValue],
    plan: &PartitionPlan,
) -> Result<(TensorValue, ExecutionTrace), ExecError> {
    check_plan(g, plan)?;
    let mut e = Engine::new(g, params, inputs)?;
    let (_, keep, _) = retention(g, plan);
    run_forward(&mut e, &keep);
    let out = e.value(g.output()).clone();
    let live: Vec<NodeId> = e.values.keys().copied().collect();
    for v in live {
        e.drop_value(v);
    }
    Ok((out, e.trace))
}

/// Forward plus backward of the scalar `<loss_grad, output>` under `plan`.
pub fn backward(
    g: &ComputationGraph,
    params: &Parameters,
    inputs: &[TensorValue],
    plan: &PartitionPlan,
    loss_grad: &TensorValue,
) -> Result<Gradients, ExecError> {
    Ok(backward_with(g, params, inputs, plan, |_| Ok::<_, ExecError>(loss_grad.clone()))?.1)
}

/// Like [`backward`], but the loss gradient is computed from the forward
/// output by `loss`. Returns the output alongside the gradients.
pub fn backward_with<E: From<ExecError>>(
    g: &ComputationGraph,
    params: &Parameters,
    inputs: &[TensorValue],
    plan: &PartitionPlan,
    loss: impl FnOnce(&TensorValue) -> Result<TensorValue, E>,
) -> Result<(TensorValue, Gradients), E> {
    check_plan(g, plan)?;
    let sink = g.output();
    let mut e = Engine::new(g, params, inputs)?;
    let (_, keep, rev_outputs) = retention(g, plan);
    run_forward(&mut e, &keep);
    let output = e.value(sink).clone();
    let seed = loss(&output)?;
    if seed.shape != g.node(sink).shape {
        let err = ExecError::ShapeMismatch { node: sink, expected: g.node(sink).shape.clone(), got: seed.shape };
        return Err(err.into());
    }

    e.hold = rev_outputs.clone();
    e.bytes += e.bytes_of(sink, &seed);
    e.grads.insert(sink, seed);
    e.log(EventKind::Grad, sink);
    e.release(sink);

    let mut order: Vec<usize> = (0..plan.parts.len()).collect();
    order.sort_by_key(|&p| std::cmp::Reverse(g.label(plan.parts[p].output())));
    for p in order {
        let part = &plan.parts[p];
        let members = part.ordered(g);
        match plan.modes[p] {
            ExecMode::Plain | ExecMode::Checkpoint => {
                if plan.modes[p] == ExecMode::Checkpoint {
                    for &v in &members[..members.len() - 1] {
                        let t = e.compute(v);
                        e.put(EventKind::Recompute, v, t);
                    }
                }
                for &v in members.iter().rev() {
                    e.step(v);
                }
            }
            ExecMode::Reversible => {
                let x = e.block(part.output()).input;
                let needed = rev_outputs.contains(&x);
                e.reversible(part.output(), needed);
            }
        }
    }
    let mut input_grads = std::mem::take(&mut e.input_grads);
    let grads = Gradients {
        inputs: g.inputs().iter().map(|v| input_grads.remove(v).expect("every input is stepped")).collect(),
        params: e.dparams,
        trace: e.trace,
    };
    Ok((output, grads))
}

/// Central-difference estimate of the gradients of `<loss_grad, output>`.
pub fn finite_difference(
    g: &ComputationGraph,
    params: &Parameters,
    inputs: &[TensorValue],
    loss_grad: &TensorValue,
    step: f64,
) -> Result<(Vec<f64>, Vec<Vec<f64>>), ExecError> {
    let plain = PartitionPlan::all_plain(g);
    let eval = |p: &Parameters, x: &[TensorValue]| -> Result<f64, ExecError> {
        Ok(forward(g, p, x, &plain)?.0.dot(loss_grad))
    };
    let mut dp = Vec::with_capacity(params.len());
    let mut work = params.clone();
    for k in 0..params.len() {
        let orig = *work.scalar_mut(k);
        *work.scalar_mut(k) = orig + step;
        let up = eval(&work, inputs)?;
        *work.scalar_mut(k) = orig - step;
        let down = eval(&work, inputs)?;
        *work.scalar_mut(k) = orig;
        dp.push((up - down) / (2.0 * step));
    }
    let mut dx = Vec::with_capacity(inputs.len());
    let mut xs = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut d = Vec::with_capacity(inputs[i].len());
        for k in 0..inputs[i].len() {
            let orig = xs[i].data[k];
            xs[i].data[k] = orig + step;
            let up = eval(params, &xs)?;
            xs[i].data[k] = orig - step;
            let down = eval(params, &xs)?;
            xs[i].data[k] = orig;
            d.push((up - down) / (2.0 * step));
        }
        dx.push(d);
    }
    Ok((dp, dx))
}
