//! Graph generators: a builder, UNet-shaped detector graphs and random DAGs.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::graphcore::{ComputationGraph, NodeId, NodeSpec, OpKind};

/// Appends nodes with consecutive ids and derives every output shape.
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    nodes: Vec<NodeSpec>,
    elem_bytes: usize,
}

impl GraphBuilder {
    pub fn new(elem_bytes: usize) -> Self {
        GraphBuilder { nodes: Vec::new(), elem_bytes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id as usize].shape
    }

    fn push(&mut self, op: OpKind, inputs: Vec<NodeId>, shape: Vec<usize>, half: Option<u8>) -> NodeId {
        let id = self.nodes.len() as NodeId;
        self.nodes.push(NodeSpec { id, op, inputs, shape, elem_bytes: self.elem_bytes, half });
        id
    }

    pub fn input(&mut self, shape: Vec<usize>) -> NodeId {
        self.push(OpKind::Input, vec![], shape, None)
    }

    pub fn affine(&mut self, x: NodeId, channels: usize) -> NodeId {
        let mut shape = self.shape(x).to_vec();
        shape[0] = channels;
        self.push(OpKind::Affine, vec![x], shape, None)
    }

    pub fn nonlinearity(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(OpKind::Nonlinearity, vec![x], shape, None)
    }

    pub fn norm(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(OpKind::Norm, vec![x], shape, None)
    }

    pub fn add(&mut self, xs: &[NodeId]) -> NodeId {
        let shape = self.shape(xs[0]).to_vec();
        self.push(OpKind::Add, xs.to_vec(), shape, None)
    }

    pub fn split(&mut self, x: NodeId, half: u8) -> NodeId {
        let mut shape = self.shape(x).to_vec();
        shape[0] /= 2;
        self.push(OpKind::Split, vec![x], shape, Some(half))
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> NodeId {
        let mut shape = self.shape(xs[0]).to_vec();
        shape[0] = xs.iter().map(|&x| self.shape(x)[0]).sum();
        self.push(OpKind::Concat, xs.to_vec(), shape, None)
    }

    pub fn downsample(&mut self, x: NodeId) -> NodeId {
        let mut shape = self.shape(x).to_vec();
        for e in &mut shape[1..] {
            *e /= 2;
        }
        self.push(OpKind::Downsample, vec![x], shape, None)
    }

    pub fn upsample(&mut self, x: NodeId) -> NodeId {
        let mut shape = self.shape(x).to_vec();
        for e in &mut shape[1..] {
            *e *= 2;
        }
        self.push(OpKind::Upsample, vec![x], shape, None)
    }

    pub fn output(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(OpKind::Output, vec![x], shape, None)
    }

    /// affine -> norm -> nonlinearity at the input's channel count.
    pub fn conv_block(&mut self, x: NodeId, channels: usize) -> NodeId {
        let a = self.affine(x, channels);
        let n = self.norm(a);
        self.nonlinearity(n)
    }

    /// Additive coupling block whose F and G are each one `conv_block`.
    pub fn coupling(&mut self, x: NodeId) -> NodeId {
        let h = self.shape(x)[0] / 2;
        let x1 = self.split(x, 0);
        let x2 = self.split(x, 1);
        let f = self.conv_block(x2, h);
        let y1 = self.add(&[x1, f]);
        let gg = self.conv_block(y1, h);
        let y2 = self.add(&[x2, gg]);
        self.concat(&[y1, y2])
    }

    pub fn build(self) -> ComputationGraph {
        ComputationGraph::new(self.nodes).expect("builder produces valid graphs")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnetSpec {
    pub in_channels: usize,
    pub base_channels: usize,
    pub levels: usize,
    pub spatial: Vec<usize>,
    pub out_channels: usize,
    pub elem_bytes: usize,
    /// Coupling blocks after each level's convolution block; zero gives a
    /// second convolution block instead.
    pub couplings: usize,
}

impl UnetSpec {
    /// Half-resolution copy of a 176x112x112 single-channel volume with
    /// 16 base channels over four levels and a 22-channel heatmap head.
    pub fn reference() -> Self {
        UnetSpec {
            in_channels: 1,
            base_channels: 16,
            levels: 4,
            spatial: vec![88, 56, 56],
            out_channels: 22,
            elem_bytes: 4,
            couplings: 2,
        }
    }

    /// Small enough to execute numerically in tests.
    pub fn toy() -> Self {
        UnetSpec {
            in_channels: 2,
            base_channels: 4,
            levels: 2,
            spatial: vec![4, 4, 2],
            out_channels: 3,
            elem_bytes: 8,
            couplings: 2,
        }
    }
}

/// Encoder-decoder with skip concatenations. Every level runs a conv block
/// followed by a coupling block; levels are joined by 2x down/upsampling.
pub fn unet_graph(spec: &UnetSpec) -> ComputationGraph {
    let mut b = GraphBuilder::new(spec.elem_bytes);
    let mut shape = vec![spec.in_channels];
    shape.extend(&spec.spatial);
    let mut x = b.input(shape);
    let mut skips = Vec::new();
    let level = |b: &mut GraphBuilder, x: NodeId, c: usize| {
        let mut y = b.conv_block(x, c);
        if spec.couplings == 0 {
            return b.conv_block(y, c);
        }
        for _ in 0..spec.couplings {
            y = b.coupling(y);
        }
        y
    };
    for l in 0..spec.levels {
        let c = spec.base_channels << l;
        x = level(&mut b, x, c);
        if l + 1 < spec.levels {
            skips.push(x);
            x = b.downsample(x);
        }
    }
    for l in (0..spec.levels - 1).rev() {
        let c = spec.base_channels << l;
        let up = b.upsample(x);
        let merged = b.concat(&[skips[l], up]);
        x = level(&mut b, merged, c);
    }
    let head = b.affine(x, spec.out_channels);
    b.output(head);
    b.build()
}

/// A random DAG with at most `max_nodes` nodes over `[channels, length]`
/// tensors. Larger draws may embed one coupling block.
pub fn random_dag<R: Rng>(rng: &mut R, max_nodes: usize) -> ComputationGraph {
    assert!(max_nodes >= 1);
    let target = rng.random_range(1..=max_nodes);
    let len = rng.random_range(3..=5usize);
    let elem_bytes = *[4usize, 8].choose(rng).expect("nonempty");
    let mut b = GraphBuilder::new(elem_bytes);
    let mut open: Vec<NodeId> = Vec::new();
    let mut uses: Vec<usize> = Vec::new();
    let even = [2usize, 4, 6];
    let fresh = |b: &mut GraphBuilder, open: &mut Vec<NodeId>, uses: &mut Vec<usize>, id: NodeId, ins: &[NodeId]| {
        for &i in ins {
            uses[i as usize] += 1;
        }
        uses.push(0);
        debug_assert_eq!(uses.len(), b.len());
        open.push(id);
    };

    let c0 = *even.choose(rng).expect("nonempty");
    let x0 = b.input(vec![c0, len]);
    fresh(&mut b, &mut open, &mut uses, x0, &[]);
    if target >= 4 && rng.random_bool(0.3) {
        let c = *even.choose(rng).expect("nonempty");
        let x1 = b.input(vec![c, len]);
        fresh(&mut b, &mut open, &mut uses, x1, &[]);
    }
    let mut embedded = false;
    while b.len() + 1 < target {
        let room = target - 1 - b.len();
        let pick = |rng: &mut R, open: &[NodeId], uses: &[usize]| -> NodeId {
            let idle: Vec<NodeId> = open.iter().copied().filter(|&v| uses[v as usize] == 0).collect();
            if !idle.is_empty() && rng.random_bool(0.6) {
                *idle.choose(rng).expect("nonempty")
            } else {
                *open.choose(rng).expect("nonempty")
            }
        };
        if !embedded && room >= 7 && rng.random_bool(0.6) {
            let hosts: Vec<NodeId> = open
                .iter()
                .copied()
                .filter(|&v| uses[v as usize] == 0 && b.shape(v)[0].is_multiple_of(2))
                .collect();
            if let Some(&x) = hosts.choose(rng) {
                let start = b.len();
                let f_len = rng.random_range(1..=(room - 6).min(2));
                let g_len = rng.random_range(1..=(room - 5 - f_len).min(2));
                let h = b.shape(x)[0] / 2;
                let s1 = b.split(x, 0);
                let s2 = b.split(x, 1);
                let mut f = s2;
                for _ in 0..f_len {
                    f = body_op(&mut b, rng, f, h);
                }
                let a1 = b.add(&[s1, f]);
                let mut g = a1;
                for _ in 0..g_len {
                    g = body_op(&mut b, rng, g, h);
                }
                let a2 = b.add(&[s2, g]);
                let y = b.concat(&[a1, a2]);
                uses[x as usize] += 2;
                uses.extend(std::iter::repeat_n(1, b.len() - start - 1));
                uses.push(0);
                open.retain(|&v| v != x);
                open.push(y);
                embedded = true;
                continue;
            }
        }
        let choice = rng.random_range(0..6);
        let id;
        let ins: Vec<NodeId>;
        match choice {
            0 => {
                let x = pick(rng, &open, &uses);
                id = b.affine(x, *[1usize, 2, 3, 4, 6].choose(rng).expect("nonempty"));
                ins = vec![x];
            }
            1 | 2 => {
                let x = pick(rng, &open, &uses);
                id = if choice == 1 { b.nonlinearity(x) } else { b.norm(x) };
                ins = vec![x];
            }
            3 => {
                let x = pick(rng, &open, &uses);
                let mates: Vec<NodeId> =
                    open.iter().copied().filter(|&v| v != x && b.shape(v) == b.shape(x)).collect();
                match mates.choose(rng) {
                    Some(&y) => {
                        id = b.add(&[x, y]);
                        ins = vec![x, y];
                    }
                    None => {
                        id = b.nonlinearity(x);
                        ins = vec![x];
                    }
                }
            }
            4 => {
                let x = pick(rng, &open, &uses);
                let others: Vec<NodeId> = open.iter().copied().filter(|&v| v != x).collect();
                match others.choose(rng) {
                    Some(&y) => {
                        id = b.concat(&[x, y]);
                        ins = vec![x, y];
                    }
                    None => {
                        id = b.affine(x, 2);
                        ins = vec![x];
                    }
                }
            }
            _ => {
                let evens: Vec<NodeId> = open.iter().copied().filter(|&v| b.shape(v)[0].is_multiple_of(2)).collect();
                match evens.choose(rng) {
                    Some(&x) => {
                        id = b.split(x, rng.random_range(0..2));
                        ins = vec![x];
                    }
                    None => {
                        let x = pick(rng, &open, &uses);
                        id = b.affine(x, 2);
                        ins = vec![x];
                    }
                }
            }
        }
        fresh(&mut b, &mut open, &mut uses, id, &ins);
    }
    let sinks: Vec<NodeId> = open.iter().copied().filter(|&v| uses[v as usize] == 0).collect();
    if sinks.len() > 1 {
        b.concat(&sinks);
    } else if b.len() < target {
        b.output(sinks[0]);
    }
    b.build()
}

fn body_op<R: Rng>(b: &mut GraphBuilder, rng: &mut R, x: NodeId, channels: usize) -> NodeId {
    match rng.random_range(0..3) {
        0 => b.affine(x, channels),
        1 => b.nonlinearity(x),
        _ => b.norm(x),
    }
}
