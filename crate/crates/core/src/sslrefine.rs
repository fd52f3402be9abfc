//! Test-time refinement of head/trunk landmarks against a pose library.
//!
//! Each round registers every library pose onto the current prediction
//! using the stable landmarks, averages the best matches, blends that
//! average with the prediction into a pseudo-label, and takes one optimizer
//! step on the detector's parameters toward the pseudo-label heatmaps.

use nalgebra::{Matrix3, Vector3};
use serde::Serialize;
use thiserror::Error;

use crate::adexec::{backward_with, forward, ExecError, Parameters, TensorValue};
use crate::graphcore::{ComputationGraph, NodeSpec, OpKind};
use crate::memplanner::PartitionPlan;
use crate::posemath::{
    distance, encode_heatmap, Grid, HeatmapStack, Point, Pose, PoseError, DEFAULT_SIGMA, LANDMARKS,
};

/// Landmarks used to register library poses.
pub const REGISTRATION_SET: [usize; 5] = [2, 3, 5, 7, 9];
/// Landmarks refined by the pseudo-label.
pub const AMBIGUOUS: [usize; 5] = [1, 4, 6, 8, 10];
pub const DEFAULT_K: usize = 8;
pub const DEFAULT_ITERS: usize = 8;
pub const DEFAULT_STEP: f64 = 5e-4;

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("registration landmarks are degenerate (fewer than 3 or collinear)")]
    DegenerateConfiguration,
    #[error("library has {have} poses, {want} requested")]
    LibraryTooSmall { have: usize, want: usize },
    #[error("no neighbors given")]
    NoNeighbors,
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("library manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: Point,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform { rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], translation: [0.0; 3] }
    }

    fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.rotation[r][c])
    }

    pub fn from_parts(r: Matrix3<f64>, t: Vector3<f64>) -> Self {
        RigidTransform {
            rotation: [0, 1, 2].map(|i| [0, 1, 2].map(|j| r[(i, j)])),
            translation: [t[0], t[1], t[2]],
        }
    }

    pub fn apply(&self, p: Point) -> Point {
        let r = &self.rotation;
        [0, 1, 2].map(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + self.translation[i])
    }

    pub fn apply_pose(&self, pose: &Pose) -> Pose {
        pose.map(|p| self.apply(p))
    }

    /// `self` after `other`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let r = self.matrix() * other.matrix();
        let t = Vector3::from(self.apply(other.translation));
        Self::from_parts(r, t)
    }

    /// max |RᵀR - I| and |det R - 1|.
    pub fn orthogonality_error(&self) -> (f64, f64) {
        let r = self.matrix();
        ((r.transpose() * r - Matrix3::identity()).amax(), (r.determinant() - 1.0).abs())
    }
}

/// Sum of squared distances between `t(src_j)` and `dst_j` over `set`.
pub fn residual(t: &RigidTransform, src: &Pose, dst: &Pose, set: &[usize]) -> f64 {
    set.iter().map(|&j| distance(t.apply(src.get(j)), dst.get(j)).powi(2)).sum()
}

fn centered(pose: &Pose, set: &[usize]) -> (Vector3<f64>, Vec<Vector3<f64>>) {
    let pts: Vec<Vector3<f64>> = set.iter().map(|&j| Vector3::from(pose.get(j))).collect();
    let c = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
    (c, pts.into_iter().map(|p| p - c).collect())
}

fn spread_is_planar_enough(pts: &[Vector3<f64>]) -> bool {
    let cov: Matrix3<f64> = pts.iter().map(|p| p * p.transpose()).sum();
    let s = cov.svd(false, false).singular_values;
    let mut sv: Vec<f64> = s.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv[0] > 0.0 && sv[1] > 1e-12 * sv[0]
}

/// Least-squares rigid transform taking `src` onto `dst` over `set`.
pub fn register(src: &Pose, dst: &Pose, set: &[usize]) -> Result<RigidTransform, RefineError> {
    if set.len() < 3 {
        return Err(RefineError::DegenerateConfiguration);
    }
    let (cs, a) = centered(src, set);
    let (cd, b) = centered(dst, set);
    if !spread_is_planar_enough(&a) || !spread_is_planar_enough(&b) {
        return Err(RefineError::DegenerateConfiguration);
    }
    let h: Matrix3<f64> = a.iter().zip(&b).map(|(p, q)| p * q.transpose()).sum();
    let svd = h.svd(true, true);
    let u = svd.u.expect("requested u");
    let v = svd.v_t.expect("requested v_t").transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    Ok(RigidTransform::from_parts(r, cd - r * cs))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PoseLibrary {
    pub poses: Vec<Pose>,
}

impl PoseLibrary {
    pub fn new(poses: Vec<Pose>) -> Self {
        PoseLibrary { poses }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Writes one pose file per entry plus `manifest.txt` listing them.
    pub fn save(&self, dir: impl AsRef<std::path::Path>) -> Result<(), RefineError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(PoseError::from)?;
        let mut manifest = String::new();
        for (i, p) in self.poses.iter().enumerate() {
            let name = format!("pose_{i:04}.csv");
            p.save(dir.join(&name))?;
            manifest.push_str(&name);
            manifest.push('\n');
        }
        std::fs::write(dir.join("manifest.txt"), manifest).map_err(PoseError::from)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<std::path::Path>) -> Result<Self, RefineError> {
        let dir = dir.as_ref();
        let text = std::fs::read_to_string(dir.join("manifest.txt")).map_err(PoseError::from)?;
        let mut poses = Vec::new();
        for (n, name) in text.lines().map(str::trim).enumerate() {
            if name.is_empty() || name.starts_with('#') {
                continue;
            }
            let pose = Pose::load(dir.join(name)).map_err(|e| RefineError::Manifest(format!("line {}: {name}: {e}", n + 1)))?;
            poses.push(pose);
        }
        Ok(PoseLibrary { poses })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Neighbor {
    pub index: usize,
    pub error: f64,
    pub transform: RigidTransform,
    pub aligned: Pose,
}

/// Sum over the registration set of the registered point distances.
pub fn retrieval_error(aligned: &Pose, target: &Pose) -> f64 {
    REGISTRATION_SET.iter().map(|&j| distance(aligned.get(j), target.get(j))).sum()
}

/// The `k` library poses closest to `target` after registration, ascending
/// by error, ties by library index.
pub fn retrieve_topk(lib: &PoseLibrary, target: &Pose, k: usize) -> Result<Vec<Neighbor>, RefineError> {
    if lib.len() < k || k == 0 {
        return Err(RefineError::LibraryTooSmall { have: lib.len(), want: k });
    }
    let mut all = Vec::with_capacity(lib.len());
    for (index, pose) in lib.poses.iter().enumerate() {
        let transform = register(pose, target, &REGISTRATION_SET)?;
        let aligned = transform.apply_pose(pose);
        all.push(Neighbor { index, error: retrieval_error(&aligned, target), transform, aligned });
    }
    all.sort_by(|a, b| a.error.total_cmp(&b.error).then(a.index.cmp(&b.index)));
    all.truncate(k);
    Ok(all)
}

/// Refined coordinates for the ambiguous landmarks, in [`AMBIGUOUS`] order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PseudoLabel {
    pub points: [Point; 5],
}

impl PseudoLabel {
    pub fn get(&self, landmark: usize) -> Option<Point> {
        AMBIGUOUS.iter().position(|&a| a == landmark).map(|k| self.points[k])
    }
}

/// Midpoint of the prediction and the mean of the aligned neighbors.
pub fn pseudo_label(pred: &Pose, aligned: &[Pose]) -> Result<PseudoLabel, RefineError> {
    if aligned.is_empty() {
        return Err(RefineError::NoNeighbors);
    }
    let n = aligned.len() as f64;
    let points = AMBIGUOUS.map(|i| {
        let mut m = [0.0; 3];
        for a in aligned {
            let p = a.get(i);
            for ax in 0..3 {
                m[ax] += p[ax];
            }
        }
        let q = pred.get(i);
        [0, 1, 2].map(|ax| 0.5 * (q[ax] + m[ax] / n))
    });
    Ok(PseudoLabel { points })
}

fn targets(grid: &Grid, label: &PseudoLabel, sigma: f64) -> Result<Vec<Vec<f64>>, RefineError> {
    label.points.iter().map(|&p| encode_heatmap(p, grid, sigma).map_err(RefineError::from)).collect()
}

/// Mean over the ambiguous channels of the per-voxel squared error to the
/// pseudo-label heatmaps.
pub fn ssl_loss(pred: &HeatmapStack, label: &PseudoLabel, sigma: f64) -> Result<f64, RefineError> {
    Ok(ssl_loss_grad(pred, label, sigma)?.0)
}

/// [`ssl_loss`] and its gradient, zero outside the ambiguous channels.
pub fn ssl_loss_grad(pred: &HeatmapStack, label: &PseudoLabel, sigma: f64) -> Result<(f64, HeatmapStack), RefineError> {
    if pred.channels != LANDMARKS {
        return Err(PoseError::ShapeMismatch(format!("{} channels, need {LANDMARKS}", pred.channels)).into());
    }
    let t = targets(&pred.grid, label, sigma)?;
    let n = pred.grid.len() as f64;
    let w = AMBIGUOUS.len() as f64;
    let mut grad = HeatmapStack::zeros(pred.grid, LANDMARKS);
    let mut loss = 0.0;
    for (k, &i) in AMBIGUOUS.iter().enumerate() {
        let mut sq = 0.0;
        for ((g, &p), &h) in grad.channel_mut(i).iter_mut().zip(pred.channel(i)).zip(&t[k]) {
            let d = p - h;
            sq += d * d;
            *g = 2.0 * d / (w * n);
        }
        loss += sq / n;
    }
    Ok((loss / w, grad))
}

/// A graph mapping input tensors to a 22-channel heatmap stack.
#[derive(Debug, Clone)]
pub struct HeatmapModel {
    pub graph: ComputationGraph,
    pub params: Parameters,
    pub plan: PartitionPlan,
    pub grid: Grid,
}

impl HeatmapModel {
    fn to_stack(&self, t: TensorValue) -> HeatmapStack {
        HeatmapStack { grid: self.grid, channels: LANDMARKS, data: t.data }
    }

    pub fn predict(&self, inputs: &[TensorValue]) -> Result<HeatmapStack, RefineError> {
        let (out, _) = forward(&self.graph, &self.params, inputs, &self.plan)?;
        Ok(self.to_stack(out))
    }

    /// Parameter gradient for the loss whose stack gradient `loss`
    /// derives from the prediction.
    pub fn param_grad_with(
        &self,
        inputs: &[TensorValue],
        loss: impl FnOnce(&HeatmapStack) -> Result<HeatmapStack, RefineError>,
    ) -> Result<Parameters, RefineError> {
        let shape = self.graph.node(self.graph.output()).shape.clone();
        let (_, grads) = backward_with(&self.graph, &self.params, inputs, &self.plan, |out: &TensorValue| {
            let d = loss(&self.to_stack(out.clone()))?;
            Ok::<_, RefineError>(TensorValue::new(shape, d.data)?)
        })?;
        Ok(grads.params)
    }

    pub fn param_grad(&self, inputs: &[TensorValue], dstack: &HeatmapStack) -> Result<Parameters, RefineError> {
        self.param_grad_with(inputs, |_| Ok(dstack.clone()))
    }
}

/// Lattice offsets per axis for the toy detector.
pub const LATTICE_RADIUS: i32 = 1;
pub const LATTICE_SPACING: f64 = 2.5;
pub const LATTICE_AMPLITUDE: f64 = 4.0;

fn bump(center: Point, grid: &Grid, sigma: f64, amplitude: f64) -> Vec<f64> {
    let inv = 1.0 / (2.0 * sigma * sigma);
    let axis = |a: usize| -> Vec<f64> {
        (0..grid.dims[a]).map(|i| (-(i as f64 * grid.spacing[a] - center[a]).powi(2) * inv).exp()).collect()
    };
    let (ex, ey, ez) = (axis(0), axis(1), axis(2));
    let mut out = Vec::with_capacity(grid.len());
    for x in &ex {
        for y in &ey {
            let xy = amplitude * x * y;
            out.extend(ez.iter().map(|z| xy * z));
        }
    }
    out
}

/// A per-landmark linear detector over Gaussian feature volumes.
///
/// Each ambiguous landmark sees a 3x3x3 lattice of bumps around its initial
/// estimate, every other landmark a single bump at its estimate. Weights
/// start so the output equals the ground-truth-style heatmap of `initial`,
/// so an untouched model decodes to the voxel-snapped initial pose.
pub fn lattice_detector(initial: &Pose, grid: &Grid, sigma: f64) -> Result<(HeatmapModel, Vec<TensorValue>), RefineError> {
    let peak = (2.0 * std::f64::consts::PI).powf(-1.5) / sigma.powi(3);
    let spatial = grid.dims.to_vec();
    let mut nodes = Vec::new();
    let mut inputs = Vec::new();
    let mut heads = Vec::new();
    let mut centers = Vec::new();
    for i in 1..=LANDMARKS {
        let p = initial.get(i);
        if !grid.contains(p) {
            return Err(PoseError::OutOfGrid { point: p }.into());
        }
        let offsets: Vec<Point> = if AMBIGUOUS.contains(&i) {
            let r = -LATTICE_RADIUS..=LATTICE_RADIUS;
            let mut v = Vec::new();
            for a in r.clone() {
                for b in r.clone() {
                    for c in r.clone() {
                        v.push([a, b, c].map(|o| o as f64 * LATTICE_SPACING));
                    }
                }
            }
            v
        } else {
            vec![[0.0; 3]]
        };
        let mut data = Vec::with_capacity(offsets.len() * grid.len());
        for o in &offsets {
            data.extend(bump([p[0] + o[0], p[1] + o[1], p[2] + o[2]], grid, sigma, LATTICE_AMPLITUDE));
        }
        let mut shape = vec![offsets.len()];
        shape.extend(&spatial);
        let id = nodes.len() as u32;
        nodes.push(NodeSpec { elem_bytes: 8, ..NodeSpec::new(id, OpKind::Input, vec![], shape.clone()) });
        let mut out_shape = vec![1];
        out_shape.extend(&spatial);
        let head = id + 1;
        nodes.push(NodeSpec { elem_bytes: 8, ..NodeSpec::new(head, OpKind::Affine, vec![id], out_shape) });
        inputs.push(TensorValue::new(shape, data)?);
        heads.push(head);
        centers.push(offsets.iter().position(|o| *o == [0.0; 3]).expect("lattice has a center"));
    }
    let cat = nodes.len() as u32;
    let mut cat_shape = vec![LANDMARKS];
    cat_shape.extend(&spatial);
    nodes.push(NodeSpec { elem_bytes: 8, ..NodeSpec::new(cat, OpKind::Concat, heads.clone(), cat_shape.clone()) });
    nodes.push(NodeSpec { elem_bytes: 8, ..NodeSpec::new(cat + 1, OpKind::Output, vec![cat], cat_shape) });
    let graph = ComputationGraph::new(nodes).expect("detector graph is well formed");
    let mut params = Parameters::zeros(&graph);
    for (head, c) in heads.iter().zip(centers) {
        params.affine.get_mut(head).expect("affine head").weight[c] = peak / LATTICE_AMPLITUDE;
    }
    let plan = PartitionPlan::all_plain(&graph);
    Ok((HeatmapModel { graph, params, plan, grid: *grid }, inputs))
}

/// Adam with a short first-moment memory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RefineConfig {
    pub iters: usize,
    pub step: f64,
    pub k: usize,
    pub sigma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig { iters: DEFAULT_ITERS, step: DEFAULT_STEP, k: DEFAULT_K, sigma: DEFAULT_SIGMA, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefineOutcome {
    pub initial: Pose,
    pub refined: Pose,
    pub losses: Vec<f64>,
    pub labels: Vec<PseudoLabel>,
}

/// Runs `cfg.iters` refinement rounds on `model` in place. The neighbor
/// count is capped at the library size.
pub fn refine(
    model: &mut HeatmapModel,
    inputs: &[TensorValue],
    lib: &PoseLibrary,
    cfg: &RefineConfig,
) -> Result<RefineOutcome, RefineError> {
    let k = cfg.k.min(lib.len());
    let initial = model.predict(inputs)?.decode()?;
    let n = model.params.len();
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    let mut losses = Vec::with_capacity(cfg.iters);
    let mut labels = Vec::with_capacity(cfg.iters);
    for t in 1..=cfg.iters {
        let mut round = None;
        let g = model
            .param_grad_with(inputs, |stack| {
                let current = stack.decode()?;
                let neighbors = retrieve_topk(lib, &current, k)?;
                let aligned: Vec<Pose> = neighbors.into_iter().map(|nb| nb.aligned).collect();
                let label = pseudo_label(&current, &aligned)?;
                let (loss, grad) = ssl_loss_grad(stack, &label, cfg.sigma)?;
                round = Some((loss, label));
                Ok(grad)
            })?
            .flatten();
        let (loss, label) = round.expect("loss closure ran");
        let c1 = 1.0 - cfg.beta1.powi(t as i32);
        let c2 = 1.0 - cfg.beta2.powi(t as i32);
        for (j, gj) in g.iter().enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            *model.params.scalar_mut(j) -= cfg.step * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
        }
        losses.push(loss);
        labels.push(label);
    }
    let refined = if cfg.iters == 0 { initial } else { model.predict(inputs)?.decode()? };
    Ok(RefineOutcome { initial, refined, losses, labels })
}
