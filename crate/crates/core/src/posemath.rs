//! Landmark poses, Gaussian heatmaps and the heatmap loss stack.
//!
//! Landmark indices are 1-based throughout (1..=22). Grid voxel `(i, j, k)`
//! sits at `(i * sx, j * sy, k * sz)` mm and the linear index is
//! `(i * H + j) * W + k`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LANDMARKS: usize = 22;
pub const DEFAULT_SIGMA: f64 = 2.0;
pub const FRAME_EPS: f64 = 1e-9;

pub const HEAD_TRUNK: [usize; 10] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10];
pub const LEFT_ARM: [usize; 3] = [11, 12, 13];
pub const RIGHT_ARM: [usize; 3] = [14, 15, 16];
pub const LEFT_LEG: [usize; 3] = [17, 18, 19];
pub const RIGHT_LEG: [usize; 3] = [20, 21, 22];

pub const NAMES: [&str; LANDMARKS] = [
    "cranial_crest",
    "head_trunk_2",
    "head_trunk_3",
    "nasal_bone",
    "head_trunk_5",
    "hind_neck",
    "head_trunk_7",
    "head_trunk_8",
    "head_trunk_9",
    "head_trunk_10",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "left_hip",
    "left_knee",
    "left_ankle",
    "right_hip",
    "right_knee",
    "right_ankle",
];

pub type Point = [f64; 3];

#[derive(Debug, Error)]
pub enum PoseError {
    #[error("point {point:?} lies outside the grid")]
    OutOfGrid { point: Point },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("landmarks 1, 4 and 6 are (nearly) collinear")]
    DegenerateFrame,
    #[error("sigma must be positive, got {0}")]
    BadSigma(f64),
    #[error("non-finite coordinate for landmark {0}")]
    NotFinite(usize),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("sidecar error: {0}")]
    Sidecar(#[from] serde_json::Error),
}

pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: Point, s: f64) -> Point {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Point, b: Point) -> Point {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn norm(a: Point) -> f64 {
    dot(a, a).sqrt()
}

pub fn distance(a: Point, b: Point) -> f64 {
    norm(sub(a, b))
}

/// The 22 landmark positions of one subject, in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub points: [Point; LANDMARKS],
}

impl Pose {
    pub fn new(points: [Point; LANDMARKS]) -> Result<Self, PoseError> {
        for (i, p) in points.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(PoseError::NotFinite(i + 1));
            }
        }
        Ok(Pose { points })
    }

    /// Landmark `i`, 1-based.
    pub fn get(&self, i: usize) -> Point {
        self.points[i - 1]
    }

    pub fn set(&mut self, i: usize, p: Point) {
        self.points[i - 1] = p;
    }

    pub fn map(&self, f: impl Fn(Point) -> Point) -> Pose {
        Pose { points: self.points.map(f) }
    }

    /// `index,name,x_mm,y_mm,z_mm`, one row per landmark.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for (i, p) in self.points.iter().enumerate() {
            writeln!(s, "{},{},{},{},{}", i + 1, NAMES[i], p[0], p[1], p[2]).expect("write to string");
        }
        s
    }

    /// Parses [`Pose::to_csv`] output. A header line starting with
    /// `index` and blank lines are skipped.
    pub fn from_csv(text: &str) -> Result<Self, PoseError> {
        let mut points = [[f64::NAN; 3]; LANDMARKS];
        let mut seen = [false; LANDMARKS];
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let err = |msg: String| PoseError::Parse { line: n + 1, msg };
            if line.is_empty() || line.starts_with("index") {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 5 {
                return Err(err(format!("expected 5 fields, found {}", f.len())));
            }
            let idx: usize = f[0].parse().map_err(|_| err(format!("bad landmark index {:?}", f[0])))?;
            if !(1..=LANDMARKS).contains(&idx) {
                return Err(err(format!("landmark index {idx} out of range")));
            }
            if seen[idx - 1] {
                return Err(err(format!("landmark {idx} listed twice")));
            }
            for a in 0..3 {
                points[idx - 1][a] = f[2 + a].parse().map_err(|_| err(format!("bad coordinate {:?}", f[2 + a])))?;
            }
            seen[idx - 1] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(PoseError::Parse { line: text.lines().count(), msg: format!("landmark {} missing", missing + 1) });
        }
        Pose::new(points)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PoseError> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PoseError> {
        Ok(std::fs::write(path, self.to_csv())?)
    }
}

/// Voxel grid with origin at 0 mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

impl Grid {
    pub fn cubic(n: usize, spacing: f64) -> Self {
        Grid { dims: [n; 3], spacing: [spacing; 3] }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn extent(&self) -> Point {
        [0, 1, 2].map(|a| (self.dims[a] - 1) as f64 * self.spacing[a])
    }

    pub fn contains(&self, p: Point) -> bool {
        let e = self.extent();
        (0..3).all(|a| p[a].is_finite() && p[a] >= 0.0 && p[a] <= e[a])
    }

    pub fn voxel(&self, index: usize) -> [usize; 3] {
        let [_, h, w] = self.dims;
        [index / (h * w), (index / w) % h, index % w]
    }

    pub fn index(&self, v: [usize; 3]) -> usize {
        (v[0] * self.dims[1] + v[1]) * self.dims[2] + v[2]
    }

    pub fn position(&self, index: usize) -> Point {
        let v = self.voxel(index);
        [0, 1, 2].map(|a| v[a] as f64 * self.spacing[a])
    }

    /// Nearest voxel; exact halves go to the lower index, as argmax does.
    pub fn nearest(&self, p: Point) -> [usize; 3] {
        [0, 1, 2].map(|a| ((p[a] / self.spacing[a] - 0.5).ceil().max(0.0) as usize).min(self.dims[a] - 1))
    }

    pub fn snap(&self, p: Point) -> Point {
        self.position(self.index(self.nearest(p)))
    }
}

/// Gaussian heatmap of one point, with the analytic normalization constant.
pub fn encode_heatmap(coord: Point, grid: &Grid, sigma: f64) -> Result<Vec<f64>, PoseError> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(PoseError::BadSigma(sigma));
    }
    if !grid.contains(coord) {
        return Err(PoseError::OutOfGrid { point: coord });
    }
    let peak = (2.0 * std::f64::consts::PI).powf(-1.5) / sigma.powi(3);
    let inv = 1.0 / (2.0 * sigma * sigma);
    // separable: one exp table per axis
    let axis = |a: usize| -> Vec<f64> {
        (0..grid.dims[a]).map(|i| (-(i as f64 * grid.spacing[a] - coord[a]).powi(2) * inv).exp()).collect()
    };
    let (ex, ey, ez) = (axis(0), axis(1), axis(2));
    let mut out = Vec::with_capacity(grid.len());
    for x in &ex {
        for y in &ey {
            let xy = peak * x * y;
            out.extend(ez.iter().map(|z| xy * z));
        }
    }
    Ok(out)
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(h: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in h.iter().enumerate() {
        if v > h[best] {
            best = i;
        }
    }
    best
}

pub fn decode_argmax(h: &[f64], grid: &Grid) -> Point {
    grid.position(argmax(h))
}

/// Stack of per-landmark heatmaps sharing one grid, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    pub grid: Grid,
    pub channels: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    shape: [usize; 4],
    spacing: [f64; 3],
    dtype: String,
}

impl HeatmapStack {
    pub fn zeros(grid: Grid, channels: usize) -> Self {
        HeatmapStack { grid, channels, data: vec![0.0; channels * grid.len()] }
    }

    /// Ground-truth stack of all 22 landmarks.
    pub fn from_pose(pose: &Pose, grid: &Grid, sigma: f64) -> Result<Self, PoseError> {
        let mut data = Vec::with_capacity(LANDMARKS * grid.len());
        for p in &pose.points {
            data.extend(encode_heatmap(*p, grid, sigma)?);
        }
        Ok(HeatmapStack { grid: *grid, channels: LANDMARKS, data })
    }

    /// Channel `i`, 1-based.
    pub fn channel(&self, i: usize) -> &[f64] {
        let n = self.grid.len();
        &self.data[(i - 1) * n..i * n]
    }

    pub fn channel_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.grid.len();
        &mut self.data[(i - 1) * n..i * n]
    }

    pub fn decode(&self) -> Result<Pose, PoseError> {
        if self.channels != LANDMARKS {
            return Err(PoseError::ShapeMismatch(format!("{} channels, need {LANDMARKS}", self.channels)));
        }
        let mut points = [[0.0; 3]; LANDMARKS];
        for (i, p) in points.iter_mut().enumerate() {
            *p = decode_argmax(self.channel(i + 1), &self.grid);
        }
        Pose::new(points)
    }

    /// Writes `<path>` as raw little-endian f32 and `<path>.json` as the
    /// shape/spacing header.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PoseError> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self.data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        std::fs::write(path, bytes)?;
        let [d, h, w] = self.grid.dims;
        let side = Sidecar { shape: [self.channels, d, h, w], spacing: self.grid.spacing, dtype: "f32le".into() };
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PoseError> {
        let path = path.as_ref();
        let side: Sidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
        if side.dtype != "f32le" {
            return Err(PoseError::ShapeMismatch(format!("unsupported dtype {}", side.dtype)));
        }
        let bytes = std::fs::read(path)?;
        let [c, d, h, w] = side.shape;
        if bytes.len() != 4 * c * d * h * w {
            return Err(PoseError::ShapeMismatch(format!("{} bytes for shape {:?}", bytes.len(), side.shape)));
        }
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
        Ok(HeatmapStack { grid: Grid { dims: [d, h, w], spacing: side.spacing }, channels: c, data })
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

fn check_pair(p: &[&[f64]], g: &[&[f64]]) -> Result<(), PoseError> {
    if p.len() != g.len() || p.iter().zip(g).any(|(a, b)| a.len() != b.len()) {
        return Err(PoseError::ShapeMismatch("prediction and target channel sets differ".into()));
    }
    Ok(())
}

fn log_sum_exp(p: &[&[f64]]) -> f64 {
    let m = p.iter().flat_map(|c| c.iter()).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let s: f64 = p.iter().flat_map(|c| c.iter()).map(|v| (v - m).exp()).sum();
    m + s.ln()
}

/// Cross entropy of the group-joint softmax of `p` against weights `g`.
pub fn kl_term(p: &[&[f64]], g: &[&[f64]]) -> Result<f64, PoseError> {
    check_pair(p, g)?;
    let lse = log_sum_exp(p);
    Ok(p.iter().zip(g).flat_map(|(pc, gc)| pc.iter().zip(gc.iter())).map(|(&pv, &gv)| -(pv - lse) * gv).sum())
}

/// [`kl_term`] and its gradient with respect to each channel of `p`.
pub fn kl_term_grad(p: &[&[f64]], g: &[&[f64]]) -> Result<(f64, Vec<Vec<f64>>), PoseError> {
    let value = kl_term(p, g)?;
    let lse = log_sum_exp(p);
    let total: f64 = g.iter().flat_map(|c| c.iter()).sum();
    let grad = p
        .iter()
        .zip(g)
        .map(|(pc, gc)| pc.iter().zip(gc.iter()).map(|(&pv, &gv)| (pv - lse).exp() * total - gv).collect())
        .collect();
    Ok((value, grad))
}

/// The two halves of the pair loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairTerms {
    pub straight: f64,
    pub crossed: f64,
    pub l1: f64,
    pub l2: f64,
}

impl PairTerms {
    pub fn total(&self) -> f64 {
        self.l1 + self.l2
    }
}

fn softmax(p: &[&[f64]]) -> Vec<Vec<f64>> {
    let lse = log_sum_exp(p);
    p.iter().map(|c| c.iter().map(|v| (v - lse).exp()).collect()).collect()
}

pub fn pair_terms(pl: &[&[f64]], pr: &[&[f64]], gl: &[&[f64]], gr: &[&[f64]]) -> Result<PairTerms, PoseError> {
    check_pair(pl, pr)?;
    check_pair(pl, gl)?;
    check_pair(pl, gr)?;
    let straight = kl_term(pl, gl)? + kl_term(pr, gr)?;
    let crossed = kl_term(pl, gr)? + kl_term(pr, gl)?;
    let (sl, sr) = (softmax(pl), softmax(pr));
    let mut l2 = 0.0;
    for c in 0..pl.len() {
        for v in 0..pl[c].len() {
            let w = gl[c][v] + gr[c][v];
            if w != 0.0 {
                l2 -= (sl[c][v] + sr[c][v]).ln() * w;
            }
        }
    }
    Ok(PairTerms { straight, crossed, l1: straight.min(crossed), l2 })
}

pub fn pair_loss(pl: &[&[f64]], pr: &[&[f64]], gl: &[&[f64]], gr: &[&[f64]]) -> Result<f64, PoseError> {
    Ok(pair_terms(pl, pr, gl, gr)?.total())
}

/// Pair loss and its gradients with respect to `pl` and `pr`. At an exact
/// straight/crossed tie the straight branch is differentiated.
#[allow(clippy::type_complexity)]
pub fn pair_loss_grad(
    pl: &[&[f64]],
    pr: &[&[f64]],
    gl: &[&[f64]],
    gr: &[&[f64]],
) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>), PoseError> {
    let terms = pair_terms(pl, pr, gl, gr)?;
    let (tl, tr) = if terms.straight <= terms.crossed { (gl, gr) } else { (gr, gl) };
    let (_, mut dl) = kl_term_grad(pl, tl)?;
    let (_, mut dr) = kl_term_grad(pr, tr)?;
    let (sl, sr) = (softmax(pl), softmax(pr));
    // d/dp_u of -sum_v w_v log q_v through one group's softmax s:
    // -(w_u / q_u) s_u + s_u * sum_v (w_v / q_v) s_v
    let ratio: Vec<Vec<f64>> = (0..pl.len())
        .map(|c| (0..pl[c].len()).map(|v| (gl[c][v] + gr[c][v]) / (sl[c][v] + sr[c][v])).collect())
        .collect();
    for (s, d) in [(&sl, &mut dl), (&sr, &mut dr)] {
        let acc: f64 = s.iter().zip(&ratio).flat_map(|(a, b)| a.iter().zip(b)).map(|(x, y)| x * y).sum();
        for c in 0..s.len() {
            for v in 0..s[c].len() {
                d[c][v] += s[c][v] * (acc - ratio[c][v]);
            }
        }
    }
    Ok((terms.total(), dl, dr))
}

fn channels<'a>(s: &'a HeatmapStack, idx: &[usize]) -> Vec<&'a [f64]> {
    idx.iter().map(|&i| s.channel(i)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub arms: PairTerms,
    pub legs: PairTerms,
    pub head_trunk: f64,
    pub total: f64,
}

fn check_stacks(pred: &HeatmapStack, gt: &HeatmapStack) -> Result<(), PoseError> {
    if pred.channels != LANDMARKS || gt.channels != LANDMARKS || pred.grid.dims != gt.grid.dims {
        return Err(PoseError::ShapeMismatch("stacks must both be 22 channels on the same grid".into()));
    }
    Ok(())
}

/// Arm pair loss + leg pair loss + head/trunk KL term.
pub fn loss_breakdown(pred: &HeatmapStack, gt: &HeatmapStack) -> Result<LossBreakdown, PoseError> {
    check_stacks(pred, gt)?;
    let c = |s, i: &[usize]| channels(s, i);
    let arms = pair_terms(&c(pred, &LEFT_ARM), &c(pred, &RIGHT_ARM), &c(gt, &LEFT_ARM), &c(gt, &RIGHT_ARM))?;
    let legs = pair_terms(&c(pred, &LEFT_LEG), &c(pred, &RIGHT_LEG), &c(gt, &LEFT_LEG), &c(gt, &RIGHT_LEG))?;
    let head_trunk = kl_term(&c(pred, &HEAD_TRUNK), &c(gt, &HEAD_TRUNK))?;
    Ok(LossBreakdown { arms, legs, head_trunk, total: arms.total() + legs.total() + head_trunk })
}

pub fn total_loss(pred: &HeatmapStack, gt: &HeatmapStack) -> Result<f64, PoseError> {
    Ok(loss_breakdown(pred, gt)?.total)
}

/// [`total_loss`] and its gradient as a stack shaped like `pred`.
pub fn total_loss_grad(pred: &HeatmapStack, gt: &HeatmapStack) -> Result<(f64, HeatmapStack), PoseError> {
    check_stacks(pred, gt)?;
    let mut grad = HeatmapStack::zeros(pred.grid, LANDMARKS);
    let mut total = 0.0;
    let c = |s, i: &[usize]| channels(s, i);
    for (l, r) in [(LEFT_ARM, RIGHT_ARM), (LEFT_LEG, RIGHT_LEG)] {
        let (v, dl, dr) = pair_loss_grad(&c(pred, &l), &c(pred, &r), &c(gt, &l), &c(gt, &r))?;
        total += v;
        for (i, d) in l.iter().zip(dl).chain(r.iter().zip(dr)) {
            grad.channel_mut(*i).copy_from_slice(&d);
        }
    }
    let (v, dh) = kl_term_grad(&c(pred, &HEAD_TRUNK), &c(gt, &HEAD_TRUNK))?;
    total += v;
    for (i, d) in HEAD_TRUNK.iter().zip(dh) {
        grad.channel_mut(*i).copy_from_slice(&d);
    }
    Ok((total, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    Arms,
    Legs,
}

impl PairKind {
    /// (left, right) anchor landmarks.
    pub fn anchors(self) -> (usize, usize) {
        match self {
            PairKind::Arms => (11, 14),
            PairKind::Legs => (17, 20),
        }
    }
}

/// Landmark labels given to candidates `a` and `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SideAssignment {
    pub s1: usize,
    pub s2: usize,
}

impl SideAssignment {
    pub fn a_is_left(&self) -> bool {
        self.s1 < self.s2
    }
}

/// Signed triple product `(v14 x v16) . vab`.
pub fn side_angle(p1: Point, p4: Point, p6: Point, a: Point, b: Point) -> Result<f64, PoseError> {
    let n = cross(sub(p4, p1), sub(p6, p1));
    if norm(n) <= FRAME_EPS {
        return Err(PoseError::DegenerateFrame);
    }
    Ok(dot(n, sub(b, a)))
}

pub fn resolve_left_right(p1: Point, p4: Point, p6: Point, a: Point, b: Point, kind: PairKind) -> Result<SideAssignment, PoseError> {
    let (left, right) = kind.anchors();
    if side_angle(p1, p4, p6, a, b)? <= 0.0 {
        Ok(SideAssignment { s1: left, s2: right })
    } else {
        Ok(SideAssignment { s1: right, s2: left })
    }
}

/// Swaps whole limb groups of `pose` where the resolver disagrees with the
/// current labeling. Returns the kinds that were swapped.
pub fn correct_sides(pose: &mut Pose) -> Result<Vec<PairKind>, PoseError> {
    let mut swapped = Vec::new();
    for (kind, l, r) in [(PairKind::Arms, LEFT_ARM, RIGHT_ARM), (PairKind::Legs, LEFT_LEG, RIGHT_LEG)] {
        let s = resolve_left_right(pose.get(1), pose.get(4), pose.get(6), pose.get(l[0]), pose.get(r[0]), kind)?;
        if !s.a_is_left() {
            for (a, b) in l.iter().zip(&r) {
                let (pa, pb) = (pose.get(*a), pose.get(*b));
                pose.set(*a, pb);
                pose.set(*b, pa);
            }
            swapped.push(kind);
        }
    }
    Ok(swapped)
}
