//! Synthetic cases, evaluation metrics and the end-to-end pipeline.
//!
//! Skeletons are built in a body frame (head up along +z, face toward +y,
//! subject's left toward -x), then rotated at random and placed inside the
//! grid with a fixed margin.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memplanner::{plan, plan_report, PartitionPlan};
use crate::posemath::{
    add, correct_sides, distance, scale, Grid, HeatmapStack, PairKind, Point, Pose, PoseError, DEFAULT_SIGMA, LANDMARKS,
    LEFT_ARM, RIGHT_ARM,
};
use crate::sslrefine::{lattice_detector, refine, PoseLibrary, RefineConfig, RefineError, AMBIGUOUS};
use crate::synthgraph::{unet_graph, UnetSpec};

pub const GRID_SIZE: usize = 28;
pub const GRID_SPACING: f64 = 2.0;
pub const GRID_MARGIN: f64 = 6.0;
pub const TEMPLATE_NOISE: f64 = 0.5;

/// Head/trunk landmarks 1..=10 in the body frame, mm.
pub const TEMPLATE: [Point; 10] = [
    [0.0, 0.0, 24.0],
    [0.0, 5.0, 21.0],
    [0.0, 6.5, 16.0],
    [0.0, 8.0, 17.5],
    [0.0, 3.0, 13.0],
    [0.0, -5.0, 11.0],
    [0.0, 0.0, 6.0],
    [0.0, 0.0, 0.0],
    [0.0, 0.0, -6.0],
    [0.0, 0.0, -11.0],
];

/// (root landmark, body-frame root, upper length, lower length).
const LIMBS: [(usize, Point, f64, f64); 4] = [
    (11, [-5.0, 0.0, 6.0], 6.5, 5.5),
    (14, [5.0, 0.0, 6.0], 6.5, 5.5),
    (17, [-4.0, 0.0, -9.0], 7.0, 6.0),
    (20, [4.0, 0.0, -9.0], 7.0, 6.0),
];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config line {line}, column {column}: {msg}")]
    Config { line: usize, column: usize, msg: String },
    #[error("config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn normal<R: Rng>(rng: &mut R, s: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    s * z
}

fn unit<R: Rng>(rng: &mut R) -> Point {
    loop {
        let v = [normal(rng, 1.0), normal(rng, 1.0), normal(rng, 1.0)];
        let n = crate::posemath::norm(v);
        if n > 1e-9 {
            return scale(v, 1.0 / n);
        }
    }
}

fn random_rotation<R: Rng>(rng: &mut R) -> [[f64; 3]; 3] {
    let mut q = [0.0; 4];
    loop {
        for c in &mut q {
            *c = normal(rng, 1.0);
        }
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-9 {
            q.iter_mut().for_each(|v| *v /= n);
            break;
        }
    }
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
        [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
        [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

pub fn default_grid() -> Grid {
    Grid::cubic(GRID_SIZE, GRID_SPACING)
}

fn inside(pose: &Pose, grid: &Grid, margin: f64) -> bool {
    let e = grid.extent();
    pose.points.iter().all(|p| (0..3).all(|a| p[a] >= margin && p[a] <= e[a] - margin))
}

/// Articulated skeleton for `seed`, placed inside `grid` with `margin`.
pub fn skeleton(seed: u64, grid: &Grid, margin: f64) -> Pose {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut pts = [[0.0; 3]; LANDMARKS];
        for (p, t) in pts.iter_mut().zip(TEMPLATE) {
            *p = t.map(|v| v + normal(&mut rng, TEMPLATE_NOISE));
        }
        for (root, base, upper, lower) in LIMBS {
            let r = base.map(|v| v + normal(&mut rng, TEMPLATE_NOISE));
            let mid = add(r, scale(unit(&mut rng), upper));
            let end = add(mid, scale(unit(&mut rng), lower));
            pts[root - 1] = r;
            pts[root] = mid;
            pts[root + 1] = end;
        }
        let n = LANDMARKS as f64;
        let c = [0, 1, 2].map(|a| pts.iter().map(|p| p[a]).sum::<f64>() / n);
        let rot = random_rotation(&mut rng);
        let e = grid.extent();
        let shift = [0, 1, 2].map(|a| 0.5 * e[a] + normal(&mut rng, 1.0));
        let placed = pts.map(|p| {
            let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
            [0, 1, 2].map(|i| rot[i][0] * d[0] + rot[i][1] * d[1] + rot[i][2] * d[2] + shift[i])
        });
        let pose = Pose { points: placed };
        if inside(&pose, grid, margin) {
            return pose;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corruption {
    pub landmarks: Vec<usize>,
    pub magnitude_mm: f64,
    /// Exchange the left and right arm groups.
    pub side_swap: bool,
}

impl Corruption {
    pub fn none() -> Self {
        Corruption { landmarks: vec![], magnitude_mm: 0.0, side_swap: false }
    }

    pub fn ambiguous(magnitude_mm: f64) -> Self {
        Corruption { landmarks: AMBIGUOUS.to_vec(), magnitude_mm, side_swap: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticCase {
    pub seed: u64,
    pub grid: Grid,
    pub truth: Pose,
    pub prediction: Pose,
    pub corruption: Corruption,
}

impl SyntheticCase {
    pub fn truth_stack(&self, sigma: f64) -> Result<HeatmapStack, PoseError> {
        HeatmapStack::from_pose(&self.truth, &self.grid, sigma)
    }
}

/// Uncorrupted case: the prediction equals the truth.
pub fn synth_pose(seed: u64) -> SyntheticCase {
    synth_case(seed, &Corruption::none())
}

/// Case whose prediction is the truth displaced along random directions
/// by exactly `magnitude_mm` on the listed landmarks.
pub fn synth_case(seed: u64, corruption: &Corruption) -> SyntheticCase {
    let grid = default_grid();
    let truth = skeleton(seed, &grid, GRID_MARGIN);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de_0bad_f00d);
    let mut prediction = truth;
    for &i in &corruption.landmarks {
        prediction.set(i, add(truth.get(i), scale(unit(&mut rng), corruption.magnitude_mm)));
    }
    if corruption.side_swap {
        for (l, r) in LEFT_ARM.iter().zip(&RIGHT_ARM) {
            let (a, b) = (prediction.get(*l), prediction.get(*r));
            prediction.set(*l, b);
            prediction.set(*r, a);
        }
    }
    SyntheticCase { seed, grid, truth, prediction, corruption: corruption.clone() }
}

/// Library of `size` skeletons drawn from seeds derived from `seed`.
pub fn synth_library(seed: u64, size: usize) -> PoseLibrary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = default_grid();
    PoseLibrary::new((0..size).map(|_| skeleton(rng.random(), &grid, GRID_MARGIN)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EdReport {
    pub per_landmark: Vec<f64>,
    pub mean: f64,
}

pub fn ed_error(pred: &Pose, gt: &Pose) -> EdReport {
    let per_landmark: Vec<f64> = pred.points.iter().zip(&gt.points).map(|(a, b)| distance(*a, *b)).collect();
    let mean = per_landmark.iter().sum::<f64>() / LANDMARKS as f64;
    EdReport { per_landmark, mean }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PckConfig {
    pub tau_max: f64,
    pub delta: f64,
}

impl Default for PckConfig {
    fn default() -> Self {
        PckConfig { tau_max: 10.0, delta: 0.25 }
    }
}

impl PckConfig {
    pub fn thresholds(&self) -> Vec<f64> {
        let steps = (self.tau_max / self.delta - 1e-9).ceil() as usize;
        (0..=steps).map(|k| (k as f64 * self.delta).min(self.tau_max)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PckCurve {
    pub thresholds: Vec<f64>,
    pub pck: Vec<f64>,
    pub auc: f64,
}

/// Fraction of errors at or under each threshold, and the trapezoidal
/// area under that curve divided by `tau_max`.
pub fn pck_auc(errors: &[f64], cfg: &PckConfig) -> PckCurve {
    let thresholds = cfg.thresholds();
    let n = errors.len().max(1) as f64;
    let pck: Vec<f64> = thresholds.iter().map(|t| errors.iter().filter(|&&e| e <= *t).count() as f64 / n).collect();
    let area: f64 = thresholds.windows(2).zip(pck.windows(2)).map(|(t, p)| 0.5 * (t[1] - t[0]) * (p[0] + p[1])).sum();
    PckCurve { thresholds, pck, auc: area / cfg.tau_max }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub cases: usize,
    /// Mean over cases, per landmark.
    pub ed_per_landmark: Vec<f64>,
    pub ed_mean: f64,
    pub auc_per_landmark: Vec<f64>,
    pub auc_mean: f64,
    /// Curve over all landmarks of all cases.
    pub pck: PckCurve,
}

/// Aggregates per-case per-landmark errors.
pub fn metric_report(errors: &[Vec<f64>], cfg: &PckConfig) -> MetricReport {
    let cases = errors.len();
    let n = cases.max(1) as f64;
    let ed_per_landmark: Vec<f64> = (0..LANDMARKS).map(|j| errors.iter().map(|e| e[j]).sum::<f64>() / n).collect();
    let auc_per_landmark: Vec<f64> = (0..LANDMARKS)
        .map(|j| pck_auc(&errors.iter().map(|e| e[j]).collect::<Vec<_>>(), cfg).auc)
        .collect();
    let all: Vec<f64> = errors.iter().flatten().copied().collect();
    MetricReport {
        cases,
        ed_mean: ed_per_landmark.iter().sum::<f64>() / LANDMARKS as f64,
        auc_mean: auc_per_landmark.iter().sum::<f64>() / LANDMARKS as f64,
        ed_per_landmark,
        auc_per_landmark,
        pck: pck_auc(&all, cfg),
    }
}

/// `threshold_mm,pck` rows.
pub fn pck_csv(curve: &PckCurve) -> String {
    let mut s = String::from("threshold_mm,pck\n");
    for (t, p) in curve.thresholds.iter().zip(&curve.pck) {
        s.push_str(&format!("{t},{p}\n"));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SslSettings {
    #[serde(default = "default_iters")]
    pub iters: usize,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_iters() -> usize {
    crate::sslrefine::DEFAULT_ITERS
}
fn default_step() -> f64 {
    crate::sslrefine::DEFAULT_STEP
}
fn default_k() -> usize {
    crate::sslrefine::DEFAULT_K
}
fn default_cases() -> usize {
    20
}
fn default_library() -> usize {
    50
}
fn default_corruption() -> f64 {
    5.0
}
fn default_true() -> bool {
    true
}
fn default_sigma() -> f64 {
    DEFAULT_SIGMA
}

impl Default for SslSettings {
    fn default() -> Self {
        SslSettings { iters: default_iters(), step: default_step(), k: default_k() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnetChoice {
    None,
    Toy,
    Reference,
}

fn default_unet() -> UnetChoice {
    UnetChoice::Toy
}

/// One experiment. Every field but `seed` has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    #[serde(default = "default_cases")]
    pub cases: usize,
    #[serde(default = "default_library")]
    pub library_size: usize,
    #[serde(default = "default_corruption")]
    pub corruption_mm: f64,
    #[serde(default)]
    pub side_swap: bool,
    /// Apply the left/right resolver to limb groups.
    #[serde(default = "default_true")]
    pub pair_assignment: bool,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default)]
    pub ssl: Option<SslSettings>,
    #[serde(default)]
    pub pck: PckConfig,
    #[serde(default = "default_unet")]
    pub unet: UnetChoice,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| {
            let full = e.to_string();
            let suffix = format!(" at line {} column {}", e.line(), e.column());
            let msg = full.strip_suffix(&suffix).unwrap_or(&full).to_string();
            HarnessError::Config { line: e.line(), column: e.column(), msg }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Invalid(m.to_string()));
        if self.cases == 0 {
            return bad("cases must be positive");
        }
        if !(self.corruption_mm >= 0.0 && self.corruption_mm <= GRID_MARGIN) {
            return bad("corruption_mm must lie in [0, 6]");
        }
        if self.sigma.is_nan() || self.sigma <= 0.0 {
            return bad("sigma must be positive");
        }
        if !(self.pck.tau_max > 0.0 && self.pck.delta > 0.0) {
            return bad("pck.tau_max and pck.delta must be positive");
        }
        if let Some(s) = &self.ssl {
            if s.k == 0 || self.library_size == 0 {
                return bad("ssl needs k > 0 and a nonempty library");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanSummary {
    pub graph: String,
    pub nodes: usize,
    pub plain_peak_bytes: u64,
    pub planned_peak_bytes: u64,
    pub percent_of_plain: f64,
    pub checkpoint_parts: usize,
    pub reversible_parts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseSummary {
    pub seed: u64,
    pub total_loss: f64,
    pub swapped: Vec<PairKind>,
    pub ed_before: f64,
    pub ed_after: f64,
    pub ambiguous_ed_before: f64,
    pub ambiguous_ed_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineReport {
    pub config: PipelineConfig,
    pub plan: Option<PlanSummary>,
    pub cases: Vec<CaseSummary>,
    pub baseline: MetricReport,
    pub result: MetricReport,
}

impl PipelineReport {
    pub fn to_text(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

fn ambiguous_mean(e: &EdReport) -> f64 {
    AMBIGUOUS.iter().map(|&i| e.per_landmark[i - 1]).sum::<f64>() / AMBIGUOUS.len() as f64
}

pub fn summarize_plan(name: &str, spec: &UnetSpec) -> PlanSummary {
    let g = unet_graph(spec);
    let p = plan(&g);
    let r = plan_report(&g, &p);
    PlanSummary {
        graph: name.to_string(),
        nodes: g.len(),
        plain_peak_bytes: PartitionPlan::all_plain(&g).peak_bytes,
        planned_peak_bytes: r.peak_bytes,
        percent_of_plain: r.percent_of_plain,
        checkpoint_parts: p.count(crate::memplanner::ExecMode::Checkpoint),
        reversible_parts: p.count(crate::memplanner::ExecMode::Reversible),
    }
}

/// One case: detector forward, loss against truth, side resolution, SSL
/// refinement, and errors before/after.
pub fn run_case(
    seed: u64,
    cfg: &PipelineConfig,
    lib: &PoseLibrary,
) -> Result<(CaseSummary, Vec<f64>, Vec<f64>), HarnessError> {
    let corruption = Corruption {
        landmarks: AMBIGUOUS.to_vec(),
        magnitude_mm: cfg.corruption_mm,
        side_swap: cfg.side_swap,
    };
    let case = synth_case(seed, &corruption);
    let (mut model, inputs) = lattice_detector(&case.prediction, &case.grid, cfg.sigma)?;
    let stack = model.predict(&inputs)?;
    let total_loss = crate::posemath::total_loss(&stack, &case.truth_stack(cfg.sigma)?)?;
    let mut initial = stack.decode()?;
    let swapped = if cfg.pair_assignment { correct_sides(&mut initial)? } else { vec![] };
    let mut fin = match &cfg.ssl {
        Some(s) => {
            let rc = RefineConfig { iters: s.iters, step: s.step, k: s.k, sigma: cfg.sigma, ..RefineConfig::default() };
            refine(&mut model, &inputs, lib, &rc)?.refined
        }
        None => stack.decode()?,
    };
    for kind in &swapped {
        let (l, r) = match kind {
            PairKind::Arms => (LEFT_ARM, RIGHT_ARM),
            PairKind::Legs => (crate::posemath::LEFT_LEG, crate::posemath::RIGHT_LEG),
        };
        for (a, b) in l.iter().zip(&r) {
            let (pa, pb) = (fin.get(*a), fin.get(*b));
            fin.set(*a, pb);
            fin.set(*b, pa);
        }
    }
    let before = ed_error(&stack.decode()?, &case.truth);
    let after = ed_error(&fin, &case.truth);
    let summary = CaseSummary {
        seed,
        total_loss,
        swapped,
        ed_before: before.mean,
        ed_after: after.mean,
        ambiguous_ed_before: ambiguous_mean(&before),
        ambiguous_ed_after: ambiguous_mean(&after),
    };
    Ok((summary, before.per_landmark, after.per_landmark))
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineReport, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lib_seed: u64 = rng.random();
    let case_seeds: Vec<u64> = (0..cfg.cases).map(|_| rng.random()).collect();
    let lib = synth_library(lib_seed, if cfg.ssl.is_some() { cfg.library_size } else { 0 });
    let mut cases = Vec::with_capacity(cfg.cases);
    let (mut before, mut after) = (Vec::new(), Vec::new());
    for &s in &case_seeds {
        let (summary, b, a) = run_case(s, cfg, &lib)?;
        cases.push(summary);
        before.push(b);
        after.push(a);
    }
    let plan = match cfg.unet {
        UnetChoice::None => None,
        UnetChoice::Toy => Some(summarize_plan("toy", &UnetSpec::toy())),
        UnetChoice::Reference => Some(summarize_plan("reference", &UnetSpec::reference())),
    };
    Ok(PipelineReport {
        config: cfg.clone(),
        plan,
        cases,
        baseline: metric_report(&before, &cfg.pck),
        result: metric_report(&after, &cfg.pck),
    })
}

/// Reads a config file and runs it.
pub fn run_pipeline_file(path: impl AsRef<std::path::Path>) -> Result<PipelineReport, HarnessError> {
    let cfg = PipelineConfig::from_json(&std::fs::read_to_string(path)?)?;
    run_pipeline(&cfg)
}
