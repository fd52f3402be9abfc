//! Acceptance run: one line per criterion, nonzero exit if any fails.

mod common;

use std::time::Instant;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use posemem::adexec::{backward, finite_difference, relative_deviation, rev_forward, rev_inverse, TensorValue};
use posemem::graphcore::ComputationGraph;
use posemem::harness::{
    ed_error, metric_report, pck_auc, run_case, run_pipeline, synth_library, synth_pose, PckConfig, PipelineConfig,
    SslSettings, UnetChoice,
};
use posemem::memplanner::{
    apply_rev_substitutions, find_rev_candidates, plan, plan_checkpoints, simulate_peak_memory, simulate_trace,
    PartitionPlan,
};
use posemem::posemath::{
    kl_term, kl_term_grad, pair_loss, pair_loss_grad, pair_terms, resolve_left_right, HeatmapStack, Grid, PairKind,
    Pose, total_loss, total_loss_grad, LANDMARKS,
};
use posemem::sslrefine::{register, retrieval_error, retrieve_topk, PoseLibrary, RigidTransform, AMBIGUOUS, REGISTRATION_SET};
use posemem::synthgraph::{random_dag, unet_graph, UnetSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const GRAD_TOL: f64 = 1e-9;
const FD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
const REV_TOL: f64 = 1e-10;

struct Outcome {
    pass: bool,
    detail: String,
}

type Criterion = (&'static str, fn() -> Outcome);

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn c1_memory_reduction() -> Outcome {
    let g = unet_graph(&UnetSpec::reference());
    let t = Instant::now();
    let p = plan(&g);
    let secs = t.elapsed().as_secs_f64();
    let plain = PartitionPlan::all_plain(&g).peak_bytes;
    let reduction = 1.0 - p.peak_bytes as f64 / plain as f64;
    outcome(
        reduction >= 0.40 && secs < 10.0,
        format!("reduction {:.1}% (need >= 40%), plan time {secs:.2} s (need < 10 s)", 100.0 * reduction),
    )
}

fn c2_ordering() -> Outcome {
    let g = unet_graph(&UnetSpec::reference());
    let base = PartitionPlan::all_plain(&g);
    let plain = base.peak_bytes;
    let ckpt = plan_checkpoints(&g, None).peak_bytes;
    let rev = apply_rev_substitutions(&g, &base, &find_rev_candidates(&g)).peak_bytes;
    let both = plan(&g).peak_bytes;
    outcome(
        both < ckpt && ckpt < plain && rev < plain,
        format!("rev+ckpt {both} < ckpt {ckpt} < plain {plain}, rev-only {rev} < plain"),
    )
}

fn c3_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = Instant::now();
    let mut violations = 0;
    let mut with_rev = 0;
    for _ in 0..200 {
        let g = random_dag(&mut rng, 10);
        if !find_rev_candidates(&g).is_empty() {
            with_rev += 1;
        }
        if plan(&g).peak_bytes != common::brute_force_peak(&g) {
            violations += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        violations == 0 && secs < 60.0,
        format!("{violations} violations in 200 DAGs ({with_rev} with a coupling), {secs:.1} s (need < 60 s)"),
    )
}

fn c4_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst_plan, mut worst_fd) = (0.0f64, 0.0f64);
    let mut rev_plans = 0;
    for _ in 0..100 {
        let g = random_dag(&mut rng, 16);
        let (params, inputs, seed) = common::random_case(&g, &mut rng);
        let plain = backward(&g, &params, &inputs, &PartitionPlan::all_plain(&g), &seed).unwrap();
        let reference = common::flat_grads(&plain);
        for p in [plan(&g), common::random_plan(&g, &mut rng)] {
            if p.count(posemem::memplanner::ExecMode::Reversible) > 0 {
                rev_plans += 1;
            }
            let got = common::flat_grads(&backward(&g, &params, &inputs, &p, &seed).unwrap());
            worst_plan = worst_plan.max(relative_deviation(&got, &reference, 1e-6));
        }
        let fd = common::flat_fd(&finite_difference(&g, &params, &inputs, &seed, FD_STEP).unwrap());
        worst_fd = worst_fd.max(relative_deviation(&reference, &fd, 1e-3));
    }

    let mut worst_rev = 0.0f64;
    for _ in 0..1000 {
        let h = rng.random_range(1..=4usize);
        let len = rng.random_range(1..=6usize);
        let x = TensorValue::random(&[2 * h, len], &mut rng);
        let wf: Vec<f64> = (0..h * h).map(|_| normal(&mut rng)).collect();
        let wg: Vec<f64> = (0..h * h).map(|_| normal(&mut rng)).collect();
        let body = |w: &[f64], t: &TensorValue| {
            let mut out = TensorValue::zeros(&t.shape);
            for o in 0..h {
                for i in 0..h {
                    for (d, s) in out.channel_mut(o).iter_mut().zip(t.channel(i)) {
                        *d += w[o * h + i] * s;
                    }
                }
            }
            out.data.iter_mut().for_each(|v| *v = posemem::adexec::leaky(*v));
            out
        };
        let y = rev_forward(&x, |t| body(&wf, t), |t| body(&wg, t)).unwrap();
        let back = rev_inverse(&y, |t| body(&wf, t), |t| body(&wg, t)).unwrap();
        worst_rev = worst_rev.max(back.max_abs_diff(&x));
    }
    outcome(
        worst_plan <= GRAD_TOL && worst_fd <= FD_TOL && worst_rev <= REV_TOL,
        format!(
            "plan deviation {worst_plan:.2e} (<= {GRAD_TOL:e}, {rev_plans} reversible plans), \
             finite differences {worst_fd:.2e} (<= {FD_TOL:e}), reconstruction {worst_rev:.2e} (<= {REV_TOL:e})"
        ),
    )
}

fn trace_agrees(g: &ComputationGraph, p: &PartitionPlan, rng: &mut ChaCha8Rng) -> bool {
    let (params, inputs, seed) = common::random_case(g, rng);
    let model = simulate_trace(g, &p.parts, &p.modes).unwrap();
    let got = backward(g, &params, &inputs, p, &seed).unwrap().trace;
    got.peak() == simulate_peak_memory(g, &p.parts, &p.modes).unwrap() && got.peak() == p.peak_bytes && got == model
}

fn c5_trace_model() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut pairs, mut mismatches) = (0, 0);
    let toy = unet_graph(&UnetSpec::toy());
    let toy_plans = [PartitionPlan::all_plain(&toy), plan_checkpoints(&toy, None), plan(&toy)];
    for p in &toy_plans {
        pairs += 1;
        if !trace_agrees(&toy, p, &mut rng) {
            mismatches += 1;
        }
    }
    for _ in 0..100 {
        let g = random_dag(&mut rng, 16);
        for p in [PartitionPlan::all_plain(&g), plan(&g), common::random_plan(&g, &mut rng)] {
            pairs += 1;
            if !trace_agrees(&g, &p, &mut rng) {
                mismatches += 1;
            }
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatches over {pairs} (graph, plan) pairs"))
}

fn random_group(rng: &mut ChaCha8Rng, channels: usize, len: usize, weights: bool) -> Vec<Vec<f64>> {
    (0..channels)
        .map(|_| (0..len).map(|_| if weights { rng.random::<f64>() } else { 3.0 * normal(rng) }).collect())
        .collect()
}

fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(|c| c.as_slice()).collect()
}

fn c6_pair_loss() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut swap, mut shift, mut fd_worst) = (0.0f64, 0.0f64, 0.0f64);
    let mut l1_ok = true;
    let h = 1e-5;
    for _ in 0..500 {
        let (c, n) = (rng.random_range(1..=3usize), rng.random_range(2..=12usize));
        let pl = random_group(&mut rng, c, n, false);
        let pr = random_group(&mut rng, c, n, false);
        let gl = random_group(&mut rng, c, n, true);
        let gr = random_group(&mut rng, c, n, true);
        let (a, b, x, y) = (refs(&pl), refs(&pr), refs(&gl), refs(&gr));

        let t = pair_terms(&a, &b, &x, &y).unwrap();
        l1_ok &= t.l1 <= t.straight && t.l1 <= t.crossed;
        swap = swap.max((pair_loss(&a, &b, &x, &y).unwrap() - pair_loss(&b, &a, &x, &y).unwrap()).abs());

        let k: f64 = rng.random_range(-20.0..20.0);
        let shifted: Vec<Vec<f64>> = pl.iter().map(|ch| ch.iter().map(|v| v + k).collect()).collect();
        shift = shift.max((kl_term(&refs(&shifted), &x).unwrap() - kl_term(&a, &x).unwrap()).abs());

        let (_, dl, dr) = pair_loss_grad(&a, &b, &x, &y).unwrap();
        let (_, dk) = kl_term_grad(&a, &x).unwrap();
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for side in 0..2 {
            for ch in 0..c {
                for v in 0..n {
                    let mut up = [pl.clone(), pr.clone()];
                    let mut down = [pl.clone(), pr.clone()];
                    up[side][ch][v] += h;
                    down[side][ch][v] -= h;
                    let f = |s: &[Vec<Vec<f64>>; 2]| pair_loss(&refs(&s[0]), &refs(&s[1]), &x, &y).unwrap();
                    numeric.push((f(&up) - f(&down)) / (2.0 * h));
                    analytic.push(if side == 0 { dl[ch][v] } else { dr[ch][v] });
                }
            }
        }
        for ch in 0..c {
            for v in 0..n {
                let mut up = pl.clone();
                let mut down = pl.clone();
                up[ch][v] += h;
                down[ch][v] -= h;
                let f = |s: &Vec<Vec<f64>>| kl_term(&refs(s), &x).unwrap();
                numeric.push((f(&up) - f(&down)) / (2.0 * h));
                analytic.push(dk[ch][v]);
            }
        }
        fd_worst = fd_worst.max(relative_deviation(&analytic, &numeric, 1e-3));
    }

    let grid = Grid::cubic(2, 1.0);
    for _ in 0..500 {
        let mut pred = HeatmapStack::zeros(grid, LANDMARKS);
        let mut gt = HeatmapStack::zeros(grid, LANDMARKS);
        pred.data.iter_mut().for_each(|v| *v = 2.0 * normal(&mut rng));
        gt.data.iter_mut().for_each(|v| *v = rng.random::<f64>());
        let (_, grad) = total_loss_grad(&pred, &gt).unwrap();
        let mut numeric = Vec::with_capacity(pred.data.len());
        for i in 0..pred.data.len() {
            let orig = pred.data[i];
            pred.data[i] = orig + h;
            let up = total_loss(&pred, &gt).unwrap();
            pred.data[i] = orig - h;
            let down = total_loss(&pred, &gt).unwrap();
            pred.data[i] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        fd_worst = fd_worst.max(relative_deviation(&grad.data, &numeric, 1e-3));
    }
    outcome(
        swap <= 1e-12 && l1_ok && shift <= 1e-9 && fd_worst <= FD_TOL,
        format!(
            "swap {swap:.1e} (<= 1e-12), L1 bound {}, shift {shift:.1e} (<= 1e-9), gradients {fd_worst:.1e} (<= 1e-4)",
            if l1_ok { "held" } else { "broken" }
        ),
    )
}

fn resolves(pose: &Pose, kind: PairKind) -> bool {
    let (a, b) = kind.anchors();
    resolve_left_right(pose.get(1), pose.get(4), pose.get(6), pose.get(a), pose.get(b), kind).unwrap().a_is_left()
}

fn c7_resolver() -> Outcome {
    let (mut agree, mut flipped) = (0, 0);
    let kinds = [PairKind::Arms, PairKind::Legs];
    for seed in 0..1000u64 {
        let truth = synth_pose(seed).truth;
        if kinds.iter().all(|&k| resolves(&truth, k)) {
            agree += 1;
        }
        let mirrored = truth.map(|p| [-p[0], p[1], p[2]]);
        if kinds.iter().all(|&k| !resolves(&mirrored, k)) {
            flipped += 1;
        }
    }
    // b - a lies in the plane of the head frame, so the triple product is exactly zero
    let (p1, p4, p6) = ([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]);
    let (a, b) = ([1.0, 2.0, 3.0], [4.0, -5.0, 3.0]);
    let boundary = (0..10).all(|_| {
        kinds.iter().all(|&k| resolve_left_right(p1, p4, p6, a, b, k).unwrap().s1 == k.anchors().0)
    });
    outcome(
        agree == 1000 && flipped == 1000 && boundary,
        format!("agree {agree}/1000, mirrored flip {flipped}/1000, zero-angle boundary {}", if boundary { "ok" } else { "wrong" }),
    )
}

fn c8_refinement() -> Outcome {
    let cfg = PipelineConfig {
        seed: 2024,
        cases: 200,
        library_size: 50,
        corruption_mm: 5.0,
        pair_assignment: false,
        ssl: Some(SslSettings { iters: 8, step: 5e-4, k: 8 }),
        unet: UnetChoice::None,
        ..PipelineConfig::from_json(r#"{"seed": 0}"#).unwrap()
    };
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lib = synth_library(rng.random(), cfg.library_size);
    let (mut before, mut after) = (0.0, 0.0);
    let mut untouched = true;
    for _ in 0..cfg.cases {
        let (_, b, a) = run_case(rng.random(), &cfg, &lib).unwrap();
        for j in 1..=LANDMARKS {
            if AMBIGUOUS.contains(&j) {
                before += b[j - 1];
                after += a[j - 1];
            } else {
                untouched &= a[j - 1] == b[j - 1];
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let n = (cfg.cases * AMBIGUOUS.len()) as f64;
    let reduction = 1.0 - after / before;
    outcome(
        reduction >= 0.20 && untouched && secs < 120.0,
        format!(
            "ambiguous ED {:.3} -> {:.3} mm, reduction {:.1}% (need >= 20%), others {}, {secs:.1} s (need < 120 s)",
            before / n,
            after / n,
            100.0 * reduction,
            if untouched { "unchanged" } else { "CHANGED" }
        ),
    )
}

fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform {
    let q = Quaternion::new(normal(rng), normal(rng), normal(rng), normal(rng));
    let r = UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
    RigidTransform::from_parts(r, Vector3::new(10.0 * normal(rng), 10.0 * normal(rng), 10.0 * normal(rng)))
}

fn c9_retrieval() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut rank_mismatch = 0;
    for _ in 0..100 {
        let size = rng.random_range(1..=40usize);
        let lib: PoseLibrary = synth_library(rng.random(), size);
        let target = synth_pose(rng.random()).truth;
        let k = rng.random_range(1..=size);
        let got = retrieve_topk(&lib, &target, k).unwrap();
        let mut all: Vec<(f64, usize)> = lib
            .poses
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let t = register(p, &target, &REGISTRATION_SET).unwrap();
                (retrieval_error(&t.apply_pose(p), &target), i)
            })
            .collect();
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let want: Vec<usize> = all.iter().take(k).map(|e| e.1).collect();
        if got.iter().map(|n| n.index).collect::<Vec<_>>() != want {
            rank_mismatch += 1;
        }
    }
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let src = synth_pose(rng.random()).truth;
        let truth = random_transform(&mut rng);
        let est = register(&src, &truth.apply_pose(&src), &REGISTRATION_SET).unwrap();
        for i in 0..3 {
            worst = worst.max((est.translation[i] - truth.translation[i]).abs());
            for j in 0..3 {
                worst = worst.max((est.rotation[i][j] - truth.rotation[i][j]).abs());
            }
        }
    }
    outcome(
        rank_mismatch == 0 && worst <= 1e-9,
        format!("{rank_mismatch} ranking mismatches in 100 libraries, transform recovery {worst:.1e} (<= 1e-9)"),
    )
}

fn c10_metrics() -> Outcome {
    let cfg = PckConfig::default();
    let perfect: Vec<Vec<f64>> = (0..20)
        .map(|s| {
            let p = synth_pose(s).truth;
            ed_error(&p, &p).per_landmark
        })
        .collect();
    let r = metric_report(&perfect, &cfg);
    let perfect_ok = r.auc_mean == 1.0 && r.auc_per_landmark.iter().all(|&a| a == 1.0) && r.ed_per_landmark.iter().all(|&e| e == 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let monotone = (0..500).all(|_| {
        let n = rng.random_range(1..=50usize);
        let errors: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..15.0)).collect();
        let c = pck_auc(&errors, &cfg);
        c.pck.windows(2).all(|w| w[0] <= w[1]) && (0.0..=1.0).contains(&c.auc)
    });

    let run = PipelineConfig::from_json(r#"{"seed": 77, "cases": 4, "ssl": {}, "unet": "toy"}"#).unwrap();
    let identical = run_pipeline(&run).unwrap().to_text() == run_pipeline(&run).unwrap().to_text();
    outcome(
        perfect_ok && monotone && identical,
        format!(
            "perfect AUC/ED {}, PCK monotone {}, pipeline reruns {}",
            if perfect_ok { "ok" } else { "wrong" },
            if monotone { "ok" } else { "broken" },
            if identical { "identical" } else { "DIFFER" }
        ),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("memory reduction", c1_memory_reduction),
        ("peak ordering", c2_ordering),
        ("planner optimality", c3_oracle),
        ("gradient exactness", c4_gradients),
        ("trace matches model", c5_trace_model),
        ("pair loss properties", c6_pair_loss),
        ("left-right resolver", c7_resolver),
        ("refinement efficacy", c8_refinement),
        ("retrieval and registration", c9_retrieval),
        ("metrics and determinism", c10_metrics),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        if !o.pass {
            failed += 1;
        }
        println!("{} criterion {:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
