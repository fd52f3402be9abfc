//! `posemem` command-line tool.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use posemem::adexec::{backward, finite_difference, relative_deviation, Parameters, TensorValue};
use posemem::graphcore::ComputationGraph;
use posemem::harness::{
    default_grid, ed_error, metric_report, pck_csv, run_pipeline, synth_case, synth_library, Corruption, PckConfig,
    PipelineConfig,
};
use posemem::memplanner::{plan, plan_checkpoints, plan_report, simulate_peak_memory, PartitionPlan};
use posemem::posemath::{loss_breakdown, HeatmapStack, Pose, DEFAULT_SIGMA, LANDMARKS, NAMES};
use posemem::sslrefine::{lattice_detector, refine, PoseLibrary, RefineConfig, AMBIGUOUS};
use posemem::synthgraph::{random_dag, unet_graph, UnetSpec};

const GRAD_TOL: f64 = 1e-9;
const FD_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "posemem", version, about = "Activation memory planning and pose-landmark tooling")]
struct Cli {
    /// Seed for every random choice the command makes (default 0; for
    /// `pipeline`, overrides the config's seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum GraphKind {
    Unet,
    ToyUnet,
    Random,
}

#[derive(Subcommand)]
enum SynthCmd {
    /// Ground-truth pose, optionally with a corrupted prediction.
    Case {
        #[arg(long)]
        out: PathBuf,
        /// Displacement in mm applied to landmarks 1, 4, 6, 8, 10.
        #[arg(long, default_value_t = 0.0)]
        corrupt: f64,
        #[arg(long)]
        side_swap: bool,
        #[arg(long)]
        pred_out: Option<PathBuf>,
        /// Also write the ground-truth heatmap stack here.
        #[arg(long)]
        stack: Option<PathBuf>,
    },
    /// Directory of poses with a manifest.
    Library {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 50)]
        size: usize,
    },
    /// Graph file.
    Graph {
        #[arg(long, value_enum)]
        kind: GraphKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        max_nodes: usize,
    },
}

#[derive(Subcommand)]
enum Cmd {
    /// Plan a graph and write the memory report.
    Plan {
        #[arg(long)]
        graph: PathBuf,
        /// Report destination; stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Checkpoint-only plan under this peak budget, in bytes.
        #[arg(long)]
        budget: Option<u64>,
    },
    /// Compare gradients across plans on random parameters and inputs.
    CheckGrads {
        #[arg(long)]
        graph: PathBuf,
        /// Also compare against central finite differences.
        #[arg(long)]
        fd: bool,
    },
    /// Print every term of the training loss.
    Loss {
        /// Pose CSV or heatmap stack.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SIGMA)]
        sigma: f64,
    },
    /// Refine a predicted pose against a pose library.
    Refine {
        #[arg(long)]
        lib: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Ground truth, for ED deltas.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        iters: usize,
        #[arg(long, default_value_t = 5e-4)]
        step: f64,
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate synthetic data.
    Synth {
        #[command(subcommand)]
        what: SynthCmd,
    },
    /// ED, PCK and AUC for prediction/ground-truth pose pairs.
    Eval {
        #[arg(long, required = true)]
        pred: Vec<PathBuf>,
        #[arg(long, required = true)]
        gt: Vec<PathBuf>,
        #[arg(long, default_value_t = 10.0)]
        tau_max: f64,
        #[arg(long, default_value_t = 0.25)]
        delta: f64,
        #[arg(long)]
        pck_csv: Option<PathBuf>,
    },
    /// Run a full experiment from a config file.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        pck_csv: Option<PathBuf>,
    },
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_graph(path: &Path) -> Result<ComputationGraph> {
    ComputationGraph::load(path).with_context(|| format!("loading graph {}", path.display()))
}

fn load_stack(path: &Path, sigma: f64) -> Result<HeatmapStack> {
    if path.extension().is_some_and(|e| e == "csv") {
        let pose = Pose::load(path).with_context(|| format!("loading pose {}", path.display()))?;
        Ok(HeatmapStack::from_pose(&pose, &default_grid(), sigma)?)
    } else {
        HeatmapStack::load(path).with_context(|| format!("loading stack {}", path.display()))
    }
}

fn cmd_plan(graph: &Path, report: Option<&Path>, budget: Option<u64>) -> Result<()> {
    let g = load_graph(graph)?;
    let p = match budget {
        Some(b) => plan_checkpoints(&g, Some(b)),
        None => plan(&g),
    };
    let r = plan_report(&g, &p);
    emit(report, &(serde_json::to_string_pretty(&r)? + "\n"))?;
    if report.is_some() {
        println!("peak {} bytes, {:.1}% of plain ({} bytes)", r.peak_bytes, r.percent_of_plain, r.plain_peak_bytes);
    }
    Ok(())
}

fn cmd_check_grads(graph: &Path, seed: u64, fd: bool) -> Result<bool> {
    let g = load_graph(graph)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = Parameters::random(&g, &mut rng, 1.0);
    let inputs: Vec<TensorValue> = g.inputs().iter().map(|&v| TensorValue::random(&g.node(v).shape, &mut rng)).collect();
    let dy = TensorValue::random(&g.node(g.output()).shape, &mut rng);
    let plans = [
        ("plain", PartitionPlan::all_plain(&g)),
        ("checkpoint", plan_checkpoints(&g, None)),
        ("planned", plan(&g)),
    ];
    let reference = backward(&g, &params, &inputs, &plans[0].1, &dy)?;
    let flat = |gr: &posemem::adexec::Gradients| {
        let mut v = gr.params.flatten();
        v.extend(gr.inputs.iter().flat_map(|t| t.data.iter().copied()));
        v
    };
    let want = flat(&reference);
    let mut ok = true;
    for (name, p) in &plans {
        let got = backward(&g, &params, &inputs, p, &dy)?;
        let dev = relative_deviation(&flat(&got), &want, 1e-6);
        let modeled = simulate_peak_memory(&g, &p.parts, &p.modes)?;
        let traced = got.trace.peak();
        let pass = dev <= GRAD_TOL && modeled == traced;
        ok &= pass;
        println!(
            "{name:<10} peak {traced} bytes (model {modeled}), max rel grad deviation {dev:.3e} {}",
            if pass { "ok" } else { "FAIL" }
        );
    }
    if fd {
        let (dp, dx) = finite_difference(&g, &params, &inputs, &dy, 1e-5)?;
        let mut num = dp;
        num.extend(dx.into_iter().flatten());
        let dev = relative_deviation(&want, &num, 1e-3);
        let pass = dev <= FD_TOL;
        ok &= pass;
        println!("finite-difference max rel deviation {dev:.3e} {}", if pass { "ok" } else { "FAIL" });
    }
    Ok(ok)
}

fn cmd_loss(pred: &Path, gt: &Path, sigma: f64) -> Result<()> {
    let b = loss_breakdown(&load_stack(pred, sigma)?, &load_stack(gt, sigma)?)?;
    for (name, t) in [("arms", b.arms), ("legs", b.legs)] {
        println!("{name}.straight {:.10e}", t.straight);
        println!("{name}.crossed {:.10e}", t.crossed);
        println!("{name}.l1 {:.10e}", t.l1);
        println!("{name}.l2 {:.10e}", t.l2);
        println!("{name}.pair {:.10e}", t.total());
    }
    println!("head_trunk.kl {:.10e}", b.head_trunk);
    println!("total {:.10e}", b.total);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_refine(lib: &Path, pred: &Path, gt: Option<&Path>, iters: usize, step: f64, k: usize, out: Option<&Path>) -> Result<()> {
    let library = PoseLibrary::load(lib)?;
    let start = Pose::load(pred)?;
    let truth = gt.map(Pose::load).transpose()?;
    let (mut model, inputs) = lattice_detector(&start, &default_grid(), DEFAULT_SIGMA)?;
    let cfg = RefineConfig { iters, step, k, ..RefineConfig::default() };
    let r = refine(&mut model, &inputs, &library, &cfg)?;
    println!("index,name,before_x,before_y,before_z,after_x,after_y,after_z,ed_before,ed_after,ed_delta");
    for i in 1..=LANDMARKS {
        let (b, a) = (r.initial.get(i), r.refined.get(i));
        let (eb, ea) = match &truth {
            Some(t) => (ed_error(&r.initial, t).per_landmark[i - 1], ed_error(&r.refined, t).per_landmark[i - 1]),
            None => (f64::NAN, f64::NAN),
        };
        println!("{i},{},{},{},{},{},{},{},{eb},{ea},{}", NAMES[i - 1], b[0], b[1], b[2], a[0], a[1], a[2], ea - eb);
    }
    if let Some(t) = &truth {
        let mean = |p: &Pose| AMBIGUOUS.iter().map(|&i| ed_error(p, t).per_landmark[i - 1]).sum::<f64>() / 5.0;
        eprintln!("ambiguous-landmark mean ED {:.3} -> {:.3} mm", mean(&r.initial), mean(&r.refined));
    }
    if let Some(o) = out {
        r.refined.save(o)?;
    }
    Ok(())
}

fn cmd_synth(what: &SynthCmd, seed: u64) -> Result<()> {
    match what {
        SynthCmd::Case { out, corrupt, side_swap, pred_out, stack } => {
            let c = Corruption {
                landmarks: if *corrupt > 0.0 { AMBIGUOUS.to_vec() } else { vec![] },
                magnitude_mm: *corrupt,
                side_swap: *side_swap,
            };
            let case = synth_case(seed, &c);
            case.truth.save(out)?;
            if let Some(p) = pred_out {
                case.prediction.save(p)?;
            }
            if let Some(s) = stack {
                case.truth_stack(DEFAULT_SIGMA)?.save(s)?;
            }
        }
        SynthCmd::Library { dir, size } => synth_library(seed, *size).save(dir)?,
        SynthCmd::Graph { kind, out, max_nodes } => {
            let g = match kind {
                GraphKind::Unet => unet_graph(&UnetSpec::reference()),
                GraphKind::ToyUnet => unet_graph(&UnetSpec::toy()),
                GraphKind::Random => random_dag(&mut ChaCha8Rng::seed_from_u64(seed), *max_nodes),
            };
            g.save(out)?;
        }
    }
    Ok(())
}

fn cmd_eval(pred: &[PathBuf], gt: &[PathBuf], pck: PckConfig, csv: Option<&Path>) -> Result<()> {
    if pred.len() != gt.len() {
        bail!("{} predictions but {} ground truths", pred.len(), gt.len());
    }
    let mut errors = Vec::new();
    for (p, g) in pred.iter().zip(gt) {
        errors.push(ed_error(&Pose::load(p)?, &Pose::load(g)?).per_landmark);
    }
    let r = metric_report(&errors, &pck);
    if let Some(c) = csv {
        std::fs::write(c, pck_csv(&r.pck))?;
    }
    println!("{}", serde_json::to_string_pretty(&r)?);
    Ok(())
}

fn cmd_pipeline(config: &Path, seed: Option<u64>, report: Option<&Path>, csv: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let mut cfg = PipelineConfig::from_json(&text).with_context(|| format!("in {}", config.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let r = run_pipeline(&cfg)?;
    emit(report, &r.to_text())?;
    if let Some(c) = csv {
        std::fs::write(c, pck_csv(&r.result.pck))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.cmd {
        Cmd::Plan { graph, report, budget } => cmd_plan(graph, report.as_deref(), *budget)?,
        Cmd::CheckGrads { graph, fd } => return cmd_check_grads(graph, seed, *fd),
        Cmd::Loss { pred, gt, sigma } => cmd_loss(pred, gt, *sigma)?,
        Cmd::Refine { lib, pred, gt, iters, step, k, out } => {
            cmd_refine(lib, pred, gt.as_deref(), *iters, *step, *k, out.as_deref())?
        }
        Cmd::Synth { what } => cmd_synth(what, seed)?,
        Cmd::Eval { pred, gt, tau_max, delta, pck_csv } => {
            cmd_eval(pred, gt, PckConfig { tau_max: *tau_max, delta: *delta }, pck_csv.as_deref())?
        }
        Cmd::Pipeline { config, report, pck_csv } => {
            cmd_pipeline(config, cli.seed, report.as_deref(), pck_csv.as_deref())?
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
