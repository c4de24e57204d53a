use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use elp_core::io::{load_checkpoint, read_vcube, save_checkpoint, write_pgm, write_vcube};
use elp_core::training::synth_scene;
use elp_core::{
    run_elp, run_gap_tv, Checkpoint, GapTvConfig, MetricReport, Rng, SceneKind, SciSystem, StagePrior, StageSchedule,
    Tensor, TrainConfig, TvPrior,
};

#[derive(Parser)]
#[command(name = "elp", version, about = "Video snapshot compressive imaging with ensemble-prior unfolding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode a scene into a snapshot measurement.
    Simulate(SimulateArgs),
    /// Recover a video cube from a measurement.
    Reconstruct(ReconstructArgs),
    /// Train an unfolding model and write a checkpoint.
    Train(TrainArgs),
    /// Score a reconstruction against ground truth.
    Eval(EvalArgs),
}

#[derive(clap::Args)]
struct SimulateArgs {
    /// Scene cube to encode; its leading B frames are used.
    #[arg(long, conflicts_with = "synth", required_unless_present = "synth")]
    scene: Option<PathBuf>,
    /// Generate a synthetic scene of this kind instead.
    #[arg(long, value_parser = parse_kind)]
    synth: Option<SceneKind>,
    /// Frames per snapshot.
    #[arg(long, default_value_t = 8)]
    b: usize,
    /// Side length of synthetic scenes.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long)]
    masks: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Standard deviation of additive Gaussian noise on the measurement.
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    /// Measurement output.
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth output; defaults to `<out stem>_truth.vcube`.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Solver {
    Gaptv,
    Elp,
}

impl Solver {
    fn name(self) -> &'static str {
        match self {
            Solver::Gaptv => "gaptv",
            Solver::Elp => "elp",
        }
    }
}

#[derive(clap::Args)]
struct ReconstructArgs {
    #[arg(long)]
    measurement: PathBuf,
    #[arg(long)]
    masks: PathBuf,
    #[arg(long, value_enum, default_value_t = Solver::Gaptv)]
    solver: Solver,
    /// Trained model for `--solver elp`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Run `--solver elp` with a TV denoiser instead of a trained model.
    #[arg(long, conflicts_with = "checkpoint")]
    tv_prior: bool,
    /// Number of unfolding stages to run (default: all).
    #[arg(long)]
    stages: Option<usize>,
    /// Ground truth; enables PSNR/SSIM in the report.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Metric CSV output.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Skip the per-frame PGM previews.
    #[arg(long)]
    no_preview: bool,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Key-value configuration file; omitted keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of training cubes (`*.vcube`, `[F, H, W]`).
    #[arg(long, conflicts_with = "synth", required_unless_present = "synth")]
    data: Option<PathBuf>,
    /// Train on synthetic scenes generated from the config.
    #[arg(long)]
    synth: bool,
    /// Checkpoint output.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss CSV; defaults to `<out stem>_loss.csv`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    recon: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Label written to the solver column.
    #[arg(long, default_value = "unknown")]
    solver: String,
}

fn parse_kind(s: &str) -> std::result::Result<SceneKind, String> {
    s.parse().map_err(|e: elp_core::Error| e.to_string())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}{suffix}"))
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "scene".into(), |s| s.to_string_lossy().into_owned())
}

fn simulate(args: SimulateArgs) -> Result<()> {
    ensure!(args.b >= 1, "--b must be at least 1");
    let rng = Rng::new(args.seed);
    let scene = match (&args.scene, args.synth) {
        (Some(path), _) => {
            let cube = read_vcube(path)?;
            ensure!(
                cube.rank() == 3 && cube.dims()[0] >= args.b,
                "{}: need a [F, H, W] cube with at least {} frames, got {:?}",
                path.display(),
                args.b,
                cube.dims()
            );
            Tensor::stack_frames(&(0..args.b).map(|f| cube.frame(f)).collect::<Vec<_>>())?
        }
        (None, Some(kind)) => synth_scene(kind, args.size, args.size, args.b, (1, 0), &mut rng.fork(1)).frames,
        (None, None) => bail!("either --scene or --synth is required"),
    };
    let [b, h, w] = [scene.dims()[0], scene.dims()[1], scene.dims()[2]];
    let system = SciSystem::bernoulli(b, h, w, 0.5, &mut rng.fork(2));
    let y = system.encode(&scene, args.sigma, &mut rng.fork(3))?;
    let truth = args.truth.unwrap_or_else(|| sibling(&args.out, "_truth.vcube"));
    write_vcube(&args.masks, system.masks())?;
    write_vcube(&args.out, &y)?;
    write_vcube(&truth, &scene)?;
    println!("wrote {b}x{h}x{w} masks, measurement and ground truth");
    Ok(())
}

fn reconstruct(args: ReconstructArgs) -> Result<()> {
    let y = read_vcube(&args.measurement)?;
    let system = SciSystem::new(read_vcube(&args.masks)?).with_context(|| format!("{}", args.masks.display()))?;
    ensure!(
        y.dims() == system.plane_dims(),
        "measurement is {:?} but masks are {:?}",
        y.dims(),
        system.cube_dims()
    );
    let truth = args.truth.as_deref().map(read_vcube).transpose()?;
    let start = Instant::now();
    let recon = match args.solver {
        Solver::Gaptv => run_gap_tv(&y, &system, &GapTvConfig::default())?,
        Solver::Elp => {
            if let Some(path) = &args.checkpoint {
                let model = load_checkpoint(path)?.model;
                let stages = args.stages.unwrap_or(model.stages());
                model
                    .reconstruct_stages(&y, &system, stages)
                    .with_context(|| format!("checkpoint {}", path.display()))?
                    .for_metrics()
            } else if args.tv_prior {
                let stages = args.stages.unwrap_or(5);
                ensure!(stages >= 1, "--stages must be at least 1");
                let single = stages.min(3);
                let schedule = StageSchedule::constant(single, stages - single, 1.0, 0.1)?;
                let prior = StagePrior::Tv(TvPrior {
                    weight: 0.02,
                    iters: 20,
                });
                run_elp(&y, &system, &schedule, prior)?.for_metrics()
            } else {
                bail!("--solver elp needs --checkpoint or --tv-prior");
            }
        }
    };
    let seconds = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
    write_vcube(&args.out, &recon)?;
    if !args.no_preview {
        for f in 0..recon.frames() {
            write_pgm(&sibling(&args.out, &format!("_f{f:02}.pgm")), &recon.frame(f))?;
        }
    }
    let scene = stem(&args.measurement);
    let report = match &truth {
        Some(t) => MetricReport::evaluate(&scene, args.solver.name(), &recon, t, seconds)?,
        None => MetricReport::timing(&scene, args.solver.name(), recon.frames(), seconds),
    };
    if let Some(path) = &args.report {
        report.write_csv(path)?;
    }
    if truth.is_some() {
        print!("{}", report.summary());
    }
    println!("{} reconstructed {} frames in {seconds:.3} s", args.solver.name(), recon.frames());
    Ok(())
}

fn load_cubes(dir: &Path) -> Result<Vec<Tensor>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "vcube"))
        .collect();
    paths.sort();
    ensure!(!paths.is_empty(), "{} holds no .vcube files", dir.display());
    paths.iter().map(|p| Ok(read_vcube(p)?)).collect()
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            TrainConfig::parse(&text).with_context(|| format!("{}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    let (data, system) = match &args.data {
        Some(dir) => {
            let data = load_cubes(dir)?;
            let mut rng = Rng::new(cfg.seed).fork(0x5eed);
            (data, SciSystem::bernoulli(cfg.frames, cfg.height, cfg.width, 0.5, &mut rng))
        }
        None => cfg.synthetic_data(),
    };
    let start = Instant::now();
    let (model, report) = elp_core::train_two_period(&cfg, &data, &system)?;
    let ckpt = Checkpoint {
        model,
        seed: cfg.seed,
        steps: report.steps as u64,
    };
    save_checkpoint(&args.out, &ckpt)?;
    report.write_loss_csv(&args.loss_csv.unwrap_or_else(|| sibling(&args.out, "_loss.csv")))?;
    println!(
        "trained {} steps in {:.1} s, validation loss {:.5} -> {:.5}",
        report.steps,
        start.elapsed().as_secs_f64(),
        report.initial_val_loss,
        report.final_val_loss()
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let recon = read_vcube(&args.recon)?;
    let truth = read_vcube(&args.truth)?;
    let report = MetricReport::evaluate(&stem(&args.recon), &args.solver, &recon, &truth, 0.0)?;
    report.write_csv(&args.report)?;
    print!("{}", report.summary());
    Ok(())
}

fn main() -> Result<()> {
    if let Some(n) = std::env::var("ELP_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match Cli::parse().command {
        Command::Simulate(a) => simulate(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
    }
}
