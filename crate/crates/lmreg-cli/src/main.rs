//! `lmreg`: deformable 3D registration pipeline.
//!
//! Subcommands cover the whole loop: `gen-data` writes a synthetic dataset
//! with known ground-truth fields, `train` fits a model (single decoder or
//! cascade phases), `register` predicts a field for a volume pair,
//! `evaluate` scores a field against segmentations, and `gradcheck` runs
//! the finite-difference verification of every differentiable primitive.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
//! `REG_THREADS` caps internal parallelism; `REG_DETERMINISTIC=1` forces the
//! sequential execution path.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use lmreg_core::diff::gradcheck;
use lmreg_core::exec;
use lmreg_core::eval::{evaluate_field, EvalError};
use lmreg_core::model::{ModelError, RegModel, TrainPhase};
use lmreg_core::synth::{gen_dataset, SynthConfig, SynthError};
use lmreg_core::train::{
    load_checkpoint, load_pairs, save_checkpoint, trace_to_string, train, TrainError,
};
use lmreg_core::volume::{read_volume, write_volume, Volume};
use lmreg_core::warp;

#[derive(Parser)]
#[command(name = "lmreg", version, about = "Unsupervised deformable 3D registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground-truth fields.
    GenData(GenDataArgs),
    /// Train a registration model on a generated dataset.
    Train(TrainArgs),
    /// Predict the displacement field for a moving/fixed pair.
    Register(RegisterArgs),
    /// Score a displacement field against segmentations.
    Evaluate(EvaluateArgs),
    /// Finite-difference check of every differentiable primitive.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for volumes and the manifest.
    #[arg(long)]
    out: PathBuf,
    /// Grid size as X,Y,Z (each divisible by 8).
    #[arg(long, value_parser = parse_size)]
    size: [usize; 3],
    /// Number of pairs.
    #[arg(long)]
    count: usize,
    /// Generator seed.
    #[arg(long)]
    seed: u64,
    /// Peak displacement in voxels.
    #[arg(long, default_value_t = 4.0)]
    max_disp: f32,
    /// Gaussian smoothing radius of the field, in voxels.
    #[arg(long, default_value_t = 4.0)]
    smooth: f32,
    /// Labelled shapes per volume.
    #[arg(long, default_value_t = 4)]
    shapes: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory (from gen-data).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path; the loss trace lands next to it as ` .trace`.
    #[arg(long)]
    out: PathBuf,
    /// Training phase: single, joint, or cascade_step_<k>.
    #[arg(long)]
    phase: Option<String>,
    /// Continue from an existing checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override train.steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Override train.lr.
    #[arg(long)]
    lr: Option<f64>,
    /// Override train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override loss.lambda.
    #[arg(long)]
    lambda: Option<f64>,
    /// Force bitwise-deterministic execution.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct RegisterArgs {
    /// Trained checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Moving volume (VOL1 scalar).
    #[arg(long)]
    moving: PathBuf,
    /// Fixed volume (VOL1 scalar).
    #[arg(long)]
    fixed: PathBuf,
    /// Output displacement field.
    #[arg(long)]
    out_field: PathBuf,
    /// Also write the warped moving volume.
    #[arg(long)]
    out_warped: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Displacement field (VOL1, 3 channels).
    #[arg(long)]
    field: PathBuf,
    /// Moving segmentation (VOL1 labels).
    #[arg(long)]
    moving_seg: PathBuf,
    /// Fixed segmentation (VOL1 labels).
    #[arg(long)]
    fixed_seg: PathBuf,
    /// Also write the report to a file.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Max allowed scale-relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Seed for the randomized shapes.
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn parse_size(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected X,Y,Z, got {s:?}"));
    }
    let mut out = [0usize; 3];
    for (i, p) in parts.iter().enumerate() {
        out[i] = p
            .trim()
            .parse()
            .map_err(|_| format!("bad dimension {p:?}"))?;
    }
    Ok(out)
}

/// Failures split by exit code: usage/validation (2) vs runtime (1).
enum AppError {
    Usage(String),
    Runtime(String),
}

impl AppError {
    fn code(&self) -> u8 {
        match self {
            AppError::Usage(_) => 2,
            AppError::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            AppError::Usage(m) | AppError::Runtime(m) => m,
        }
    }
}

fn usage<E: std::fmt::Display>(e: E) -> AppError {
    AppError::Usage(e.to_string())
}

fn runtime<E: std::fmt::Display>(e: E) -> AppError {
    AppError::Runtime(e.to_string())
}

/// Input files that fail to open or parse are usage errors; everything that
/// happens after inputs are validated is a runtime failure.
fn from_train_error(e: TrainError) -> AppError {
    match e {
        TrainError::NonFiniteLoss { .. } => runtime(e),
        TrainError::Io(ref io) if io.kind() != std::io::ErrorKind::NotFound => runtime(e),
        _ => usage(e),
    }
}

fn read_scalar(path: &Path) -> Result<lmreg_core::volume::ScalarVolume, AppError> {
    read_volume(path)
        .and_then(Volume::into_scalar)
        .map_err(usage)
}

fn read_labels(path: &Path) -> Result<lmreg_core::volume::LabelVolume, AppError> {
    read_volume(path)
        .and_then(Volume::into_labels)
        .map_err(usage)
}

fn cmd_gen_data(args: GenDataArgs) -> Result<(), AppError> {
    let cfg = SynthConfig {
        size: args.size,
        count: args.count,
        seed: args.seed,
        max_disp: args.max_disp,
        smooth_sigma: args.smooth,
        n_shapes: args.shapes,
    };
    cfg.validate().map_err(AppError::Usage)?;
    println!(
        "{}",
        toml::to_string_pretty(&cfg).unwrap_or_default().trim_end()
    );
    let entries = gen_dataset(&cfg, &args.out).map_err(|e| match e {
        SynthError::Io(_) => runtime(e),
        _ => usage(e),
    })?;
    println!("wrote {} pairs to {}", entries.len(), args.out.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), AppError> {
    let text = std::fs::read_to_string(&args.config).map_err(usage)?;
    let mut cfg = RunConfig::parse(&text).map_err(AppError::Usage)?;
    if let Some(phase) = &args.phase {
        cfg.train.phase = phase.parse::<TrainPhase>().map_err(AppError::Usage)?;
    }
    if let Some(steps) = args.steps {
        cfg.train.steps = steps;
    }
    if let Some(lr) = args.lr {
        cfg.train.lr = lr;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(lambda) = args.lambda {
        cfg.loss.lambda = lambda;
        cfg.train.lambda = lambda;
    }
    if args.deterministic {
        cfg.train.deterministic = true;
    }
    cfg.validate().map_err(AppError::Usage)?;
    println!("# effective configuration\n{}", cfg.to_toml());

    let mut model = match &args.resume {
        Some(path) => load_checkpoint(path, Some(&cfg.model)).map_err(from_train_error)?,
        None => RegModel::new(cfg.model, cfg.train.seed).map_err(usage)?,
    };
    if let TrainPhase::CascadeStep(k) = cfg.train.phase {
        if k > 1 && model.trained_steps < k - 1 {
            return Err(AppError::Usage(format!(
                "phase cascade_step_{k} needs a checkpoint with {} trained steps (--resume), model has {}",
                k - 1,
                model.trained_steps
            )));
        }
    }
    let pairs = load_pairs(&args.data, 0..usize::MAX).map_err(from_train_error)?;
    let record = train(&mut model, &pairs, &cfg.train).map_err(from_train_error)?;
    save_checkpoint(&model, &args.out).map_err(runtime)?;
    let trace_path = PathBuf::from(format!("{}.trace", args.out.display()));
    std::fs::write(&trace_path, trace_to_string(&record.trace)).map_err(runtime)?;
    println!(
        "trained {} steps: loss {:.6} -> {:.6}; checkpoint {}, trace {}",
        record.trace.len(),
        record.initial_loss,
        record.final_loss,
        args.out.display(),
        trace_path.display()
    );
    Ok(())
}

fn cmd_register(args: RegisterArgs) -> Result<(), AppError> {
    let model = load_checkpoint(&args.ckpt, None).map_err(from_train_error)?;
    let moving = read_scalar(&args.moving)?;
    let fixed = read_scalar(&args.fixed)?;
    let (field, elapsed) = model.register_pair(&moving, &fixed).map_err(|e| match e {
        ModelError::Geometry { .. } => usage(e),
        other => runtime(other),
    })?;
    write_volume(&Volume::Field(field.clone()), &args.out_field).map_err(runtime)?;
    if let Some(out) = &args.out_warped {
        let warped = warp::apply_field(&moving, &field).map_err(runtime)?;
        write_volume(&Volume::Scalar(warped), out).map_err(runtime)?;
    }
    println!(
        "registered in {:.1} ms (cascade steps: {}); field {}",
        elapsed.as_secs_f64() * 1e3,
        model.trained_steps.max(1),
        args.out_field.display()
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), AppError> {
    let field = read_volume(&args.field)
        .and_then(Volume::into_field)
        .map_err(usage)?;
    let seg_m = read_labels(&args.moving_seg)?;
    let seg_f = read_labels(&args.fixed_seg)?;
    let report = evaluate_field(&field, &seg_m, &seg_f, 0.0).map_err(|e| match e {
        EvalError::GeometryMismatch { .. } => usage(e),
        other => runtime(other),
    })?;
    let text = report.to_text();
    print!("{text}");
    if let Some(path) = &args.report {
        std::fs::write(path, &text).map_err(runtime)?;
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), AppError> {
    if args.eps <= 0.0 || args.tol <= 0.0 {
        return Err(AppError::Usage("--eps and --tol must be positive".into()));
    }
    let reports = gradcheck::run_suite(args.seed, args.eps);
    let mut failed = Vec::new();
    for r in &reports {
        let ok = r.passed(args.tol);
        println!(
            "{}\t{:.3e}\t{}",
            r.op,
            r.max_rel_err,
            if ok { "pass" } else { "FAIL" }
        );
        if !ok {
            failed.push(r.op.clone());
        }
    }
    if failed.is_empty() {
        println!("all {} primitives within tol {:.1e}", reports.len(), args.tol);
        Ok(())
    } else {
        Err(AppError::Runtime(format!(
            "gradient check failed for: {}",
            failed.join(", ")
        )))
    }
}

fn main() -> ExitCode {
    exec::init_from_env();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Register(args) => cmd_register(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
