//! Command implementations behind the `segnode` binary.
//!
//! Every command resolves its flags into a manifest, stages its outputs and
//! renames them into place only on success. Exit codes: 0 on success, 1 on
//! runtime errors, 2 on usage errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{generate_dataset, DatasetConfig, SynthSample};
use crate::error::{Error, Result};
use crate::io::{self, StagedDir};
use crate::metrics::Labels;
use crate::model::{
    analytic_param_count, format_param_report, load_model, new_model, param_count, save_model,
    Model, ModelKind, NetworkConfig, TimeMode, BRANCHES,
};
use crate::optim::Optimizer;
use crate::params::{finite_diff_grad, sample_coords};
use crate::scalar::{Dtype, Scalar};
use crate::solver::{Method, SolverConfig};
use crate::train::{
    evaluate, history_lines, model_loss_and_grads, probe_gradient_memory, trajectory_eval, train,
    GradMode, TrainConfig,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
const DATASET_FORMAT: &str = "segnode-dataset-v1";

#[derive(Debug, Parser)]
#[command(
    name = "segnode",
    version,
    about = "Continuous-depth segmentation at desk scale: data, training, evaluation, verification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic shape-segmentation dataset.
    Dataset(DatasetArgs),
    /// Train the continuous model or the residual baseline.
    Train(TrainArgs),
    /// Evaluate a checkpoint: per-class IoU and mIoU.
    Eval(EvalArgs),
    /// Decode predictions at intermediate solve times.
    Trajectory(TrajectoryArgs),
    /// Cross-check adjoint, unrolled and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Measure activation memory of the two gradient routes and compare
    /// parameter counts.
    Bench(BenchArgs),
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

fn parse_precision(s: &str) -> Result<Dtype> {
    match s {
        "f32" => Ok(Dtype::F32),
        "f64" => Ok(Dtype::F64),
        other => Err(usage(format!("unknown precision `{other}` (use f32 or f64)"))),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Dataset(args) => cmd_dataset(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Trajectory(args) => cmd_trajectory(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Bench(args) => cmd_bench(args),
    }
}

// ---------------------------------------------------------------------------
// dataset
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Output directory (must not exist yet).
    #[arg(long)]
    pub out: PathBuf,
    /// Square image size in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Number of classes including background.
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Number of samples.
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub shapes_min: usize,
    #[arg(long, default_value_t = 3)]
    pub shapes_max: usize,
    /// Element type of the stored tensors (f32 or f64).
    #[arg(long, default_value = "f32")]
    pub precision: String,
}

fn cmd_dataset(args: DatasetArgs) -> Result<()> {
    match parse_precision(&args.precision)? {
        Dtype::F32 => dataset_impl::<f32>(&args),
        Dtype::F64 => dataset_impl::<f64>(&args),
    }
}

fn dataset_impl<T: Scalar>(args: &DatasetArgs) -> Result<()> {
    let config = DatasetConfig {
        image_size: (args.size, args.size),
        num_classes: args.classes,
        shapes_min: args.shapes_min,
        shapes_max: args.shapes_max,
        sample_count: args.count,
        seed: args.seed,
    };
    let samples = generate_dataset::<T>(&config)?;

    let staged = StagedDir::begin(&args.out)?;
    for (i, sample) in samples.iter().enumerate() {
        io::write_tensor(&staged.file(&format!("sample_{i:04}.image.sgnt")), &sample.image)?;
        io::write_tensor(
            &staged.file(&format!("sample_{i:04}.label.sgnt")),
            &sample.labels.to_tensor::<T>(),
        )?;
    }
    let manifest = vec![
        ("command".into(), "dataset".to_string()),
        ("format".into(), DATASET_FORMAT.to_string()),
        ("tool_version".into(), TOOL_VERSION.to_string()),
        ("seed".into(), args.seed.to_string()),
        ("height".into(), args.size.to_string()),
        ("width".into(), args.size.to_string()),
        ("classes".into(), args.classes.to_string()),
        ("count".into(), args.count.to_string()),
        ("shapes_min".into(), args.shapes_min.to_string()),
        ("shapes_max".into(), args.shapes_max.to_string()),
        ("precision".into(), args.precision.clone()),
        ("artifact.samples".into(), "sample_NNNN.{image,label}.sgnt".into()),
    ];
    io::write_kv_file(&staged.file("manifest.txt"), &manifest)?;
    let dest = staged.commit()?;
    println!(
        "wrote {} samples ({} tensor files) to {}",
        samples.len(),
        2 * samples.len(),
        dest.display()
    );
    Ok(())
}

/// Reads a dataset directory produced by `segnode dataset`.
pub fn load_dataset<T: Scalar>(dir: &Path) -> Result<(DatasetConfig, Vec<SynthSample<T>>)> {
    let pairs = io::read_kv_file(&dir.join("manifest.txt"))?;
    if io::kv_lookup(&pairs, "format")? != DATASET_FORMAT {
        return Err(Error::Format(format!(
            "{} is not a {DATASET_FORMAT} directory",
            dir.display()
        )));
    }
    let count: usize = io::kv_lookup(&pairs, "count")?
        .parse()
        .map_err(|_| Error::Format("bad sample count".into()))?;
    let config = DatasetConfig {
        image_size: (
            io::kv_lookup(&pairs, "height")?.parse().map_err(|_| Error::Format("bad height".into()))?,
            io::kv_lookup(&pairs, "width")?.parse().map_err(|_| Error::Format("bad width".into()))?,
        ),
        num_classes: io::kv_lookup(&pairs, "classes")?
            .parse()
            .map_err(|_| Error::Format("bad class count".into()))?,
        shapes_min: io::kv_lookup(&pairs, "shapes_min")?.parse().unwrap_or(1),
        shapes_max: io::kv_lookup(&pairs, "shapes_max")?.parse().unwrap_or(3),
        sample_count: count,
        seed: io::kv_lookup(&pairs, "seed")?.parse().unwrap_or(0),
    };
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let image = io::read_tensor::<T>(&dir.join(format!("sample_{i:04}.image.sgnt")))?;
        let label_tensor = io::read_tensor::<T>(&dir.join(format!("sample_{i:04}.label.sgnt")))?;
        samples.push(SynthSample {
            image,
            labels: Labels::from_tensor(&label_tensor)?,
        });
    }
    Ok((config, samples))
}

pub fn dataset_precision(dir: &Path) -> Result<Dtype> {
    let pairs = io::read_kv_file(&dir.join("manifest.txt"))?;
    parse_precision(io::kv_lookup(&pairs, "precision")?)
        .map_err(|_| Error::Format("bad precision in dataset manifest".into()))
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory from `segnode dataset`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory (must not exist yet).
    #[arg(long)]
    pub out: PathBuf,
    /// Model: segnode or baseline.
    #[arg(long, default_value = "segnode")]
    pub model: String,
    /// Gradient route across the ODE segment: adjoint or direct.
    #[arg(long, default_value = "adjoint")]
    pub grad: String,
    #[arg(long, default_value_t = 600)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    /// Solver method: euler, rk4 or dopri5.
    #[arg(long, default_value = "rk4")]
    pub solver: String,
    #[arg(long, default_value_t = 8)]
    pub step_count: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub rtol: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub atol: f64,
    #[arg(long, default_value_t = 100_000)]
    pub max_nfe: usize,
    /// Branch channel widths, lowest resolution last.
    #[arg(long, default_value = "8,16,32,64")]
    pub channels: String,
    /// Use the published channel widths (48, 96, 192, 384). Much slower.
    #[arg(long, default_value_t = false)]
    pub paper_scale: bool,
    #[arg(long, default_value_t = 2)]
    pub modules: usize,
    #[arg(long, default_value_t = 6)]
    pub repeats: usize,
    #[arg(long, default_value_t = 2)]
    pub blocks: usize,
    #[arg(long, default_value_t = 8)]
    pub groups: usize,
    /// Time handling in the dynamics: autonomous or concat-time.
    #[arg(long, default_value = "autonomous")]
    pub time_mode: String,
    /// Base learning rate; defaults to the recipe of the chosen model.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Weight decay; defaults to the recipe of the chosen model.
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long, default_value_t = 0.9)]
    pub lr_power: f64,
}

fn parse_channels(raw: &str) -> Result<[usize; BRANCHES]> {
    let parts: Vec<usize> = raw
        .split(',')
        .map(|v| v.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| usage(format!("bad --channels list `{raw}`")))?;
    if parts.len() != BRANCHES {
        return Err(usage(format!(
            "--channels needs exactly {BRANCHES} values, got {}",
            parts.len()
        )));
    }
    Ok([parts[0], parts[1], parts[2], parts[3]])
}

struct ResolvedTrain {
    kind: ModelKind,
    grad_mode: GradMode,
    network: NetworkConfig,
    solver: SolverConfig,
    train: TrainConfig,
}

fn resolve_train(args: &TrainArgs, data_cfg: &DatasetConfig) -> Result<ResolvedTrain> {
    let kind = ModelKind::parse(&args.model)
        .ok_or_else(|| usage(format!("unknown model `{}`", args.model)))?;
    let grad_mode = GradMode::parse(&args.grad)
        .ok_or_else(|| usage(format!("unknown gradient mode `{}`", args.grad)))?;
    if kind == ModelKind::Baseline && grad_mode == GradMode::Adjoint {
        return Err(usage(
            "--grad adjoint only applies to --model segnode (the baseline has no ODE segment)",
        ));
    }
    let method = Method::parse(&args.solver)
        .ok_or_else(|| usage(format!("unknown solver `{}`", args.solver)))?;
    if kind == ModelKind::SegNode && grad_mode == GradMode::Direct && !method.is_fixed_step() {
        return Err(usage("--grad direct needs a fixed-step solver (euler or rk4)"));
    }
    let channels = if args.paper_scale {
        eprintln!(
            "note: --paper-scale uses the published widths (48, 96, 192, 384); \
             expect runtimes in hours on a desktop CPU"
        );
        [48, 96, 192, 384]
    } else {
        parse_channels(&args.channels)?
    };
    let time_mode = TimeMode::parse(&args.time_mode)
        .ok_or_else(|| usage(format!("unknown time mode `{}`", args.time_mode)))?;

    let network = NetworkConfig {
        branch_channels: channels,
        num_classes: data_cfg.num_classes,
        modules_in_dynamics: args.modules,
        baseline_repeats: args.repeats,
        blocks_per_branch: args.blocks,
        input_size: data_cfg.image_size,
        groups: args.groups,
        norm_eps: 1e-5,
        fusion: true,
        time_mode,
    };
    network.validate()?;
    let solver = SolverConfig {
        method,
        t0: 0.0,
        t1: 1.0,
        step_count: args.step_count,
        rtol: args.rtol,
        atol: args.atol,
        max_nfe: args.max_nfe,
    };
    solver.validate()?;

    let optimizer = match kind {
        ModelKind::SegNode => Optimizer::Sgd {
            lr: args.lr.unwrap_or(0.1),
            momentum: args.momentum,
            weight_decay: args.weight_decay.unwrap_or(0.0),
        },
        ModelKind::Baseline => Optimizer::AdamW {
            lr: args.lr.unwrap_or(1e-4),
            weight_decay: args.weight_decay.unwrap_or(0.05),
        },
    };
    let train = TrainConfig {
        optimizer,
        batch_size: args.batch,
        total_steps: args.steps,
        lr_power: args.lr_power,
        grad_mode,
        seed: args.seed,
    };
    Ok(ResolvedTrain {
        kind,
        grad_mode,
        network,
        solver,
        train,
    })
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    if !args.data.exists() {
        return Err(Error::Config(format!(
            "dataset directory {} does not exist",
            args.data.display()
        )));
    }
    match dataset_precision(&args.data)? {
        Dtype::F32 => train_impl::<f32>(&args),
        Dtype::F64 => train_impl::<f64>(&args),
    }
}

fn train_impl<T: Scalar>(args: &TrainArgs) -> Result<()> {
    let (data_cfg, dataset) = load_dataset::<T>(&args.data)?;
    let resolved = resolve_train(args, &data_cfg)?;
    let model: Model<T> = new_model(
        resolved.kind,
        resolved.network.clone(),
        resolved.solver.clone(),
        args.seed,
    )?;
    let outcome = train(&model, &dataset, &resolved.train)?;

    let staged = StagedDir::begin(&args.out)?;
    staged.write_text("history.txt", &history_lines(&outcome.history))?;
    save_model(&outcome.model, &staged.file("checkpoint"))?;

    let mut manifest = vec![
        ("command".into(), "train".to_string()),
        ("tool_version".into(), TOOL_VERSION.to_string()),
        ("data".into(), args.data.display().to_string()),
        ("model".into(), resolved.kind.name().to_string()),
        ("grad".into(), resolved.grad_mode.name().to_string()),
        ("steps".into(), args.steps.to_string()),
        ("batch".into(), args.batch.to_string()),
        ("seed".into(), args.seed.to_string()),
        ("optimizer".into(), resolved.train.optimizer.name().to_string()),
        ("lr".into(), format!("{}", resolved.train.optimizer.base_lr())),
        ("lr_power".into(), format!("{}", args.lr_power)),
        ("momentum".into(), format!("{}", args.momentum)),
        (
            "weight_decay".into(),
            format!(
                "{}",
                match resolved.train.optimizer {
                    Optimizer::Sgd { weight_decay, .. } => weight_decay,
                    Optimizer::AdamW { weight_decay, .. } => weight_decay,
                }
            ),
        ),
        ("artifact.history".into(), "history.txt".to_string()),
        ("artifact.checkpoint".into(), "checkpoint".to_string()),
    ];
    manifest.push(("solver".into(), resolved.solver.method.name().to_string()));
    manifest.push(("step_count".into(), resolved.solver.step_count.to_string()));
    manifest.push(("rtol".into(), format!("{}", resolved.solver.rtol)));
    manifest.push(("atol".into(), format!("{}", resolved.solver.atol)));
    manifest.push(("max_nfe".into(), resolved.solver.max_nfe.to_string()));
    manifest.push(("channels".into(), resolved.network.branch_channels.map(|c| c.to_string()).join(",")));
    manifest.push(("modules".into(), resolved.network.modules_in_dynamics.to_string()));
    manifest.push(("repeats".into(), resolved.network.baseline_repeats.to_string()));
    manifest.push(("blocks".into(), resolved.network.blocks_per_branch.to_string()));
    manifest.push(("groups".into(), resolved.network.groups.to_string()));
    manifest.push(("time_mode".into(), resolved.network.time_mode.name().to_string()));
    io::write_kv_file(&staged.file("manifest.txt"), &manifest)?;
    let dest = staged.commit()?;

    let final_loss = outcome.history.last().map(|r| r.loss);
    println!(
        "trained {} for {} steps{} -> {}",
        resolved.kind.name(),
        args.steps,
        final_loss
            .map(|l| format!(" (final loss {l:.6})"))
            .unwrap_or_default(),
        dest.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory written by `segnode train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the report (must not exist yet).
    #[arg(long)]
    pub out: PathBuf,
}

fn checkpoint_precision(dir: &Path) -> Result<Dtype> {
    let pairs = io::read_kv_file(&dir.join("manifest.txt"))?;
    parse_precision(io::kv_lookup(&pairs, "dtype")?)
        .map_err(|_| Error::Checkpoint("bad dtype in checkpoint manifest".into()))
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    match checkpoint_precision(&args.checkpoint)? {
        Dtype::F32 => eval_impl::<f32>(&args),
        Dtype::F64 => eval_impl::<f64>(&args),
    }
}

fn eval_report_text(report: &crate::train::EvalReport) -> String {
    let mut text = String::new();
    let _ = writeln!(text, "samples = {}", report.samples);
    for (c, iou) in report.miou.per_class.iter().enumerate() {
        match iou {
            Some(v) => {
                let _ = writeln!(text, "class_{c} = {v}");
            }
            None => {
                let _ = writeln!(text, "class_{c} = absent");
            }
        }
    }
    let _ = writeln!(text, "miou = {}", report.miou.mean);
    let _ = writeln!(text, "nfe_per_sample = {}", report.nfe_per_sample);
    text
}

fn eval_impl<T: Scalar>(args: &EvalArgs) -> Result<()> {
    let model = load_model::<T>(&args.checkpoint)?;
    let (_, dataset) = load_dataset::<T>(&args.data)?;
    let report = evaluate(&model, &dataset)?;
    let text = eval_report_text(&report);
    print!("{text}");

    let staged = StagedDir::begin(&args.out)?;
    staged.write_text("report.txt", &text)?;
    io::write_kv_file(
        &staged.file("manifest.txt"),
        &[
            ("command".into(), "eval".to_string()),
            ("tool_version".into(), TOOL_VERSION.to_string()),
            ("checkpoint".into(), args.checkpoint.display().to_string()),
            ("data".into(), args.data.display().to_string()),
            ("artifact.report".into(), "report.txt".to_string()),
        ],
    )?;
    staged.commit()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// trajectory
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct TrajectoryArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Ascending solve times in [0, 1], comma separated.
    #[arg(long, default_value = "0.0,0.25,0.5,0.75,1.0")]
    pub times: String,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_times(raw: &str) -> Result<Vec<f64>> {
    let times: Vec<f64> = raw
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| usage(format!("bad --times list `{raw}`")))?;
    if times.is_empty() {
        return Err(usage("--times must not be empty"));
    }
    for pair in times.windows(2) {
        if pair[1] < pair[0] {
            return Err(usage(format!(
                "--times must be ascending ({} follows {})",
                pair[1], pair[0]
            )));
        }
    }
    if times.iter().any(|&t| !(0.0..=1.0).contains(&t)) {
        return Err(usage("--times must lie in [0, 1]"));
    }
    Ok(times)
}

fn cmd_trajectory(args: TrajectoryArgs) -> Result<()> {
    match checkpoint_precision(&args.checkpoint)? {
        Dtype::F32 => trajectory_impl::<f32>(&args),
        Dtype::F64 => trajectory_impl::<f64>(&args),
    }
}

fn trajectory_impl<T: Scalar>(args: &TrajectoryArgs) -> Result<()> {
    let times = parse_times(&args.times)?;
    let model = load_model::<T>(&args.checkpoint)?;
    let (_, dataset) = load_dataset::<T>(&args.data)?;
    let eval = trajectory_eval(&model, &dataset, &times)?;

    let mut table = String::new();
    for row in &eval.rows {
        table.push_str(&io::record_line(&[
            ("time", format!("{}", row.time)),
            ("error", format!("{}", row.error)),
            ("nfe", format!("{}", row.nfe)),
        ]));
        table.push('\n');
    }
    print!("{table}");

    let staged = StagedDir::begin(&args.out)?;
    staged.write_text("trajectory.txt", &table)?;
    for (i, map) in eval.first_sample_maps.iter().enumerate() {
        io::write_tensor(&staged.file(&format!("map_{i:02}.sgnt")), &map.to_tensor::<T>())?;
    }
    io::write_kv_file(
        &staged.file("manifest.txt"),
        &[
            ("command".into(), "trajectory".to_string()),
            ("tool_version".into(), TOOL_VERSION.to_string()),
            ("checkpoint".into(), args.checkpoint.display().to_string()),
            ("data".into(), args.data.display().to_string()),
            ("times".into(), args.times.clone()),
            ("artifact.table".into(), "trajectory.txt".to_string()),
            ("artifact.maps".into(), "map_NN.sgnt".to_string()),
        ],
    )?;
    staged.commit()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Verification runs in f64; f32 is rejected.
    #[arg(long, default_value = "f64")]
    pub precision: String,
    #[arg(long, default_value_t = 8)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub tolerance: f64,
    /// Finite-difference coordinates to sample.
    #[arg(long, default_value_t = 60)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub struct GradcheckOutcome {
    pub adjoint_vs_direct_rel_l2: f64,
    pub adjoint_vs_fd_max: (f64, String, usize),
    pub direct_vs_fd_max: (f64, String, usize),
}

/// The oracle triangle on a tiny f64 model: adjoint versus unrolled
/// gradients (relative L2 over all parameters), and both versus central
/// finite differences on sampled coordinates.
pub fn run_gradcheck(steps: usize, samples: usize, seed: u64) -> Result<GradcheckOutcome> {
    let network = NetworkConfig::tiny();
    let solver = SolverConfig {
        method: Method::Rk4,
        step_count: steps,
        ..SolverConfig::default()
    };
    let mut model: Model<f64> = new_model(ModelKind::SegNode, network, solver, seed)?;
    let data_cfg = DatasetConfig {
        image_size: model.config.input_size,
        num_classes: model.config.num_classes,
        sample_count: 2,
        seed: seed ^ 0x5EED,
        ..DatasetConfig::default()
    };
    let dataset = crate::data::generate_dataset_with_threads::<f64>(&data_cfg, 1)?;

    // Two short unrolled steps move the zero-initialized convolutions off
    // zero, so the check exercises every path.
    let warm = train(
        &model,
        &dataset,
        &TrainConfig {
            total_steps: 2,
            grad_mode: GradMode::Direct,
            batch_size: 2,
            ..TrainConfig::segnode_desk(2, seed)
        },
    )?;
    model = warm.model;

    let (images, labels) = crate::data::stack_batch(&[&dataset[0], &dataset[1]])?;
    let (_, adjoint, _) = model_loss_and_grads(&model, &images, &labels, GradMode::Adjoint)?;
    let (_, direct, _) = model_loss_and_grads(&model, &images, &labels, GradMode::Direct)?;

    let mut num = 0.0;
    let mut den = 0.0;
    for (name, a) in adjoint.iter() {
        let d = direct.get(name).expect("same schema");
        for (x, y) in a.data().iter().zip(d.data()) {
            num += (x - y) * (x - y);
            den += y * y;
        }
    }
    let adjoint_vs_direct_rel_l2 = (num / den.max(1e-300)).sqrt();

    let coords = sample_coords(&model.params, samples, seed ^ 0xC0DE);
    // The finite-difference oracle only needs loss values, so it runs the
    // plain inference forward (same arithmetic as the tracked one).
    let reference = model.clone();
    let mut loss_of = move |params: &crate::params::ParamStore<f64>| -> Result<f64> {
        let probe = Model {
            params: params.clone(),
            ..reference.clone()
        };
        let (logits, _) = crate::model::forward_eval(&probe, &images)?;
        let loss = crate::metrics::cross_entropy_loss(&logits, &labels, None)?;
        Ok(loss.item())
    };
    let fd = finite_diff_grad(&mut loss_of, &model.params, 1e-5, &coords)?;

    let worst = |grads: &crate::tape::GradMap<f64>| -> (f64, String, usize) {
        let mut worst = (0.0, String::new(), 0);
        for sample in &fd {
            let g = grads.get(&sample.name).expect("coordinate exists").data()[sample.index];
            let scale = g.abs().max(sample.value.abs());
            if scale < 1e-8 {
                continue;
            }
            let rel = (g - sample.value).abs() / scale;
            if rel > worst.0 {
                worst = (rel, sample.name.clone(), sample.index);
            }
        }
        worst
    };

    Ok(GradcheckOutcome {
        adjoint_vs_direct_rel_l2,
        adjoint_vs_fd_max: worst(&adjoint),
        direct_vs_fd_max: worst(&direct),
    })
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    if parse_precision(&args.precision)? != Dtype::F64 {
        return Err(usage(
            "gradcheck requires --precision f64: finite differences drown in f32 rounding",
        ));
    }
    let outcome = run_gradcheck(args.steps, args.samples, args.seed)?;
    println!(
        "adjoint_vs_direct rel_l2 = {}",
        outcome.adjoint_vs_direct_rel_l2
    );
    println!(
        "adjoint_vs_fd max_rel = {} at {}[{}]",
        outcome.adjoint_vs_fd_max.0, outcome.adjoint_vs_fd_max.1, outcome.adjoint_vs_fd_max.2
    );
    println!(
        "direct_vs_fd max_rel = {} at {}[{}]",
        outcome.direct_vs_fd_max.0, outcome.direct_vs_fd_max.1, outcome.direct_vs_fd_max.2
    );
    let worst = outcome
        .adjoint_vs_direct_rel_l2
        .max(outcome.adjoint_vs_fd_max.0)
        .max(outcome.direct_vs_fd_max.0);
    if worst > args.tolerance {
        let (rel, name, index) = if outcome.adjoint_vs_fd_max.0 >= outcome.direct_vs_fd_max.0 {
            outcome.adjoint_vs_fd_max
        } else {
            outcome.direct_vs_fd_max
        };
        return Err(Error::Config(format!(
            "gradient check failed: worst relative error {worst} (coordinate {name}[{index}] at {rel}) exceeds tolerance {}",
            args.tolerance
        )));
    }
    println!("gradcheck ok (tolerance {})", args.tolerance);
    Ok(())
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Solver step counts to probe, comma separated.
    #[arg(long, default_value = "4,8,16,32")]
    pub steps: String,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    /// Square input size of the probe model.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let steps: Vec<usize> = args
        .steps
        .split(',')
        .map(|v| v.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| usage(format!("bad --steps list `{}`", args.steps)))?;
    if steps.is_empty() || steps.iter().any(|&s| s == 0) {
        return Err(usage("--steps needs positive step counts"));
    }

    let network = NetworkConfig {
        input_size: (args.size, args.size),
        ..NetworkConfig::desk()
    };
    let solver = SolverConfig::default();
    let model: Model<f32> = new_model(ModelKind::SegNode, network.clone(), solver.clone(), args.seed)?;
    let data_cfg = DatasetConfig {
        image_size: network.input_size,
        num_classes: network.num_classes,
        sample_count: args.batch,
        seed: args.seed,
        ..DatasetConfig::default()
    };
    let dataset = crate::data::generate_dataset_with_threads::<f32>(&data_cfg, 1)?;
    let refs: Vec<&SynthSample<f32>> = dataset.iter().collect();
    let (images, labels) = crate::data::stack_batch(&refs)?;

    println!(
        "{:>6} {:>18} {:>18} {:>12} {:>12} {:>10} {:>10}",
        "steps", "adjoint_bytes", "direct_bytes", "adjoint_nfe", "direct_nfe", "adj_sec", "dir_sec"
    );
    for &s in &steps {
        let adjoint = probe_gradient_memory(&model, &images, &labels, GradMode::Adjoint, s)?;
        let direct = probe_gradient_memory(&model, &images, &labels, GradMode::Direct, s)?;
        println!(
            "{:>6} {:>18} {:>18} {:>12} {:>12} {:>10.3} {:>10.3}",
            s,
            adjoint.peak_activation_bytes,
            direct.peak_activation_bytes,
            adjoint.nfe,
            direct.nfe,
            adjoint.wall_time,
            direct.wall_time
        );
    }

    let baseline: Model<f32> = new_model(ModelKind::Baseline, network.clone(), solver, args.seed)?;
    let seg_count = param_count(&model);
    let base_count = param_count(&baseline);
    print!("{}", format_param_report("segnode", &seg_count));
    print!("{}", format_param_report("baseline", &base_count));
    let seg_analytic = analytic_param_count(&network, ModelKind::SegNode);
    let base_analytic = analytic_param_count(&network, ModelKind::Baseline);
    println!(
        "closed-form check: segnode {} ({}), baseline {} ({})",
        seg_analytic,
        if seg_analytic == seg_count.total { "match" } else { "MISMATCH" },
        base_analytic,
        if base_analytic == base_count.total { "match" } else { "MISMATCH" },
    );
    println!(
        "parameter reduction: {:.1}%",
        100.0 * (1.0 - seg_count.total as f64 / base_count.total as f64)
    );
    Ok(())
}
