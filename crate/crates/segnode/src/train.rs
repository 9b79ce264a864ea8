//! Training, evaluation, trajectory error and memory benchmarking.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::adjoint::{adjoint_backward, direct_backward};
use crate::data::{stack_batch, SynthSample};
use crate::error::{Error, Result};
use crate::memory::{memory_probe, MemoryReport};
use crate::metrics::{argmax_classes, cross_entropy_loss, ConfusionAccumulator, Labels, MiouReport};
use crate::model::{
    branch_project, dynamics_forward, forward_eval, heads_forward, stem_forward, Model, ModelKind,
    NetworkDynamics,
};
use crate::optim::{optimizer_step, poly_lr, OptState, Optimizer};
use crate::scalar::Scalar;
use crate::solver::{integrate, integrate_trajectory, OdeState, SolveStats};
use crate::tape::{GradMap, Tape};
use crate::tensor::Tensor;

/// How gradients cross the ODE segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Augmented backward solve; activation memory independent of step count.
    Adjoint,
    /// Backpropagation through the unrolled fixed-step solve.
    Direct,
}

impl GradMode {
    pub fn name(self) -> &'static str {
        match self {
            GradMode::Adjoint => "adjoint",
            GradMode::Direct => "direct",
        }
    }

    pub fn parse(s: &str) -> Option<GradMode> {
        match s {
            "adjoint" => Some(GradMode::Adjoint),
            "direct" => Some(GradMode::Direct),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub batch_size: usize,
    pub total_steps: usize,
    pub lr_power: f64,
    pub grad_mode: GradMode,
    pub seed: u64,
}

impl TrainConfig {
    /// The continuous model's recipe: SGD, base rate 0.1, momentum 0.9, no
    /// weight decay, polynomial decay with exponent 0.9, adjoint gradients.
    pub fn segnode_desk(total_steps: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            optimizer: Optimizer::segnode_default(),
            batch_size: 2,
            total_steps,
            lr_power: 0.9,
            grad_mode: GradMode::Adjoint,
            seed,
        }
    }

    /// The baseline recipe: AdamW at 1e-4 with weight decay 0.05.
    pub fn baseline_desk(total_steps: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            optimizer: Optimizer::baseline_default(),
            batch_size: 2,
            total_steps,
            lr_power: 0.9,
            grad_mode: GradMode::Direct,
            seed,
        }
    }
}

fn state_leaf(i: usize) -> String {
    format!("__h{i}")
}

fn is_body(name: &str) -> bool {
    name.starts_with("body.")
}

/// Forward plus gradients for one batch under the chosen gradient route.
///
/// The adjoint route splits the network around the ODE segment: stem and
/// projection record on one tape, the solve runs untracked, the heads and
/// loss record on a second tape, and the two are stitched together through
/// the augmented backward solve. The direct route records everything on a
/// single tape.
pub fn model_loss_and_grads<T: Scalar>(
    model: &Model<T>,
    images: &Tensor<T>,
    labels: &Labels,
    grad_mode: GradMode,
) -> Result<(f64, GradMap<T>, SolveStats)> {
    let (h, w) = (images.shape()[2], images.shape()[3]);
    match (model.kind, grad_mode) {
        (ModelKind::SegNode, GradMode::Adjoint) => {
            let pre_tape = Tape::new();
            let pre_params = model
                .params
                .filter(|n| n.starts_with("stem.") || n.starts_with("proj."))
                .watch_all(&pre_tape)?;
            let stem = stem_forward(&model.config, &pre_params, images)?;
            let s0_tracked = branch_project(&model.config, &pre_params, &stem)?;
            let s0 = s0_tracked.detach();

            let body_params = model.params.filter(is_body);
            let config = &model.config;
            let dynamics = |t: T, s: &OdeState<T>| dynamics_forward(config, &body_params, t, s);
            let (h_t1, forward_stats) = integrate(&dynamics, &s0, &model.solver)?;

            let head_tape = Tape::new();
            let head_params = model
                .params
                .filter(|n| n.starts_with("heads."))
                .watch_all(&head_tape)?;
            let h_t1_tracked = OdeState::new(
                h_t1.parts
                    .iter()
                    .enumerate()
                    .map(|(i, p)| head_tape.watch(&state_leaf(i), p))
                    .collect::<Result<Vec<_>>>()?,
            );
            let logits = heads_forward(&model.config, &head_params, &h_t1_tracked, h, w)?;
            let loss = cross_entropy_loss(&logits, labels, None)?;
            let head_grads = head_tape.backward(&loss)?;

            let dl_dh_t1 = OdeState::new(
                (0..h_t1.parts.len())
                    .map(|i| head_grads.get(&state_leaf(i)).expect("state leaf").clone())
                    .collect(),
            );
            let (dl_ds0, body_grads, backward_stats) = adjoint_backward(
                &NetworkDynamics { config },
                &body_params,
                &h_t1,
                &dl_dh_t1,
                &model.solver,
            )?;

            let pre_outputs: Vec<&Tensor<T>> = s0_tracked.parts.iter().collect();
            let pre_cotangents: Vec<&Tensor<T>> = dl_ds0.parts.iter().collect();
            let pre_grads = pre_tape.vjp(&pre_outputs, &pre_cotangents)?;

            let mut grads = GradMap::new();
            for (name, grad) in head_grads.iter() {
                if !name.starts_with("__") {
                    grads.insert(name.clone(), grad.clone())?;
                }
            }
            grads.merge(body_grads)?;
            grads.merge(pre_grads)?;

            let stats = SolveStats {
                nfe: forward_stats.nfe + backward_stats.nfe,
                accepted_steps: forward_stats.accepted_steps + backward_stats.accepted_steps,
                rejected_steps: forward_stats.rejected_steps + backward_stats.rejected_steps,
                final_step_size: backward_stats.final_step_size,
            };
            Ok((loss.item().to_f64(), grads, stats))
        }
        (ModelKind::SegNode, GradMode::Direct) => {
            if !model.solver.method.is_fixed_step() {
                return Err(Error::Config(
                    "direct gradients need a fixed-step solver".into(),
                ));
            }
            let tape = Tape::new();
            let params = model.params.watch_all(&tape)?;
            let stem = stem_forward(&model.config, &params, images)?;
            let s0 = branch_project(&model.config, &params, &stem)?;
            let config = &model.config;
            let dynamics = |t: T, s: &OdeState<T>| dynamics_forward(config, &params, t, s);
            let (h_t1, stats) = integrate(&dynamics, &s0, &model.solver)?;
            let logits = heads_forward(&model.config, &params, &h_t1, h, w)?;
            let loss = cross_entropy_loss(&logits, labels, None)?;
            let grads = tape.backward(&loss)?;
            Ok((loss.item().to_f64(), grads, stats))
        }
        (ModelKind::Baseline, _) => {
            let tape = Tape::new();
            let params = model.params.watch_all(&tape)?;
            let stem = stem_forward(&model.config, &params, images)?;
            let s0 = branch_project(&model.config, &params, &stem)?;
            let body = crate::model::baseline_body(&model.config, &params, &s0)?;
            let logits = heads_forward(&model.config, &params, &body, h, w)?;
            let loss = cross_entropy_loss(&logits, labels, None)?;
            let grads = tape.backward(&loss)?;
            Ok((loss.item().to_f64(), grads, SolveStats::default()))
        }
    }
}

/// Gradients of the ODE segment only, exposed for the gradient-check and
/// memory-bench commands. Runs stem and projection untracked, then the
/// chosen gradient route across the solve, seeded by the loss cotangent from
/// the heads.
pub fn ode_segment_grads<T: Scalar>(
    model: &Model<T>,
    images: &Tensor<T>,
    labels: &Labels,
    grad_mode: GradMode,
) -> Result<(GradMap<T>, SolveStats)> {
    let (h, w) = (images.shape()[2], images.shape()[3]);
    let stem = stem_forward(&model.config, &model.params, images)?;
    let s0 = branch_project(&model.config, &model.params, &stem)?;
    let body_params = model.params.filter(is_body);
    let config = &model.config;

    match grad_mode {
        GradMode::Adjoint => {
            let dynamics = |t: T, s: &OdeState<T>| dynamics_forward(config, &body_params, t, s);
            let (h_t1, forward_stats) = integrate(&dynamics, &s0, &model.solver)?;
            let dl_dh_t1 = loss_cotangent(model, &h_t1, labels, h, w)?;
            let (_, grads, backward_stats) = adjoint_backward(
                &NetworkDynamics { config },
                &body_params,
                &h_t1,
                &dl_dh_t1,
                &model.solver,
            )?;
            let stats = SolveStats {
                nfe: forward_stats.nfe + backward_stats.nfe,
                ..backward_stats
            };
            Ok((grads, stats))
        }
        GradMode::Direct => {
            // One untracked solve to get the terminal cotangent, then the
            // recorded solve.
            let dynamics = |t: T, s: &OdeState<T>| dynamics_forward(config, &body_params, t, s);
            let (h_t1, _) = integrate(&dynamics, &s0, &model.solver)?;
            let dl_dh_t1 = loss_cotangent(model, &h_t1, labels, h, w)?;
            let (_, grads, stats) = direct_backward(
                &NetworkDynamics { config },
                &body_params,
                &s0,
                &dl_dh_t1,
                &model.solver,
            )?;
            Ok((grads, stats))
        }
    }
}

/// dLoss/d(terminal state), with heads and loss on a throwaway tape.
fn loss_cotangent<T: Scalar>(
    model: &Model<T>,
    h_t1: &OdeState<T>,
    labels: &Labels,
    h: usize,
    w: usize,
) -> Result<OdeState<T>> {
    let tape = Tape::new();
    let head_params = model
        .params
        .filter(|n| n.starts_with("heads."))
        .watch_all(&tape)?;
    let tracked = OdeState::new(
        h_t1.parts
            .iter()
            .enumerate()
            .map(|(i, p)| tape.watch(&state_leaf(i), p))
            .collect::<Result<Vec<_>>>()?,
    );
    let logits = heads_forward(&model.config, &head_params, &tracked, h, w)?;
    let loss = cross_entropy_loss(&logits, labels, None)?;
    let grads = tape.backward(&loss)?;
    Ok(OdeState::new(
        (0..h_t1.parts.len())
            .map(|i| grads.get(&state_leaf(i)).expect("state leaf").clone())
            .collect(),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub nfe: usize,
}

pub fn history_lines(history: &[HistoryRecord]) -> String {
    let mut out = String::new();
    for r in history {
        out.push_str(&crate::io::record_line(&[
            ("step", r.step.to_string()),
            ("loss", format!("{}", r.loss)),
            ("lr", format!("{}", r.lr)),
            ("nfe", r.nfe.to_string()),
        ]));
        out.push('\n');
    }
    out
}

#[derive(Debug)]
pub struct TrainOutcome<T: Scalar> {
    pub model: Model<T>,
    pub history: Vec<HistoryRecord>,
}

/// Seeded training loop: per step, stack the next shuffled batch, compute
/// loss and gradients, decay the learning rate polynomially and update.
/// Fully reproducible from (config, seed).
pub fn train<T: Scalar>(
    model: &Model<T>,
    dataset: &[SynthSample<T>],
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    if config.batch_size < 1 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if model.kind == ModelKind::Baseline && config.grad_mode == GradMode::Adjoint {
        return Err(Error::Config(
            "the baseline has no ODE segment; adjoint gradients do not apply".into(),
        ));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;

    let mut current = model.clone();
    let mut opt_state = OptState::new();
    let mut history = Vec::with_capacity(config.total_steps);

    for step in 0..config.total_steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&dataset[order[cursor]]);
            cursor += 1;
        }
        let (images, labels) = stack_batch(&batch)?;

        let (loss, grads, stats) =
            model_loss_and_grads(&current, &images, &labels, config.grad_mode)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(step));
        }
        let lr = poly_lr(
            config.optimizer.base_lr(),
            step as f64 / config.total_steps as f64,
            config.lr_power,
        );
        current.params = optimizer_step(&config.optimizer, &current.params, &grads, &mut opt_state, lr)?;
        history.push(HistoryRecord {
            step,
            loss,
            lr,
            nfe: stats.nfe,
        });
    }

    Ok(TrainOutcome {
        model: current,
        history,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub miou: MiouReport,
    pub samples: usize,
    pub nfe_per_sample: f64,
}

/// Argmax decoding (ties toward the lowest class) plus confusion-matrix mIoU
/// over the whole dataset. Pure: repeated calls agree bitwise.
pub fn evaluate<T: Scalar>(model: &Model<T>, dataset: &[SynthSample<T>]) -> Result<EvalReport> {
    let mut confusion = ConfusionAccumulator::new(model.config.num_classes, None);
    let mut nfe = 0usize;
    for sample in dataset {
        let (logits, stats) = forward_eval(model, &sample.image)?;
        confusion.add(&argmax_classes(&logits)?, &sample.labels)?;
        nfe += stats.nfe;
    }
    Ok(EvalReport {
        miou: confusion.report(),
        samples: dataset.len(),
        nfe_per_sample: nfe as f64 / dataset.len().max(1) as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub time: f64,
    /// 1 - mIoU over the dataset at this solve time.
    pub error: f64,
    /// Mean dynamics evaluations needed to reach this time.
    pub nfe: f64,
}

pub struct TrajectoryEval {
    pub rows: Vec<TrajectoryRow>,
    /// Decoded label maps of the first sample, one per requested time.
    pub first_sample_maps: Vec<Labels>,
}

/// Decodes the heads at intermediate solve times: the accuracy-versus-compute
/// trade of partially solving the body.
pub fn trajectory_eval<T: Scalar>(
    model: &Model<T>,
    dataset: &[SynthSample<T>],
    times: &[f64],
) -> Result<TrajectoryEval> {
    if model.kind != ModelKind::SegNode {
        return Err(Error::Config(
            "trajectory evaluation needs the continuous model".into(),
        ));
    }
    if dataset.is_empty() || times.is_empty() {
        return Err(Error::Config("trajectory evaluation needs samples and times".into()));
    }
    let mut confusions: Vec<ConfusionAccumulator> = times
        .iter()
        .map(|_| ConfusionAccumulator::new(model.config.num_classes, None))
        .collect();
    let mut nfe_totals = vec![0u64; times.len()];
    let mut first_sample_maps = Vec::new();

    let body_params = model.params.filter(is_body);
    let config = &model.config;
    let dynamics = |t: T, s: &OdeState<T>| dynamics_forward(config, &body_params, t, s);

    for (index, sample) in dataset.iter().enumerate() {
        let (h, w) = (sample.image.shape()[2], sample.image.shape()[3]);
        let stem = stem_forward(&model.config, &model.params, &sample.image)?;
        let s0 = branch_project(&model.config, &model.params, &stem)?;
        let trajectory = integrate_trajectory(&dynamics, &s0, &model.solver, times)?;
        for (ti, state) in trajectory.states.iter().enumerate() {
            let logits = heads_forward(&model.config, &model.params, state, h, w)?;
            let decoded = argmax_classes(&logits)?;
            confusions[ti].add(&decoded, &sample.labels)?;
            nfe_totals[ti] += trajectory.nfe_at[ti] as u64;
            if index == 0 {
                first_sample_maps.push(decoded);
            }
        }
    }

    let rows = times
        .iter()
        .enumerate()
        .map(|(ti, &time)| TrajectoryRow {
            time,
            error: 1.0 - confusions[ti].report().mean,
            nfe: nfe_totals[ti] as f64 / dataset.len() as f64,
        })
        .collect();
    Ok(TrajectoryEval {
        rows,
        first_sample_maps,
    })
}

/// Logits of the projection fed straight to the heads, skipping the solver:
/// the independent reference for trajectory time 0.
pub fn identity_flow_logits<T: Scalar>(model: &Model<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = (image.shape()[2], image.shape()[3]);
    let stem = stem_forward(&model.config, &model.params, image)?;
    let s0 = branch_project(&model.config, &model.params, &stem)?;
    heads_forward(&model.config, &model.params, &s0, h, w)
}

/// Probes one forward-plus-backward pass at the given solver step count,
/// reporting peak activation bytes and the evaluation count.
pub fn probe_gradient_memory<T: Scalar>(
    model: &Model<T>,
    images: &Tensor<T>,
    labels: &Labels,
    grad_mode: GradMode,
    step_count: usize,
) -> Result<MemoryReport> {
    let mut probed = model.clone();
    probed.solver.step_count = step_count;
    let param_bytes = probed.params.param_bytes();
    memory_probe(param_bytes, || {
        let (_, grads, stats) = model_loss_and_grads(&probed, images, labels, grad_mode)?;
        drop(grads);
        Ok(stats.nfe)
    })
}
