//! The segmentation network and its discrete residual baseline.
//!
//! Both models share a stem (two stride-2 convolutions down to 1/4
//! resolution), a projection stage fanning out to four branches at 1/4, 1/8,
//! 1/16 and 1/32 resolution, a stack of multi-resolution modules, and
//! per-branch heads that are fused at 1/4 resolution and upsampled to the
//! input size. They differ only in the body: the baseline applies each
//! module as a residual block (`s <- s + module(s)`), while the continuous
//! model treats the module stack as the derivative of the state and hands it
//! to an ODE solver.
//!
//! A module is, per branch, a chain of pre-activation residual units
//! (norm-relu-conv twice plus skip), followed by all-pairs cross-resolution
//! fusion (stride-2 conv chains downward, 1x1 conv + bilinear upward,
//! identity on the diagonal) and a per-branch 1x1 output convolution. The
//! output convolutions and every unit's second convolution start at zero, so
//! a freshly initialized module maps everything to zero: the ODE starts as
//! the identity flow and the baseline as the identity body.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io;
use crate::ops::{bilinear_resize, concat_channels, conv2d, conv_out_size, group_norm, init, ConvSpec, InitKind};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::solver::{integrate, state_axpy, OdeState, SolveStats, SolverConfig};
use crate::tape::{add, relu};
use crate::tensor::Tensor;

pub const BRANCHES: usize = 4;

/// How the dynamics treat integration time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeMode {
    /// t is passed to the module but unused.
    Autonomous,
    /// t is broadcast as an extra input channel of each branch chain.
    ConcatTime,
}

impl TimeMode {
    pub fn name(self) -> &'static str {
        match self {
            TimeMode::Autonomous => "autonomous",
            TimeMode::ConcatTime => "concat-time",
        }
    }

    pub fn parse(s: &str) -> Option<TimeMode> {
        match s {
            "autonomous" => Some(TimeMode::Autonomous),
            "concat-time" => Some(TimeMode::ConcatTime),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub branch_channels: [usize; BRANCHES],
    pub num_classes: usize,
    pub modules_in_dynamics: usize,
    pub baseline_repeats: usize,
    pub blocks_per_branch: usize,
    pub input_size: (usize, usize),
    /// Group-normalization groups; must divide every channel count.
    pub groups: usize,
    pub norm_eps: f64,
    /// Cross-resolution fusion; disabled only in compositional tests.
    pub fusion: bool,
    pub time_mode: TimeMode,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig::desk()
    }
}

impl NetworkConfig {
    /// Desk-scale defaults: the published channel ladder divided by six.
    pub fn desk() -> NetworkConfig {
        NetworkConfig {
            branch_channels: [8, 16, 32, 64],
            num_classes: 4,
            modules_in_dynamics: 2,
            baseline_repeats: 6,
            blocks_per_branch: 2,
            input_size: (64, 64),
            groups: 8,
            norm_eps: 1e-5,
            fusion: true,
            time_mode: TimeMode::Autonomous,
        }
    }

    /// Full-width configuration matching the published channel counts.
    pub fn paper_scale() -> NetworkConfig {
        NetworkConfig {
            branch_channels: [48, 96, 192, 384],
            num_classes: 19,
            input_size: (512, 512),
            ..NetworkConfig::desk()
        }
    }

    /// A deliberately tiny model (a few thousand parameters) for f64
    /// gradient checks.
    pub fn tiny() -> NetworkConfig {
        NetworkConfig {
            branch_channels: [2, 3, 4, 5],
            num_classes: 2,
            modules_in_dynamics: 1,
            baseline_repeats: 1,
            blocks_per_branch: 1,
            input_size: (8, 8),
            groups: 1,
            ..NetworkConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 1 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        if self.modules_in_dynamics < 1 || self.baseline_repeats < 1 || self.blocks_per_branch < 1
        {
            return Err(Error::Config(
                "module, repeat and block counts must be at least 1".into(),
            ));
        }
        if self.groups < 1 {
            return Err(Error::Config("groups must be at least 1".into()));
        }
        for &c in &self.branch_channels {
            if c < 1 || c % self.groups != 0 {
                return Err(Error::Config(format!(
                    "branch channels {:?} must be positive and divisible by {} groups",
                    self.branch_channels, self.groups
                )));
            }
        }
        let (h, w) = self.input_size;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be divisible by 4 for the stem"
            )));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Spatial size of branch `i` for an input of (h, w): the stem halves
    /// twice, then each further branch halves (rounding up) once more.
    pub fn branch_spatial(&self, i: usize) -> (usize, usize) {
        let (mut h, mut w) = self.input_size;
        for _ in 0..2 + i {
            h = conv_out_size(h, 3, 2, 1);
            w = conv_out_size(w, 3, 2, 1);
        }
        (h, w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    SegNode,
    Baseline,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::SegNode => "segnode",
            ModelKind::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Option<ModelKind> {
        match s {
            "segnode" => Some(ModelKind::SegNode),
            "baseline" => Some(ModelKind::Baseline),
            _ => None,
        }
    }
}

/// A model: its architecture, solver settings (used by the continuous body)
/// and parameters.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub kind: ModelKind,
    pub config: NetworkConfig,
    pub solver: SolverConfig,
    pub params: ParamStore<T>,
}

pub fn body_module_count(config: &NetworkConfig, kind: ModelKind) -> usize {
    match kind {
        ModelKind::SegNode => config.modules_in_dynamics,
        ModelKind::Baseline => config.baseline_repeats,
    }
}

// ---------------------------------------------------------------------------
// Parameter schema
// ---------------------------------------------------------------------------

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: InitKind,
}

fn conv_spec(specs: &mut Vec<ParamSpec>, prefix: &str, c_in: usize, c_out: usize, k: usize, init: InitKind) {
    specs.push(ParamSpec {
        name: format!("{prefix}.w"),
        shape: vec![c_out, c_in, k, k],
        init,
    });
    specs.push(ParamSpec {
        name: format!("{prefix}.b"),
        shape: vec![c_out],
        init: InitKind::Zeros,
    });
}

fn norm_spec(specs: &mut Vec<ParamSpec>, prefix: &str, c: usize) {
    // Gamma starts at one, encoded as a dedicated pass below.
    specs.push(ParamSpec {
        name: format!("{prefix}.g"),
        shape: vec![c],
        init: InitKind::Zeros,
    });
    specs.push(ParamSpec {
        name: format!("{prefix}.b"),
        shape: vec![c],
        init: InitKind::Zeros,
    });
}

fn module_specs(specs: &mut Vec<ParamSpec>, config: &NetworkConfig, prefix: &str) {
    let ch = &config.branch_channels;
    let t_extra = match config.time_mode {
        TimeMode::Autonomous => 0,
        TimeMode::ConcatTime => 1,
    };
    for (i, &c) in ch.iter().enumerate() {
        for u in 0..config.blocks_per_branch {
            let unit = format!("{prefix}.b{i}.u{u}");
            let c_in = if u == 0 { c + t_extra } else { c };
            norm_spec(specs, &format!("{unit}.norm1"), c);
            conv_spec(specs, &format!("{unit}.conv1"), c_in, c, 3, InitKind::HeNormal);
            norm_spec(specs, &format!("{unit}.norm2"), c);
            conv_spec(specs, &format!("{unit}.conv2"), c, c, 3, InitKind::Zeros);
        }
    }
    if config.fusion {
        for j in 0..BRANCHES {
            for i in 0..BRANCHES {
                if i < j {
                    for s in 0..j - i {
                        let stage = format!("{prefix}.fuse.{i}to{j}.d{s}");
                        norm_spec(specs, &format!("{stage}.norm"), ch[i + s]);
                        conv_spec(specs, &format!("{stage}.conv"), ch[i + s], ch[i + s + 1], 3, InitKind::HeNormal);
                    }
                } else if i > j {
                    conv_spec(specs, &format!("{prefix}.fuse.{i}to{j}.conv"), ch[i], ch[j], 1, InitKind::HeNormal);
                }
            }
            conv_spec(specs, &format!("{prefix}.out.b{j}"), ch[j], ch[j], 1, InitKind::Zeros);
        }
    }
}

fn param_specs(config: &NetworkConfig, kind: ModelKind) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let c0 = config.branch_channels[0];

    conv_spec(&mut specs, "stem.conv1", 3, c0, 3, InitKind::HeNormal);
    norm_spec(&mut specs, "stem.norm1", c0);
    conv_spec(&mut specs, "stem.conv2", c0, c0, 3, InitKind::HeNormal);
    norm_spec(&mut specs, "stem.norm2", c0);

    for (i, &c) in config.branch_channels.iter().enumerate() {
        for k in 0..i {
            let stage = format!("proj.b{i}.down{k}");
            conv_spec(&mut specs, &format!("{stage}.conv"), c0, c0, 3, InitKind::HeNormal);
            norm_spec(&mut specs, &format!("{stage}.norm"), c0);
        }
        conv_spec(&mut specs, &format!("proj.b{i}.out"), c0, c, 1, InitKind::HeNormal);
    }

    for m in 0..body_module_count(config, kind) {
        module_specs(&mut specs, config, &format!("body.{m}"));
    }

    for (i, &c) in config.branch_channels.iter().enumerate() {
        conv_spec(&mut specs, &format!("heads.b{i}"), c, config.num_classes, 1, InitKind::HeNormal);
    }
    specs
}

/// Builds a freshly initialized parameter store. He-normal convolutions, zero
/// biases, unit norm scales; the final convolution of every residual unit and
/// every fusion output convolution start at zero.
pub fn init_params<T: Scalar>(
    config: &NetworkConfig,
    kind: ModelKind,
    seed: u64,
) -> Result<ParamStore<T>> {
    config.validate()?;
    let mut store = ParamStore::new();
    for (index, spec) in param_specs(config, kind).iter().enumerate() {
        let derived = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let tensor = if spec.name.ends_with(".g") {
            Tensor::full(&spec.shape, T::one())
        } else {
            init(spec.init, &spec.shape, derived)
        };
        store.insert(spec.name.clone(), tensor)?;
    }
    Ok(store)
}

pub fn new_model<T: Scalar>(
    kind: ModelKind,
    config: NetworkConfig,
    solver: SolverConfig,
    seed: u64,
) -> Result<Model<T>> {
    solver.validate()?;
    let params = init_params(&config, kind, seed)?;
    Ok(Model {
        kind,
        config,
        solver,
        params,
    })
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

fn conv_layer<T: Scalar>(
    params: &ParamStore<T>,
    prefix: &str,
    x: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    conv2d(
        x,
        params.get(&format!("{prefix}.w"))?,
        Some(params.get(&format!("{prefix}.b"))?),
        ConvSpec { stride, padding },
    )
}

fn norm_layer<T: Scalar>(
    config: &NetworkConfig,
    params: &ParamStore<T>,
    prefix: &str,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    group_norm(
        x,
        params.get(&format!("{prefix}.g"))?,
        params.get(&format!("{prefix}.b"))?,
        config.groups,
        T::from_f64(config.norm_eps),
    )
}

/// Two stride-2 convolutions down to 1/4 resolution.
pub fn stem_forward<T: Scalar>(
    config: &NetworkConfig,
    params: &ParamStore<T>,
    image: &Tensor<T>,
) -> Result<Tensor<T>> {
    if image.rank() != 4 || image.shape()[1] != 3 {
        return Err(Error::Config(format!(
            "stem expects an (N, 3, H, W) image, got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[2], image.shape()[3]);
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::Config(format!(
            "stem input {h}x{w} is not divisible by 4"
        )));
    }
    let x = conv_layer(params, "stem.conv1", image, 2, 1)?;
    let x = relu(&norm_layer(config, params, "stem.norm1", &x)?)?;
    let x = conv_layer(params, "stem.conv2", &x, 2, 1)?;
    relu(&norm_layer(config, params, "stem.norm2", &x)?)
}

/// Fans the stem output out to the four branch resolutions and widths.
/// Branch 0 is a single 1x1 convolution; branch i first applies i stride-2
/// conv-norm-relu stages.
pub fn branch_project<T: Scalar>(
    config: &NetworkConfig,
    params: &ParamStore<T>,
    stem_out: &Tensor<T>,
) -> Result<OdeState<T>> {
    let mut parts = Vec::with_capacity(BRANCHES);
    for i in 0..BRANCHES {
        let mut x = stem_out.clone();
        for k in 0..i {
            let stage = format!("proj.b{i}.down{k}");
            x = conv_layer(params, &format!("{stage}.conv"), &x, 2, 1)?;
            x = relu(&norm_layer(config, params, &format!("{stage}.norm"), &x)?)?;
        }
        parts.push(conv_layer(params, &format!("proj.b{i}.out"), &x, 1, 0)?);
    }
    Ok(OdeState::new(parts))
}

fn residual_unit<T: Scalar>(
    config: &NetworkConfig,
    params: &ParamStore<T>,
    prefix: &str,
    x: &Tensor<T>,
    time_plane: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let h = relu(&norm_layer(config, params, &format!("{prefix}.norm1"), x)?)?;
    let h = match time_plane {
        Some(t) => {
            let with_time = concat_channels(&h, t)?;
            conv_layer(params, &format!("{prefix}.conv1"), &with_time, 1, 1)?
        }
        None => conv_layer(params, &format!("{prefix}.conv1"), &h, 1, 1)?,
    };
    let h = relu(&norm_layer(config, params, &format!("{prefix}.norm2"), &h)?)?;
    let h = conv_layer(params, &format!("{prefix}.conv2"), &h, 1, 1)?;
    add(x, &h)
}

/// One multi-resolution module: per-branch residual chains, then (unless
/// disabled) all-pairs fusion and a zero-initialized output convolution per
/// branch. With fusion on, zero parameters map any state to exactly zero.
pub fn module_forward<T: Scalar>(
    config: &NetworkConfig,
    params: &ParamStore<T>,
    prefix: &str,
    t: T,
    s: &OdeState<T>,
) -> Result<OdeState<T>> {
    if s.parts.len() != BRANCHES {
        return Err(Error::Config(format!(
            "module state must have {BRANCHES} branches, got {}",
            s.parts.len()
        )));
    }
    let mut chained = Vec::with_capacity(BRANCHES);
    for (i, part) in s.parts.iter().enumerate() {
        let mut x = part.clone();
        for u in 0..config.blocks_per_branch {
            let time_plane = match (config.time_mode, u) {
                (TimeMode::ConcatTime, 0) => Some(Tensor::full(
                    &[x.shape()[0], 1, x.shape()[2], x.shape()[3]],
                    t,
                )),
                _ => None,
            };
            x = residual_unit(
                config,
                params,
                &format!("{prefix}.b{i}.u{u}"),
                &x,
                time_plane.as_ref(),
            )?;
        }
        chained.push(x);
    }
    if !config.fusion {
        return Ok(OdeState::new(chained));
    }

    let mut fused = Vec::with_capacity(BRANCHES);
    for j in 0..BRANCHES {
        let mut acc = chained[j].clone();
        for (i, source) in chained.iter().enumerate() {
            if i == j {
                continue;
            }
            let contribution = if i < j {
                let mut x = source.clone();
                for step in 0..j - i {
                    let stage = format!("{prefix}.fuse.{i}to{j}.d{step}");
                    x = relu(&norm_layer(config, params, &format!("{stage}.norm"), &x)?)?;
                    x = conv_layer(params, &format!("{stage}.conv"), &x, 2, 1)?;
                }
                x
            } else {
                let x = conv_layer(params, &format!("{prefix}.fuse.{i}to{j}.conv"), source, 1, 0)?;
                let target = &chained[j];
                bilinear_resize(&x, target.shape()[2], target.shape()[3])?
            };
            acc = add(&acc, &contribution)?;
        }
        fused.push(conv_layer(params, &format!("{prefix}.out.b{j}"), &acc, 1, 0)?);
    }
    Ok(OdeState::new(fused))
}

/// The dynamics function of the continuous body: the configured number of
/// modules applied in sequence. Output shapes always equal input shapes;
/// this is what makes the module stack usable as an ODE derivative.
pub fn dynamics_forward<T: Scalar>(
    config: &NetworkConfig,
    params: &ParamStore<T>,
    t: T,
    s: &OdeState<T>,
) -> Result<OdeState<T>> {
    let mut state = s.clone();
    for m in 0..config.modules_in_dynamics {
        state = module_forward(config, params, &format!("body.{m}"), t, &state)?;
    }
    for (a, b) in state.parts.iter().zip(&s.parts) {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "dynamics state contract",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
    }
    Ok(state)
}

/// Adapter tying a network configuration to the [`TapedDynamics`] interface
/// used by the gradient routes.
///
/// [`TapedDynamics`]: crate::adjoint::TapedDynamics
pub struct NetworkDynamics<'a> {
    pub config: &'a NetworkConfig,
}

impl<'a, T: Scalar> crate::adjoint::TapedDynamics<T> for NetworkDynamics<'a> {
    fn eval(&self, t: T, s: &OdeState<T>, theta: &ParamStore<T>) -> Result<OdeState<T>> {
        dynamics_forward(self.config, theta, t, s)
    }
}

/// Per-branch 1x1 convolutions to class logits, fused at 1/4 resolution and
/// upsampled to the input size.
pub fn heads_forward<T: Scalar>(
    config: &NetworkConfig,
    params: &ParamStore<T>,
    s: &OdeState<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let (q_h, q_w) = (s.parts[0].shape()[2], s.parts[0].shape()[3]);
    let mut acc: Option<Tensor<T>> = None;
    for (i, part) in s.parts.iter().enumerate() {
        let logits = conv_layer(params, &format!("heads.b{i}"), part, 1, 0)?;
        let resized = bilinear_resize(&logits, q_h, q_w)?;
        acc = Some(match acc {
            None => resized,
            Some(prev) => add(&prev, &resized)?,
        });
    }
    let fused = acc.expect("at least one branch");
    let _ = config;
    bilinear_resize(&fused, out_h, out_w)
}

/// Runs the baseline body: each module is a residual block at the module
/// level, with independent parameters per repeat.
pub fn baseline_body<T: Scalar>(
    config: &NetworkConfig,
    params: &ParamStore<T>,
    s0: &OdeState<T>,
) -> Result<OdeState<T>> {
    let mut s = s0.clone();
    for m in 0..config.baseline_repeats {
        let module = module_forward(config, params, &format!("body.{m}"), T::zero(), &s)?;
        s = state_axpy(T::one(), &module, &s)?;
    }
    Ok(s)
}

/// Inference forward pass for either model kind. Gradient-mode forwards are
/// composed in the training module, which splits the network around the ODE
/// segment.
pub fn forward_eval<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<T>,
) -> Result<(Tensor<T>, SolveStats)> {
    let (h, w) = (image.shape()[2], image.shape()[3]);
    let stem = stem_forward(&model.config, &model.params, image)?;
    let s0 = branch_project(&model.config, &model.params, &stem)?;
    let (s_final, stats) = match model.kind {
        ModelKind::SegNode => {
            let config = &model.config;
            let params = &model.params;
            let dynamics = |t: T, s: &OdeState<T>| dynamics_forward(config, params, t, s);
            integrate(&dynamics, &s0, &model.solver)?
        }
        ModelKind::Baseline => (
            baseline_body(&model.config, &model.params, &s0)?,
            SolveStats::default(),
        ),
    };
    let logits = heads_forward(&model.config, &model.params, &s_final, h, w)?;
    Ok((logits, stats))
}

// ---------------------------------------------------------------------------
// Parameter counting
// ---------------------------------------------------------------------------

/// Exact parameter counts, grouped by component.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCountReport {
    pub per_component: Vec<(String, usize)>,
    pub total: usize,
}

/// Counts the tensors actually present in the store.
pub fn param_count<T: Scalar>(model: &Model<T>) -> ParamCountReport {
    let mut per: Vec<(String, usize)> = Vec::new();
    let mut total = 0;
    for (name, tensor) in model.params.iter() {
        let component = name.split('.').next().unwrap_or("other").to_string();
        let n = tensor.numel();
        total += n;
        match per.iter_mut().find(|(c, _)| *c == component) {
            Some((_, count)) => *count += n,
            None => per.push((component, n)),
        }
    }
    ParamCountReport {
        per_component: per,
        total,
    }
}

/// Closed-form layer-sum count: convolutions contribute
/// `c_out * c_in * k^2 + c_out`, normalizations `2c`. Written out from the
/// architecture definition, independently of the parameter store.
pub fn analytic_param_count(config: &NetworkConfig, kind: ModelKind) -> usize {
    let conv = |ci: usize, co: usize, k: usize| co * ci * k * k + co;
    let norm = |c: usize| 2 * c;
    let ch = &config.branch_channels;
    let c0 = ch[0];

    let stem = conv(3, c0, 3) + norm(c0) + conv(c0, c0, 3) + norm(c0);

    let mut proj = 0;
    for (i, &c) in ch.iter().enumerate() {
        proj += i * (conv(c0, c0, 3) + norm(c0));
        proj += conv(c0, c, 1);
    }

    let t_extra = match config.time_mode {
        TimeMode::Autonomous => 0,
        TimeMode::ConcatTime => 1,
    };
    let mut module = 0;
    for &c in ch {
        for u in 0..config.blocks_per_branch {
            let c_in = if u == 0 { c + t_extra } else { c };
            module += norm(c) + conv(c_in, c, 3) + norm(c) + conv(c, c, 3);
        }
    }
    if config.fusion {
        for j in 0..BRANCHES {
            for i in 0..BRANCHES {
                if i < j {
                    for s in 0..j - i {
                        module += norm(ch[i + s]) + conv(ch[i + s], ch[i + s + 1], 3);
                    }
                } else if i > j {
                    module += conv(ch[i], ch[j], 1);
                }
            }
            module += conv(ch[j], ch[j], 1);
        }
    }

    let heads: usize = ch.iter().map(|&c| conv(c, config.num_classes, 1)).sum();

    stem + proj + body_module_count(config, kind) * module + heads
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_FORMAT: &str = "segnode-checkpoint-v1";

fn config_pairs(model_kind: ModelKind, config: &NetworkConfig, solver: &SolverConfig, dtype: &str) -> Vec<(String, String)> {
    let mut pairs = vec![
        ("format".to_string(), CHECKPOINT_FORMAT.to_string()),
        ("kind".to_string(), model_kind.name().to_string()),
        ("dtype".to_string(), dtype.to_string()),
        (
            "branch_channels".to_string(),
            config
                .branch_channels
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
        ),
        ("num_classes".to_string(), config.num_classes.to_string()),
        (
            "modules_in_dynamics".to_string(),
            config.modules_in_dynamics.to_string(),
        ),
        (
            "baseline_repeats".to_string(),
            config.baseline_repeats.to_string(),
        ),
        (
            "blocks_per_branch".to_string(),
            config.blocks_per_branch.to_string(),
        ),
        (
            "input_size".to_string(),
            format!("{}x{}", config.input_size.0, config.input_size.1),
        ),
        ("groups".to_string(), config.groups.to_string()),
        ("norm_eps".to_string(), format!("{}", config.norm_eps)),
        ("fusion".to_string(), config.fusion.to_string()),
        ("time_mode".to_string(), config.time_mode.name().to_string()),
        ("solver.method".to_string(), solver.method.name().to_string()),
        ("solver.t0".to_string(), format!("{}", solver.t0)),
        ("solver.t1".to_string(), format!("{}", solver.t1)),
        ("solver.step_count".to_string(), solver.step_count.to_string()),
        ("solver.rtol".to_string(), format!("{}", solver.rtol)),
        ("solver.atol".to_string(), format!("{}", solver.atol)),
        ("solver.max_nfe".to_string(), solver.max_nfe.to_string()),
    ];
    pairs.shrink_to_fit();
    pairs
}

/// Writes the checkpoint directory: a text manifest (config fields plus the
/// name-to-file map) and one tensor file per parameter.
pub fn save_model<T: Scalar>(model: &Model<T>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let dtype = match T::DTYPE {
        crate::scalar::Dtype::F32 => "f32",
        crate::scalar::Dtype::F64 => "f64",
    };
    let mut pairs = config_pairs(model.kind, &model.config, &model.solver, dtype);
    for (index, (name, tensor)) in model.params.iter().enumerate() {
        let file = format!("p{index:05}.sgnt");
        io::write_tensor(&dir.join(&file), tensor)?;
        pairs.push((format!("param.{name}"), file));
    }
    io::write_kv_file(&dir.join("manifest.txt"), &pairs)
}

fn parse_usize(pairs: &[(String, String)], key: &str) -> Result<usize> {
    io::kv_lookup(pairs, key)?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("bad integer for `{key}`")))
}

fn parse_f64(pairs: &[(String, String)], key: &str) -> Result<f64> {
    io::kv_lookup(pairs, key)?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("bad float for `{key}`")))
}

/// Reads a checkpoint directory back into a model, rejecting mismatched
/// shapes and missing or extra parameters.
pub fn load_model<T: Scalar>(dir: &Path) -> Result<Model<T>> {
    let manifest = dir.join("manifest.txt");
    let pairs = io::read_kv_file(&manifest)?;
    if io::kv_lookup(&pairs, "format")? != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "{} is not a {CHECKPOINT_FORMAT} manifest",
            manifest.display()
        )));
    }
    let kind = ModelKind::parse(io::kv_lookup(&pairs, "kind")?)
        .ok_or_else(|| Error::Checkpoint("unknown model kind".into()))?;
    let channels: Vec<usize> = io::kv_lookup(&pairs, "branch_channels")?
        .split(',')
        .map(|v| v.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Checkpoint("bad branch_channels".into()))?;
    if channels.len() != BRANCHES {
        return Err(Error::Checkpoint(format!(
            "expected {BRANCHES} branch channel counts, got {}",
            channels.len()
        )));
    }
    let input_size = {
        let raw = io::kv_lookup(&pairs, "input_size")?;
        let (h, w) = raw
            .split_once('x')
            .ok_or_else(|| Error::Checkpoint("bad input_size".into()))?;
        (
            h.parse().map_err(|_| Error::Checkpoint("bad input_size".into()))?,
            w.parse().map_err(|_| Error::Checkpoint("bad input_size".into()))?,
        )
    };
    let config = NetworkConfig {
        branch_channels: [channels[0], channels[1], channels[2], channels[3]],
        num_classes: parse_usize(&pairs, "num_classes")?,
        modules_in_dynamics: parse_usize(&pairs, "modules_in_dynamics")?,
        baseline_repeats: parse_usize(&pairs, "baseline_repeats")?,
        blocks_per_branch: parse_usize(&pairs, "blocks_per_branch")?,
        input_size,
        groups: parse_usize(&pairs, "groups")?,
        norm_eps: parse_f64(&pairs, "norm_eps")?,
        fusion: io::kv_lookup(&pairs, "fusion")? == "true",
        time_mode: TimeMode::parse(io::kv_lookup(&pairs, "time_mode")?)
            .ok_or_else(|| Error::Checkpoint("unknown time_mode".into()))?,
    };
    let solver = SolverConfig {
        method: crate::solver::Method::parse(io::kv_lookup(&pairs, "solver.method")?)
            .ok_or_else(|| Error::Checkpoint("unknown solver method".into()))?,
        t0: parse_f64(&pairs, "solver.t0")?,
        t1: parse_f64(&pairs, "solver.t1")?,
        step_count: parse_usize(&pairs, "solver.step_count")?,
        rtol: parse_f64(&pairs, "solver.rtol")?,
        atol: parse_f64(&pairs, "solver.atol")?,
        max_nfe: parse_usize(&pairs, "solver.max_nfe")?,
    };
    config.validate()?;
    solver.validate()?;

    let expected_dtype = match T::DTYPE {
        crate::scalar::Dtype::F32 => "f32",
        crate::scalar::Dtype::F64 => "f64",
    };
    if io::kv_lookup(&pairs, "dtype")? != expected_dtype {
        return Err(Error::Checkpoint(format!(
            "checkpoint dtype {} does not match requested {expected_dtype}",
            io::kv_lookup(&pairs, "dtype")?
        )));
    }

    let mut store = ParamStore::new();
    for spec in param_specs(&config, kind) {
        let key = format!("param.{}", spec.name);
        let file = io::kv_lookup(&pairs, &key)
            .map_err(|_| Error::Checkpoint(format!("manifest lacks parameter `{}`", spec.name)))?;
        let tensor = io::read_tensor::<T>(&dir.join(file))?;
        if tensor.shape() != spec.shape {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` has shape {:?}, expected {:?}",
                spec.name,
                tensor.shape(),
                spec.shape
            )));
        }
        store.insert(spec.name, tensor)?;
    }
    let listed = pairs.iter().filter(|(k, _)| k.starts_with("param.")).count();
    if listed != store.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {listed} parameters, architecture has {}",
            store.len()
        )));
    }

    Ok(Model {
        kind,
        config,
        solver,
        params: store,
    })
}

/// Human-readable component/total summary used by the bench command.
pub fn format_param_report(name: &str, report: &ParamCountReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{name} parameters:");
    for (component, count) in &report.per_component {
        let _ = writeln!(out, "  {component:<6} {count:>10}");
    }
    let _ = writeln!(out, "  total  {:>10}", report.total);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::Method;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn random_image(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn random_state(config: &NetworkConfig, n: usize, seed: u64) -> OdeState<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let parts = (0..BRANCHES)
            .map(|i| {
                let (h, w) = config.branch_spatial(i);
                let c = config.branch_channels[i];
                let numel = n * c * h * w;
                Tensor::from_vec(
                    &[n, c, h, w],
                    (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
            })
            .collect();
        OdeState::new(parts)
    }

    fn max_abs_diff(a: &OdeState<f64>, b: &OdeState<f64>) -> f64 {
        a.parts
            .iter()
            .zip(&b.parts)
            .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(u, v)| (u - v).abs()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn stem_halves_twice() {
        let config = NetworkConfig::desk();
        let params = init_params::<f64>(&config, ModelKind::SegNode, 1).unwrap();
        for hw in [32usize, 64, 96] {
            let image = random_image(&[1, 3, hw, hw], hw as u64);
            let out = stem_forward(&config, &params, &image).unwrap();
            assert_eq!(out.shape(), &[1, config.branch_channels[0], hw / 4, hw / 4]);
        }
        let bad = random_image(&[1, 3, 30, 30], 5);
        assert!(stem_forward(&config, &params, &bad).is_err());
    }

    #[test]
    fn stem_of_zero_image_is_zero() {
        let config = NetworkConfig::desk();
        let params = init_params::<f64>(&config, ModelKind::SegNode, 2).unwrap();
        let out = stem_forward(&config, &params, &Tensor::zeros(&[1, 3, 32, 32])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn branch_projection_shapes() {
        let config = NetworkConfig::desk();
        let params = init_params::<f64>(&config, ModelKind::SegNode, 3).unwrap();
        let stem = random_image(&[2, config.branch_channels[0], 16, 16], 7);
        let state = branch_project(&config, &params, &stem).unwrap();
        let spatial: Vec<usize> = state.parts.iter().map(|p| p.shape()[2]).collect();
        assert_eq!(spatial, vec![16, 8, 4, 2]);
        for (i, part) in state.parts.iter().enumerate() {
            assert_eq!(part.shape()[1], config.branch_channels[i]);
        }
    }

    #[test]
    fn module_with_all_zero_parameters_maps_to_zero() {
        let config = NetworkConfig::tiny();
        let params = init_params::<f64>(&config, ModelKind::SegNode, 4).unwrap();
        let zeroed = params.unflatten(&vec![0.0; params.total_params()]).unwrap();
        let s = random_state(&config, 2, 11);
        let out = dynamics_forward(&config, &zeroed, 0.0, &s).unwrap();
        for part in &out.parts {
            assert!(part.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn freshly_initialized_dynamics_are_small() {
        // Zero-initialized unit-final and fusion-output convolutions make the
        // initial derivative vanish, so the initial ODE
        // is the identity flow.
        let config = NetworkConfig::desk();
        let params = init_params::<f64>(&config, ModelKind::SegNode, 5).unwrap();
        let s = random_state(&config, 1, 12);
        let out = dynamics_forward(&config, &params, 0.0, &s).unwrap();
        assert!(out.norm_inf() <= 1e-12);
    }

    #[test]
    fn dynamics_preserve_state_shapes() {
        for (config, n) in [
            (NetworkConfig::tiny(), 2usize),
            (NetworkConfig::desk(), 1),
            (
                NetworkConfig {
                    input_size: (32, 32),
                    blocks_per_branch: 1,
                    ..NetworkConfig::desk()
                },
                3,
            ),
        ] {
            let params = init_params::<f64>(&config, ModelKind::SegNode, 6).unwrap();
            let s = random_state(&config, n, 13);
            let out = dynamics_forward(&config, &params, 0.37, &s).unwrap();
            for (a, b) in out.parts.iter().zip(&s.parts) {
                assert_eq!(a.shape(), b.shape());
            }
        }
    }

    #[test]
    fn fusion_disabled_module_is_a_plain_residual_chain() {
        let config = NetworkConfig {
            fusion: false,
            blocks_per_branch: 2,
            ..NetworkConfig::tiny()
        };
        let params = init_params::<f64>(&config, ModelKind::SegNode, 7).unwrap();
        let s = random_state(&config, 1, 14);
        let out = module_forward(&config, &params, "body.0", 0.0, &s).unwrap();

        // Hand-built composition of the same residual units on branch 0.
        let mut x = s.parts[0].clone();
        for u in 0..config.blocks_per_branch {
            x = residual_unit(&config, &params, &format!("body.0.b0.u{u}"), &x, None).unwrap();
        }
        for (a, b) in out.parts[0].data().iter().zip(x.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn heads_with_zero_weights_produce_the_bias_sum() {
        let config = NetworkConfig {
            num_classes: 1,
            ..NetworkConfig::tiny()
        };
        let mut params = init_params::<f64>(&config, ModelKind::SegNode, 8).unwrap();
        let mut bias_sum = 0.0;
        for i in 0..BRANCHES {
            let w = params.get(&format!("heads.b{i}.w")).unwrap();
            params
                .set(&format!("heads.b{i}.w"), Tensor::zeros(w.shape()))
                .unwrap();
            let b = 0.25 * (i as f64 + 1.0);
            bias_sum += b;
            params
                .set(&format!("heads.b{i}.b"), Tensor::full(&[1], b))
                .unwrap();
        }
        let s = random_state(&config, 1, 15);
        let logits = heads_forward(&config, &params, &s, 8, 8).unwrap();
        assert_eq!(logits.shape(), &[1, 1, 8, 8]);
        for &v in logits.data() {
            assert!((v - bias_sum).abs() <= 1e-12);
        }
    }

    #[test]
    fn heads_are_symmetric_under_branch_permutation() {
        // Branches 1 and 2 collapse to the same shape on an 8x8 input when
        // all widths are equal, so swapping their features together with
        // their head parameters must not change the output.
        let config = NetworkConfig {
            branch_channels: [4, 4, 4, 4],
            groups: 4,
            ..NetworkConfig::tiny()
        };
        let params = init_params::<f64>(&config, ModelKind::SegNode, 9).unwrap();
        let s = random_state(&config, 1, 16);
        assert_eq!(s.parts[1].shape(), s.parts[2].shape());
        let base = heads_forward(&config, &params, &s, 8, 8).unwrap();

        let mut swapped_params = params.clone();
        for field in ["w", "b"] {
            let b1 = params.get(&format!("heads.b1.{field}")).unwrap().clone();
            let b2 = params.get(&format!("heads.b2.{field}")).unwrap().clone();
            swapped_params.set(&format!("heads.b1.{field}"), b2).unwrap();
            swapped_params.set(&format!("heads.b2.{field}"), b1).unwrap();
        }
        let mut parts = s.parts.clone();
        parts.swap(1, 2);
        let swapped = heads_forward(&config, &swapped_params, &OdeState::new(parts), 8, 8).unwrap();
        for (a, b) in base.data().iter().zip(swapped.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn one_step_euler_equals_the_residual_update() {
        let config = NetworkConfig {
            modules_in_dynamics: 1,
            ..NetworkConfig::tiny()
        };
        let solver = SolverConfig {
            method: Method::Euler,
            step_count: 1,
            ..SolverConfig::default()
        };
        let model = new_model::<f64>(ModelKind::SegNode, config.clone(), solver, 21).unwrap();
        // Give the zero-initialized convolutions real values so the test is
        // not trivially comparing zeros.
        let mut params = model.params.clone();
        for name in params.names().cloned().collect::<Vec<_>>() {
            if name.contains("conv2.w") || name.contains("out.b") && name.ends_with(".w") {
                let t = params.get(&name).unwrap();
                params
                    .set(&name, init(InitKind::HeNormal, t.shape(), 777))
                    .unwrap();
            }
        }
        let model = Model { params, ..model };

        let image = random_image(&[1, 3, 8, 8], 22);
        let (logits, _) = forward_eval(&model, &image).unwrap();

        let stem = stem_forward(&model.config, &model.params, &image).unwrap();
        let s0 = branch_project(&model.config, &model.params, &stem).unwrap();
        let f0 = dynamics_forward(&model.config, &model.params, 0.0, &s0).unwrap();
        let s1 = state_axpy(1.0, &f0, &s0).unwrap();
        let manual = heads_forward(&model.config, &model.params, &s1, 8, 8).unwrap();

        for (a, b) in logits.data().iter().zip(manual.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn zero_dynamics_gives_identity_flow() {
        // Fresh initialization already has f = 0, so the ODE output equals
        // the projection output straight through the heads.
        let config = NetworkConfig::tiny();
        let model = new_model::<f64>(
            ModelKind::SegNode,
            config.clone(),
            SolverConfig::default(),
            31,
        )
        .unwrap();
        let image = random_image(&[1, 3, 8, 8], 32);
        let (logits, stats) = forward_eval(&model, &image).unwrap();
        assert!(stats.nfe > 0);

        let stem = stem_forward(&config, &model.params, &image).unwrap();
        let s0 = branch_project(&config, &model.params, &stem).unwrap();
        let manual = heads_forward(&config, &model.params, &s0, 8, 8).unwrap();
        for (a, b) in logits.data().iter().zip(manual.data()) {
            assert!((a - b).abs() <= 1e-9);
        }
        assert!(logits.all_finite());
    }

    #[test]
    fn weight_shared_one_repeat_baseline_equals_one_step_euler() {
        let config = NetworkConfig {
            modules_in_dynamics: 1,
            baseline_repeats: 1,
            input_size: (32, 32),
            ..NetworkConfig::desk()
        };
        let solver = SolverConfig {
            method: Method::Euler,
            step_count: 1,
            ..SolverConfig::default()
        };
        let segnode = new_model::<f64>(ModelKind::SegNode, config.clone(), solver.clone(), 41).unwrap();
        // Same parameter schema, so the baseline can share the store outright.
        let baseline = Model {
            kind: ModelKind::Baseline,
            config: config.clone(),
            solver,
            params: segnode.params.clone(),
        };
        let image = random_image(&[2, 3, 32, 32], 42);
        let (a, _) = forward_eval(&segnode, &image).unwrap();
        let (b, _) = forward_eval(&baseline, &image).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn baseline_with_zero_modules_is_the_identity_body() {
        let config = NetworkConfig::tiny();
        let params = init_params::<f64>(&config, ModelKind::Baseline, 51).unwrap();
        let s = random_state(&config, 1, 52);
        let out = baseline_body(&config, &params, &s).unwrap();
        assert!(max_abs_diff(&out, &s) <= 1e-12);
    }

    #[test]
    fn counted_parameters_match_the_closed_form() {
        for kind in [ModelKind::SegNode, ModelKind::Baseline] {
            for config in [
                NetworkConfig::tiny(),
                NetworkConfig::desk(),
                NetworkConfig {
                    time_mode: TimeMode::ConcatTime,
                    ..NetworkConfig::tiny()
                },
            ] {
                let model =
                    new_model::<f32>(kind, config.clone(), SolverConfig::default(), 61).unwrap();
                let counted = param_count(&model);
                assert_eq!(counted.total, analytic_param_count(&config, kind));
            }
        }
    }

    #[test]
    fn parameter_reduction_matches_the_shared_module_formula() {
        let config = NetworkConfig::desk();
        let seg = analytic_param_count(&config, ModelKind::SegNode);
        let base = analytic_param_count(&config, ModelKind::Baseline);
        assert!(seg < base);

        // Closed-form: shared = stem + proj + heads, plus per-module cost.
        let no_body = {
            let one_module_cfg = NetworkConfig {
                modules_in_dynamics: 1,
                ..config.clone()
            };
            2 * analytic_param_count(&one_module_cfg, ModelKind::SegNode)
                - analytic_param_count(
                    &NetworkConfig {
                        modules_in_dynamics: 2,
                        ..config.clone()
                    },
                    ModelKind::SegNode,
                )
        };
        let per_module = analytic_param_count(
            &NetworkConfig {
                modules_in_dynamics: 1,
                ..config.clone()
            },
            ModelKind::SegNode,
        ) - no_body;
        assert_eq!(seg, no_body + config.modules_in_dynamics * per_module);
        assert_eq!(base, no_body + config.baseline_repeats * per_module);

        let reduction = 1.0 - seg as f64 / base as f64;
        assert!(reduction > 0.5, "reduction {reduction}");
    }

    #[test]
    fn single_conv_and_norm_counts() {
        // conv 3x3 with 8 in, 16 out: 16*8*9 + 16 = 1168; norm on 48: 96.
        let conv = |ci: usize, co: usize, k: usize| co * ci * k * k + co;
        assert_eq!(conv(8, 16, 3), 1168);
        assert_eq!(2 * 48, 96);
    }

    #[test]
    fn time_concat_mode_runs_and_changes_with_time() {
        let config = NetworkConfig {
            time_mode: TimeMode::ConcatTime,
            ..NetworkConfig::tiny()
        };
        let mut params = init_params::<f64>(&config, ModelKind::SegNode, 71).unwrap();
        // Wake the zero-initialized convolutions so time can influence output.
        for name in params.names().cloned().collect::<Vec<_>>() {
            if name.ends_with(".w") {
                let t = params.get(&name).unwrap();
                params
                    .set(&name, init(InitKind::HeNormal, t.shape(), 72))
                    .unwrap();
            }
        }
        let s = random_state(&config, 1, 73);
        let at0 = dynamics_forward(&config, &params, 0.0, &s).unwrap();
        let at1 = dynamics_forward(&config, &params, 1.0, &s).unwrap();
        assert!(max_abs_diff(&at0, &at1) > 1e-6);
    }

    #[test]
    fn dynamics_vjp_matches_finite_differences() {
        let config = NetworkConfig::tiny();
        let full = init_params::<f64>(&config, ModelKind::SegNode, 81).unwrap();
        let s = random_state(&config, 1, 82);
        let probe_names = ["body.0.b0.u0.conv1.w", "body.0.b1.u0.norm1.g", "body.0.out.b0.w"];

        let config2 = config.clone();
        let full2 = full.clone();
        let s2 = s.clone();
        crate::testutil::vjp_matches_fd(
            move |ins| {
                let mut params = full2.clone();
                params.set(probe_names[0], ins[0].clone())?;
                params.set(probe_names[1], ins[1].clone())?;
                params.set(probe_names[2], ins[2].clone())?;
                let mut state = s2.clone();
                state.parts[0] = ins[3].clone();
                let out = dynamics_forward(&config2, &params, 0.5, &state)?;
                // Collapse to one tensor so the checker sees a single output.
                crate::tape::sum_all(&out.parts[0])
            },
            &[
                ("conv_w", full.get(probe_names[0]).unwrap().clone()),
                ("norm_g", full.get(probe_names[1]).unwrap().clone()),
                ("out_w", full.get(probe_names[2]).unwrap().clone()),
                ("state0", s.parts[0].clone()),
            ],
            12,
            1e-5,
            2e-4,
            83,
        );
    }

    #[test]
    fn checkpoint_roundtrip_and_shape_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let model = new_model::<f32>(
            ModelKind::SegNode,
            NetworkConfig::tiny(),
            SolverConfig::default(),
            91,
        )
        .unwrap();
        let path = dir.path().join("ckpt");
        save_model(&model, &path).unwrap();
        let loaded = load_model::<f32>(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.solver, model.solver);
        assert_eq!(loaded.kind, model.kind);
        for (name, tensor) in model.params.iter() {
            let other = loaded.params.get(name).unwrap();
            assert_eq!(tensor.data(), other.data());
        }

        // Overwrite one parameter file with a wrong shape: load must name it.
        let pairs = io::read_kv_file(&path.join("manifest.txt")).unwrap();
        let (key, file) = pairs
            .iter()
            .find(|(k, _)| k == "param.stem.conv1.w")
            .unwrap();
        io::write_tensor(&path.join(file), &Tensor::<f32>::zeros(&[1, 1, 1, 1])).unwrap();
        let err = load_model::<f32>(&path).unwrap_err().to_string();
        assert!(err.contains("stem.conv1.w"), "{err} / {key}");

        // And the wrong dtype is rejected up front.
        assert!(load_model::<f64>(&path).is_err());
    }
}

#[cfg(test)]
mod count_tests {
    use super::*;

    #[test]
    fn projection_stage_count_matches_its_closed_form() {
        let config = NetworkConfig::desk();
        let model =
            new_model::<f32>(ModelKind::SegNode, config.clone(), SolverConfig::default(), 3)
                .unwrap();
        let report = param_count(&model);
        let proj_counted = report
            .per_component
            .iter()
            .find(|(c, _)| c == "proj")
            .map(|(_, n)| *n)
            .unwrap();

        let conv = |ci: usize, co: usize, k: usize| co * ci * k * k + co;
        let norm = |c: usize| 2 * c;
        let c0 = config.branch_channels[0];
        let mut expected = 0;
        for (i, &c) in config.branch_channels.iter().enumerate() {
            expected += i * (conv(c0, c0, 3) + norm(c0)) + conv(c0, c, 1);
        }
        assert_eq!(proj_counted, expected);

        // The stem and heads components close the same way.
        let stem_counted = report
            .per_component
            .iter()
            .find(|(c, _)| c == "stem")
            .map(|(_, n)| *n)
            .unwrap();
        assert_eq!(stem_counted, conv(3, c0, 3) + norm(c0) + conv(c0, c0, 3) + norm(c0));
    }
}
