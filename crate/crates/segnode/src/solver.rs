//! Explicit Runge-Kutta integration over an abstract vector-space state.
//!
//! The state is a list of tensors, so the same solver runs the scalar test
//! problems and the four-branch network state. All state arithmetic goes
//! through the tracked tensor operations: integrating tracked tensors with a
//! fixed-step method records the whole unrolled solve on the tape, which is
//! exactly what the discretize-then-optimize gradient path needs.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{add, scale};
use crate::tensor::Tensor;

/// Ordered list of tensors forming one point of the ODE state space.
#[derive(Debug, Clone)]
pub struct OdeState<T: Scalar> {
    pub parts: Vec<Tensor<T>>,
}

impl<T: Scalar> OdeState<T> {
    pub fn new(parts: Vec<Tensor<T>>) -> OdeState<T> {
        OdeState { parts }
    }

    pub fn single(t: Tensor<T>) -> OdeState<T> {
        OdeState { parts: vec![t] }
    }

    pub fn zeros_like(&self) -> OdeState<T> {
        OdeState {
            parts: self.parts.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn detach(&self) -> OdeState<T> {
        OdeState {
            parts: self.parts.iter().map(Tensor::detach).collect(),
        }
    }

    /// Max over parts of the max-abs entry.
    pub fn norm_inf(&self) -> T {
        self.parts
            .iter()
            .fold(T::zero(), |acc, p| acc.max(p.max_abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.parts.iter().all(Tensor::all_finite)
    }

    pub fn numel(&self) -> usize {
        self.parts.iter().map(Tensor::numel).sum()
    }

    fn check_compatible(&self, other: &OdeState<T>, op: &'static str) -> Result<()> {
        if self.parts.len() != other.parts.len() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: vec![self.parts.len()],
                rhs: vec![other.parts.len()],
            });
        }
        for (a, b) in self.parts.iter().zip(&other.parts) {
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

/// `alpha * x + y`, elementwise per part.
pub fn state_axpy<T: Scalar>(alpha: T, x: &OdeState<T>, y: &OdeState<T>) -> Result<OdeState<T>> {
    x.check_compatible(y, "state_axpy")?;
    let parts = x
        .parts
        .iter()
        .zip(&y.parts)
        .map(|(xp, yp)| add(&scale(xp, alpha)?, yp))
        .collect::<Result<Vec<_>>>()?;
    Ok(OdeState { parts })
}

/// Right-hand side of an ODE: `ds/dt = eval(t, s)`.
pub trait Dynamics<T: Scalar> {
    fn eval(&self, t: T, s: &OdeState<T>) -> Result<OdeState<T>>;
}

impl<T: Scalar, F> Dynamics<T> for F
where
    F: Fn(T, &OdeState<T>) -> Result<OdeState<T>>,
{
    fn eval(&self, t: T, s: &OdeState<T>) -> Result<OdeState<T>> {
        self(t, s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Euler,
    Rk4,
    Dopri5,
}

impl Method {
    pub fn is_fixed_step(self) -> bool {
        matches!(self, Method::Euler | Method::Rk4)
    }

    pub fn evals_per_step(self) -> usize {
        match self {
            Method::Euler => 1,
            Method::Rk4 => 4,
            Method::Dopri5 => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Euler => "euler",
            Method::Rk4 => "rk4",
            Method::Dopri5 => "dopri5",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        match s {
            "euler" => Some(Method::Euler),
            "rk4" => Some(Method::Rk4),
            "dopri5" => Some(Method::Dopri5),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub method: Method,
    pub t0: f64,
    pub t1: f64,
    /// Number of uniform steps for the fixed-step methods.
    pub step_count: usize,
    pub rtol: f64,
    pub atol: f64,
    pub max_nfe: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: Method::Rk4,
            t0: 0.0,
            t1: 1.0,
            step_count: 8,
            rtol: 1e-3,
            atol: 1e-4,
            max_nfe: 100_000,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t1 > self.t0) {
            return Err(Error::Config(format!(
                "solver span must have t1 > t0, got [{}, {}]",
                self.t0, self.t1
            )));
        }
        if self.step_count < 1 {
            return Err(Error::Config("step_count must be at least 1".into()));
        }
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::Config(format!(
                "tolerances must be positive, got rtol={} atol={}",
                self.rtol, self.atol
            )));
        }
        if self.max_nfe == 0 {
            return Err(Error::Config("max_nfe must be positive".into()));
        }
        Ok(())
    }

    pub fn with_span(mut self, t0: f64, t1: f64) -> SolverConfig {
        self.t0 = t0;
        self.t1 = t1;
        self
    }
}

/// Cost accounting for one solve.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveStats {
    pub nfe: usize,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub final_step_size: f64,
}

fn ensure_finite<T: Scalar>(s: &OdeState<T>, context: &str, t: f64) -> Result<()> {
    if s.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: context.to_string(),
            t,
        })
    }
}

/// One explicit Euler step: `s + h f(t, s)`.
pub fn euler_step<T: Scalar>(
    f: &dyn Dynamics<T>,
    t: f64,
    h: f64,
    s: &OdeState<T>,
) -> Result<OdeState<T>> {
    let k = f.eval(T::from_f64(t), s)?;
    ensure_finite(&k, "euler stage", t)?;
    state_axpy(T::from_f64(h), &k, s)
}

/// One classical Runge-Kutta step (4 stages, 4 dynamics evaluations).
///
/// The combination `s + h/6 k1 + h/3 k2 + h/3 k3 + h/6 k4` is accumulated as
/// each stage arrives, so at most one stage derivative is alive at a time —
/// this bounds the solver's own footprint when the state is large (the
/// augmented adjoint state carries a full parameter-gradient slot).
pub fn rk4_step<T: Scalar>(
    f: &dyn Dynamics<T>,
    t: f64,
    h: f64,
    s: &OdeState<T>,
) -> Result<OdeState<T>> {
    let half = T::from_f64(h * 0.5);
    let two = T::from_f64(2.0);

    let k1 = f.eval(T::from_f64(t), s)?;
    ensure_finite(&k1, "rk4 stage 1", t)?;
    let arg = state_axpy(half, &k1, s)?;
    let acc = k1;

    let k2 = f.eval(T::from_f64(t + h * 0.5), &arg)?;
    ensure_finite(&k2, "rk4 stage 2", t)?;
    let arg = state_axpy(half, &k2, s)?;
    let acc = state_axpy(two, &k2, &acc)?;
    drop(k2);

    let k3 = f.eval(T::from_f64(t + h * 0.5), &arg)?;
    ensure_finite(&k3, "rk4 stage 3", t)?;
    let arg = state_axpy(T::from_f64(h), &k3, s)?;
    let acc = state_axpy(two, &k3, &acc)?;
    drop(k3);

    let k4 = f.eval(T::from_f64(t + h), &arg)?;
    ensure_finite(&k4, "rk4 stage 4", t)?;
    let acc = state_axpy(T::one(), &k4, &acc)?;
    state_axpy(T::from_f64(h / 6.0), &acc, s)
}

// Dormand-Prince 5(4) coefficients.
const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
/// b5 - b4: weights of the embedded error estimate, per stage.
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Outcome of one Dormand-Prince trial step.
pub struct Dopri5Step<T: Scalar> {
    /// 5th-order solution at `t + h`.
    pub s5: OdeState<T>,
    /// Scaled error estimate; a value <= 1 means the step is acceptable.
    pub err_est: f64,
    /// Dynamics evaluations performed (6 when the FSAL stage was supplied).
    pub nfe: usize,
    /// `f(t + h, s5)`, reusable as the next step's first stage.
    pub last_stage: OdeState<T>,
}

/// One Dormand-Prince 5(4) trial step. `first_stage` is `f(t, s)` from the
/// previous accepted step (the FSAL property); when absent it is computed
/// here at the cost of one extra evaluation.
pub fn dopri5_step<T: Scalar>(
    f: &dyn Dynamics<T>,
    t: f64,
    h: f64,
    s: &OdeState<T>,
    rtol: f64,
    atol: f64,
    first_stage: Option<&OdeState<T>>,
) -> Result<Dopri5Step<T>> {
    let mut nfe = 0;
    let k1 = match first_stage {
        Some(k) => k.clone(),
        None => {
            nfe += 1;
            f.eval(T::from_f64(t), s)?
        }
    };
    ensure_finite(&k1, "dopri5 stage 1", t)?;

    let mut stages: Vec<OdeState<T>> = vec![k1];
    for stage in 1..7 {
        let mut arg = s.clone();
        for (j, k) in stages.iter().enumerate() {
            let a = DP_A[stage][j];
            if a != 0.0 {
                arg = state_axpy(T::from_f64(h * a), k, &arg)?;
            }
        }
        let k = f.eval(T::from_f64(t + DP_C[stage] * h), &arg)?;
        nfe += 1;
        ensure_finite(&k, "dopri5 stage", t)?;
        stages.push(k);
    }

    // Stage 7 is evaluated at the 5th-order solution itself.
    let mut s5 = s.clone();
    for (j, k) in stages.iter().take(6).enumerate() {
        let a = DP_A[6][j];
        if a != 0.0 {
            s5 = state_axpy(T::from_f64(h * a), k, &s5)?;
        }
    }

    let mut diff = s.zeros_like();
    for (j, k) in stages.iter().enumerate() {
        if DP_E[j] != 0.0 {
            diff = state_axpy(T::from_f64(h * DP_E[j]), k, &diff)?;
        }
    }
    let scale_norm = s.norm_inf().max(s5.norm_inf()).to_f64();
    let err_est = diff.norm_inf().to_f64() / (atol + rtol * scale_norm);

    let last_stage = stages.pop().expect("seven stages were built");
    Ok(Dopri5Step {
        s5,
        err_est,
        nfe,
        last_stage,
    })
}

fn budget_check(nfe: usize, next: usize, cfg: &SolverConfig, stats: &SolveStats) -> Result<()> {
    if nfe + next > cfg.max_nfe {
        return Err(Error::NfeBudget {
            nfe,
            max_nfe: cfg.max_nfe,
            partial: stats.clone(),
        });
    }
    Ok(())
}

/// Integrates `ds/dt = f(t, s)` from `cfg.t0` to `cfg.t1`.
///
/// Fixed-step methods take exactly `step_count` uniform steps. The adaptive
/// method accepts a trial step when its scaled error estimate is <= 1 and
/// rescales the step by `0.9 * err^(-1/5)`, clamped to [0.2, 5.0].
pub fn integrate<T: Scalar>(
    f: &dyn Dynamics<T>,
    s0: &OdeState<T>,
    cfg: &SolverConfig,
) -> Result<(OdeState<T>, SolveStats)> {
    cfg.validate()?;
    match cfg.method {
        Method::Euler | Method::Rk4 => integrate_fixed(f, s0, cfg),
        Method::Dopri5 => integrate_adaptive(f, s0, cfg),
    }
}

fn integrate_fixed<T: Scalar>(
    f: &dyn Dynamics<T>,
    s0: &OdeState<T>,
    cfg: &SolverConfig,
) -> Result<(OdeState<T>, SolveStats)> {
    let h = (cfg.t1 - cfg.t0) / cfg.step_count as f64;
    let per_step = cfg.method.evals_per_step();
    let mut stats = SolveStats {
        final_step_size: h,
        ..SolveStats::default()
    };
    let mut s = s0.clone();
    for i in 0..cfg.step_count {
        budget_check(stats.nfe, per_step, cfg, &stats)?;
        let t = cfg.t0 + i as f64 * h;
        s = match cfg.method {
            Method::Euler => euler_step(f, t, h, &s)?,
            Method::Rk4 => rk4_step(f, t, h, &s)?,
            Method::Dopri5 => unreachable!(),
        };
        stats.nfe += per_step;
        stats.accepted_steps += 1;
        ensure_finite(&s, "fixed-step state", t + h)?;
    }
    Ok((s, stats))
}

fn integrate_adaptive<T: Scalar>(
    f: &dyn Dynamics<T>,
    s0: &OdeState<T>,
    cfg: &SolverConfig,
) -> Result<(OdeState<T>, SolveStats)> {
    let span = cfg.t1 - cfg.t0;
    let mut stats = SolveStats::default();
    let mut s = s0.clone();
    let mut t = cfg.t0;
    let mut h = span / 10.0;

    budget_check(stats.nfe, 1, cfg, &stats)?;
    let mut first_stage = f.eval(T::from_f64(t), &s)?;
    stats.nfe += 1;
    ensure_finite(&first_stage, "dopri5 initial stage", t)?;

    while t < cfg.t1 {
        let clamped = h >= cfg.t1 - t;
        let h_try = if clamped { cfg.t1 - t } else { h };
        budget_check(stats.nfe, 6, cfg, &stats)?;
        let step = dopri5_step(f, t, h_try, &s, cfg.rtol, cfg.atol, Some(&first_stage))?;
        stats.nfe += step.nfe;

        if step.err_est <= 1.0 {
            ensure_finite(&step.s5, "dopri5 accepted state", t + h_try)?;
            s = step.s5;
            first_stage = step.last_stage;
            t = if clamped { cfg.t1 } else { t + h_try };
            stats.accepted_steps += 1;
            stats.final_step_size = h_try;
        } else {
            stats.rejected_steps += 1;
        }

        let factor = if step.err_est > 0.0 {
            (0.9 * step.err_est.powf(-0.2)).clamp(0.2, 5.0)
        } else {
            5.0
        };
        h = h_try * factor;
    }
    Ok((s, stats))
}

/// Snapshots of a solve at requested times, with cost accounting.
pub struct Trajectory<T: Scalar> {
    pub states: Vec<OdeState<T>>,
    /// Cumulative dynamics evaluations at the moment each snapshot was taken.
    pub nfe_at: Vec<usize>,
    pub stats: SolveStats,
}

/// States at each requested time, via piecewise integration.
///
/// With a fixed-step method the full uniform grid of `cfg` is marched
/// unchanged, so a final time equal to `cfg.t1` reproduces [`integrate`]
/// bitwise; snapshot times that fall inside a grid interval are reached by
/// one partial step off the marching state. The adaptive method integrates
/// each inter-snapshot segment with a fresh controller.
pub fn integrate_trajectory<T: Scalar>(
    f: &dyn Dynamics<T>,
    s0: &OdeState<T>,
    cfg: &SolverConfig,
    times: &[f64],
) -> Result<Trajectory<T>> {
    cfg.validate()?;
    let tiny = 1e-12 * (cfg.t1 - cfg.t0).abs();
    let mut prev = cfg.t0;
    for &tau in times {
        if tau < cfg.t0 - tiny || tau > cfg.t1 + tiny {
            return Err(Error::Config(format!(
                "snapshot time {tau} outside span [{}, {}]",
                cfg.t0, cfg.t1
            )));
        }
        if tau < prev - tiny {
            return Err(Error::Config(format!(
                "snapshot times must be ascending, {tau} follows {prev}"
            )));
        }
        prev = tau;
    }

    match cfg.method {
        Method::Euler | Method::Rk4 => trajectory_fixed(f, s0, cfg, times, tiny),
        Method::Dopri5 => trajectory_adaptive(f, s0, cfg, times, tiny),
    }
}

fn trajectory_fixed<T: Scalar>(
    f: &dyn Dynamics<T>,
    s0: &OdeState<T>,
    cfg: &SolverConfig,
    times: &[f64],
    tiny: f64,
) -> Result<Trajectory<T>> {
    let h = (cfg.t1 - cfg.t0) / cfg.step_count as f64;
    let per_step = cfg.method.evals_per_step();
    let mut stats = SolveStats {
        final_step_size: h,
        ..SolveStats::default()
    };
    let mut s = s0.clone();
    let mut grid = 0usize;
    let mut snapshots = Vec::with_capacity(times.len());
    let mut nfe_at = Vec::with_capacity(times.len());

    for &tau in times {
        while grid < cfg.step_count && cfg.t0 + (grid + 1) as f64 * h <= tau + tiny {
            budget_check(stats.nfe, per_step, cfg, &stats)?;
            let t = cfg.t0 + grid as f64 * h;
            s = match cfg.method {
                Method::Euler => euler_step(f, t, h, &s)?,
                Method::Rk4 => rk4_step(f, t, h, &s)?,
                Method::Dopri5 => unreachable!(),
            };
            stats.nfe += per_step;
            stats.accepted_steps += 1;
            grid += 1;
        }
        let t_here = cfg.t0 + grid as f64 * h;
        if (tau - t_here).abs() <= tiny {
            snapshots.push(s.clone());
        } else {
            // Side step to the snapshot time; the grid march is unaffected.
            budget_check(stats.nfe, per_step, cfg, &stats)?;
            let partial = match cfg.method {
                Method::Euler => euler_step(f, t_here, tau - t_here, &s)?,
                Method::Rk4 => rk4_step(f, t_here, tau - t_here, &s)?,
                Method::Dopri5 => unreachable!(),
            };
            stats.nfe += per_step;
            snapshots.push(partial);
        }
        nfe_at.push(stats.nfe);
    }
    Ok(Trajectory {
        states: snapshots,
        nfe_at,
        stats,
    })
}

fn trajectory_adaptive<T: Scalar>(
    f: &dyn Dynamics<T>,
    s0: &OdeState<T>,
    cfg: &SolverConfig,
    times: &[f64],
    tiny: f64,
) -> Result<Trajectory<T>> {
    let mut stats = SolveStats::default();
    let mut s = s0.clone();
    let mut t = cfg.t0;
    let mut snapshots = Vec::with_capacity(times.len());
    let mut nfe_at = Vec::with_capacity(times.len());
    for &tau in times {
        if tau - t > tiny {
            let segment = SolverConfig {
                max_nfe: cfg.max_nfe - stats.nfe,
                ..cfg.clone()
            }
            .with_span(t, tau);
            let (next, seg_stats) = integrate(f, &s, &segment)?;
            s = next;
            t = tau;
            stats.nfe += seg_stats.nfe;
            stats.accepted_steps += seg_stats.accepted_steps;
            stats.rejected_steps += seg_stats.rejected_steps;
            stats.final_step_size = seg_stats.final_step_size;
        }
        snapshots.push(s.clone());
        nfe_at.push(stats.nfe);
    }
    Ok(Trajectory {
        states: snapshots,
        nfe_at,
        stats,
    })
}
