//! Constant-activation-memory gradients for ODE blocks via the adjoint
//! sensitivity method, plus a discretize-then-optimize reference path.
//!
//! The adjoint route integrates the augmented system (h, a, g) backward from
//! t1, where a = dL/dh(t) and g accumulates dL/dtheta. Each augmented
//! evaluation rebuilds one call of the dynamics on a fresh local tape,
//! extracts (f, a^T df/dh, a^T df/dtheta) by VJP and drops the tape, so the
//! number of concurrently-live activations does not depend on how many steps
//! the solver takes. The direct route records the whole unrolled solve on a
//! single tape instead; its activation footprint grows with the step count,
//! which is precisely the contrast the memory probe measures.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::solver::{integrate, OdeState, SolveStats, SolverConfig};
use crate::tape::{GradMap, Tape};
use crate::tensor::Tensor;

/// Dynamics that can run under gradient tracking: inputs carrying a tape
/// handle record the evaluation, plain inputs run it untracked.
pub trait TapedDynamics<T: Scalar> {
    fn eval(&self, t: T, s: &OdeState<T>, theta: &ParamStore<T>) -> Result<OdeState<T>>;
}

impl<T: Scalar, F> TapedDynamics<T> for F
where
    F: Fn(T, &OdeState<T>, &ParamStore<T>) -> Result<OdeState<T>>,
{
    fn eval(&self, t: T, s: &OdeState<T>, theta: &ParamStore<T>) -> Result<OdeState<T>> {
        self(t, s, theta)
    }
}

/// State of the augmented backward ODE: the replayed forward state, the
/// adjoint, and a flat per-parameter gradient accumulator.
pub struct AugmentedState<T: Scalar> {
    pub h: OdeState<T>,
    pub a: OdeState<T>,
    pub g: Tensor<T>,
}

impl<T: Scalar> AugmentedState<T> {
    fn pack(self) -> OdeState<T> {
        let mut parts = self.h.parts;
        parts.extend(self.a.parts);
        parts.push(self.g);
        OdeState::new(parts)
    }

    fn unpack(state: &OdeState<T>, branch_count: usize) -> AugmentedState<T> {
        let h = OdeState::new(state.parts[..branch_count].to_vec());
        let a = OdeState::new(state.parts[branch_count..2 * branch_count].to_vec());
        let g = state.parts[2 * branch_count].clone();
        AugmentedState { h, a, g }
    }
}

const STATE_LEAF_PREFIX: &str = "__h";

fn state_leaf_name(i: usize) -> String {
    format!("{STATE_LEAF_PREFIX}{i}")
}

fn check_like<T: Scalar>(a: &OdeState<T>, b: &OdeState<T>, op: &'static str) -> Result<()> {
    if a.parts.len() != b.parts.len()
        || a.parts
            .iter()
            .zip(&b.parts)
            .any(|(x, y)| x.shape() != y.shape())
    {
        return Err(Error::Config(format!(
            "{op}: state shapes do not match ({} vs {} parts)",
            a.parts.len(),
            b.parts.len()
        )));
    }
    Ok(())
}

/// One augmented evaluation: runs `f` on a fresh tape and pulls the adjoint
/// back through it. Returns (f value, a^T df/dh, flat a^T df/dtheta).
fn pullback_once<T: Scalar>(
    f: &dyn TapedDynamics<T>,
    t: T,
    h: &OdeState<T>,
    a: &OdeState<T>,
    theta: &ParamStore<T>,
) -> Result<(OdeState<T>, OdeState<T>, Vec<T>)> {
    let tape = Tape::new();
    let theta_tracked = theta.watch_all(&tape)?;
    let h_tracked = OdeState::new(
        h.parts
            .iter()
            .enumerate()
            .map(|(i, p)| tape.watch(&state_leaf_name(i), p))
            .collect::<Result<Vec<_>>>()?,
    );
    let out = f.eval(t, &h_tracked, &theta_tracked)?;
    check_like(h, &out, "dynamics output")?;

    // Outputs that never touched the tape pull back to zero.
    let pairs: Vec<(&Tensor<T>, &Tensor<T>)> = out
        .parts
        .iter()
        .zip(&a.parts)
        .filter(|(o, _)| o.is_tracked())
        .collect();
    let outputs: Vec<&Tensor<T>> = pairs.iter().map(|(o, _)| *o).collect();
    let cotangents: Vec<&Tensor<T>> = pairs.iter().map(|(_, c)| *c).collect();
    let grads = tape.vjp(&outputs, &cotangents)?;

    let a_jac_h = OdeState::new(
        (0..h.parts.len())
            .map(|i| grads.get(&state_leaf_name(i)).expect("state leaf").clone())
            .collect(),
    );
    let mut a_jac_theta = Vec::with_capacity(theta.total_params());
    for (name, _) in theta.iter() {
        a_jac_theta.extend_from_slice(grads.get(name).expect("theta leaf").data());
    }
    Ok((out.detach(), a_jac_h, a_jac_theta))
}

/// Adjoint-sensitivity gradients of an ODE block.
///
/// Starting from the terminal state `h_t1` and terminal cotangent `dl_dh_t1`,
/// integrates the augmented system backward across `cfg`'s span (with `cfg`'s
/// own method and tolerances) and returns the cotangent at t0, the parameter
/// gradients, and solve statistics.
pub fn adjoint_backward<T: Scalar>(
    f: &dyn TapedDynamics<T>,
    theta: &ParamStore<T>,
    h_t1: &OdeState<T>,
    dl_dh_t1: &OdeState<T>,
    cfg: &SolverConfig,
) -> Result<(OdeState<T>, GradMap<T>, SolveStats)> {
    cfg.validate()?;
    check_like(h_t1, dl_dh_t1, "adjoint terminal cotangent")?;
    let branch_count = h_t1.parts.len();
    let total_params = theta.total_params();
    let span = cfg.t1 - cfg.t0;
    let t1 = cfg.t1;

    let start = AugmentedState {
        h: h_t1.detach(),
        a: dl_dh_t1.detach(),
        g: Tensor::zeros(&[total_params.max(1)]),
    }
    .pack();

    // Backward time: tau in [0, span] corresponds to t = t1 - tau, so the
    // h component integrates -f while a and g pick up the VJP terms directly.
    let augmented = |tau: T, state: &OdeState<T>| -> Result<OdeState<T>> {
        let AugmentedState { h, a, g } = AugmentedState::unpack(state, branch_count);
        let t = T::from_f64(t1) - tau;
        let (f_val, a_jac_h, a_jac_theta) = pullback_once(f, t, &h, &a, theta)?;
        let mut parts: Vec<Tensor<T>> = f_val.parts.iter().map(|p| p.map(|v| -v)).collect();
        parts.extend(a_jac_h.parts);
        parts.push(if total_params == 0 {
            Tensor::zeros(g.shape())
        } else {
            Tensor::from_vec(g.shape(), a_jac_theta)
        });
        Ok(OdeState::new(parts))
    };

    let backward_cfg = cfg.clone().with_span(0.0, span);
    let (end, stats) = integrate(&augmented, &start, &backward_cfg)?;
    let AugmentedState { a, g, .. } = AugmentedState::unpack(&end, branch_count);

    let mut dl_dtheta = GradMap::new();
    let flat = g.data();
    let mut offset = 0;
    for (name, t) in theta.iter() {
        let n = t.numel();
        dl_dtheta.insert(
            name.clone(),
            Tensor::from_vec(t.shape(), flat[offset..offset + n].to_vec()),
        )?;
        offset += n;
    }
    Ok((a, dl_dtheta, stats))
}

/// Discretize-then-optimize gradients: records the entire unrolled fixed-step
/// solve on one tape and backpropagates through it. Every intermediate stage
/// stays alive until the tape is dropped, so activation memory grows linearly
/// with the step count.
pub fn direct_backward<T: Scalar>(
    f: &dyn TapedDynamics<T>,
    theta: &ParamStore<T>,
    h_t0: &OdeState<T>,
    dl_dh_t1: &OdeState<T>,
    cfg: &SolverConfig,
) -> Result<(OdeState<T>, GradMap<T>, SolveStats)> {
    cfg.validate()?;
    if !cfg.method.is_fixed_step() {
        return Err(Error::Config(format!(
            "direct_backward needs a fixed-step method, got {}",
            cfg.method.name()
        )));
    }
    check_like(h_t0, dl_dh_t1, "direct terminal cotangent")?;

    let tape = Tape::new();
    let theta_tracked = theta.watch_all(&tape)?;
    let h_tracked = OdeState::new(
        h_t0.parts
            .iter()
            .enumerate()
            .map(|(i, p)| tape.watch(&state_leaf_name(i), p))
            .collect::<Result<Vec<_>>>()?,
    );

    let dynamics =
        |t: T, s: &OdeState<T>| -> Result<OdeState<T>> { f.eval(t, s, &theta_tracked) };
    let (h_t1, stats) = integrate(&dynamics, &h_tracked, cfg)?;

    let outputs: Vec<&Tensor<T>> = h_t1.parts.iter().filter(|p| p.is_tracked()).collect();
    let cotangents: Vec<&Tensor<T>> = h_t1
        .parts
        .iter()
        .zip(&dl_dh_t1.parts)
        .filter(|(o, _)| o.is_tracked())
        .map(|(_, c)| c)
        .collect();
    let grads = tape.vjp(&outputs, &cotangents)?;

    let dl_dh0 = OdeState::new(
        (0..h_t0.parts.len())
            .map(|i| grads.get(&state_leaf_name(i)).expect("state leaf").clone())
            .collect(),
    );
    let mut dl_dtheta = GradMap::new();
    for (name, grad) in grads.iter() {
        if !name.starts_with(STATE_LEAF_PREFIX) {
            dl_dtheta.insert(name.clone(), grad.clone())?;
        }
    }
    Ok((dl_dh0, dl_dtheta, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::Method;
    use crate::tape::{self, mul};

    /// dh/dt = theta * h with scalar h and one scalar parameter.
    fn linear_growth(
        _t: f64,
        s: &OdeState<f64>,
        theta: &ParamStore<f64>,
    ) -> Result<OdeState<f64>> {
        let rate = theta.get("rate")?;
        Ok(OdeState::new(vec![mul(&s.parts[0], rate)?]))
    }

    fn scalar_params(value: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("rate", Tensor::scalar(value)).unwrap();
        p
    }

    fn rk4_cfg(steps: usize) -> SolverConfig {
        SolverConfig {
            method: Method::Rk4,
            step_count: steps,
            ..SolverConfig::default()
        }
    }

    #[test]
    fn zero_terminal_cotangent_gives_zero_gradients() {
        let theta = scalar_params(0.8);
        let h_t1 = OdeState::single(Tensor::scalar(2.0));
        let zero = OdeState::single(Tensor::scalar(0.0));
        let (dl_dh0, dl_dtheta, _) =
            adjoint_backward(&linear_growth, &theta, &h_t1, &zero, &rk4_cfg(8)).unwrap();
        assert_eq!(dl_dh0.parts[0].item(), 0.0);
        assert_eq!(dl_dtheta.get("rate").unwrap().item(), 0.0);
    }

    #[test]
    fn zero_dynamics_is_the_identity_flow() {
        // f never touches state or parameters, so the cotangent passes
        // through bitwise and the parameter gradient is exactly zero.
        let f = |_t: f64, s: &OdeState<f64>, _p: &ParamStore<f64>| -> Result<OdeState<f64>> {
            Ok(s.zeros_like())
        };
        let theta = scalar_params(0.3);
        let h_t1 = OdeState::single(Tensor::from_vec(&[2], vec![1.25, -0.5]));
        let cot = OdeState::single(Tensor::from_vec(&[2], vec![0.7, -0.9]));
        let (dl_dh0, dl_dtheta, _) =
            adjoint_backward(&f, &theta, &h_t1, &cot, &rk4_cfg(8)).unwrap();
        assert_eq!(dl_dh0.parts[0].data(), cot.parts[0].data());
        assert_eq!(dl_dtheta.get("rate").unwrap().item(), 0.0);

        let (d_dh0, d_dtheta, _) = direct_backward(&f, &theta, &h_t1, &cot, &rk4_cfg(8)).unwrap();
        assert_eq!(d_dh0.parts[0].data(), cot.parts[0].data());
        assert_eq!(d_dtheta.get("rate").unwrap().item(), 0.0);
    }

    #[test]
    fn adjoint_matches_closed_form_exponential() {
        // h(1) = h0 * exp(theta): dL/dtheta = dL/dh0 = e at theta = 1, h0 = 1.
        let theta = scalar_params(1.0);
        let cfg = rk4_cfg(16);
        let (h_t1, _) = integrate(
            &|t: f64, s: &OdeState<f64>| linear_growth(t, s, &theta),
            &OdeState::single(Tensor::scalar(1.0)),
            &cfg,
        )
        .unwrap();
        let one = OdeState::single(Tensor::scalar(1.0));
        let (dl_dh0, dl_dtheta, stats) =
            adjoint_backward(&linear_growth, &theta, &h_t1, &one, &cfg).unwrap();
        let e = std::f64::consts::E;
        assert!((dl_dh0.parts[0].item() - e).abs() <= 1e-4);
        assert!((dl_dtheta.get("rate").unwrap().item() - e).abs() <= 1e-4);
        assert_eq!(stats.nfe, 4 * 16);
    }

    #[test]
    fn direct_matches_closed_form_exponential() {
        let theta = scalar_params(1.0);
        let cfg = rk4_cfg(16);
        let h_t0 = OdeState::single(Tensor::scalar(1.0));
        let one = OdeState::single(Tensor::scalar(1.0));
        let (dl_dh0, dl_dtheta, _) =
            direct_backward(&linear_growth, &theta, &h_t0, &one, &cfg).unwrap();
        let e = std::f64::consts::E;
        assert!((dl_dtheta.get("rate").unwrap().item() - e).abs() <= 1e-4);
        assert!((dl_dh0.parts[0].item() - e).abs() <= 1e-4);
    }

    #[test]
    fn direct_rejects_adaptive_methods() {
        let theta = scalar_params(1.0);
        let s = OdeState::single(Tensor::scalar(1.0));
        let cfg = SolverConfig {
            method: Method::Dopri5,
            ..SolverConfig::default()
        };
        assert!(direct_backward(&linear_growth, &theta, &s, &s, &cfg).is_err());
    }

    #[test]
    fn adjoint_and_direct_agree_on_a_nonlinear_two_part_system() {
        // dh1/dt = w1 * relu(h1) + b, dh2/dt = w2 * h1 * h2
        let f = |_t: f64, s: &OdeState<f64>, p: &ParamStore<f64>| -> Result<OdeState<f64>> {
            let d1 = tape::add(&mul(&tape::relu(&s.parts[0])?, p.get("w1")?)?, p.get("b")?)?;
            let d2 = mul(&mul(&s.parts[0], &s.parts[1])?, p.get("w2")?)?;
            Ok(OdeState::new(vec![d1, d2]))
        };
        let mut theta = ParamStore::new();
        theta.insert("w1", Tensor::scalar(0.4)).unwrap();
        theta.insert("w2", Tensor::scalar(-0.3)).unwrap();
        theta.insert("b", Tensor::scalar(0.2)).unwrap();

        let h0 = OdeState::new(vec![Tensor::scalar(0.9), Tensor::scalar(1.1)]);
        let cfg = rk4_cfg(16);
        let (h_t1, _) =
            integrate(&|t: f64, s: &OdeState<f64>| f(t, s, &theta), &h0, &cfg).unwrap();
        let cot = OdeState::new(vec![Tensor::scalar(1.0), Tensor::scalar(-0.5)]);

        let (adj_h0, adj_theta, _) = adjoint_backward(&f, &theta, &h_t1, &cot, &cfg).unwrap();
        let (dir_h0, dir_theta, _) = direct_backward(&f, &theta, &h0, &cot, &cfg).unwrap();

        for (a, d) in adj_h0.parts.iter().zip(&dir_h0.parts) {
            assert!(
                (a.item() - d.item()).abs() <= 1e-6,
                "{} vs {}",
                a.item(),
                d.item()
            );
        }
        for name in ["w1", "w2", "b"] {
            let a = adj_theta.get(name).unwrap().item();
            let d = dir_theta.get(name).unwrap().item();
            assert!((a - d).abs() <= 1e-6 * a.abs().max(1.0), "{name}: {a} vs {d}");
        }
    }

    #[test]
    fn adjoint_gradients_match_finite_differences() {
        let theta = scalar_params(0.7);
        let cfg = rk4_cfg(12);
        let mut loss = |p: &ParamStore<f64>| -> Result<f64> {
            let owned = p.clone();
            let (h_t1, _) = integrate(
                &move |t: f64, s: &OdeState<f64>| linear_growth(t, s, &owned),
                &OdeState::single(Tensor::scalar(1.3)),
                &cfg,
            )?;
            Ok(h_t1.parts[0].item())
        };
        let fd =
            crate::params::finite_diff_grad(&mut loss, &theta, 1e-5, &[("rate".to_string(), 0)])
                .unwrap();

        let (h_t1, _) = integrate(
            &|t: f64, s: &OdeState<f64>| linear_growth(t, s, &theta),
            &OdeState::single(Tensor::scalar(1.3)),
            &cfg,
        )
        .unwrap();
        let one = OdeState::single(Tensor::scalar(1.0));
        let (_, dl_dtheta, _) = adjoint_backward(&linear_growth, &theta, &h_t1, &one, &cfg).unwrap();
        let adj = dl_dtheta.get("rate").unwrap().item();
        let rel = (adj - fd[0].value).abs() / fd[0].value.abs().max(1e-9);
        assert!(rel <= 1e-3, "adjoint {adj} vs fd {}", fd[0].value);
    }
}
