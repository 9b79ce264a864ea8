//! Optimizers and the polynomial learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::GradMap;
use crate::tensor::Tensor;

/// Update rule plus its hyperparameters. The continuous model trains with
/// plain SGD (momentum 0.9, base rate 0.1, no weight decay); the baseline
/// uses AdamW (rate 1e-4, decoupled weight decay 0.05).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd {
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    },
    AdamW {
        lr: f64,
        weight_decay: f64,
    },
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn segnode_default() -> Optimizer {
        Optimizer::Sgd {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }

    pub fn baseline_default() -> Optimizer {
        Optimizer::AdamW {
            lr: 1e-4,
            weight_decay: 0.05,
        }
    }

    pub fn base_lr(&self) -> f64 {
        match self {
            Optimizer::Sgd { lr, .. } | Optimizer::AdamW { lr, .. } => *lr,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Optimizer::Sgd { .. } => "sgd",
            Optimizer::AdamW { .. } => "adamw",
        }
    }
}

/// Per-parameter optimizer slots.
#[derive(Debug, Clone, Default)]
pub struct OptState<T: Scalar> {
    /// SGD velocity, or Adam first moment.
    m: BTreeMap<String, Tensor<T>>,
    /// Adam second moment.
    v: BTreeMap<String, Tensor<T>>,
    steps: usize,
}

impl<T: Scalar> OptState<T> {
    pub fn new() -> OptState<T> {
        OptState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            steps: 0,
        }
    }
}

/// `base * (1 - progress)^power` — the polynomial decay policy.
pub fn poly_lr(base: f64, progress: f64, power: f64) -> f64 {
    assert!(
        (0.0..=1.0).contains(&progress),
        "progress {progress} outside [0, 1]"
    );
    base * (1.0 - progress).powf(power)
}

/// Applies one optimizer step at effective learning rate `lr`, producing the
/// updated parameters. Every parameter must have a gradient.
pub fn optimizer_step<T: Scalar>(
    optimizer: &Optimizer,
    params: &ParamStore<T>,
    grads: &GradMap<T>,
    state: &mut OptState<T>,
    lr: f64,
) -> Result<ParamStore<T>> {
    let mut updated = ParamStore::new();
    state.steps += 1;
    match *optimizer {
        Optimizer::Sgd {
            momentum,
            weight_decay,
            ..
        } => {
            let mu = T::from_f64(momentum);
            let wd = T::from_f64(weight_decay);
            let lr_t = T::from_f64(lr);
            for (name, theta) in params.iter() {
                let grad = grads
                    .get(name)
                    .ok_or_else(|| Error::MissingGrad(name.clone()))?;
                let mut velocity = match state.m.get(name) {
                    Some(v) => v.to_vec(),
                    None => vec![T::zero(); theta.numel()],
                };
                let mut next = Vec::with_capacity(theta.numel());
                for ((vi, &g), &t) in velocity.iter_mut().zip(grad.data()).zip(theta.data()) {
                    let g = g + wd * t;
                    *vi = mu * *vi + g;
                    next.push(t - lr_t * *vi);
                }
                state
                    .m
                    .insert(name.clone(), Tensor::from_vec(theta.shape(), velocity));
                updated.insert(name.clone(), Tensor::from_vec(theta.shape(), next))?;
            }
        }
        Optimizer::AdamW { weight_decay, .. } => {
            let b1 = T::from_f64(ADAM_BETA1);
            let b2 = T::from_f64(ADAM_BETA2);
            let eps = T::from_f64(ADAM_EPS);
            let wd = T::from_f64(weight_decay);
            let lr_t = T::from_f64(lr);
            let bias1 = T::one() - T::from_f64(ADAM_BETA1.powi(state.steps as i32));
            let bias2 = T::one() - T::from_f64(ADAM_BETA2.powi(state.steps as i32));
            for (name, theta) in params.iter() {
                let grad = grads
                    .get(name)
                    .ok_or_else(|| Error::MissingGrad(name.clone()))?;
                let mut m = match state.m.get(name) {
                    Some(v) => v.to_vec(),
                    None => vec![T::zero(); theta.numel()],
                };
                let mut v = match state.v.get(name) {
                    Some(v) => v.to_vec(),
                    None => vec![T::zero(); theta.numel()],
                };
                let mut next = Vec::with_capacity(theta.numel());
                for (i, (&g, &t)) in grad.data().iter().zip(theta.data()).enumerate() {
                    m[i] = b1 * m[i] + (T::one() - b1) * g;
                    v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                    let m_hat = m[i] / bias1;
                    let v_hat = v[i] / bias2;
                    next.push(t - lr_t * wd * t - lr_t * m_hat / (v_hat.sqrt() + eps));
                }
                state
                    .m
                    .insert(name.clone(), Tensor::from_vec(theta.shape(), m));
                state
                    .v
                    .insert(name.clone(), Tensor::from_vec(theta.shape(), v));
                updated.insert(name.clone(), Tensor::from_vec(theta.shape(), next))?;
            }
        }
    }
    Ok(updated)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(value)).unwrap();
        p
    }

    fn one_grad(value: f64) -> GradMap<f64> {
        let mut g = GradMap::new();
        g.insert("w".into(), Tensor::scalar(value)).unwrap();
        g
    }

    #[test]
    fn vanilla_sgd_step() {
        let opt = Optimizer::Sgd {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let mut state = OptState::new();
        let updated = optimizer_step(&opt, &one_param(1.0), &one_grad(0.5), &mut state, 0.1).unwrap();
        assert!((updated.get("w").unwrap().item() - 0.95).abs() <= 1e-15);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let opt = Optimizer::Sgd {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut state = OptState::new();
        let p1 = optimizer_step(&opt, &one_param(1.0), &one_grad(1.0), &mut state, 0.1).unwrap();
        // v1 = 1, theta = 0.9; v2 = 0.9 + 1 = 1.9, theta = 0.9 - 0.19 = 0.71
        let p2 = optimizer_step(&opt, &p1, &one_grad(1.0), &mut state, 0.1).unwrap();
        assert!((p1.get("w").unwrap().item() - 0.9).abs() <= 1e-15);
        assert!((p2.get("w").unwrap().item() - 0.71).abs() <= 1e-12);
    }

    #[test]
    fn zero_gradients_and_zero_decay_are_a_fixed_point() {
        for opt in [
            Optimizer::Sgd {
                lr: 0.1,
                momentum: 0.9,
                weight_decay: 0.0,
            },
            Optimizer::AdamW {
                lr: 1e-3,
                weight_decay: 0.0,
            },
        ] {
            let mut state = OptState::new();
            let mut params = one_param(1.25);
            for _ in 0..3 {
                params = optimizer_step(&opt, &params, &one_grad(0.0), &mut state, opt.base_lr())
                    .unwrap();
            }
            assert_eq!(params.get("w").unwrap().item(), 1.25);
        }
    }

    #[test]
    fn adamw_single_step_matches_the_published_update() {
        let (lr, wd, g, theta) = (1e-4, 0.05, 1.0, 1.0);
        let opt = Optimizer::AdamW {
            lr,
            weight_decay: wd,
        };
        let mut state = OptState::new();
        let updated =
            optimizer_step(&opt, &one_param(theta), &one_grad(g), &mut state, lr).unwrap();

        // Independent scalar evaluation of the update equations.
        let m = (1.0 - ADAM_BETA1) * g;
        let v = (1.0 - ADAM_BETA2) * g * g;
        let m_hat = m / (1.0 - ADAM_BETA1);
        let v_hat = v / (1.0 - ADAM_BETA2);
        let expected = theta - lr * wd * theta - lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        assert!((updated.get("w").unwrap().item() - expected).abs() <= 1e-10);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let opt = Optimizer::segnode_default();
        let mut state = OptState::new();
        let grads = GradMap::new();
        assert!(matches!(
            optimizer_step(&opt, &one_param(1.0), &grads, &mut state, 0.1),
            Err(Error::MissingGrad(_))
        ));
    }

    #[test]
    fn poly_schedule_boundaries_and_midpoint() {
        assert_eq!(poly_lr(0.1, 0.0, 0.9), 0.1);
        assert_eq!(poly_lr(0.1, 1.0, 0.9), 0.0);
        let mid = poly_lr(0.1, 0.5, 0.9);
        assert!((mid - 0.0535887).abs() <= 1e-7, "{mid}");
        assert!((mid - 0.1 * 0.5f64.powf(0.9)).abs() <= 1e-18);
    }

    #[test]
    fn poly_schedule_is_strictly_decreasing() {
        let mut prev = f64::INFINITY;
        for i in 0..=100 {
            let lr = poly_lr(0.1, i as f64 / 100.0, 0.9);
            assert!(lr < prev);
            prev = lr;
        }
    }

    #[test]
    #[should_panic]
    fn poly_rejects_out_of_range_progress() {
        let _ = poly_lr(0.1, 1.5, 0.9);
    }
}
