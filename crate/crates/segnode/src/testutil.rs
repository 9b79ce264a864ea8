//! Shared helpers for gradient verification in unit tests.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::Result;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub(crate) fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-7 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Checks `forward`'s VJP against central finite differences.
///
/// `forward` must be a pure function built from tracked operations; it is run
/// once on tracked inputs (to pull a random cotangent back through the tape)
/// and repeatedly on perturbed plain inputs for the differences. Up to
/// `samples` coordinates per input are probed.
pub(crate) fn vjp_matches_fd<F>(
    forward: F,
    inputs: &[(&str, Tensor<f64>)],
    samples: usize,
    eps: f64,
    tol: f64,
    seed: u64,
) where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let tape = Tape::new();
    let tracked: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(name, t)| tape.watch(name, t).unwrap())
        .collect();
    let out = forward(&tracked).expect("tracked forward failed");

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let cot = Tensor::from_vec(
        out.shape(),
        (0..out.numel()).map(|_| rng.random_range(-1.0..1.0)).collect(),
    );
    let grads = tape.vjp(&[&out], &[&cot]).unwrap();

    let plain: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let dot = |xs: &[Tensor<f64>]| -> f64 {
        let o = forward(xs).expect("plain forward failed");
        o.data().iter().zip(cot.data()).map(|(a, b)| a * b).sum()
    };

    for (i, (name, t)) in inputs.iter().enumerate() {
        let grad = grads.get(name).unwrap();
        let numel = t.numel();
        let count = samples.min(numel);
        let mut coords: Vec<usize> = (0..numel).collect();
        // Deterministic subset: shuffle by seeded draws, keep the prefix.
        for pos in 0..count {
            let j = rng.random_range(pos..numel);
            coords.swap(pos, j);
        }
        for &coord in &coords[..count] {
            let mut xs = plain.clone();
            let mut data = t.to_vec();
            data[coord] += eps;
            xs[i] = Tensor::from_vec(t.shape(), data.clone());
            let plus = dot(&xs);
            data[coord] -= 2.0 * eps;
            xs[i] = Tensor::from_vec(t.shape(), data);
            let minus = dot(&xs);
            let fd = (plus - minus) / (2.0 * eps);
            let got = grad.data()[coord];
            let err = rel_err(fd, got);
            assert!(
                err <= tol,
                "{name}[{coord}]: vjp {got} vs fd {fd} (rel err {err:.3e})"
            );
        }
    }
}
