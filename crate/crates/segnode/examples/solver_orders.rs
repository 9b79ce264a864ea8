//! Order-of-convergence study: global error of Euler and RK4 under step
//! halving on dh/dt = h, plus the adaptive solver's cost at two tolerances.
//!
//! Run with: cargo run --release --example solver_orders

use segnode::solver::{integrate, Method, OdeState, SolverConfig};
use segnode::tensor::Tensor;

fn main() {
    let growth = |_t: f64, s: &OdeState<f64>| -> segnode::Result<OdeState<f64>> {
        Ok(OdeState::new(s.parts.iter().map(|p| p.map(|v| v)).collect()))
    };
    let exact = std::f64::consts::E;

    for method in [Method::Euler, Method::Rk4] {
        println!("{}:", method.name());
        println!("{:>8} {:>14} {:>8}", "steps", "|error|", "ratio");
        let mut prev: Option<f64> = None;
        for steps in [8usize, 16, 32, 64, 128, 256] {
            let cfg = SolverConfig {
                method,
                step_count: steps,
                ..SolverConfig::default()
            };
            let (s, _) = integrate(&growth, &OdeState::single(Tensor::scalar(1.0)), &cfg).unwrap();
            let err = (s.parts[0].item() - exact).abs();
            match prev {
                Some(p) => println!("{steps:>8} {err:>14.3e} {:>8.2}", p / err),
                None => println!("{steps:>8} {err:>14.3e} {:>8}", "-"),
            }
            prev = Some(err);
        }
        println!();
    }

    println!("dopri5 (adaptive):");
    println!("{:>10} {:>14} {:>6} {:>9} {:>9}", "rtol", "|error|", "nfe", "accepted", "rejected");
    for rtol in [1e-3, 1e-6, 1e-9] {
        let cfg = SolverConfig {
            method: Method::Dopri5,
            rtol,
            atol: rtol * 1e-2,
            ..SolverConfig::default()
        };
        let (s, stats) = integrate(&growth, &OdeState::single(Tensor::scalar(1.0)), &cfg).unwrap();
        println!(
            "{rtol:>10.0e} {:>14.3e} {:>6} {:>9} {:>9}",
            (s.parts[0].item() - exact).abs(),
            stats.nfe,
            stats.accepted_steps,
            stats.rejected_steps
        );
    }
}
