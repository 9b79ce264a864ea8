//! Wall-clock cost of one optimization step per model and gradient route.
//!
//! Run with: cargo run --release --example step_timing [size] [solver_steps]

use std::time::Instant;

use segnode::data::{generate_dataset_with_threads, stack_batch, DatasetConfig};
use segnode::model::{new_model, ModelKind, NetworkConfig};
use segnode::solver::{Method, SolverConfig};
use segnode::train::{model_loss_and_grads, GradMode};

fn main() {
    let size: usize = std::env::args().nth(1).and_then(|v| v.parse().ok()).unwrap_or(64);
    let steps: usize = std::env::args().nth(2).and_then(|v| v.parse().ok()).unwrap_or(8);
    let network = NetworkConfig {
        input_size: (size, size),
        ..NetworkConfig::desk()
    };
    let solver = SolverConfig {
        method: Method::Rk4,
        step_count: steps,
        ..SolverConfig::default()
    };
    let segnode = new_model::<f32>(ModelKind::SegNode, network.clone(), solver.clone(), 1).unwrap();
    let data_cfg = DatasetConfig {
        image_size: (size, size),
        sample_count: 2,
        ..DatasetConfig::default()
    };
    let data = generate_dataset_with_threads::<f32>(&data_cfg, 1).unwrap();
    let (images, labels) = stack_batch(&[&data[0], &data[1]]).unwrap();

    for mode in [GradMode::Adjoint, GradMode::Direct] {
        let t = Instant::now();
        let reps = 3;
        for _ in 0..reps {
            model_loss_and_grads(&segnode, &images, &labels, mode).unwrap();
        }
        println!(
            "segnode {mode:?} {size}px rk4-{steps}: {:.0} ms/step",
            t.elapsed().as_secs_f64() * 1000.0 / reps as f64
        );
    }

    let baseline = new_model::<f32>(ModelKind::Baseline, network, solver, 1).unwrap();
    let t = Instant::now();
    for _ in 0..3 {
        model_loss_and_grads(&baseline, &images, &labels, GradMode::Direct).unwrap();
    }
    println!(
        "baseline {size}px: {:.0} ms/step",
        t.elapsed().as_secs_f64() * 1000.0 / 3.0
    );
}
