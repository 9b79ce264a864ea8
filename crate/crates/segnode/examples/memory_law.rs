//! Peak activation memory of the two gradient routes as the solver takes
//! more steps: the adjoint stays flat, backpropagation through the unrolled
//! solve grows linearly.
//!
//! Run with: cargo run --release --example memory_law

use segnode::data::{generate_dataset_with_threads, stack_batch, DatasetConfig};
use segnode::model::{new_model, ModelKind, NetworkConfig};
use segnode::solver::SolverConfig;
use segnode::train::{probe_gradient_memory, GradMode};

fn main() {
    let network = NetworkConfig::desk();
    let model =
        new_model::<f32>(ModelKind::SegNode, network.clone(), SolverConfig::default(), 0).unwrap();
    let data_cfg = DatasetConfig {
        image_size: network.input_size,
        sample_count: 2,
        seed: 0,
        ..DatasetConfig::default()
    };
    let dataset = generate_dataset_with_threads::<f32>(&data_cfg, 1).unwrap();
    let (images, labels) = stack_batch(&[&dataset[0], &dataset[1]]).unwrap();

    println!(
        "{:>6} {:>16} {:>16} {:>8}",
        "steps", "adjoint (MiB)", "direct (MiB)", "ratio"
    );
    for steps in [4usize, 8, 16, 32] {
        let adjoint = probe_gradient_memory(&model, &images, &labels, GradMode::Adjoint, steps)
            .unwrap()
            .peak_activation_bytes as f64
            / (1 << 20) as f64;
        let direct = probe_gradient_memory(&model, &images, &labels, GradMode::Direct, steps)
            .unwrap()
            .peak_activation_bytes as f64
            / (1 << 20) as f64;
        println!("{steps:>6} {adjoint:>16.1} {direct:>16.1} {:>8.2}", adjoint / direct);
    }
}
