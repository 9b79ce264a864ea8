//! A complete miniature run: synthetic data, adjoint training of the
//! continuous model, evaluation.
//!
//! Run with: cargo run --release --example train_tiny

use segnode::data::{generate_dataset_with_threads, DatasetConfig};
use segnode::model::{new_model, ModelKind, NetworkConfig};
use segnode::solver::SolverConfig;
use segnode::train::{evaluate, train, TrainConfig};

fn main() {
    let network = NetworkConfig {
        input_size: (32, 32),
        ..NetworkConfig::desk()
    };
    let data_cfg = DatasetConfig {
        image_size: network.input_size,
        sample_count: 8,
        seed: 1,
        ..DatasetConfig::default()
    };
    let dataset = generate_dataset_with_threads::<f32>(&data_cfg, 1).unwrap();
    let model = new_model::<f32>(ModelKind::SegNode, network, SolverConfig::default(), 1).unwrap();

    let steps = 60;
    let outcome = train(&model, &dataset, &TrainConfig::segnode_desk(steps, 1)).unwrap();
    for record in outcome.history.iter().step_by(10) {
        println!(
            "step {:>3}  loss {:.4}  lr {:.4}  nfe {}",
            record.step, record.loss, record.lr, record.nfe
        );
    }
    let report = evaluate(&outcome.model, &dataset).unwrap();
    println!("train mIoU after {steps} steps: {:.4}", report.miou.mean);
    for (c, iou) in report.miou.per_class.iter().enumerate() {
        match iou {
            Some(v) => println!("  class {c}: {v:.4}"),
            None => println!("  class {c}: absent"),
        }
    }
}
