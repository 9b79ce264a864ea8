//! The accuracy-versus-compute knob: decode predictions at intermediate
//! solve times of a briefly trained model and tabulate error against cost.
//!
//! Run with: cargo run --release --example trajectory_error

use segnode::data::{generate_dataset_with_threads, DatasetConfig};
use segnode::model::{new_model, ModelKind, NetworkConfig};
use segnode::solver::SolverConfig;
use segnode::train::{train, trajectory_eval, TrainConfig};

fn main() {
    let network = NetworkConfig {
        input_size: (32, 32),
        ..NetworkConfig::desk()
    };
    let data_cfg = DatasetConfig {
        image_size: network.input_size,
        sample_count: 8,
        seed: 2,
        ..DatasetConfig::default()
    };
    let dataset = generate_dataset_with_threads::<f32>(&data_cfg, 1).unwrap();
    let model = new_model::<f32>(ModelKind::SegNode, network, SolverConfig::default(), 2).unwrap();
    let trained = train(&model, &dataset, &TrainConfig::segnode_desk(80, 2))
        .unwrap()
        .model;

    let times: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let eval = trajectory_eval(&trained, &dataset, &times).unwrap();
    println!("{:>6} {:>12} {:>8}", "time", "1 - mIoU", "nfe");
    for row in &eval.rows {
        println!("{:>6.2} {:>12.4} {:>8.0}", row.time, row.error, row.nfe);
    }
}
