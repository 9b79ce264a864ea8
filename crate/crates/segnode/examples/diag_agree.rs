// Diagnostic: adjoint-vs-direct gradient agreement as the step count varies.
use segnode::data::{generate_dataset_with_threads, stack_batch, DatasetConfig};
use segnode::model::{new_model, ModelKind, NetworkConfig};
use segnode::solver::{Method, SolverConfig};
use segnode::train::{model_loss_and_grads, train, GradMode, TrainConfig};

fn main() {
    let config = NetworkConfig::tiny();
    let data_cfg = DatasetConfig {
        image_size: (8, 8),
        num_classes: 2,
        sample_count: 4,
        seed: 3,
        ..DatasetConfig::default()
    };
    let dataset = generate_dataset_with_threads::<f64>(&data_cfg, 1).unwrap();
    for steps in [2usize, 4, 8, 16, 32] {
        let solver = SolverConfig {
            method: Method::Rk4,
            step_count: steps,
            ..SolverConfig::default()
        };
        let model = new_model::<f64>(ModelKind::SegNode, config.clone(), solver, 3).unwrap();
        let warm = train(
            &model,
            &dataset,
            &TrainConfig {
                total_steps: 3,
                grad_mode: GradMode::Direct,
                ..TrainConfig::segnode_desk(3, 11)
            },
        )
        .unwrap()
        .model;
        let (images, labels) = stack_batch(&[&dataset[0], &dataset[1]]).unwrap();
        let (_, adj, _) = model_loss_and_grads(&warm, &images, &labels, GradMode::Adjoint).unwrap();
        let (_, dir, _) = model_loss_and_grads(&warm, &images, &labels, GradMode::Direct).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        let mut worst = (0.0f64, String::new());
        for (name, a) in adj.iter() {
            let d = dir.get(name).unwrap();
            let mut local = 0.0;
            for (x, y) in a.data().iter().zip(d.data()) {
                num += (x - y) * (x - y);
                den += y * y;
                local += (x - y) * (x - y);
            }
            if local > worst.0 {
                worst = (local, name.clone());
            }
        }
        println!(
            "rk4-{steps}: rel L2 = {:.3e}  (worst tensor: {} {:.3e})",
            (num / den.max(1e-300)).sqrt(),
            worst.1,
            worst.0.sqrt()
        );
    }
}
