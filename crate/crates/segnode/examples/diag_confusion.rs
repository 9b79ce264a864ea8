use segnode::cli::load_dataset;
use segnode::metrics::{argmax_classes, ConfusionAccumulator};
use segnode::model::{forward_eval, load_model};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let model = load_model::<f32>(std::path::Path::new(&args[1])).unwrap();
    let (_, data) = load_dataset::<f32>(std::path::Path::new(&args[2])).unwrap();
    let mut acc = ConfusionAccumulator::new(4, None);
    for s in &data {
        let (logits, _) = forward_eval(&model, &s.image).unwrap();
        acc.add(&argmax_classes(&logits).unwrap(), &s.labels).unwrap();
    }
    let r = acc.report();
    println!("confusion (rows = truth, cols = predicted):");
    for g in 0..4 {
        let row: Vec<String> = (0..4).map(|p| format!("{:>8}", r.confusion_at(g, p))).collect();
        println!("  {}", row.join(" "));
    }
    println!("per-class IoU: {:?}", r.per_class);
}
