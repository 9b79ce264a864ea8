//! Renders a few synthetic samples as ASCII label maps.
//!
//! Run with: cargo run --release --example dataset_preview

use segnode::data::{generate_dataset_with_threads, DatasetConfig};

fn main() {
    let config = DatasetConfig {
        image_size: (32, 32),
        num_classes: 4,
        sample_count: 3,
        seed: 7,
        ..DatasetConfig::default()
    };
    let glyphs = ['.', '#', 'o', '+', '*', '%'];
    for (i, sample) in generate_dataset_with_threads::<f32>(&config, 1)
        .unwrap()
        .iter()
        .enumerate()
    {
        println!("sample {i}:");
        let [_, h, w] = sample.labels.shape();
        for y in 0..h {
            let row: String = (0..w)
                .map(|x| glyphs[sample.labels.data()[y * w + x] as usize % glyphs.len()])
                .collect();
            println!("  {row}");
        }
        println!();
    }
}
