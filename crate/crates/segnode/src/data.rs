//! Synthetic shape-segmentation data.
//!
//! Each sample is a noisy background plus one to three opaque shapes
//! (rectangle, disk or triangle), later shapes occluding earlier ones. Every
//! class paints with its own mean color, so the task is learnable at desk
//! scale, and each sample is a pure function of (seed, index).

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::metrics::Labels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NOISE_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub image_size: (usize, usize),
    /// Classes including background class 0.
    pub num_classes: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    pub sample_count: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            image_size: (64, 64),
            num_classes: 4,
            shapes_min: 1,
            shapes_max: 3,
            sample_count: 16,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(
                "dataset needs at least two classes (background plus one)".into(),
            ));
        }
        if self.shapes_min > self.shapes_max {
            return Err(Error::Config(format!(
                "shapes_min {} exceeds shapes_max {}",
                self.shapes_min, self.shapes_max
            )));
        }
        let (h, w) = self.image_size;
        if h < 8 || w < 8 {
            return Err(Error::Config(format!("image size {h}x{w} too small")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthSample<T: Scalar> {
    pub image: Tensor<T>,
    pub labels: Labels,
}

/// Mean RGB color of a class: a dark gray background and well-separated
/// golden-angle hues for the shape classes.
pub fn class_color(class: u32) -> [f64; 3] {
    if class == 0 {
        return [0.15, 0.15, 0.15];
    }
    let hue = ((class - 1) as f64 * 0.618_033_988_749_895).fract();
    hsv_to_rgb(hue, 0.8, 0.9)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

enum Shape {
    Rect { x0: usize, y0: usize, x1: usize, y1: usize },
    Disk { cx: f64, cy: f64, r: f64 },
    Triangle { pts: [(f64, f64); 3] },
}

impl Shape {
    fn contains(&self, x: usize, y: usize) -> bool {
        let (fx, fy) = (x as f64, y as f64);
        match self {
            Shape::Rect { x0, y0, x1, y1 } => x >= *x0 && x < *x1 && y >= *y0 && y < *y1,
            Shape::Disk { cx, cy, r } => {
                let (dx, dy) = (fx - cx, fy - cy);
                dx * dx + dy * dy <= r * r
            }
            Shape::Triangle { pts } => {
                let sign = |a: (f64, f64), b: (f64, f64), c: (f64, f64)| {
                    (a.0 - c.0) * (b.1 - c.1) - (b.0 - c.0) * (a.1 - c.1)
                };
                let p = (fx, fy);
                let d1 = sign(p, pts[0], pts[1]);
                let d2 = sign(p, pts[1], pts[2]);
                let d3 = sign(p, pts[2], pts[0]);
                let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(has_neg && has_pos)
            }
        }
    }
}

fn random_shape(rng: &mut ChaCha12Rng, h: usize, w: usize) -> Shape {
    let (hf, wf) = (h as f64, w as f64);
    match rng.random_range(0..3u32) {
        0 => {
            let sw = rng.random_range(w / 3..=w * 3 / 4).max(2);
            let sh = rng.random_range(h / 3..=h * 3 / 4).max(2);
            let x0 = rng.random_range(0..w - sw + 1);
            let y0 = rng.random_range(0..h - sh + 1);
            Shape::Rect {
                x0,
                y0,
                x1: x0 + sw,
                y1: y0 + sh,
            }
        }
        1 => {
            let r = rng.random_range(hf.min(wf) / 5.0..hf.min(wf) / 2.6);
            Shape::Disk {
                cx: rng.random_range(r..wf - r),
                cy: rng.random_range(r..hf - r),
                r,
            }
        }
        _ => {
            // Resample until the triangle has usable area.
            let min_area = hf * wf / 14.0;
            for _ in 0..16 {
                let pts = [
                    (rng.random_range(0.0..wf), rng.random_range(0.0..hf)),
                    (rng.random_range(0.0..wf), rng.random_range(0.0..hf)),
                    (rng.random_range(0.0..wf), rng.random_range(0.0..hf)),
                ];
                let area = 0.5
                    * ((pts[1].0 - pts[0].0) * (pts[2].1 - pts[0].1)
                        - (pts[2].0 - pts[0].0) * (pts[1].1 - pts[0].1))
                        .abs();
                if area >= min_area {
                    return Shape::Triangle { pts };
                }
            }
            let side = (h.min(w) / 3).max(2);
            Shape::Rect {
                x0: w / 4,
                y0: h / 4,
                x1: w / 4 + side,
                y1: h / 4 + side,
            }
        }
    }
}

fn sample_rng(seed: u64, index: usize) -> ChaCha12Rng {
    // One independent stream per (seed, index) pair.
    ChaCha12Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0xA076_1D64_78BD_642F))
}

/// Raw pixel data of one sample; pure function of (config, index).
fn generate_raw(config: &DatasetConfig, index: usize) -> (Vec<f64>, Vec<u32>) {
    let (h, w) = config.image_size;
    let mut rng = sample_rng(config.seed, index);

    let mut labels = vec![0u32; h * w];
    let count = if config.shapes_max == 0 {
        0
    } else {
        rng.random_range(config.shapes_min..=config.shapes_max)
    };
    for _ in 0..count {
        let class = rng.random_range(1..config.num_classes as u32);
        let shape = random_shape(&mut rng, h, w);
        for y in 0..h {
            for x in 0..w {
                if shape.contains(x, y) {
                    labels[y * w + x] = class;
                }
            }
        }
    }

    let mut image = vec![0.0f64; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let color = class_color(labels[y * w + x]);
            for c in 0..3 {
                let noise: f64 = f64::standard_normal(&mut rng) * NOISE_STD;
                image[c * h * w + y * w + x] = (color[c] + noise).clamp(0.0, 1.0);
            }
        }
    }
    (image, labels)
}

pub fn generate_sample<T: Scalar>(config: &DatasetConfig, index: usize) -> SynthSample<T> {
    let (h, w) = config.image_size;
    let (image, labels) = generate_raw(config, index);
    SynthSample {
        image: Tensor::from_vec(&[1, 3, h, w], image.into_iter().map(T::from_f64).collect()),
        labels: Labels::new([1, h, w], labels),
    }
}

/// Generates the whole dataset. `threads` > 1 splits sample generation
/// across worker threads; the result is identical either way because every
/// sample owns its own seeded stream.
pub fn generate_dataset_with_threads<T: Scalar>(
    config: &DatasetConfig,
    threads: usize,
) -> Result<Vec<SynthSample<T>>> {
    config.validate()?;
    let (h, w) = config.image_size;
    let raw: Vec<(Vec<f64>, Vec<u32>)> = if threads <= 1 || config.sample_count <= 1 {
        (0..config.sample_count)
            .map(|i| generate_raw(config, i))
            .collect()
    } else {
        let workers = threads.min(config.sample_count);
        let mut slots: Vec<Option<(Vec<f64>, Vec<u32>)>> = vec![None; config.sample_count];
        std::thread::scope(|scope| {
            let chunks: Vec<&mut [Option<(Vec<f64>, Vec<u32>)>]> =
                slots.chunks_mut(config.sample_count.div_ceil(workers)).collect();
            for (chunk_idx, chunk) in chunks.into_iter().enumerate() {
                let start = chunk_idx * config.sample_count.div_ceil(workers);
                scope.spawn(move || {
                    for (offset, slot) in chunk.iter_mut().enumerate() {
                        *slot = Some(generate_raw(config, start + offset));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("worker filled slot")).collect()
    };

    Ok(raw
        .into_iter()
        .map(|(image, labels)| SynthSample {
            image: Tensor::from_vec(&[1, 3, h, w], image.into_iter().map(T::from_f64).collect()),
            labels: Labels::new([1, h, w], labels),
        })
        .collect())
}

/// Thread count for dataset generation, from `SEGNODE_THREADS` (default 1).
pub fn env_thread_count() -> usize {
    std::env::var("SEGNODE_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

pub fn generate_dataset<T: Scalar>(config: &DatasetConfig) -> Result<Vec<SynthSample<T>>> {
    generate_dataset_with_threads(config, env_thread_count())
}

/// Concatenates samples along the batch axis.
pub fn stack_batch<T: Scalar>(samples: &[&SynthSample<T>]) -> Result<(Tensor<T>, Labels)> {
    let shape = samples[0].image.shape();
    let (h, w) = (shape[2], shape[3]);
    let mut image = Vec::with_capacity(samples.len() * 3 * h * w);
    for s in samples {
        if s.image.shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "stack_batch",
                lhs: shape.to_vec(),
                rhs: s.image.shape().to_vec(),
            });
        }
        image.extend_from_slice(s.image.data());
    }
    let labels = Labels::stack(&samples.iter().map(|s| &s.labels).collect::<Vec<_>>())?;
    Ok((Tensor::from_vec(&[samples.len(), 3, h, w], image), labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_and_index_are_bitwise_identical() {
        let config = DatasetConfig::default();
        let a = generate_sample::<f64>(&config, 3);
        let b = generate_sample::<f64>(&config, 3);
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.labels, b.labels);
        let c = generate_sample::<f64>(&config, 4);
        assert_ne!(a.labels, c.labels);
    }

    #[test]
    fn zero_shapes_means_background_only() {
        let config = DatasetConfig {
            shapes_min: 0,
            shapes_max: 0,
            ..DatasetConfig::default()
        };
        let sample = generate_sample::<f32>(&config, 0);
        assert!(sample.labels.data().iter().all(|&l| l == 0));
    }

    #[test]
    fn every_class_appears_across_the_set() {
        let config = DatasetConfig {
            image_size: (32, 32),
            num_classes: 4,
            sample_count: 1000,
            seed: 9,
            ..DatasetConfig::default()
        };
        let set = generate_dataset_with_threads::<f32>(&config, 1).unwrap();
        let mut histogram = vec![0u64; config.num_classes];
        for sample in &set {
            for &l in sample.labels.data() {
                assert!((l as usize) < config.num_classes);
                histogram[l as usize] += 1;
            }
        }
        for (class, &count) in histogram.iter().enumerate() {
            assert!(count > 0, "class {class} never appears");
        }
    }

    #[test]
    fn labels_and_pixels_are_aligned() {
        let config = DatasetConfig::default();
        let sample = generate_sample::<f64>(&config, 11);
        let (h, w) = config.image_size;
        let mut sums = vec![[0.0f64; 3]; config.num_classes];
        let mut counts = vec![0usize; config.num_classes];
        for y in 0..h {
            for x in 0..w {
                let l = sample.labels.data()[y * w + x] as usize;
                counts[l] += 1;
                for c in 0..3 {
                    sums[l][c] += sample.image.data()[c * h * w + y * w + x];
                }
            }
        }
        for class in 0..config.num_classes {
            if counts[class] < 30 {
                continue;
            }
            let palette = class_color(class as u32);
            for c in 0..3 {
                let mean = sums[class][c] / counts[class] as f64;
                // Clamping skews extremes slightly; stay within a few noise stds.
                assert!(
                    (mean - palette[c]).abs() <= 0.05,
                    "class {class} channel {c}: mean {mean} vs {}",
                    palette[c]
                );
            }
        }
    }

    #[test]
    fn threaded_generation_matches_sequential() {
        let config = DatasetConfig {
            sample_count: 11,
            ..DatasetConfig::default()
        };
        let seq = generate_dataset_with_threads::<f32>(&config, 1).unwrap();
        let par = generate_dataset_with_threads::<f32>(&config, 4).unwrap();
        for (a, b) in seq.iter().zip(&par) {
            assert_eq!(a.image.data(), b.image.data());
            assert_eq!(a.labels, b.labels);
        }
    }

    #[test]
    fn class_colors_are_distinct() {
        let colors: Vec<[f64; 3]> = (0..6).map(class_color).collect();
        for i in 0..colors.len() {
            for j in i + 1..colors.len() {
                let d: f64 = (0..3).map(|c| (colors[i][c] - colors[j][c]).abs()).sum();
                assert!(d > 0.2, "classes {i} and {j} too similar");
            }
        }
    }

    #[test]
    fn stacking_concatenates_batches() {
        let config = DatasetConfig {
            image_size: (16, 16),
            ..DatasetConfig::default()
        };
        let set = generate_dataset_with_threads::<f32>(&config, 1).unwrap();
        let (images, labels) = stack_batch(&[&set[0], &set[1], &set[2]]).unwrap();
        assert_eq!(images.shape(), &[3, 3, 16, 16]);
        assert_eq!(labels.shape(), [3, 16, 16]);
        assert_eq!(&images.data()[..16 * 16 * 3], set[0].image.data());
    }
}
