//! Seeded inputs shared by the benchmarks.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use oodseg::{ImageTensor, LabelMap, LogitMap};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `(classes, h, w)` logits drawn uniformly from [-4, 4).
pub fn logit_map(classes: usize, h: usize, w: usize, seed: u64) -> LogitMap {
    let mut r = rng(seed);
    LogitMap::new(classes, h, w, (0..classes * h * w).map(|_| r.random_range(-4.0..4.0)).collect())
        .expect("sizes agree")
}

/// `(rows, classes)` logit tensor.
pub fn logit_rows(rows: usize, classes: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let v: Vec<f32> = (0..rows * classes).map(|_| r.random_range(-4.0..4.0)).collect();
    Tensor::from_vec(v, (rows, classes), &Device::Cpu).expect("sizes agree")
}

/// Scores and labels with about `positive_rate` positives and coarse ties.
pub fn scored_labels(n: usize, positive_rate: f64, seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut r = rng(seed);
    let y: Vec<bool> = (0..n).map(|_| r.random_bool(positive_rate)).collect();
    let s = y
        .iter()
        .map(|&p| ((r.random::<f64>() + if p { 0.5 } else { 0.0 }) * 1000.0).round() / 1000.0)
        .collect();
    (s, y)
}

pub fn image(c: usize, h: usize, w: usize, seed: u64) -> ImageTensor {
    let mut r = rng(seed);
    ImageTensor::new(c, h, w, (0..c * h * w).map(|_| r.random()).collect()).expect("sizes agree")
}

pub fn labels(h: usize, w: usize, classes: u8, seed: u64) -> LabelMap {
    let mut r = rng(seed);
    LabelMap::new(h, w, (0..h * w).map(|_| r.random_range(0..classes)).collect()).expect("sizes agree")
}

/// `(n, c, h, w)` batch with values in [0, 1).
pub fn image_batch(n: usize, c: usize, h: usize, w: usize, seed: u64, dtype: DType) -> Tensor {
    let mut r = rng(seed);
    let v: Vec<f32> = (0..n * c * h * w).map(|_| r.random()).collect();
    Tensor::from_vec(v, (n, c, h, w), &Device::Cpu)
        .and_then(|t| t.to_dtype(dtype))
        .expect("sizes agree")
}
