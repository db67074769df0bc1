//! Slow, obviously-correct reference implementations used by tests.

pub mod conv;
pub mod fd;
pub mod metrics;

use dentgan::codec::{IndexMask, NUM_CLASSES};
use dentgan::rng::Rng;
use dentgan::Tensor;

pub fn random_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.range(-scale, scale)).collect())
}

pub fn random_mask(rng: &mut Rng, width: usize, height: usize) -> IndexMask {
    let data = (0..width * height).map(|_| rng.int_range(0, NUM_CLASSES as i64 - 1) as u8).collect();
    IndexMask::new(width, height, data).expect("valid dimensions")
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over paired values.
pub fn max_rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
