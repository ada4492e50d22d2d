//! Seeded weight initialisation helpers.

use ndarray::{Array1, Array2};
use rand::Rng;

/// Entries drawn uniformly from `[-scale, scale)`.
pub fn uniform_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-scale..scale))
}

pub fn uniform_vector<R: Rng>(rng: &mut R, len: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || rng.random_range(-scale..scale))
}

/// Glorot-style uniform bound for a `fan_in x fan_out` map.
pub fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}
