//! Seeded weight initialization.

use rand::Rng;

use super::Tensor;

/// Standard normal draw via Box–Muller; portable and deterministic for a
/// given generator state.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let u2: f64 = rng.gen::<f64>();
        return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
    }
}

/// Kaiming-style normal init: std = sqrt(2 / fan_in).
pub fn kaiming_normal<R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| standard_normal(rng) * std).collect();
    Tensor { shape, data, grad: None, requires_grad: false }
}
