//! Deterministic parameter initialization.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Fan-in-scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn fan_in_uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

/// Standard-normal sample via Box-Muller (keeps dependencies minimal and the
/// stream reproducible).
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.random::<f64>();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let u2: f64 = rng.random::<f64>();
        return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    }
}

/// Square orthogonal matrix via Gram-Schmidt on a random Gaussian matrix.
pub fn orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut q = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        // Draw a column and orthogonalize against the previous ones,
        // redrawing in the (measure-zero) degenerate case.
        loop {
            let mut col: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
            for k in 0..j {
                let dot: f64 = (0..n).map(|i| q[[i, k]] * col[i]).sum();
                for (i, c) in col.iter_mut().enumerate() {
                    *c -= dot * q[[i, k]];
                }
            }
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-8 {
                for (i, c) in col.iter().enumerate() {
                    q[[i, j]] = c / norm;
                }
                break;
            }
        }
    }
    q
}
