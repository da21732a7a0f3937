//! Statistics pooling: collapse a frame sequence to mean-and-std vectors.

use ndarray::{Array2, Array3, Axis};

/// Floor applied to the standard deviation in the backward pass so constant
/// channels do not divide by zero.
const STD_FLOOR: f64 = 1e-12;

/// Pools `(B, T, D)` frame sequences into `(B, 2D)` utterance vectors: the
/// per-channel mean over time concatenated with the per-channel population
/// standard deviation (`sqrt(sum((x - mean)^2) / T)`).
pub struct StatPool {
    cache: Option<Cache>,
}

struct Cache {
    x: Array3<f64>,
    mean: Array2<f64>,
    std: Array2<f64>,
}

impl Default for StatPool {
    fn default() -> Self {
        Self::new()
    }
}

impl StatPool {
    pub fn new() -> Self {
        StatPool { cache: None }
    }

    /// Forward pass; `train` controls whether activations are cached for
    /// backward.
    pub fn forward(&mut self, x: &Array3<f64>, train: bool) -> Array2<f64> {
        let (b, t, d) = x.dim();
        assert!(t > 0, "cannot pool over zero frames");
        let t_f = t as f64;
        let mean = x.sum_axis(Axis(1)) / t_f;
        let mut var = Array2::zeros((b, d));
        for bi in 0..b {
            for ti in 0..t {
                for di in 0..d {
                    let c = x[[bi, ti, di]] - mean[[bi, di]];
                    var[[bi, di]] += c * c;
                }
            }
        }
        var /= t_f;
        let std = var.mapv(f64::sqrt);
        let mut y = Array2::zeros((b, 2 * d));
        y.slice_mut(ndarray::s![.., ..d]).assign(&mean);
        y.slice_mut(ndarray::s![.., d..]).assign(&std);
        if train {
            self.cache = Some(Cache {
                x: x.clone(),
                mean,
                std,
            });
        }
        y
    }

    /// Backward over `(B, 2D)` upstream gradients; returns `(B, T, D)`.
    pub fn backward(&mut self, dy: &Array2<f64>) -> Array3<f64> {
        let cache = self
            .cache
            .as_ref()
            .expect("StatPool::backward requires a preceding train-mode forward");
        let (b, t, d) = cache.x.dim();
        assert_eq!(dy.dim(), (b, 2 * d));
        let t_f = t as f64;
        let mut dx = Array3::zeros((b, t, d));
        for bi in 0..b {
            for di in 0..d {
                let d_mean = dy[[bi, di]];
                let d_std = dy[[bi, d + di]];
                let sigma = cache.std[[bi, di]].max(STD_FLOOR);
                for ti in 0..t {
                    let centered = cache.x[[bi, ti, di]] - cache.mean[[bi, di]];
                    dx[[bi, ti, di]] = d_mean / t_f + d_std * centered / (t_f * sigma);
                }
            }
        }
        dx
    }
}
