//! Fully-connected layer.

use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;

use super::{init, join_path, ParamRef, Visit};

/// y = x W^T + b with W of shape (out, in).
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub gw: Array2<f64>,
    pub gb: Array1<f64>,
    cache_x: Option<Array2<f64>>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: init::fan_in_uniform(out_dim, in_dim, in_dim, rng),
            b: Array1::zeros(out_dim),
            gw: Array2::zeros((out_dim, in_dim)),
            gb: Array1::zeros(out_dim),
            cache_x: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    /// Forward over a (N, in) batch. Caches the input when `train` so a
    /// following [`Linear::backward`] can form weight gradients.
    pub fn forward(&mut self, x: &Array2<f64>, train: bool) -> Array2<f64> {
        debug_assert_eq!(x.ncols(), self.in_dim());
        let y = x.dot(&self.w.t()) + &self.b;
        self.cache_x = train.then(|| x.clone());
        y
    }

    /// Backward from dL/dy; accumulates into gw/gb and returns dL/dx.
    pub fn backward(&mut self, dy: &Array2<f64>) -> Array2<f64> {
        let x = self
            .cache_x
            .as_ref()
            .expect("Linear::backward requires a preceding train-mode forward");
        self.gw += &dy.t().dot(x);
        self.gb += &dy.sum_axis(Axis(0));
        dy.dot(&self.w)
    }
}

impl Visit for Linear {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_>)) {
        f(ParamRef {
            path: join_path(prefix, "w"),
            shape: self.w.shape().to_vec(),
            data: self.w.as_slice_mut().expect("contiguous"),
            grad: self.gw.as_slice_mut().expect("contiguous"),
        });
        f(ParamRef {
            path: join_path(prefix, "b"),
            shape: self.b.shape().to_vec(),
            data: self.b.as_slice_mut().expect("contiguous"),
            grad: self.gb.as_slice_mut().expect("contiguous"),
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_param_grads;
    use crate::rng::rng_for;
    use ndarray::Array2;
    use rand::Rng;

    #[test]
    fn forward_matches_manual_product() {
        let mut rng = rng_for(1, "linear", 0);
        let mut layer = Linear::new(3, 2, &mut rng);
        let x = Array2::from_shape_vec((1, 3), vec![1.0, 2.0, -1.0]).unwrap();
        let y = layer.forward(&x, false);
        for o in 0..2 {
            let want: f64 =
                (0..3).map(|i| layer.w[[o, i]] * x[[0, i]]).sum::<f64>() + layer.b[o];
            assert!((y[[0, o]] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rng_for(2, "linear", 0);
        let mut layer = Linear::new(4, 3, &mut rng);
        let x = Array2::from_shape_fn((5, 4), |_| rng.random_range(-1.0..1.0));
        let proj = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
        // Loss = sum(forward(x) * proj).
        let analytic_dx = {
            layer.zero_grads();
            layer.forward(&x, true);
            layer.backward(&proj)
        };
        check_param_grads(&mut layer, |l| (l.forward(&x, false) * &proj).sum(), 1e-6, 1e-6);
        // Finite-difference the input as well.
        let mut max_err = 0.0f64;
        for i in 0..5 {
            for j in 0..4 {
                let mut xp = x.clone();
                xp[[i, j]] += 1e-6;
                let mut xm = x.clone();
                xm[[i, j]] -= 1e-6;
                let fp = (layer.forward(&xp, false) * &proj).sum();
                let fm = (layer.forward(&xm, false) * &proj).sum();
                let fd = (fp - fm) / 2e-6;
                max_err = max_err.max((fd - analytic_dx[[i, j]]).abs());
            }
        }
        assert!(max_err < 1e-6, "input gradient error {max_err}");
    }
}
