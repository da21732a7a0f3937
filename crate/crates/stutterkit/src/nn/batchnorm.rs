//! 1-D batch normalization over the feature dimension.

use ndarray::{Array1, Array2, Axis};

use super::{join_path, BufRef, Mode, ParamRef, Visit};

const EPS: f64 = 1e-5;
const MOMENTUM: f64 = 0.1;

/// Normalizes each feature column over all rows of a (N, F) batch. For
/// sequence inputs the caller flattens (batch, time) into N so statistics
/// pool over both, as is conventional for TDNN stacks.
///
/// Running statistics use the biased batch variance and update as
/// `running = (1 - momentum) * running + momentum * batch`.
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub g_gamma: Array1<f64>,
    pub g_beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    cache: Option<Cache>,
}

enum Cache {
    /// Batch statistics were used; backward couples the whole batch.
    Train {
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    /// Running statistics were used; they are constants, so backward is a
    /// plain per-element scale. Needed when gradients flow through a frozen
    /// (eval-mode) group into trainable layers beneath it.
    Eval {
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            g_gamma: Array1::zeros(dim),
            g_beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
            cache: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    /// Forward pass. `Train` normalizes by batch statistics and updates the
    /// running buffers; `Eval` normalizes by the running buffers and leaves
    /// them untouched.
    pub fn forward(&mut self, x: &Array2<f64>, mode: Mode) -> Array2<f64> {
        debug_assert_eq!(x.ncols(), self.dim());
        match mode {
            Mode::Train => {
                let n = x.nrows() as f64;
                let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
                let var = x.map_axis(Axis(0), |col| {
                    let m = col.sum() / n;
                    col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n
                });
                let inv_std = var.mapv(|v| 1.0 / (v + EPS).sqrt());
                let mut xhat = x.clone();
                for mut row in xhat.rows_mut() {
                    row -= &mean;
                    row *= &inv_std;
                }
                let y = {
                    let mut y = xhat.clone();
                    for mut row in y.rows_mut() {
                        row *= &self.gamma;
                        row += &self.beta;
                    }
                    y
                };
                self.running_mean = &self.running_mean * (1.0 - MOMENTUM) + &mean * MOMENTUM;
                self.running_var = &self.running_var * (1.0 - MOMENTUM) + &var * MOMENTUM;
                self.cache = Some(Cache::Train { xhat, inv_std });
                y
            }
            Mode::Eval => {
                let inv_std = self.running_var.mapv(|v| 1.0 / (v + EPS).sqrt());
                let mut xhat = x.clone();
                for mut row in xhat.rows_mut() {
                    row -= &self.running_mean;
                    row *= &inv_std;
                }
                let mut y = xhat.clone();
                for mut row in y.rows_mut() {
                    row *= &self.gamma;
                    row += &self.beta;
                }
                self.cache = Some(Cache::Eval { xhat, inv_std });
                y
            }
        }
    }

    /// Backward through the most recent forward (either mode).
    pub fn backward(&mut self, dy: &Array2<f64>) -> Array2<f64> {
        let cache = self
            .cache
            .as_ref()
            .expect("BatchNorm::backward requires a preceding forward");
        match cache {
            Cache::Train { xhat, inv_std } => {
                let n = dy.nrows() as f64;
                let sum_dy = dy.sum_axis(Axis(0));
                let sum_dy_xhat = (dy * xhat).sum_axis(Axis(0));
                self.g_gamma += &sum_dy_xhat;
                self.g_beta += &sum_dy;

                // dx = gamma * inv_std / N * (N*dy - sum(dy) - xhat * sum(dy*xhat))
                let mut dx = dy * n;
                for mut row in dx.rows_mut() {
                    row -= &sum_dy;
                }
                dx -= &(xhat * &sum_dy_xhat);
                for mut row in dx.rows_mut() {
                    row *= &(&self.gamma * inv_std);
                }
                dx / n
            }
            Cache::Eval { xhat, inv_std } => {
                self.g_gamma += &(dy * xhat).sum_axis(Axis(0));
                self.g_beta += &dy.sum_axis(Axis(0));
                let mut dx = dy.clone();
                for mut row in dx.rows_mut() {
                    row *= &(&self.gamma * inv_std);
                }
                dx
            }
        }
    }
}

impl Visit for BatchNorm {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_>)) {
        f(ParamRef {
            path: join_path(prefix, "gamma"),
            shape: self.gamma.shape().to_vec(),
            data: self.gamma.as_slice_mut().expect("contiguous"),
            grad: self.g_gamma.as_slice_mut().expect("contiguous"),
        });
        f(ParamRef {
            path: join_path(prefix, "beta"),
            shape: self.beta.shape().to_vec(),
            data: self.beta.as_slice_mut().expect("contiguous"),
            grad: self.g_beta.as_slice_mut().expect("contiguous"),
        });
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(BufRef<'_>)) {
        f(BufRef {
            path: join_path(prefix, "running_mean"),
            shape: self.running_mean.shape().to_vec(),
            data: self.running_mean.as_slice_mut().expect("contiguous"),
        });
        f(BufRef {
            path: join_path(prefix, "running_var"),
            shape: self.running_var.shape().to_vec(),
            data: self.running_var.as_slice_mut().expect("contiguous"),
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand::Rng;

    #[test]
    fn train_mode_normalizes_batch_columns() {
        let mut bn = BatchNorm::new(3);
        let mut rng = rng_for(1, "bn", 0);
        let x = Array2::from_shape_fn((32, 3), |_| rng.random_range(-2.0..5.0));
        let y = bn.forward(&x, Mode::Train);
        for col in y.columns() {
            let mean = col.mean().unwrap();
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3); // eps slightly shrinks variance
        }
    }

    #[test]
    fn eval_mode_uses_running_stats_and_keeps_them_fixed() {
        let mut bn = BatchNorm::new(2);
        let mut rng = rng_for(2, "bn", 0);
        for _ in 0..50 {
            let x = Array2::from_shape_fn((16, 2), |_| rng.random_range(0.0..4.0));
            bn.forward(&x, Mode::Train);
        }
        let rm = bn.running_mean.clone();
        let rv = bn.running_var.clone();
        let x = Array2::from_shape_fn((4, 2), |_| rng.random_range(0.0..4.0));
        let y = bn.forward(&x, Mode::Eval);
        assert_eq!(bn.running_mean, rm);
        assert_eq!(bn.running_var, rv);
        for i in 0..4 {
            for j in 0..2 {
                let want = (x[[i, j]] - rm[j]) / (rv[j] + EPS).sqrt();
                assert!((y[[i, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eval_mode_backward_is_a_constant_scale() {
        let mut bn = BatchNorm::new(2);
        let mut rng = rng_for(4, "bn", 0);
        for _ in 0..20 {
            let x = Array2::from_shape_fn((8, 2), |_| rng.random_range(-1.0..3.0));
            bn.forward(&x, Mode::Train);
        }
        bn.gamma = Array1::from_vec(vec![1.7, -0.6]);
        let x = Array2::from_shape_fn((4, 2), |_| rng.random_range(-1.0..3.0));
        let proj = Array2::from_shape_fn((4, 2), |_| rng.random_range(-1.0..1.0));
        bn.forward(&x, Mode::Eval);
        let dx = bn.backward(&proj);
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..2 {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fp = (bn.forward(&xp, Mode::Eval) * &proj).sum();
                let fm = (bn.forward(&xm, Mode::Eval) * &proj).sum();
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - dx[[i, j]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        use crate::nn::gradcheck::check_param_grads;
        let mut bn = BatchNorm::new(3);
        let mut rng = rng_for(3, "bn", 0);
        // Non-trivial gamma/beta so gradients exercise both.
        bn.gamma = Array1::from_vec(vec![1.3, 0.7, -0.4]);
        bn.beta = Array1::from_vec(vec![0.2, -0.1, 0.5]);
        let x = Array2::from_shape_fn((6, 3), |_| rng.random_range(-1.0..1.0));
        let proj = Array2::from_shape_fn((6, 3), |_| rng.random_range(-1.0..1.0));

        bn.zero_grads();
        bn.forward(&x, Mode::Train);
        let dx = bn.backward(&proj);

        // Parameter grads: loss re-evaluated in train mode (running stats
        // mutate but do not affect train-mode output).
        check_param_grads(
            &mut bn,
            |l| (l.forward(&x, Mode::Train) * &proj).sum(),
            1e-6,
            1e-6,
        );

        // Input grads.
        let mut max_err = 0.0f64;
        for i in 0..6 {
            for j in 0..3 {
                let h = 1e-6;
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fp = (bn.forward(&xp, Mode::Train) * &proj).sum();
                let fm = (bn.forward(&xm, Mode::Train) * &proj).sum();
                let fd = (fp - fm) / (2.0 * h);
                max_err = max_err.max((fd - dx[[i, j]]).abs());
            }
        }
        assert!(max_err < 1e-5, "input gradient error {max_err}");
    }
}
