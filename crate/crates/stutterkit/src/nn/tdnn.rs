//! Time-delay (dilated 1-D convolution) layers.

use ndarray::{Array1, Array2, Array3, Axis};
use rand_chacha::ChaCha8Rng;

use super::{init, join_path, ParamRef, Visit};

/// A TDNN layer splices frames at fixed temporal offsets ("taps") and applies
/// an affine map to the concatenated context. With taps `{-2, 0, +2}` the
/// output at frame `t` sees input frames `t-2`, `t`, `t+2`.
///
/// Only fully valid output frames are produced: an input of `T` frames yields
/// `T - (max_tap - min_tap)` output frames, so the layer never pads.
pub struct TdnnLayer {
    taps: Vec<i64>,
    in_dim: usize,
    out_dim: usize,
    /// (out_dim, in_dim * n_taps); tap blocks are laid out in ascending
    /// tap order.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub gw: Array2<f64>,
    pub gb: Array1<f64>,
    cache_x: Option<Array3<f64>>,
}

impl TdnnLayer {
    /// `taps` must be non-empty, strictly ascending.
    pub fn new(in_dim: usize, out_dim: usize, taps: &[i64], rng: &mut ChaCha8Rng) -> Self {
        assert!(!taps.is_empty(), "TDNN layer needs at least one tap");
        assert!(
            taps.windows(2).all(|w| w[0] < w[1]),
            "TDNN taps must be strictly ascending, got {taps:?}"
        );
        let cols = in_dim * taps.len();
        TdnnLayer {
            taps: taps.to_vec(),
            in_dim,
            out_dim,
            w: init::fan_in_uniform(out_dim, cols, cols, rng),
            b: Array1::zeros(out_dim),
            gw: Array2::zeros((out_dim, cols)),
            gb: Array1::zeros(out_dim),
            cache_x: None,
        }
    }

    pub fn taps(&self) -> &[i64] {
        &self.taps
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn min_tap(&self) -> i64 {
        self.taps[0]
    }

    pub fn max_tap(&self) -> i64 {
        *self.taps.last().unwrap()
    }

    /// Frames consumed beyond one output frame: `max_tap - min_tap`.
    pub fn span(&self) -> usize {
        (self.max_tap() - self.min_tap()) as usize
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    /// Output frame count for an input of `t` frames, or `None` if the input
    /// is too short to produce any valid frame.
    pub fn out_frames(&self, t: usize) -> Option<usize> {
        t.checked_sub(self.span()).filter(|&n| n > 0)
    }

    fn gather_context(&self, x: &Array3<f64>, t_out: usize) -> Array2<f64> {
        let (b, _, d) = x.dim();
        let k = self.taps.len();
        let min = self.min_tap();
        let mut ctx = Array2::zeros((b * t_out, d * k));
        for bi in 0..b {
            for t in 0..t_out {
                let mut row = ctx.row_mut(bi * t_out + t);
                for (ki, &tap) in self.taps.iter().enumerate() {
                    let src = (t as i64 + tap - min) as usize;
                    row.slice_mut(ndarray::s![ki * d..(ki + 1) * d])
                        .assign(&x.slice(ndarray::s![bi, src, ..]));
                }
            }
        }
        ctx
    }

    /// Forward over a batch `(B, T, in_dim)` to `(B, T', out_dim)`.
    pub fn forward(&mut self, x: &Array3<f64>, train: bool) -> Array3<f64> {
        let (b, t, d) = x.dim();
        assert_eq!(d, self.in_dim, "TDNN input dim mismatch");
        let t_out = self
            .out_frames(t)
            .unwrap_or_else(|| panic!("input of {t} frames too short for span {}", self.span()));
        let ctx = self.gather_context(x, t_out);
        let mut y2 = ctx.dot(&self.w.t());
        for mut row in y2.rows_mut() {
            row += &self.b;
        }
        if train {
            self.cache_x = Some(x.clone());
        }
        y2.into_shape_with_order((b, t_out, self.out_dim))
            .expect("shape")
    }

    /// Backward over `(B, T', out_dim)` upstream gradients; returns
    /// `(B, T, in_dim)` input gradients and accumulates parameter gradients.
    pub fn backward(&mut self, dy: &Array3<f64>) -> Array3<f64> {
        let x = self
            .cache_x
            .as_ref()
            .expect("TdnnLayer::backward requires a preceding train-mode forward");
        let (b, t, d) = x.dim();
        let (bd, t_out, od) = dy.dim();
        assert_eq!((bd, od), (b, self.out_dim));
        let dy2 = dy
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((b * t_out, od))
            .expect("shape");
        let ctx = self.gather_context(x, t_out);
        self.gw += &dy2.t().dot(&ctx);
        self.gb += &dy2.sum_axis(Axis(0));

        let dctx = dy2.dot(&self.w);
        let min = self.min_tap();
        let mut dx = Array3::zeros((b, t, d));
        for bi in 0..b {
            for ti in 0..t_out {
                let row = dctx.row(bi * t_out + ti);
                for (ki, &tap) in self.taps.iter().enumerate() {
                    let dst = (ti as i64 + tap - min) as usize;
                    let mut slot = dx.slice_mut(ndarray::s![bi, dst, ..]);
                    slot += &row.slice(ndarray::s![ki * d..(ki + 1) * d]);
                }
            }
        }
        dx
    }
}

impl Visit for TdnnLayer {
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
    use crate::rng::rng_for;
    use rand::Rng;

    #[test]
    fn output_length_follows_tap_span() {
        let mut rng = rng_for(1, "tdnn", 0);
        let layer = TdnnLayer::new(4, 3, &[-2, 0, 2], &mut rng);
        assert_eq!(layer.span(), 4);
        assert_eq!(layer.out_frames(10), Some(6));
        assert_eq!(layer.out_frames(5), Some(1));
        assert_eq!(layer.out_frames(4), None);

        let single = TdnnLayer::new(4, 3, &[0], &mut rng);
        assert_eq!(single.out_frames(7), Some(7));
    }

    #[test]
    fn identity_weights_splice_expected_frames() {
        let mut rng = rng_for(2, "tdnn", 0);
        let mut layer = TdnnLayer::new(1, 2, &[-1, 1], &mut rng);
        // Row 0 reads the tap at -1, row 1 the tap at +1.
        layer.w = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        layer.b = Array1::zeros(2);
        let x = Array3::from_shape_vec((1, 5, 1), vec![10.0, 20.0, 30.0, 40.0, 50.0]).unwrap();
        let y = layer.forward(&x, false);
        assert_eq!(y.dim(), (1, 3, 2));
        // Output frame t sees input frames t and t+2.
        assert_eq!(y[[0, 0, 0]], 10.0);
        assert_eq!(y[[0, 0, 1]], 30.0);
        assert_eq!(y[[0, 2, 0]], 30.0);
        assert_eq!(y[[0, 2, 1]], 50.0);
    }

    #[test]
    #[should_panic(expected = "too short")]
    fn too_short_input_panics() {
        let mut rng = rng_for(3, "tdnn", 0);
        let mut layer = TdnnLayer::new(2, 2, &[-3, 0, 3], &mut rng);
        let x = Array3::zeros((1, 6, 2));
        layer.forward(&x, false);
    }

    #[test]
    fn gradients_match_finite_differences() {
        use crate::nn::gradcheck::check_param_grads;
        let mut rng = rng_for(4, "tdnn", 0);
        let mut layer = TdnnLayer::new(3, 2, &[-1, 0, 2], &mut rng);
        let x = Array3::from_shape_fn((2, 7, 3), |_| rng.random_range(-1.0..1.0));
        let proj = Array3::from_shape_fn((2, 4, 2), |_| rng.random_range(-1.0..1.0));

        layer.zero_grads();
        layer.forward(&x, true);
        let dx = layer.backward(&proj);

        check_param_grads(
            &mut layer,
            |l| (l.forward(&x, false) * &proj).sum(),
            1e-6,
            1e-7,
        );

        let mut max_err = 0.0f64;
        for bi in 0..2 {
            for t in 0..7 {
                for d in 0..3 {
                    let h = 1e-6;
                    let mut xp = x.clone();
                    xp[[bi, t, d]] += h;
                    let mut xm = x.clone();
                    xm[[bi, t, d]] -= h;
                    let mut probe = |xx: &Array3<f64>| (layer.forward(xx, false) * &proj).sum();
                    let fd = (probe(&xp) - probe(&xm)) / (2.0 * h);
                    max_err = max_err.max((fd - dx[[bi, t, d]]).abs());
                }
            }
        }
        assert!(max_err < 1e-7, "input gradient error {max_err}");
    }
}
