//! Bidirectional multi-layer LSTM.

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand_chacha::ChaCha8Rng;

use super::{init, join_path, ParamRef, Visit};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One direction of one LSTM layer.
///
/// Gates are packed in `i, f, g, o` row order inside the `(4H, ·)` weight
/// matrices and the single `(4H,)` bias. The forget-gate bias block starts
/// at 1 so memory is initially retained; input-to-hidden weights draw from
/// the fan-in uniform scheme and each hidden-to-hidden gate block is an
/// independent orthogonal matrix.
struct LstmCell {
    in_dim: usize,
    hidden: usize,
    reverse: bool,
    w_ih: Array2<f64>,
    w_hh: Array2<f64>,
    b: Array1<f64>,
    gw_ih: Array2<f64>,
    gw_hh: Array2<f64>,
    gb: Array1<f64>,
    cache: Option<CellCache>,
}

struct CellCache {
    /// Input in time-major layout, `(T*B, D)` with time-`t` rows contiguous.
    x2: Array2<f64>,
    batch: usize,
    t_len: usize,
    /// Post-activation gates per processing step, `(B, 4H)`.
    gates: Vec<Array2<f64>>,
    /// Cell state per processing step, `(B, H)`.
    c: Vec<Array2<f64>>,
    tanh_c: Vec<Array2<f64>>,
    /// Hidden output per processing step, `(B, H)`.
    h: Vec<Array2<f64>>,
}

impl LstmCell {
    fn new(in_dim: usize, hidden: usize, reverse: bool, rng: &mut ChaCha8Rng) -> Self {
        let w_ih = init::fan_in_uniform(4 * hidden, in_dim, in_dim, rng);
        let mut w_hh = Array2::zeros((4 * hidden, hidden));
        for gate in 0..4 {
            let block = init::orthogonal(hidden, rng);
            w_hh
                .slice_mut(s![gate * hidden..(gate + 1) * hidden, ..])
                .assign(&block);
        }
        let mut b = Array1::zeros(4 * hidden);
        b.slice_mut(s![hidden..2 * hidden]).fill(1.0);
        LstmCell {
            in_dim,
            hidden,
            reverse,
            w_ih,
            w_hh,
            b,
            gw_ih: Array2::zeros((4 * hidden, in_dim)),
            gw_hh: Array2::zeros((4 * hidden, hidden)),
            gb: Array1::zeros(4 * hidden),
            cache: None,
        }
    }

    /// Processing step `s` reads input time `t_len-1-s` when reversed.
    fn time_index(&self, s: usize, t_len: usize) -> usize {
        if self.reverse {
            t_len - 1 - s
        } else {
            s
        }
    }

    fn forward(&mut self, x: &Array3<f64>, train: bool) -> Array3<f64> {
        let (batch, t_len, d) = x.dim();
        assert_eq!(d, self.in_dim, "LSTM input dim mismatch");
        let h = self.hidden;

        // Time-major copy so each step's rows are contiguous, then one GEMM
        // for every step's input projection.
        let x2 = x
            .view()
            .permuted_axes([1, 0, 2])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((t_len * batch, d))
            .expect("shape");
        let xz = x2.dot(&self.w_ih.t());

        let mut out = Array3::zeros((batch, t_len, h));
        let mut h_prev = Array2::zeros((batch, h));
        let mut c_prev = Array2::zeros((batch, h));
        let mut gates_steps = Vec::with_capacity(if train { t_len } else { 0 });
        let mut c_steps = Vec::with_capacity(if train { t_len } else { 0 });
        let mut tanh_steps = Vec::with_capacity(if train { t_len } else { 0 });
        let mut h_steps = Vec::with_capacity(if train { t_len } else { 0 });

        for step in 0..t_len {
            let t = self.time_index(step, t_len);
            let mut z = xz.slice(s![t * batch..(t + 1) * batch, ..]).to_owned();
            z += &h_prev.dot(&self.w_hh.t());
            for mut row in z.rows_mut() {
                row += &self.b;
            }
            // In-place gate activations: sigmoid on i/f/o, tanh on g.
            z.slice_mut(s![.., 0..h]).mapv_inplace(sigmoid);
            z.slice_mut(s![.., h..2 * h]).mapv_inplace(sigmoid);
            z.slice_mut(s![.., 2 * h..3 * h]).mapv_inplace(f64::tanh);
            z.slice_mut(s![.., 3 * h..4 * h]).mapv_inplace(sigmoid);
            let gates = z;

            let i_g = gates.slice(s![.., 0..h]);
            let f_g = gates.slice(s![.., h..2 * h]);
            let g_g = gates.slice(s![.., 2 * h..3 * h]);
            let o_g = gates.slice(s![.., 3 * h..4 * h]);

            let c = &f_g * &c_prev + &i_g * &g_g;
            let tanh_c = c.mapv(f64::tanh);
            let h_t = &o_g * &tanh_c;
            out.slice_mut(s![.., t, ..]).assign(&h_t);

            if train {
                gates_steps.push(gates);
                c_steps.push(c.clone());
                tanh_steps.push(tanh_c);
                h_steps.push(h_t.clone());
            }
            h_prev = h_t;
            c_prev = c;
        }

        if train {
            self.cache = Some(CellCache {
                x2,
                batch,
                t_len,
                gates: gates_steps,
                c: c_steps,
                tanh_c: tanh_steps,
                h: h_steps,
            });
        }
        out
    }

    fn backward(&mut self, dy: &Array3<f64>) -> Array3<f64> {
        let cache = self
            .cache
            .as_ref()
            .expect("LstmCell::backward requires a preceding train-mode forward");
        let (batch, t_len, h) = (cache.batch, cache.t_len, self.hidden);
        assert_eq!(dy.dim(), (batch, t_len, h));

        let mut dz_all = Array2::zeros((t_len * batch, 4 * h));
        let mut dh_next = Array2::zeros((batch, h));
        let mut dc_next = Array2::zeros((batch, h));
        let zeros = Array2::zeros((batch, h));

        for step in (0..t_len).rev() {
            let t = self.time_index(step, t_len);
            let gates = &cache.gates[step];
            let i_g = gates.slice(s![.., 0..h]);
            let f_g = gates.slice(s![.., h..2 * h]);
            let g_g = gates.slice(s![.., 2 * h..3 * h]);
            let o_g = gates.slice(s![.., 3 * h..4 * h]);
            let tanh_c = &cache.tanh_c[step];
            let c_prev = if step == 0 { &zeros } else { &cache.c[step - 1] };
            let h_prev = if step == 0 { &zeros } else { &cache.h[step - 1] };

            let dh = &dy.slice(s![.., t, ..]) + &dh_next;
            let dc = &dh * &o_g * &tanh_c.mapv(|v| 1.0 - v * v) + &dc_next;

            let dz_o = &dh * tanh_c * &o_g * &o_g.mapv(|v| 1.0 - v);
            let dz_i = &dc * &g_g * &i_g * &i_g.mapv(|v| 1.0 - v);
            let dz_f = &dc * c_prev * &f_g * &f_g.mapv(|v| 1.0 - v);
            let dz_g = &dc * &i_g * &g_g.mapv(|v| 1.0 - v * v);
            dc_next = &dc * &f_g;

            let mut dz = Array2::zeros((batch, 4 * h));
            dz.slice_mut(s![.., 0..h]).assign(&dz_i);
            dz.slice_mut(s![.., h..2 * h]).assign(&dz_f);
            dz.slice_mut(s![.., 2 * h..3 * h]).assign(&dz_g);
            dz.slice_mut(s![.., 3 * h..4 * h]).assign(&dz_o);

            self.gw_hh += &dz.t().dot(h_prev);
            dh_next = dz.dot(&self.w_hh);
            dz_all.slice_mut(s![t * batch..(t + 1) * batch, ..]).assign(&dz);
        }

        self.gw_ih += &dz_all.t().dot(&cache.x2);
        self.gb += &dz_all.sum_axis(Axis(0));

        let dx2 = dz_all.dot(&self.w_ih);
        let dx_tm = dx2
            .into_shape_with_order((t_len, batch, self.in_dim))
            .expect("shape");
        dx_tm.permuted_axes([1, 0, 2]).as_standard_layout().into_owned()
    }

    fn param_count(&self) -> usize {
        self.w_ih.len() + self.w_hh.len() + self.b.len()
    }
}

impl Visit for LstmCell {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_>)) {
        f(ParamRef {
            path: join_path(prefix, "w_ih"),
            shape: self.w_ih.shape().to_vec(),
            data: self.w_ih.as_slice_mut().expect("contiguous"),
            grad: self.gw_ih.as_slice_mut().expect("contiguous"),
        });
        f(ParamRef {
            path: join_path(prefix, "w_hh"),
            shape: self.w_hh.shape().to_vec(),
            data: self.w_hh.as_slice_mut().expect("contiguous"),
            grad: self.gw_hh.as_slice_mut().expect("contiguous"),
        });
        f(ParamRef {
            path: join_path(prefix, "b"),
            shape: self.b.shape().to_vec(),
            data: self.b.as_slice_mut().expect("contiguous"),
            grad: self.gb.as_slice_mut().expect("contiguous"),
        });
    }
}

/// Stacked bidirectional LSTM. Each layer runs one forward and one backward
/// cell over the full sequence and concatenates their outputs, so the
/// per-frame output width is `2 * hidden`.
pub struct BiLstm {
    layers: Vec<(LstmCell, LstmCell)>,
    hidden: usize,
}

impl BiLstm {
    pub fn new(in_dim: usize, hidden: usize, n_layers: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(n_layers >= 1);
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let d = if l == 0 { in_dim } else { 2 * hidden };
            layers.push((
                LstmCell::new(d, hidden, false, rng),
                LstmCell::new(d, hidden, true, rng),
            ));
        }
        BiLstm { layers, hidden }
    }

    pub fn out_dim(&self) -> usize {
        2 * self.hidden
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|(f, b)| f.param_count() + b.param_count())
            .sum()
    }

    /// `(B, T, D)` to `(B, T, 2H)`; frame count is preserved.
    pub fn forward(&mut self, x: &Array3<f64>, train: bool) -> Array3<f64> {
        let mut cur = x.clone();
        for (fwd, bwd) in &mut self.layers {
            let (b, t, _) = cur.dim();
            let h = fwd.hidden;
            let out_f = fwd.forward(&cur, train);
            let out_b = bwd.forward(&cur, train);
            let mut merged = Array3::zeros((b, t, 2 * h));
            merged.slice_mut(s![.., .., 0..h]).assign(&out_f);
            merged.slice_mut(s![.., .., h..2 * h]).assign(&out_b);
            cur = merged;
        }
        cur
    }

    pub fn backward(&mut self, dy: &Array3<f64>) -> Array3<f64> {
        let mut cur = dy.clone();
        for (fwd, bwd) in self.layers.iter_mut().rev() {
            let h = fwd.hidden;
            let dy_f = cur.slice(s![.., .., 0..h]).to_owned();
            let dy_b = cur.slice(s![.., .., h..2 * h]).to_owned();
            let mut dx = fwd.backward(&dy_f);
            dx += &bwd.backward(&dy_b);
            cur = dx;
        }
        cur
    }
}

impl Visit for BiLstm {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_>)) {
        for (l, (fwd, bwd)) in self.layers.iter_mut().enumerate() {
            fwd.visit_params(&join_path(prefix, &format!("l{l}.fwd")), f);
            bwd.visit_params(&join_path(prefix, &format!("l{l}.bwd")), f);
        }
    }
}
