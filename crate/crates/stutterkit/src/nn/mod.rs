//! Hand-rolled neural-network building blocks on `f64` tensors.
//!
//! Layers own their parameters, gradients, and forward caches; backward
//! passes consume the cache of the immediately preceding forward. Parameters
//! are reachable through a visitor keyed by canonical dotted path strings
//! ("enc0.tdnn1.w", "disfluent.fc2.bn.gamma", ...) which checkpointing, the
//! Adam optimizer, and freeze masks all share.

pub mod adam;
pub mod batchnorm;
pub mod init;
pub mod linear;
pub mod lstm;
pub mod statpool;
pub mod tdnn;

#[cfg(test)]
pub mod gradcheck;

pub use adam::{Adam, AdamConfig, AdamState};
pub use batchnorm::BatchNorm;
pub use linear::Linear;
pub use lstm::BiLstm;
pub use statpool::StatPool;
pub use tdnn::TdnnLayer;

/// Whether a forward pass updates batch statistics and samples dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Mutable view of one trainable parameter tensor and its gradient.
pub struct ParamRef<'a> {
    pub path: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
    pub grad: &'a mut [f64],
}

/// Mutable view of one non-trainable buffer (e.g. batch-norm running stats).
pub struct BufRef<'a> {
    pub path: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

/// Parameter/buffer traversal. Visit order is fixed by construction, so two
/// models built from the same config enumerate identical paths.
pub trait Visit {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_>));
    fn visit_buffers(&mut self, _prefix: &str, _f: &mut dyn FnMut(BufRef<'_>)) {}

    /// Zero every gradient slot.
    fn zero_grads(&mut self) {
        self.visit_params("", &mut |p| {
            for g in p.grad.iter_mut() {
                *g = 0.0;
            }
        });
    }
}

/// Join a visitor prefix with a component name.
pub fn join_path(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// ReLU forward on a flat slice, returning the activation mask for backward.
pub fn relu_forward(x: &mut [f64]) -> Vec<bool> {
    let mut mask = Vec::with_capacity(x.len());
    for v in x.iter_mut() {
        let active = *v > 0.0;
        mask.push(active);
        if !active {
            *v = 0.0;
        }
    }
    mask
}

/// ReLU backward: zero gradients where the activation was clamped.
pub fn relu_backward(dy: &mut [f64], mask: &[bool]) {
    debug_assert_eq!(dy.len(), mask.len());
    for (g, &active) in dy.iter_mut().zip(mask) {
        if !active {
            *g = 0.0;
        }
    }
}

/// Inverted dropout: scales kept activations by 1/(1-p) so evaluation needs
/// no rescaling. Returns the multiplicative mask used, for backward.
pub fn dropout_forward(
    x: &mut [f64],
    p: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<f64> {
    use rand::Rng;
    debug_assert!((0.0..1.0).contains(&p));
    if p == 0.0 {
        return vec![1.0; x.len()];
    }
    let keep = 1.0 - p;
    let mut mask = Vec::with_capacity(x.len());
    for v in x.iter_mut() {
        let m = if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        };
        mask.push(m);
        *v *= m;
    }
    mask
}

/// Dropout backward: apply the same multiplicative mask.
pub fn dropout_backward(dy: &mut [f64], mask: &[f64]) {
    debug_assert_eq!(dy.len(), mask.len());
    for (g, m) in dy.iter_mut().zip(mask) {
        *g *= m;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn relu_round_trip_masks_negatives() {
        let mut x = vec![-1.0, 0.0, 2.0, -0.5, 3.0];
        let mask = relu_forward(&mut x);
        assert_eq!(x, vec![0.0, 0.0, 2.0, 0.0, 3.0]);
        let mut dy = vec![1.0; 5];
        relu_backward(&mut dy, &mask);
        assert_eq!(dy, vec![0.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn dropout_scales_kept_units_and_is_deterministic() {
        let mut rng = rng_for(3, "dropout", 0);
        let mut x = vec![1.0; 1000];
        let mask = dropout_forward(&mut x, 0.3, &mut rng);
        let kept = mask.iter().filter(|&&m| m > 0.0).count();
        assert!((kept as f64 / 1000.0 - 0.7).abs() < 0.06);
        for (v, m) in x.iter().zip(&mask) {
            assert_eq!(v, m); // input was all-ones
        }
        let mut rng2 = rng_for(3, "dropout", 0);
        let mut x2 = vec![1.0; 1000];
        let mask2 = dropout_forward(&mut x2, 0.3, &mut rng2);
        assert_eq!(mask, mask2);
    }

    #[test]
    fn zero_probability_dropout_is_identity() {
        let mut rng = rng_for(3, "dropout", 1);
        let mut x = vec![0.5, -0.25, 2.0];
        let mask = dropout_forward(&mut x, 0.0, &mut rng);
        assert_eq!(x, vec![0.5, -0.25, 2.0]);
        assert!(mask.iter().all(|&m| m == 1.0));
    }
}
