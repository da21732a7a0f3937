//! Weighted cross-entropy, the joint two-branch objective, and softmax.

use ndarray::Array2;

use crate::{Error, Result};

/// Probabilities are clamped here before the log so a confident-but-wrong
/// head can never produce a NaN loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// Loss of one mini-batch.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    /// Weight-normalized value: `sum_i w_{y_i} * (-log p_i[y_i]) / sum_i w_{y_i}`.
    pub value: f64,
    /// Raw unweighted `-log p_i[y_i]` per sample.
    pub per_sample: Vec<f64>,
    /// `sum_i w_{y_i}`.
    pub weight_normalizer: f64,
    /// True when any true-class probability hit [`PROB_FLOOR`].
    pub clamped: bool,
}

/// Row-wise softmax with max subtraction for overflow safety.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn check_inputs(probs: &Array2<f64>, labels: &[usize], weights: &[f64]) -> Result<()> {
    let (n, c) = probs.dim();
    if n == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if weights.len() != c {
        return Err(Error::Shape(format!(
            "{} class weights for {c} classes",
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0)) {
        return Err(Error::Numeric(format!("non-positive class weight {w}")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Data(format!("label index {bad} out of range for {c} classes")));
    }
    for (i, row) in probs.rows().into_iter().enumerate() {
        let sum = row.sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Numeric(format!(
                "row {i} is not a distribution (sums to {sum})"
            )));
        }
    }
    Ok(())
}

/// Weighted cross-entropy over one batch of class distributions:
/// `sum_i w_{y_i} * (-log p_i[y_i]) / sum_i w_{y_i}`.
///
/// With all weights equal this reduces to the plain mean cross-entropy, so
/// CE is the `weights = 1` special case.
pub fn wce(probs: &Array2<f64>, labels: &[usize], weights: &[f64]) -> Result<BatchLoss> {
    check_inputs(probs, labels, weights)?;
    let mut num = 0.0;
    let mut den = 0.0;
    let mut per_sample = Vec::with_capacity(labels.len());
    let mut clamped = false;
    for (i, &y) in labels.iter().enumerate() {
        let p = probs[[i, y]];
        if p < PROB_FLOOR {
            clamped = true;
        }
        let nll = -p.max(PROB_FLOOR).ln();
        per_sample.push(nll);
        num += weights[y] * nll;
        den += weights[y];
    }
    Ok(BatchLoss {
        value: num / den,
        per_sample,
        weight_normalizer: den,
        clamped,
    })
}

/// WCE evaluated from pre-softmax scores, returning the loss together with
/// its gradient w.r.t. the logits:
/// `dlogits_i = (w_{y_i} / sum_j w_{y_j}) * (softmax(z_i) - onehot(y_i))`.
pub fn wce_from_logits(
    logits: &Array2<f64>,
    labels: &[usize],
    weights: &[f64],
) -> Result<(BatchLoss, Array2<f64>)> {
    let probs = softmax(logits);
    let loss = wce(&probs, labels, weights)?;
    let mut dlogits = probs;
    for (i, &y) in labels.iter().enumerate() {
        dlogits[[i, y]] -= 1.0;
        let scale = weights[y] / loss.weight_normalizer;
        let mut row = dlogits.row_mut(i);
        row.mapv_inplace(|v| v * scale);
    }
    Ok((loss, dlogits))
}

/// Joint two-branch objective: the plain sum of the branch losses.
pub fn joint_loss(fluent_loss: f64, disfluent_loss: f64) -> f64 {
    fluent_loss + disfluent_loss
}

/// Uniform weight vector for plain-CE mode.
pub fn uniform_weights(n_classes: usize) -> Vec<f64> {
    vec![1.0; n_classes]
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Axis;
    use crate::rng::rng_for;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_probs(n: usize, c: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng_for(seed, "loss", 0);
        let logits = Array2::from_shape_fn((n, c), |_| rng.random_range(-3.0..3.0));
        softmax(&logits)
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let logits =
            Array2::from_shape_vec((2, 3), vec![1000.0, 999.0, -1000.0, 0.0, 0.0, 0.0]).unwrap();
        let p = softmax(&logits);
        for row in p.rows() {
            assert!(((row.sum()) - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| *v >= 0.0 && v.is_finite()));
        }
        assert!((p[[1, 0]] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn hand_arithmetic_example() {
        // Two samples, weights (1, 3), true-class probs (e^-1, e^-2):
        // loss = (1*1 + 3*2) / 4 = 1.75.
        let e1 = (-1.0f64).exp();
        let e2 = (-2.0f64).exp();
        let probs =
            Array2::from_shape_vec((2, 2), vec![e1, 1.0 - e1, 1.0 - e2, e2]).unwrap();
        let loss = wce(&probs, &[0, 1], &[1.0, 3.0]).unwrap();
        assert!((loss.value - 1.75).abs() < 1e-12);
        assert_eq!(loss.per_sample.len(), 2);
        assert!((loss.per_sample[0] - 1.0).abs() < 1e-12);
        assert!((loss.per_sample[1] - 2.0).abs() < 1e-12);
        assert!((loss.weight_normalizer - 4.0).abs() < 1e-12);
    }

    #[test]
    fn single_sample_ignores_its_weight() {
        let probs = Array2::from_shape_vec((1, 3), vec![0.2, 0.5, 0.3]).unwrap();
        let a = wce(&probs, &[1], &[1.0, 7.0, 1.0]).unwrap();
        let b = wce(&probs, &[1], &[1.0, 0.001, 1.0]).unwrap();
        assert!((a.value - (-0.5f64.ln())).abs() < 1e-12);
        assert!((a.value - b.value).abs() < 1e-12);
    }

    #[test]
    fn uniform_weights_reduce_to_mean_ce() {
        let probs = random_probs(16, 5, 1);
        let labels: Vec<usize> = (0..16).map(|i| i % 5).collect();
        let weighted = wce(&probs, &labels, &uniform_weights(5)).unwrap();
        let mean_ce = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -probs[[i, y]].ln())
            .sum::<f64>()
            / 16.0;
        assert!((weighted.value - mean_ce).abs() < 1e-9);
    }

    #[test]
    fn zero_probability_clamps_instead_of_nan() {
        let probs = Array2::from_shape_vec((1, 2), vec![0.0, 1.0]).unwrap();
        let loss = wce(&probs, &[0], &[1.0, 1.0]).unwrap();
        assert!(loss.clamped);
        assert!(loss.value.is_finite());
        assert!((loss.value - (-PROB_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn perfect_predictions_reach_zero() {
        let probs = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let loss = wce(&probs, &[0, 1], &[2.0, 5.0]).unwrap();
        assert_eq!(loss.value, 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let probs = Array2::from_shape_vec((1, 2), vec![0.5, 0.5]).unwrap();
        assert!(wce(&probs, &[0, 1], &[1.0, 1.0]).is_err()); // label count
        assert!(wce(&probs, &[2], &[1.0, 1.0]).is_err()); // label range
        assert!(wce(&probs, &[0], &[1.0]).is_err()); // weight count
        assert!(wce(&probs, &[0], &[1.0, -1.0]).is_err()); // weight sign
        let bad = Array2::from_shape_vec((1, 2), vec![0.5, 0.6]).unwrap();
        assert!(wce(&bad, &[0], &[1.0, 1.0]).is_err()); // not a distribution
        let empty = Array2::zeros((0, 2));
        assert!(wce(&empty, &[], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        let mut rng = rng_for(2, "loss", 1);
        let logits = Array2::from_shape_fn((4, 5), |_| rng.random_range(-2.0..2.0));
        let labels = vec![0, 2, 4, 2];
        let weights = vec![0.4, 1.2, 2.6, 1.4, 1.1];
        let (_, dlogits) = wce_from_logits(&logits, &labels, &weights).unwrap();

        let h = 1e-6;
        for i in 0..4 {
            for j in 0..5 {
                let mut lp = logits.clone();
                lp[[i, j]] += h;
                let mut lm = logits.clone();
                lm[[i, j]] -= h;
                let fp = wce_from_logits(&lp, &labels, &weights).unwrap().0.value;
                let fm = wce_from_logits(&lm, &labels, &weights).unwrap().0.value;
                let fd = (fp - fm) / (2.0 * h);
                assert!(
                    (fd - dlogits[[i, j]]).abs() < 1e-7,
                    "logit ({i},{j}): fd {fd} vs analytic {}",
                    dlogits[[i, j]]
                );
            }
        }
    }

    #[test]
    fn joint_loss_is_the_sum() {
        assert_eq!(joint_loss(0.0, 3.5), 3.5);
        assert_eq!(joint_loss(1.25, 2.0), joint_loss(2.0, 1.25));
    }

    proptest! {
        #[test]
        fn weight_rescaling_cancels(seed in 0u64..500, scale in 0.001f64..1000.0) {
            let probs = random_probs(8, 5, seed);
            let labels: Vec<usize> = (0..8).map(|i| (i * 3) % 5).collect();
            let mut rng = rng_for(seed, "loss-w", 2);
            let weights: Vec<f64> = (0..5).map(|_| rng.random_range(0.1..5.0)).collect();
            let scaled: Vec<f64> = weights.iter().map(|w| w * scale).collect();
            let a = wce(&probs, &labels, &weights).unwrap().value;
            let b = wce(&probs, &labels, &scaled).unwrap().value;
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }

        #[test]
        fn wce_is_non_negative(seed in 0u64..500) {
            let probs = random_probs(6, 5, seed);
            let labels: Vec<usize> = (0..6).map(|i| (i * 2) % 5).collect();
            let loss = wce(&probs, &labels, &uniform_weights(5)).unwrap();
            prop_assert!(loss.value >= 0.0);
        }
    }

    #[test]
    fn per_sample_is_independent_of_weights() {
        let probs = random_probs(5, 5, 9);
        let labels = vec![0, 1, 2, 3, 4];
        let a = wce(&probs, &labels, &uniform_weights(5)).unwrap();
        let b = wce(&probs, &labels, &[5.0, 0.1, 2.0, 3.0, 0.7]).unwrap();
        assert_eq!(a.per_sample, b.per_sample);
    }

    #[test]
    fn batch_axis_is_rows() {
        // Guard against a silent transpose: 3 samples over 2 classes.
        let probs =
            Array2::from_shape_vec((3, 2), vec![0.9, 0.1, 0.2, 0.8, 0.5, 0.5]).unwrap();
        let loss = wce(&probs, &[0, 1, 0], &[1.0, 1.0]).unwrap();
        let want = (-(0.9f64.ln()) - 0.8f64.ln() - 0.5f64.ln()) / 3.0;
        assert!((loss.value - want).abs() < 1e-12);
        assert_eq!(probs.sum_axis(Axis(1)).len(), 3);
    }
}
