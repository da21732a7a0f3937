//! Adam optimizer over path-addressed parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Visit;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Full optimizer state, keyed by parameter path; serializable for
/// checkpoints. `BTreeMap` keeps the key order deterministic.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub slots: BTreeMap<String, AdamSlot>,
}

/// Adam with bias correction; the epsilon sits outside the square root:
/// `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    slots: BTreeMap<String, AdamSlot>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every visited parameter whose path is not
    /// excluded by `skip`. Skipped parameters keep their values and never
    /// get moment slots.
    pub fn step<M: Visit>(&mut self, model: &mut M, skip: &dyn Fn(&str) -> bool) {
        self.step += 1;
        let t = self.step;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t as i32);
        let bc2 = 1.0 - beta2.powi(t as i32);
        let slots = &mut self.slots;
        model.visit_params("", &mut |p| {
            if skip(&p.path) {
                return;
            }
            let n = p.data.len();
            let slot = slots.entry(p.path.clone()).or_insert_with(|| AdamSlot {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            assert_eq!(slot.m.len(), n, "slot size mismatch for {}", p.path);
            for k in 0..n {
                let g = p.grad[k];
                slot.m[k] = beta1 * slot.m[k] + (1.0 - beta1) * g;
                slot.v[k] = beta2 * slot.v[k] + (1.0 - beta2) * g * g;
                let m_hat = slot.m[k] / bc1;
                let v_hat = slot.v[k] / bc2;
                p.data[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
    }

    pub fn export(&self) -> AdamState {
        AdamState {
            step: self.step,
            slots: self.slots.clone(),
        }
    }

    pub fn import(cfg: AdamConfig, state: AdamState) -> Self {
        Adam {
            cfg,
            step: state.step,
            slots: state.slots,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use crate::rng::rng_for;

    fn fixed_grad_model() -> Linear {
        let mut rng = rng_for(1, "adam", 0);
        Linear::new(2, 2, &mut rng)
    }

    fn set_grads(model: &mut Linear, g: f64) {
        model.visit_params("", &mut |p| {
            for v in p.grad.iter_mut() {
                *v = g;
            }
        });
    }

    fn snapshot(model: &mut Linear) -> Vec<f64> {
        let mut out = Vec::new();
        model.visit_params("", &mut |p| out.extend_from_slice(p.data));
        out
    }

    #[test]
    fn first_step_matches_closed_form() {
        let mut model = fixed_grad_model();
        let before = snapshot(&mut model);
        set_grads(&mut model, 0.5);
        let cfg = AdamConfig::default();
        let mut opt = Adam::new(cfg);
        opt.step(&mut model, &|_| false);
        let after = snapshot(&mut model);
        // m_hat = g, v_hat = g^2, so the move is lr * g / (|g| + eps).
        let want = cfg.lr * 0.5 / (0.5 + cfg.eps);
        for (b, a) in before.iter().zip(&after) {
            assert!(((b - a) - want).abs() < 1e-15);
        }
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn two_steps_match_hand_computed_moments() {
        let mut model = fixed_grad_model();
        let before = snapshot(&mut model);
        let cfg = AdamConfig::default();
        let mut opt = Adam::new(cfg);
        let (g1, g2) = (0.5, -0.25);

        set_grads(&mut model, g1);
        opt.step(&mut model, &|_| false);
        set_grads(&mut model, g2);
        opt.step(&mut model, &|_| false);
        let after = snapshot(&mut model);

        let mut m = 0.0;
        let mut v = 0.0;
        let mut moved = 0.0;
        for (t, g) in [(1, g1), (2, g2)] {
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let m_hat = m / (1.0 - cfg.beta1.powi(t));
            let v_hat = v / (1.0 - cfg.beta2.powi(t));
            moved += cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        for (b, a) in before.iter().zip(&after) {
            assert!(((b - a) - moved).abs() < 1e-15);
        }
    }

    #[test]
    fn skipped_paths_do_not_move_or_get_slots() {
        let mut model = fixed_grad_model();
        let before = snapshot(&mut model);
        set_grads(&mut model, 1.0);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut model, &|path| path == "b");
        let after = snapshot(&mut model);
        // Weight elements moved, bias elements (last two) did not.
        assert!(before[..4].iter().zip(&after[..4]).all(|(b, a)| b != a));
        assert_eq!(&before[4..], &after[4..]);
        assert!(opt.export().slots.contains_key("w"));
        assert!(!opt.export().slots.contains_key("b"));
    }

    #[test]
    fn export_import_resumes_identically() {
        let grads: Vec<f64> = (0..10).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.1).collect();

        let run = |resume_at: Option<usize>| -> Vec<f64> {
            let mut model = fixed_grad_model();
            let mut opt = Adam::new(AdamConfig::default());
            for (i, &g) in grads.iter().enumerate() {
                if Some(i) == resume_at {
                    let state = opt.export();
                    opt = Adam::import(AdamConfig::default(), state);
                }
                set_grads(&mut model, g);
                opt.step(&mut model, &|_| false);
            }
            snapshot(&mut model)
        };

        let straight = run(None);
        let resumed = run(Some(6));
        assert_eq!(straight, resumed);
    }
}
