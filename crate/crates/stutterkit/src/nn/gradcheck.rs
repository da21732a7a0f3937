//! Finite-difference gradient checking helpers (test builds only).

use super::{ParamRef, Visit};

/// Compare every parameter gradient against central finite differences.
///
/// The layer must already hold analytic gradients for the loss computed by
/// `loss_fn` (typically: zero_grads, train-mode forward, backward with the
/// same projection). `loss_fn` is then re-evaluated under perturbed
/// parameters in inference mode.
pub fn check_param_grads<L, F>(layer: &mut L, mut loss_fn: F, h: f64, tol: f64)
where
    L: Visit,
    F: FnMut(&mut L) -> f64,
{
    // Snapshot analytic grads and parameter paths/lengths.
    let mut snapshot: Vec<(String, Vec<f64>)> = Vec::new();
    layer.visit_params("", &mut |p: ParamRef| {
        snapshot.push((p.path.clone(), p.grad.to_vec()));
    });

    for (path, analytic) in snapshot {
        for idx in 0..analytic.len() {
            let mut probe = |delta: f64, layer: &mut L| -> f64 {
                layer.visit_params("", &mut |p: ParamRef| {
                    if p.path == path {
                        p.data[idx] += delta;
                    }
                });
                let v = loss_fn(layer);
                layer.visit_params("", &mut |p: ParamRef| {
                    if p.path == path {
                        p.data[idx] -= delta;
                    }
                });
                v
            };
            let fp = probe(h, layer);
            let fm = probe(-h, layer);
            let fd = (fp - fm) / (2.0 * h);
            let a = analytic[idx];
            let denom = a.abs().max(fd.abs()).max(1.0);
            let rel = (a - fd).abs() / denom;
            assert!(
                rel <= tol,
                "gradient mismatch at {path}[{idx}]: analytic {a}, finite-diff {fd}, rel {rel}"
            );
        }
    }
}
