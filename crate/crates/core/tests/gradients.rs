//! Analytic gradients against central finite differences.

use fedabc::loss::{fedabc_term, sigmoid, ClassKind, LossConfig};
use fedabc::nn::{backward, forward, ModelParams};
use fedabc::rng;
use ndarray::Array2;
use rand::Rng;

fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Loss of the term as a function of the raw logit.
fn term_loss(z: f64, positive: bool, kind: ClassKind, cfg: &LossConfig) -> f64 {
    fedabc_term(sigmoid(z).unwrap(), positive, kind, cfg).unwrap().loss
}

#[test]
fn loss_term_gradient_matches_finite_differences() {
    let mut r = rng::seeded(2024);
    let mut checked = 0;
    let h = 1e-6;
    while checked < 300 {
        let q: f64 = r.random_range(0.05..0.95);
        let z = (q / (1.0 - q)).ln();
        let (positive, kind) = match r.random_range(0..3) {
            0 => (true, ClassKind::Present),
            1 => (false, ClassKind::Present),
            _ => (false, ClassKind::Absent),
        };
        let cfg = LossConfig {
            focal_exponent: r.random_range(0.0..4.0),
            ..LossConfig::CIFAR10
        };
        let thr = match (positive, kind) {
            (true, _) => cfg.m_p,
            (false, ClassKind::Present) => cfg.m_n,
            (false, ClassKind::Absent) => cfg.m_nn,
        };
        if (q - thr).abs() < 1e-3 {
            continue;
        }
        let t = fedabc_term(sigmoid(z).unwrap(), positive, kind, &cfg).unwrap();
        let numeric = (term_loss(z + h, positive, kind, &cfg) - term_loss(z - h, positive, kind, &cfg)) / (2.0 * h);
        if !t.kept {
            assert_eq!(t.dloss_dlogit, 0.0);
            assert_eq!(numeric, 0.0);
        }
        let err = rel_err(t.dloss_dlogit, numeric, 1e-8);
        assert!(err <= 1e-6, "q={q} positive={positive} {kind:?}: {} vs {numeric} ({err:e})", t.dloss_dlogit);
        checked += 1;
    }
}

/// `L = Σ G ⊙ logits` so `dL/dlogits = G`.
fn network_loss(params: &ModelParams, x: &Array2<f64>, g: &Array2<f64>) -> f64 {
    let trace = forward(params, x.view()).unwrap();
    (trace.logits() * g).sum()
}

#[test]
fn network_gradient_matches_finite_differences() {
    let mut r = rng::seeded(77);
    let h = 1e-5;
    let mut checked = 0;
    for case in 0..40 {
        let widths = [r.random_range(2..6), r.random_range(2..7), r.random_range(2..7), r.random_range(2..5)];
        let params = ModelParams::init(&widths, &mut rng::seeded(case)).unwrap();
        let batch = r.random_range(1..5);
        let x = Array2::from_shape_fn((batch, widths[0]), |_| r.random_range(-1.0..1.0));
        let g = Array2::from_shape_fn((batch, widths[3]), |_| r.random_range(-1.0..1.0));
        let trace = forward(&params, x.view()).unwrap();
        let grads = backward(&params, &trace, g.view()).unwrap().to_flat();
        let flat = params.to_flat();
        for _ in 0..5 {
            let k = r.random_range(0..flat.len());
            let mut plus = flat.clone();
            let mut minus = flat.clone();
            plus[k] += h;
            minus[k] -= h;
            let lp = network_loss(&ModelParams::from_flat(&widths, &plus).unwrap(), &x, &g);
            let lm = network_loss(&ModelParams::from_flat(&widths, &minus).unwrap(), &x, &g);
            let numeric = (lp - lm) / (2.0 * h);
            // ReLU kinks inside the stencil make the difference quotient meaningless.
            let kink = trace.pre_activations[..2]
                .iter()
                .any(|z| z.iter().any(|v| v.abs() < 1e-4));
            if kink {
                continue;
            }
            let err = rel_err(grads[k], numeric, 1e-8);
            assert!(err <= 1e-4, "case {case} param {k}: {} vs {numeric}", grads[k]);
            checked += 1;
        }
    }
    assert!(checked >= 100, "only {checked} interior checks");
}
