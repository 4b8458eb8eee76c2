//! Shared helpers for unit tests: random problems and a central-difference
//! gradient oracle.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::kernel::KernelParams;

pub(crate) fn random_problem(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Dataset {
    let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0f64..2.0));
    let y = DVector::from_fn(n, |i, _| {
        x.row(i).iter().map(|v| (1.3 * *v).sin()).sum::<f64>() + rng.random_range(-0.2..0.2)
    });
    Dataset::new(x, y).unwrap()
}

pub(crate) fn random_params(rng: &mut ChaCha8Rng) -> KernelParams {
    KernelParams::new(
        rng.random_range(0.4..2.0),
        rng.random_range(0.3..3.0),
        rng.random_range(0.01..0.5),
        rng.random_range(-1.0..1.0),
    )
}

pub(crate) fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut v = x.to_vec();
    (0..x.len())
        .map(|i| {
            v[i] = x[i] + h;
            let fp = f(&v);
            v[i] = x[i] - h;
            let fm = f(&v);
            v[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Componentwise relative error with a 1e-3 scale floor.
pub(crate) fn assert_grad_close(analytic: &[f64], numeric: &[f64], tol: f64) {
    assert_eq!(analytic.len(), numeric.len());
    for (i, (a, b)) in analytic.iter().zip(numeric).enumerate() {
        let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
        assert!(rel <= tol, "component {i}: analytic {a} vs numeric {b} (rel {rel:e})");
    }
}
