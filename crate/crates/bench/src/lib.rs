//! Seeded problem builders shared by the criterion benches.

use gpnd_core::{Dataset, KernelParams, NegativeSet, VariationalParams};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` points in `[-3, 3]^d` with a smooth noisy target.
pub fn problem(n: usize, d: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-3.0..3.0));
    let y = DVector::from_fn(n, |i, _| {
        x.row(i).iter().map(|v: &f64| v.sin()).sum::<f64>() + rng.random_range(-0.1..0.1)
    });
    Dataset::new(x, y).expect("finite problem")
}

pub fn negatives(m: usize, d: usize, seed: u64) -> NegativeSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NegativeSet::new(
        DMatrix::from_fn(m, d, |_, _| rng.random_range(-3.0..3.0)),
        DVector::from_fn(m, |_, _| rng.random_range(-2.0..2.0)),
        0.5,
    )
    .expect("valid negatives")
}

pub fn kernel() -> KernelParams {
    KernelParams::new(1.0, 1.0, 0.1, 0.0)
}

pub fn variational(data: &Dataset, size: usize) -> VariationalParams {
    VariationalParams::init_from_data(&kernel(), data, size, 0).expect("factorizable prior")
}
