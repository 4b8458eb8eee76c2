use gpnd_core::{
    combined_objective, elbo, fit, gaussian_kl, gram, marginal_nll, posterior, Dataset, GpModel, KernelParams, Mode,
    NegativeSet, TrainConfig, VariationalParams,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn dataset(xs: &[f64], ys: &[f64]) -> Dataset {
    Dataset::new(DMatrix::from_column_slice(xs.len(), 1, xs), DVector::from_column_slice(ys)).unwrap()
}

fn problem() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..12).prop_flat_map(|n| (prop::collection::vec(-3.0f64..3.0, n), prop::collection::vec(-2.0f64..2.0, n)))
}

fn kernel() -> impl Strategy<Value = KernelParams> {
    (0.3f64..2.0, 0.2f64..3.0, 0.01f64..0.5, -1.0f64..1.0).prop_map(|(l, s, n, c)| KernelParams::new(l, s, n, c))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn kl_is_zero_only_between_equal_gaussians(mu in -5.0f64..5.0, s in 0.05f64..5.0, d in 0.01f64..3.0) {
        prop_assert!(gaussian_kl(mu, s, mu, s).unwrap().abs() < 1e-12);
        prop_assert!(gaussian_kl(mu, s, mu + d, s).unwrap() > 0.0);
    }

    #[test]
    fn gram_is_symmetric_with_signal_variance_diagonal((xs, _) in problem(), k in kernel()) {
        let x = DMatrix::from_column_slice(xs.len(), 1, &xs);
        let g = gram(&k, &x, &x).unwrap();
        prop_assert!((&g - g.transpose()).abs().max() < 1e-14);
        for i in 0..xs.len() {
            prop_assert!((g[(i, i)] - k.signal_var()).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_variance_stays_between_zero_and_prior(
        (xs, ys) in problem(), k in kernel(), q in prop::collection::vec(-4.0f64..4.0, 1..6),
    ) {
        let data = dataset(&xs, &ys);
        let xq = DMatrix::from_column_slice(q.len(), 1, &q);
        let pred = posterior(&k, &data, &xq, true).unwrap();
        let cov = pred.covariance.as_ref().unwrap();
        for i in 0..q.len() {
            prop_assert!(pred.variances[i] >= 0.0);
            prop_assert!(pred.variances[i] <= k.signal_var() * (1.0 + 1e-12));
            prop_assert!((cov[(i, i)] - pred.variances[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_beta_objective_is_the_data_fit_loss((xs, ys) in problem(), k in kernel(), yn in -2.0f64..2.0) {
        let data = dataset(&xs, &ys);
        let neg = NegativeSet::new(DMatrix::from_element(1, 1, 0.0), DVector::from_element(1, yn), 0.3).unwrap();
        let model = GpModel::exact(k);
        let (a, ga) = combined_objective(&model, &data, &neg, 0.0, true).unwrap();
        let (b, gb) = model.objective(&data, None, true).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
        prop_assert_eq!(ga.unwrap(), gb.unwrap());
    }

    #[test]
    fn elbo_never_exceeds_the_log_marginal_likelihood((xs, ys) in problem(), k in kernel(), m in 1usize..5) {
        let data = dataset(&xs, &ys);
        let m = m.min(xs.len());
        let z = DMatrix::from_fn(m, 1, |i, _| xs[i]);
        let var = VariationalParams::new(z, DVector::from_element(m, k.mean_const), &(DMatrix::identity(m, m) * 0.5))
            .unwrap();
        let (bound, _) = elbo(&k, &var, &data, None, false).unwrap();
        let (nll, _) = marginal_nll(&k, &data, false).unwrap();
        prop_assert!(bound <= -nll + 1e-8 * nll.abs().max(1.0), "elbo {} vs log evidence {}", bound, -nll);
    }

    #[test]
    fn params_vec_round_trips((xs, _) in problem(), k in kernel()) {
        let m = xs.len().min(3);
        let z = DMatrix::from_fn(m, 1, |i, _| xs[i]);
        let var = VariationalParams::new(z, DVector::from_element(m, 0.2), &(DMatrix::identity(m, m) * 0.7)).unwrap();
        // sparse coordinates are whitened through the inducing Cholesky factor
        for model in [GpModel::exact(k), GpModel::sparse(k, var)] {
            let v = model.params_vec().unwrap();
            let mut other = model.clone();
            other.set_params_vec(&v).unwrap();
            let back = other.params_vec().unwrap();
            prop_assert!((&back - &v).abs().max() <= 1e-12 * v.abs().max().max(1.0));
        }
    }
}

#[test]
fn repeated_fits_are_bitwise_identical() {
    let xs: Vec<f64> = (0..30).map(|i| i as f64 * 0.2 - 3.0).collect();
    let ys: Vec<f64> = xs.iter().map(|x| x.sin()).collect();
    let data = dataset(&xs, &ys);
    let neg = NegativeSet::new(DMatrix::from_element(2, 1, 0.5), DVector::from_vec(vec![1.5, -1.0]), 0.2).unwrap();
    let config = TrainConfig { beta: 1.0, sigma_neg: 0.2, epochs: 20, mode: Mode::GpNd, ..TrainConfig::default() };
    let model = GpModel::exact(KernelParams::default());
    let a = fit(&model, &data, Some(&neg), &config).unwrap();
    let b = fit(&model, &data, Some(&neg), &config).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.nll_trace), bits(&b.nll_trace));
    assert_eq!(bits(&a.penalty_trace), bits(&b.penalty_trace));
    assert_eq!(bits(a.final_model.params_vec().unwrap().as_slice()), bits(b.final_model.params_vec().unwrap().as_slice()));
}

#[test]
fn training_lowers_the_data_fit_loss() {
    let xs: Vec<f64> = (0..40).map(|i| i as f64 * 0.15 - 3.0).collect();
    let ys: Vec<f64> = xs.iter().map(|x| (2.0 * x).sin()).collect();
    let data = dataset(&xs, &ys);
    let config = TrainConfig { epochs: 60, ..TrainConfig::default() };
    let report = fit(&GpModel::exact(KernelParams::default()), &data, None, &config).unwrap();
    assert!(report.nll_trace.last().unwrap() < &report.nll_trace[0]);
}
