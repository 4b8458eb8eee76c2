//! Exact GP regression: negative log marginal likelihood and posterior
//! predictive distribution, both via a jittered Cholesky factorization.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernel::{self, KernelParams, JITTER};
use crate::linalg::Cholesky;

/// Per-point predictive means and latent-function variances, with an optional
/// full covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    pub means: DVector<f64>,
    pub variances: DVector<f64>,
    pub covariance: Option<DMatrix<f64>>,
}

impl PredictiveDistribution {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    /// Variances of a new noisy observation: latent variance plus `noise_var`.
    pub fn observation_variances(&self, noise_var: f64) -> DVector<f64> {
        self.variances.add_scalar(noise_var)
    }
}

/// Factorizes `m + JITTER·I`.
pub(crate) fn cholesky_jittered(
    mut m: DMatrix<f64>,
    params: &KernelParams,
) -> Result<Cholesky> {
    for i in 0..m.nrows() {
        m[(i, i)] += JITTER;
    }
    Cholesky::new(m).ok_or_else(|| Error::numerical("covariance matrix is not positive definite", params))
}

/// Cached factorization of `K(X, X) + σ²I` and the weight vector `α`.
struct Conditioned {
    k: DMatrix<f64>,
    chol: Cholesky,
    residual: DVector<f64>,
    alpha: DVector<f64>,
}

fn condition(params: &KernelParams, data: &Dataset) -> Result<Conditioned> {
    if !params.is_finite() {
        return Err(Error::numerical("non-finite parameters", params));
    }
    let k = kernel::gram_unchecked(params, data.x(), data.x());
    let mut a = k.clone();
    let noise = params.noise_var();
    for i in 0..a.nrows() {
        a[(i, i)] += noise;
    }
    let chol = cholesky_jittered(a, params)?;
    let residual = data.y().add_scalar(-params.mean_const);
    let alpha = chol.solve_vec(&residual);
    Ok(Conditioned {
        k,
        chol,
        residual,
        alpha,
    })
}

/// Negative log marginal likelihood
/// `½ rᵀ(K+σ²I)⁻¹r + ½ log|K+σ²I| + (n/2) log 2π` with `r = y − mean`,
/// and optionally its gradient over `[log ℓ, log s², log σ², mean]`.
pub fn marginal_nll(
    params: &KernelParams,
    data: &Dataset,
    with_grad: bool,
) -> Result<(f64, Option<DVector<f64>>)> {
    if data.is_empty() {
        return Err(Error::invalid("marginal likelihood needs at least one datapair"));
    }
    let c = condition(params, data)?;
    let n = data.len() as f64;
    let nll = 0.5 * c.residual.dot(&c.alpha) + 0.5 * c.chol.log_det() + 0.5 * n * (2.0 * PI).ln();
    if !with_grad {
        return Ok((nll, None));
    }

    // dNLL/dθ = ½ tr((A⁻¹ − ααᵀ) dA/dθ)
    let mut g = c.chol.inverse();
    g.ger(-1.0, &c.alpha, &c.alpha, 1.0);
    g *= 0.5;
    let contraction = kernel::contract(params, data.x(), data.x(), &c.k, &g, false);
    let grad = DVector::from_vec(vec![
        contraction.d_log_lengthscale,
        contraction.d_log_signal_var,
        g.trace() * params.noise_var_slope(),
        -c.alpha.sum(),
    ]);
    Ok((nll, Some(grad)))
}

/// Posterior predictive distribution at the rows of `x_star`. Variances are
/// for the latent function; see [`PredictiveDistribution::observation_variances`].
pub fn posterior(
    params: &KernelParams,
    data: &Dataset,
    x_star: &DMatrix<f64>,
    full_cov: bool,
) -> Result<PredictiveDistribution> {
    if x_star.ncols() != data.dim() {
        return Err(Error::invalid(format!(
            "query has {} columns, training data {}",
            x_star.ncols(),
            data.dim()
        )));
    }
    let s2 = params.signal_var();
    let m = x_star.nrows();
    if data.is_empty() {
        return Ok(PredictiveDistribution {
            means: DVector::from_element(m, params.mean_const),
            variances: DVector::from_element(m, s2),
            covariance: full_cov.then(|| kernel::gram_unchecked(params, x_star, x_star)),
        });
    }
    let c = condition(params, data)?;
    let ks = kernel::gram_unchecked(params, x_star, data.x());
    let means = (&ks * &c.alpha).add_scalar(params.mean_const);
    // V = L⁻¹ K_{X,*}, so K_{*,X} A⁻¹ K_{X,*} = VᵀV
    let v = c.chol.solve_lower(&ks.transpose());
    let mut variances = DVector::from_fn(m, |j, _| (s2 - v.column(j).norm_squared()).max(0.0));
    let covariance = if full_cov {
        let mut cov = kernel::gram_unchecked(params, x_star, x_star) - v.tr_mul(&v);
        cov = (&cov + cov.transpose()) * 0.5;
        for j in 0..m {
            cov[(j, j)] = cov[(j, j)].max(0.0);
            variances[j] = cov[(j, j)];
        }
        Some(cov)
    } else {
        None
    };
    Ok(PredictiveDistribution {
        means,
        variances,
        covariance,
    })
}

/// Posterior at `x_star` (diagonal only) together with the gradient of
/// `Σ_i gmean_i·mean_i + gvar_i·var_i` over the kernel parameter vector, where
/// `adjoint` maps the predictive to `(gmean, gvar)`.
pub(crate) fn posterior_backprop(
    params: &KernelParams,
    data: &Dataset,
    x_star: &DMatrix<f64>,
    adjoint: impl FnOnce(&PredictiveDistribution) -> (DVector<f64>, DVector<f64>),
) -> Result<(PredictiveDistribution, DVector<f64>)> {
    let s2 = params.signal_var();
    let m = x_star.nrows();
    if data.is_empty() {
        let pred = PredictiveDistribution {
            means: DVector::from_element(m, params.mean_const),
            variances: DVector::from_element(m, s2),
            covariance: None,
        };
        let (gmean, gvar) = adjoint(&pred);
        let grad = DVector::from_vec(vec![0.0, gvar.sum() * s2, 0.0, gmean.sum()]);
        return Ok((pred, grad));
    }
    let c = condition(params, data)?;
    let ks = kernel::gram_unchecked(params, x_star, data.x());
    let means = (&ks * &c.alpha).add_scalar(params.mean_const);
    // W = A⁻¹ K_{X,*}
    let w = c.chol.solve(&ks.transpose());
    let mut clamped = vec![false; m];
    let variances = DVector::from_fn(m, |j, _| {
        let v = s2 - ks.row(j).transpose().dot(&w.column(j));
        clamped[j] = v < 0.0;
        v.max(0.0)
    });
    let pred = PredictiveDistribution {
        means,
        variances,
        covariance: None,
    };
    let (gmean, mut gvar) = adjoint(&pred);
    for (g, was_clamped) in gvar.iter_mut().zip(clamped) {
        if was_clamped {
            *g = 0.0;
        }
    }
    let gmean = &gmean;

    // adjoint of K_{*,X}: gμ αᵀ − 2 diag(gv) Wᵀ
    let mut g_star = gmean * c.alpha.transpose();
    for j in 0..m {
        let wj = w.column(j).transpose() * (-2.0 * gvar[j]);
        let mut r = g_star.row_mut(j);
        r += wj;
    }
    // adjoint of A: W diag(gv) Wᵀ − (W gμ) αᵀ
    let wg = &w * gmean;
    let mut w_scaled = w.clone();
    for j in 0..m {
        w_scaled.column_mut(j).scale_mut(gvar[j]);
    }
    let mut g_a = &w_scaled * w.transpose();
    g_a.ger(-1.0, &wg, &c.alpha, 1.0);

    let cs = kernel::contract(params, x_star, data.x(), &ks, &g_star, false);
    let ca = kernel::contract(params, data.x(), data.x(), &c.k, &g_a, false);
    let grad = DVector::from_vec(vec![
        cs.d_log_lengthscale + ca.d_log_lengthscale,
        cs.d_log_signal_var + ca.d_log_signal_var + gvar.sum() * s2,
        g_a.trace() * params.noise_var_slope(),
        gmean.sum() - wg.sum(),
    ]);
    Ok((pred, grad))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::testutil::{assert_grad_close, central_diff, random_params, random_problem};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_point_nll() {
        let p = KernelParams::new(1.0, 1.0, 0.25, 0.0);
        let data = Dataset::new(DMatrix::from_element(1, 1, 0.3), DVector::from_element(1, 1.0)).unwrap();
        let (nll, _) = marginal_nll(&p, &data, false).unwrap();
        // ½(1/1.25 + ln 1.25 + ln 2π)
        let expected = 0.5 * (1.0 / 1.25 + 1.25f64.ln() + (2.0 * PI).ln());
        assert!((nll - expected).abs() < 1e-7);
        assert!((nll - 1.430_510_3).abs() < 1e-7);
    }

    #[test]
    fn zero_residual_leaves_complexity_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = DMatrix::from_fn(5, 2, |_, _| rng.random_range(-1.0..1.0));
        let p = KernelParams::new(0.7, 1.3, 0.2, 0.4);
        let data = Dataset::new(x.clone(), DVector::from_element(5, 0.4)).unwrap();
        let (nll, _) = marginal_nll(&p, &data, false).unwrap();
        let mut a = kernel::gram(&p, &x, &x).unwrap();
        for i in 0..5 {
            a[(i, i)] += p.noise_var() + JITTER;
        }
        let expected = 0.5 * a.determinant().ln() + 2.5 * (2.0 * PI).ln();
        assert!((nll - expected).abs() < 1e-10);
    }

    #[test]
    fn nll_gradient_matches_central_differences() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = if seed == 0 { 8 } else { rng.random_range(3..=12) };
            let d = rng.random_range(1..=3);
            let data = random_problem(&mut rng, n, d);
            let p = random_params(&mut rng);
            let (_, grad) = marginal_nll(&p, &data, true).unwrap();
            let fd = central_diff(&p.to_array(), 1e-5, |v| {
                marginal_nll(&KernelParams::from_slice(v), &data, false).unwrap().0
            });
            assert_grad_close(grad.unwrap().as_slice(), &fd, 1e-4);
        }
    }

    #[test]
    fn nll_rejects_empty_data() {
        assert!(marginal_nll(&KernelParams::default(), &Dataset::empty(1), false).is_err());
    }

    #[test]
    fn nll_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = random_problem(&mut rng, 9, 2);
        let p = random_params(&mut rng);
        let perm = [4, 0, 8, 2, 6, 1, 7, 3, 5];
        let a = marginal_nll(&p, &data, false).unwrap().0;
        let b = marginal_nll(&p, &data.select(&perm), false).unwrap().0;
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn empty_data_gives_prior() {
        let p = KernelParams::new(0.5, 2.5, 0.1, -0.7);
        let xs = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 5.0]);
        let pred = posterior(&p, &Dataset::empty(1), &xs, false).unwrap();
        assert!(pred.means.iter().all(|m| *m == -0.7));
        assert!(pred.variances.iter().all(|v| (*v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn noiseless_interpolation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = random_problem(&mut rng, 6, 1);
        let p = KernelParams::new(0.8, 1.0, 1e-8, 0.0);
        let xs = data.x().rows(0, 1).into_owned();
        let pred = posterior(&p, &data, &xs, false).unwrap();
        assert!((pred.means[0] - data.y()[0]).abs() < 1e-3);
        assert!(pred.variances[0].abs() < 1e-3);
    }

    /// Explicit 2×2 inverse of `K + (σ² + jitter) I`.
    fn dense_two_point_oracle(p: &KernelParams, data: &Dataset, xs: &[f64]) -> Vec<(f64, f64)> {
        let k = |a: f64, b: f64| p.signal_var() * (-(a - b) * (a - b) / (2.0 * p.lengthscale().powi(2))).exp();
        let (x0, x1) = (data.x()[(0, 0)], data.x()[(1, 0)]);
        let nz = p.noise_var() + JITTER;
        let (a, b, d) = (k(x0, x0) + nz, k(x0, x1), k(x1, x1) + nz);
        let det = a * d - b * b;
        let inv = [[d / det, -b / det], [-b / det, a / det]];
        let r = [data.y()[0] - p.mean_const, data.y()[1] - p.mean_const];
        xs.iter()
            .map(|&x| {
                let ks = [k(x, x0), k(x, x1)];
                let mut mean = p.mean_const;
                let mut quad = 0.0;
                for i in 0..2 {
                    for j in 0..2 {
                        mean += ks[i] * inv[i][j] * r[j];
                        quad += ks[i] * inv[i][j] * ks[j];
                    }
                }
                (mean, k(x, x) - quad)
            })
            .collect()
    }

    #[test]
    fn posterior_matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let data = random_problem(&mut rng, 2, 1);
        let p = random_params(&mut rng);
        let xs = [-1.3, 0.2, 0.9, 2.4];
        let pred = posterior(&p, &data, &DMatrix::from_row_slice(4, 1, &xs), false).unwrap();
        for (i, (m, v)) in dense_two_point_oracle(&p, &data, &xs).into_iter().enumerate() {
            assert!((pred.means[i] - m).abs() < 1e-8);
            assert!((pred.variances[i] - v).abs() < 1e-8);
        }
    }

    #[test]
    fn variance_bounded_by_prior_and_cov_diagonal() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = rng.random_range(1..=3);
            let n = rng.random_range(1..15);
            let data = random_problem(&mut rng, n, d);
            let p = random_params(&mut rng);
            let xs = DMatrix::from_fn(7, d, |_, _| rng.random_range(-3.0..3.0));
            let pred = posterior(&p, &data, &xs, true).unwrap();
            let cov = pred.covariance.as_ref().unwrap();
            for j in 0..7 {
                assert!(pred.variances[j] >= 0.0);
                assert!(pred.variances[j] <= p.signal_var() + 1e-8);
                assert!((cov[(j, j)] - pred.variances[j]).abs() < 1e-10);
                for i in 0..7 {
                    assert_eq!(cov[(i, j)], cov[(j, i)]);
                }
            }
        }
    }

    #[test]
    fn backprop_matches_central_differences() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let d = rng.random_range(1..=2);
            let n = rng.random_range(2..10);
            let data = random_problem(&mut rng, n, d);
            let p = random_params(&mut rng);
            let xs = DMatrix::from_fn(3, d, |_, _| rng.random_range(-2.0..2.0));
            let gm = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let gv = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let (_, grad) = posterior_backprop(&p, &data, &xs, |_| (gm.clone(), gv.clone())).unwrap();
            let fd = central_diff(&p.to_array(), 1e-5, |v| {
                let pred = posterior(&KernelParams::from_slice(v), &data, &xs, false).unwrap();
                pred.means.dot(&gm) + pred.variances.dot(&gv)
            });
            assert_grad_close(grad.as_slice(), &fd, 1e-4);
        }
    }
}
