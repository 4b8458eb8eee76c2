//! Negative datapairs as Gaussian blobs and the log-KL repulsion penalty.
//!
//! Each negative pair `(x̄_i, ȳ_i)` defines a blob `N(ȳ_i, σ_neg²)`. The
//! penalty is `Σ_i log(KL(N(μ_i, σ_i²) ‖ N(ȳ_i, σ_neg²)) + ε)` where `μ_i` and
//! `σ_i²` are the model's latent predictive mean and variance at `x̄_i`.
//! Training maximizes it, pushing the predictive away from every blob.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::GpModel;

/// Floor inside the logarithm; `log KL` is unbounded below at KL = 0.
pub const KL_FLOOR: f64 = 1e-10;

/// Latent variances below this are treated as this value in the penalty.
const VAR_FLOOR: f64 = 1e-12;

/// Negative datapairs with a shared blob standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeSet {
    x: DMatrix<f64>,
    y: DVector<f64>,
    sigma_neg: f64,
}

impl NegativeSet {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, sigma_neg: f64) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::invalid(format!(
                "{} negative inputs but {} targets",
                x.nrows(),
                y.len()
            )));
        }
        if !(sigma_neg > 0.0 && sigma_neg.is_finite()) {
            return Err(Error::invalid(format!("sigma_neg must be positive, got {sigma_neg}")));
        }
        if !x.iter().chain(y.iter()).all(|v| v.is_finite()) {
            return Err(Error::invalid("negative set contains non-finite values"));
        }
        Ok(NegativeSet { x, y, sigma_neg })
    }

    pub fn with_sigma_neg(self, sigma_neg: f64) -> Result<Self> {
        NegativeSet::new(self.x, self.y, sigma_neg)
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn sigma_neg(&self) -> f64 {
        self.sigma_neg
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// `KL(N(mu1, sigma1²) ‖ N(mu2, sigma2²))`; the sigmas are standard deviations.
pub fn gaussian_kl(mu1: f64, sigma1: f64, mu2: f64, sigma2: f64) -> Result<f64> {
    if !(sigma1 > 0.0 && sigma2 > 0.0) {
        return Err(Error::invalid(format!(
            "standard deviations must be positive: {sigma1}, {sigma2}"
        )));
    }
    Ok(kl_unchecked(mu1, sigma1 * sigma1, mu2, sigma2))
}

fn kl_unchecked(mu1: f64, var1: f64, mu2: f64, sigma2: f64) -> f64 {
    let d = mu1 - mu2;
    let var2 = sigma2 * sigma2;
    // clamp away the rounding that can make an exact match slightly negative
    (sigma2.ln() - 0.5 * var1.ln() + (var1 + d * d) / (2.0 * var2) - 0.5).max(0.0)
}

/// Sum of floored log-KL terms from the model's predictive at the negative
/// inputs to each blob, with the gradient over the model parameters.
pub fn nd_penalty(
    model: &GpModel,
    data: &Dataset,
    neg: &NegativeSet,
    with_grad: bool,
) -> Result<(f64, Option<DVector<f64>>)> {
    if neg.is_empty() {
        return Err(Error::invalid("repulsion penalty needs at least one negative pair"));
    }
    let sigma = neg.sigma_neg;
    let var2 = sigma * sigma;
    let terms = |means: &DVector<f64>, vars: &DVector<f64>| -> Vec<(f64, f64, f64)> {
        (0..neg.len())
            .map(|i| {
                let v = vars[i].max(VAR_FLOOR);
                let kl = kl_unchecked(means[i], v, neg.y[i], sigma) + KL_FLOOR;
                let dmu = (means[i] - neg.y[i]) / var2 / kl;
                let dvar = if vars[i] > VAR_FLOOR {
                    (0.5 / var2 - 0.5 / v) / kl
                } else {
                    0.0
                };
                (kl.ln(), dmu, dvar)
            })
            .collect()
    };

    if !with_grad {
        let pred = model.predict(data, &neg.x, false)?;
        let value = terms(&pred.means, &pred.variances).iter().map(|t| t.0).sum();
        return Ok((value, None));
    }
    let mut value = 0.0;
    let (_, grad) = model.predict_backprop(data, &neg.x, |pred| {
        let t = terms(&pred.means, &pred.variances);
        value = t.iter().map(|t| t.0).sum();
        (
            DVector::from_iterator(t.len(), t.iter().map(|t| t.1)),
            DVector::from_iterator(t.len(), t.iter().map(|t| t.2)),
        )
    })?;
    Ok((value, Some(grad)))
}

/// `objective − β·penalty`, the loss minimized by joint training. With
/// `beta = 0` or no negatives this is the backend objective exactly.
pub fn combined_objective(
    model: &GpModel,
    data: &Dataset,
    neg: &NegativeSet,
    beta: f64,
    with_grad: bool,
) -> Result<(f64, Option<DVector<f64>>)> {
    if !(beta >= 0.0) {
        return Err(Error::invalid(format!("beta must be non-negative, got {beta}")));
    }
    let (nll, nll_grad) = model.objective(data, None, with_grad)?;
    if beta == 0.0 || neg.is_empty() {
        return Ok((nll, nll_grad));
    }
    let (penalty, pen_grad) = nd_penalty(model, data, neg, with_grad)?;
    let grad = match (nll_grad, pen_grad) {
        (Some(g), Some(p)) => Some(g - p * beta),
        _ => None,
    };
    Ok((nll - beta * penalty, grad))
}
