//! RBF covariance function and Gram-matrix assembly.
//!
//! All positive hyperparameters are stored in log space so that every finite
//! parameter vector decodes to a valid kernel.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Added to the diagonal of every matrix before it is factorized. Also the
/// lower bound on the decoded observation noise.
pub const JITTER: f64 = 1e-8;

/// Kernel hyperparameters, observation noise and constant prior mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub log_lengthscale: f64,
    pub log_signal_var: f64,
    pub log_noise_var: f64,
    pub mean_const: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        KernelParams::new(1.0, 1.0, 0.1, 0.0)
    }
}

impl KernelParams {
    /// Number of entries in the unconstrained parameter vector.
    pub const LEN: usize = 4;

    pub fn new(lengthscale: f64, signal_var: f64, noise_var: f64, mean_const: f64) -> Self {
        KernelParams {
            log_lengthscale: lengthscale.ln(),
            log_signal_var: signal_var.ln(),
            log_noise_var: noise_var.ln(),
            mean_const,
        }
    }

    pub fn lengthscale(&self) -> f64 {
        self.log_lengthscale.exp()
    }

    pub fn signal_var(&self) -> f64 {
        self.log_signal_var.exp()
    }

    /// Observation noise variance, clamped at [`JITTER`].
    pub fn noise_var(&self) -> f64 {
        self.log_noise_var.exp().max(JITTER)
    }

    /// d noise_var / d log_noise_var; zero while the clamp is active.
    pub(crate) fn noise_var_slope(&self) -> f64 {
        let raw = self.log_noise_var.exp();
        if raw > JITTER {
            raw
        } else {
            0.0
        }
    }

    /// `[log ℓ, log s², log σ², mean]`
    pub fn to_array(&self) -> [f64; 4] {
        [
            self.log_lengthscale,
            self.log_signal_var,
            self.log_noise_var,
            self.mean_const,
        ]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        KernelParams {
            log_lengthscale: v[0],
            log_signal_var: v[1],
            log_noise_var: v[2],
            mean_const: v[3],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Evaluates `s² exp(-|x1 - x2|² / (2ℓ²))`.
pub fn rbf_eval(params: &KernelParams, x1: &[f64], x2: &[f64]) -> Result<f64> {
    if x1.len() != x2.len() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            x1.len(),
            x2.len()
        )));
    }
    let sq: f64 = x1.iter().zip(x2).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(rbf_from_sq_dist(params, sq))
}

#[inline]
fn rbf_from_sq_dist(params: &KernelParams, sq: f64) -> f64 {
    let ell = params.lengthscale();
    params.signal_var() * (-0.5 * sq / (ell * ell)).exp()
}

fn check_cols(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.ncols() != b.ncols() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {} columns",
            a.ncols(),
            b.ncols()
        )));
    }
    Ok(())
}

/// Squared Euclidean distances between the rows of `a` and the rows of `b`.
pub(crate) fn sq_dists(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let d = a.ncols();
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        let mut s = 0.0;
        for k in 0..d {
            let t = a[(i, k)] - b[(j, k)];
            s += t * t;
        }
        s
    })
}

/// Covariance between the rows of `a` (n×d) and the rows of `b` (m×d).
pub fn gram(params: &KernelParams, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_cols(a, b)?;
    Ok(gram_unchecked(params, a, b))
}

pub(crate) fn gram_unchecked(params: &KernelParams, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut k = sq_dists(a, b);
    k.apply(|v| *v = rbf_from_sq_dist(params, *v));
    k
}

/// Derivatives of `gram(params, a, a)` with respect to the log lengthscale and
/// log signal variance.
#[derive(Clone, Debug)]
pub struct GramGrads {
    pub d_log_lengthscale: DMatrix<f64>,
    pub d_log_signal_var: DMatrix<f64>,
}

pub fn gram_grads(params: &KernelParams, a: &DMatrix<f64>) -> Result<GramGrads> {
    let sq = sq_dists(a, a);
    let inv_ell2 = (-2.0 * params.log_lengthscale).exp();
    let k = sq.map(|v| rbf_from_sq_dist(params, v));
    let d_ell = k.zip_map(&sq, |kv, r2| kv * r2 * inv_ell2);
    Ok(GramGrads {
        d_log_lengthscale: d_ell,
        d_log_signal_var: k,
    })
}

/// Gradient of `Σ_ij G_ij K(a, b)_ij` with respect to the kernel parameters
/// and, optionally, the rows of `a` and `b`.
pub(crate) struct Contraction {
    pub d_log_lengthscale: f64,
    pub d_log_signal_var: f64,
    pub d_a: Option<DMatrix<f64>>,
    pub d_b: Option<DMatrix<f64>>,
}

pub(crate) fn contract(
    params: &KernelParams,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    k: &DMatrix<f64>,
    g: &DMatrix<f64>,
    input_grads: bool,
) -> Contraction {
    let d = a.ncols();
    let inv_ell2 = (-2.0 * params.log_lengthscale).exp();
    let mut d_ell = 0.0;
    let mut d_sig = 0.0;
    let mut d_a = input_grads.then(|| DMatrix::zeros(a.nrows(), d));
    let mut d_b = input_grads.then(|| DMatrix::zeros(b.nrows(), d));
    for j in 0..b.nrows() {
        for i in 0..a.nrows() {
            let gk = g[(i, j)] * k[(i, j)];
            if gk == 0.0 {
                continue;
            }
            let mut r2 = 0.0;
            for c in 0..d {
                let t = a[(i, c)] - b[(j, c)];
                r2 += t * t;
            }
            d_sig += gk;
            d_ell += gk * r2 * inv_ell2;
            if let (Some(da), Some(db)) = (d_a.as_mut(), d_b.as_mut()) {
                let w = gk * inv_ell2;
                for c in 0..d {
                    let diff = a[(i, c)] - b[(j, c)];
                    da[(i, c)] -= w * diff;
                    db[(j, c)] += w * diff;
                }
            }
        }
    }
    Contraction {
        d_log_lengthscale: d_ell,
        d_log_signal_var: d_sig,
        d_a,
        d_b,
    }
}
