//! Sparse variational GP: inducing inputs `Z`, a Gaussian `q(u) = N(m, S)`
//! over inducing values, the minibatch ELBO and the sparse predictive.
//!
//! The prior over inducing values is `p(u) = N(mean·1, K_ZZ)`, so the
//! predictive mean is `mean + k_iᵀ K_ZZ⁻¹ (m − mean·1)` and the latent variance
//! is `k_ii − k_iᵀK_ZZ⁻¹k_i + k_iᵀK_ZZ⁻¹ S K_ZZ⁻¹k_i`.
//!
//! Parameter vector layout: the four kernel entries, then `Z` row-major, then
//! `m`, then the lower triangle of `L_S` row-major with the diagonal in log
//! space.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exact_gp::{cholesky_jittered, PredictiveDistribution};
use crate::kernel::{self, KernelParams, JITTER};
use crate::linalg::Cholesky;

/// Variational parameters: inducing inputs, mean, and the Cholesky factor of
/// the covariance stored with a log diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalParams {
    z: DMatrix<f64>,
    m: DVector<f64>,
    l_raw: DMatrix<f64>,
}

impl VariationalParams {
    /// `l_s` must be lower triangular with a strictly positive diagonal.
    pub fn new(z: DMatrix<f64>, m: DVector<f64>, l_s: &DMatrix<f64>) -> Result<Self> {
        let size = z.nrows();
        if size == 0 {
            return Err(Error::invalid("at least one inducing point is required"));
        }
        if m.len() != size || l_s.shape() != (size, size) {
            return Err(Error::invalid("variational shapes do not match inducing count"));
        }
        let mut l_raw = DMatrix::zeros(size, size);
        for i in 0..size {
            for j in 0..=i {
                l_raw[(i, j)] = l_s[(i, j)];
            }
            if l_s[(i, i)] <= 0.0 {
                return Err(Error::invalid("L_S diagonal must be positive"));
            }
            l_raw[(i, i)] = l_s[(i, i)].ln();
        }
        Ok(VariationalParams { z, m, l_raw })
    }

    /// Picks `num_inducing` training inputs without replacement (seeded) and
    /// sets `q(u)` equal to the prior.
    pub fn init_from_data(
        params: &KernelParams,
        data: &Dataset,
        num_inducing: usize,
        seed: u64,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::invalid("cannot place inducing points without data"));
        }
        let size = num_inducing.clamp(1, data.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = sample(&mut rng, data.len(), size).into_vec();
        rows.sort_unstable();
        let z = data.x().select_rows(&rows);
        let kmm = kernel::gram_unchecked(params, &z, &z);
        let l = cholesky_jittered(kmm, params)?.unpack();
        Self::new(z, DVector::from_element(size, params.mean_const), &l)
    }

    pub fn num_inducing(&self) -> usize {
        self.z.nrows()
    }

    pub fn dim(&self) -> usize {
        self.z.ncols()
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.m
    }

    pub fn l_s(&self) -> DMatrix<f64> {
        let mut l = self.l_raw.clone();
        for i in 0..l.nrows() {
            l[(i, i)] = l[(i, i)].exp();
        }
        l
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let l = self.l_s();
        &l * l.transpose()
    }

    /// Length of the variational part of the parameter vector.
    pub fn param_len(num_inducing: usize, dim: usize) -> usize {
        num_inducing * dim + num_inducing + num_inducing * (num_inducing + 1) / 2
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let (size, d) = self.z.shape();
        let mut out = Vec::with_capacity(Self::param_len(size, d));
        for i in 0..size {
            out.extend(self.z.row(i).iter());
        }
        out.extend(self.m.iter());
        for i in 0..size {
            for j in 0..=i {
                out.push(self.l_raw[(i, j)]);
            }
        }
        out
    }

    pub fn from_slice(num_inducing: usize, dim: usize, v: &[f64]) -> Result<Self> {
        if v.len() != Self::param_len(num_inducing, dim) || num_inducing == 0 {
            return Err(Error::invalid("variational parameter vector has the wrong length"));
        }
        let z = DMatrix::from_row_slice(num_inducing, dim, &v[..num_inducing * dim]);
        let mut at = num_inducing * dim;
        let m = DVector::from_column_slice(&v[at..at + num_inducing]);
        at += num_inducing;
        let mut l_raw = DMatrix::zeros(num_inducing, num_inducing);
        for i in 0..num_inducing {
            for j in 0..=i {
                l_raw[(i, j)] = v[at];
                at += 1;
            }
        }
        Ok(VariationalParams { z, m, l_raw })
    }

    /// Range of the `Z` entries inside the variational vector.
    pub(crate) fn z_range(&self) -> std::ops::Range<usize> {
        0..self.z.len()
    }
}

/// Quantities shared by the ELBO and the predictive.
struct Inducing {
    kmm: DMatrix<f64>,
    chol: Cholesky,
    l_s: DMatrix<f64>,
    s: DMatrix<f64>,
    delta: DVector<f64>,
}

impl Inducing {
    fn new(params: &KernelParams, var: &VariationalParams) -> Result<Self> {
        if !params.is_finite() || !var.to_vec().iter().all(|v| v.is_finite()) {
            return Err(Error::numerical("non-finite parameters", params));
        }
        let kmm = kernel::gram_unchecked(params, &var.z, &var.z);
        let chol = cholesky_jittered(kmm.clone(), params)?;
        let l_s = var.l_s();
        let s = &l_s * l_s.transpose();
        let delta = var.m.add_scalar(-params.mean_const);
        Ok(Inducing {
            kmm,
            chol,
            l_s,
            s,
            delta,
        })
    }
}

/// Predictive quantities at a set of inputs.
struct Projection {
    kmn: DMatrix<f64>,
    a: DMatrix<f64>,
    means: DVector<f64>,
    variances: DVector<f64>,
    clamped: Vec<bool>,
}

fn project(params: &KernelParams, var: &VariationalParams, ind: &Inducing, x: &DMatrix<f64>) -> Projection {
    let kmn = kernel::gram_unchecked(params, &var.z, x);
    let a = ind.chol.solve(&kmn);
    let means = a.tr_mul(&ind.delta).add_scalar(params.mean_const);
    let la = ind.l_s.tr_mul(&a);
    let s2 = params.signal_var();
    let mut clamped = vec![false; x.nrows()];
    let variances = DVector::from_fn(x.nrows(), |i, _| {
        let v = s2 - kmn.column(i).dot(&a.column(i)) + la.column(i).norm_squared();
        clamped[i] = v < 0.0;
        v.max(0.0)
    });
    Projection {
        kmn,
        a,
        means,
        variances,
        clamped,
    }
}

/// Adjoints accumulated before being pushed through the kernel.
struct Adjoints {
    mean_const: f64,
    signal_var: f64,
    noise_var: f64,
    kmn: DMatrix<f64>,
    kmm: DMatrix<f64>,
    m: DVector<f64>,
    s: DMatrix<f64>,
    l_extra: DMatrix<f64>,
}

impl Adjoints {
    fn zeros(size: usize, batch: usize) -> Self {
        Adjoints {
            mean_const: 0.0,
            signal_var: 0.0,
            noise_var: 0.0,
            kmn: DMatrix::zeros(size, batch),
            kmm: DMatrix::zeros(size, size),
            m: DVector::zeros(size),
            s: DMatrix::zeros(size, size),
            l_extra: DMatrix::zeros(size, size),
        }
    }

    /// Accumulates the gradient of `Σ gmean_i·mean_i + gvar_i·var_i`.
    fn add_predictive(&mut self, ind: &Inducing, proj: &Projection, gmean: &DVector<f64>, gvar: &DVector<f64>) {
        let mut gvar = gvar.clone();
        for (g, &c) in gvar.iter_mut().zip(&proj.clamped) {
            if c {
                *g = 0.0;
            }
        }
        // adjoint of a_i: gμ_i δ + gv_i (2 S a_i − k_i)
        let mut ga = &ind.s * &proj.a * 2.0 - &proj.kmn;
        for i in 0..ga.ncols() {
            ga.column_mut(i).scale_mut(gvar[i]);
        }
        ga.ger(1.0, &ind.delta, gmean, 1.0);
        let b = ind.chol.solve(&ga);

        let mut a_gv = proj.a.clone();
        for i in 0..a_gv.ncols() {
            a_gv.column_mut(i).scale_mut(gvar[i]);
        }
        self.kmn += &b - &a_gv;
        self.kmm -= &b * proj.a.transpose();
        let a_gm = &proj.a * gmean;
        self.m += &a_gm;
        self.mean_const += gmean.sum() - a_gm.sum();
        self.s += &a_gv * proj.a.transpose();
        self.signal_var += gvar.sum();
    }

    /// Accumulates the gradient of `−KL(q(u) ‖ p(u))`.
    fn add_neg_kl(&mut self, ind: &Inducing) {
        let kinv = ind.chol.inverse();
        let beta = ind.chol.solve_vec(&ind.delta);
        let ks = &kinv * &ind.s;
        let mut g = &ks * &kinv - &kinv;
        g.ger(1.0, &beta, &beta, 1.0);
        self.kmm += g * 0.5;
        self.m -= &beta;
        self.mean_const += beta.sum();
        self.s -= kinv * 0.5;
        for i in 0..ind.l_s.nrows() {
            self.l_extra[(i, i)] += 1.0 / ind.l_s[(i, i)];
        }
    }

    fn into_grad(
        self,
        params: &KernelParams,
        var: &VariationalParams,
        ind: &Inducing,
        x: &DMatrix<f64>,
        kmn: &DMatrix<f64>,
    ) -> DVector<f64> {
        let size = var.num_inducing();
        let d = var.dim();
        let cm = kernel::contract(params, &var.z, &var.z, &ind.kmm, &self.kmm, true);
        let cn = kernel::contract(params, &var.z, x, kmn, &self.kmn, true);
        let s2 = params.signal_var();

        let mut out = Vec::with_capacity(KernelParams::LEN + VariationalParams::param_len(size, d));
        out.push(cm.d_log_lengthscale + cn.d_log_lengthscale);
        out.push(cm.d_log_signal_var + cn.d_log_signal_var + self.signal_var * s2);
        out.push(self.noise_var * params.noise_var_slope());
        out.push(self.mean_const);

        let dz = cm.d_a.unwrap() + cm.d_b.unwrap() + cn.d_a.unwrap();
        for i in 0..size {
            out.extend(dz.row(i).iter());
        }
        out.extend(self.m.iter());

        let gs = (&self.s + self.s.transpose()) * 0.5;
        let gl = gs * &ind.l_s * 2.0 + self.l_extra;
        for i in 0..size {
            for j in 0..=i {
                let mut g = gl[(i, j)];
                if i == j {
                    g *= ind.l_s[(i, i)];
                }
                out.push(g);
            }
        }
        DVector::from_vec(out)
    }
}

fn kl_divergence(ind: &Inducing) -> f64 {
    let size = ind.delta.len() as f64;
    let kinv_l = ind.chol.solve(&ind.l_s);
    let trace = ind.l_s.iter().zip(kinv_l.iter()).map(|(a, b)| a * b).sum::<f64>();
    let quad = ind.delta.dot(&ind.chol.solve_vec(&ind.delta));
    let log_det_k = ind.chol.log_det();
    let log_det_s = 2.0 * ind.l_s.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    0.5 * (trace + quad - size + log_det_k - log_det_s)
}

/// Observation variance used by the likelihood; matches the diagonal
/// loading the exact backend factorizes.
fn obs_var(params: &KernelParams) -> f64 {
    params.noise_var() + JITTER
}

/// Minibatch ELBO: `(n/|B|) Σ_{i∈B} [log N(y_i | μ_i, σ²) − σ_i²/(2σ²)] − KL(q‖p)`.
/// `batch = None` uses every row. The gradient covers the kernel parameters
/// followed by the variational vector.
pub fn elbo(
    params: &KernelParams,
    var: &VariationalParams,
    data: &Dataset,
    batch: Option<&[usize]>,
    with_grad: bool,
) -> Result<(f64, Option<DVector<f64>>)> {
    if data.is_empty() {
        return Err(Error::invalid("ELBO needs at least one datapair"));
    }
    if data.dim() != var.dim() {
        return Err(Error::invalid("inducing dimension does not match data"));
    }
    let subset;
    let (batch_data, scale) = match batch {
        Some(idx) => {
            if idx.is_empty() || idx.iter().any(|&i| i >= data.len()) {
                return Err(Error::invalid("batch indices out of range"));
            }
            subset = data.select(idx);
            (&subset, data.len() as f64 / idx.len() as f64)
        }
        None => (data, 1.0),
    };

    let ind = Inducing::new(params, var)?;
    let proj = project(params, var, &ind, batch_data.x());
    let sigma2 = obs_var(params);
    let y = batch_data.y();
    let mut fit = 0.0;
    let mut d_noise = 0.0;
    for i in 0..y.len() {
        let r = y[i] - proj.means[i];
        let v = proj.variances[i];
        fit += -0.5 * (2.0 * PI * sigma2).ln() - 0.5 * r * r / sigma2 - 0.5 * v / sigma2;
        d_noise += -0.5 / sigma2 + 0.5 * (r * r + v) / (sigma2 * sigma2);
    }
    let value = scale * fit - kl_divergence(&ind);
    if !with_grad {
        return Ok((value, None));
    }

    let gmean = (y - &proj.means) * (scale / sigma2);
    let gvar = DVector::from_element(y.len(), -0.5 * scale / sigma2);
    let mut adj = Adjoints::zeros(var.num_inducing(), y.len());
    adj.add_predictive(&ind, &proj, &gmean, &gvar);
    adj.add_neg_kl(&ind);
    adj.noise_var += scale * d_noise;
    Ok((value, Some(adj.into_grad(params, var, &ind, batch_data.x(), &proj.kmn))))
}

/// Sparse predictive (diagonal) at the rows of `x_star`.
pub fn svgp_posterior(
    params: &KernelParams,
    var: &VariationalParams,
    x_star: &DMatrix<f64>,
) -> Result<PredictiveDistribution> {
    if x_star.ncols() != var.dim() {
        return Err(Error::invalid("query dimension does not match inducing points"));
    }
    let ind = Inducing::new(params, var)?;
    let proj = project(params, var, &ind, x_star);
    Ok(PredictiveDistribution {
        means: proj.means,
        variances: proj.variances,
        covariance: None,
    })
}

/// Sparse predictive at `x_star` plus the gradient of
/// `Σ_i gmean_i·mean_i + gvar_i·var_i` over the full parameter vector, where
/// `adjoint` maps the predictive to `(gmean, gvar)`.
pub(crate) fn posterior_backprop(
    params: &KernelParams,
    var: &VariationalParams,
    x_star: &DMatrix<f64>,
    adjoint: impl FnOnce(&PredictiveDistribution) -> (DVector<f64>, DVector<f64>),
) -> Result<(PredictiveDistribution, DVector<f64>)> {
    let ind = Inducing::new(params, var)?;
    let proj = project(params, var, &ind, x_star);
    let pred = PredictiveDistribution {
        means: proj.means.clone(),
        variances: proj.variances.clone(),
        covariance: None,
    };
    let (gmean, gvar) = adjoint(&pred);
    let mut adj = Adjoints::zeros(var.num_inducing(), x_star.nrows());
    adj.add_predictive(&ind, &proj, &gmean, &gvar);
    let grad = adj.into_grad(params, var, &ind, x_star, &proj.kmn);
    Ok((pred, grad))
}

/// Optimizer coordinates for the variational part. With `L_K` the jittered
/// Cholesky factor of `K_MM`, `u = c + L_K w` and `q(w) = N(v, L_v L_vᵀ)`, so
/// `m = c + L_K v` and `L_S = L_K L_v`. Packed like
/// [`VariationalParams::to_vec`] with `v` and `L_v` in place of `m` and `L_S`.
pub(crate) fn whitened_vec(params: &KernelParams, var: &VariationalParams) -> Result<Vec<f64>> {
    let (lk, _) = prior_factor(params, &var.z)?;
    let centered = var.m.add_scalar(-params.mean_const);
    let v = lk.solve_lower_triangular(&centered);
    let l_v = lk.solve_lower_triangular(&var.l_s());
    match (v, l_v) {
        (Some(v), Some(l_v)) => Ok(VariationalParams::new(var.z.clone(), v, &l_v.lower_triangle())?.to_vec()),
        _ => Err(Error::numerical("singular inducing covariance", params)),
    }
}

/// Inverse of [`whitened_vec`] under the given kernel.
pub(crate) fn from_whitened(
    params: &KernelParams,
    num_inducing: usize,
    dim: usize,
    w: &[f64],
) -> Result<VariationalParams> {
    let white = VariationalParams::from_slice(num_inducing, dim, w)?;
    let (lk, _) = prior_factor(params, &white.z)?;
    let m = (&lk * &white.m).add_scalar(params.mean_const);
    let l_s = &lk * white.l_s();
    VariationalParams::new(white.z, m, &l_s)
        .map_err(|_| Error::numerical("variational covariance factor degenerated", params))
}

fn prior_factor(params: &KernelParams, z: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let kmm = kernel::gram_unchecked(params, z, z);
    let lk = cholesky_jittered(kmm.clone(), params)?.unpack();
    Ok((lk, kmm))
}

/// Maps a gradient over `[kernel][Z][m][L_S]` to the whitened coordinates of
/// [`whitened_vec`], including the paths through `L_K`.
pub(crate) fn whiten_gradient(
    params: &KernelParams,
    var: &VariationalParams,
    grad: &DVector<f64>,
) -> Result<DVector<f64>> {
    let (size, d) = var.z.shape();
    let at_m = KernelParams::LEN + size * d;
    let at_l = at_m + size;
    let (lk, kmm) = prior_factor(params, &var.z)?;
    let l_s = var.l_s();
    let singular = || Error::numerical("singular inducing covariance", params);
    let v = lk
        .solve_lower_triangular(&var.m.add_scalar(-params.mean_const))
        .ok_or_else(singular)?;
    let l_v = lk.solve_lower_triangular(&l_s).ok_or_else(singular)?.lower_triangle();

    let g_m = grad.rows(at_m, size).into_owned();
    let mut g_l = DMatrix::zeros(size, size);
    let mut at = at_l;
    for i in 0..size {
        for j in 0..=i {
            g_l[(i, j)] = grad[at];
            at += 1;
        }
        g_l[(i, i)] /= l_s[(i, i)];
    }

    let g_v = lk.tr_mul(&g_m);
    let g_lv = lk.tr_mul(&g_l);
    // Cholesky adjoint: Ā = L⁻ᵀ Φ(Lᵀ L̄) L⁻¹ with Φ taking the lower triangle
    // and halving the diagonal
    let l_bar = (&g_m * v.transpose() + &g_l * l_v.transpose()).lower_triangle();
    let mut phi = lk.tr_mul(&l_bar).lower_triangle();
    phi.set_diagonal(&(phi.diagonal() * 0.5));
    let left = lk.tr_solve_lower_triangular(&phi).ok_or_else(singular)?;
    let a_bar_t = lk.tr_solve_lower_triangular(&left.transpose()).ok_or_else(singular)?;
    let a_bar = (&a_bar_t + a_bar_t.transpose()) * 0.5;
    let c = kernel::contract(params, &var.z, &var.z, &kmm, &a_bar, true);

    let mut out = grad.clone();
    out[0] += c.d_log_lengthscale;
    out[1] += c.d_log_signal_var;
    out[3] += g_m.sum();
    let dz = c.d_a.unwrap() + c.d_b.unwrap();
    for i in 0..size {
        for k in 0..d {
            out[KernelParams::LEN + i * d + k] += dz[(i, k)];
        }
    }
    out.rows_mut(at_m, size).copy_from(&g_v);
    let mut at = at_l;
    for i in 0..size {
        for j in 0..=i {
            out[at] = if i == j { g_lv[(i, i)] * l_v[(i, i)] } else { g_lv[(i, j)] };
            at += 1;
        }
    }
    Ok(out)
}
