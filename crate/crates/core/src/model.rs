//! A trainable GP with either the exact or the sparse variational backend,
//! exposed through one flat unconstrained parameter vector.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exact_gp::{self, PredictiveDistribution};
use crate::kernel::KernelParams;
use crate::svgp::{self, VariationalParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Exact,
    Svgp,
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Exact => "exact",
            Backend::Svgp => "svgp",
        })
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Backend::Exact),
            "svgp" | "sparse" => Ok(Backend::Svgp),
            other => Err(Error::invalid(format!("unknown backend '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GpModel {
    Exact {
        kernel: KernelParams,
    },
    Sparse {
        kernel: KernelParams,
        variational: VariationalParams,
        /// When false the inducing inputs keep their initial placement.
        train_inducing: bool,
    },
}

impl GpModel {
    pub fn exact(kernel: KernelParams) -> Self {
        GpModel::Exact { kernel }
    }

    pub fn sparse(kernel: KernelParams, variational: VariationalParams) -> Self {
        GpModel::Sparse {
            kernel,
            variational,
            train_inducing: true,
        }
    }

    pub fn backend(&self) -> Backend {
        match self {
            GpModel::Exact { .. } => Backend::Exact,
            GpModel::Sparse { .. } => Backend::Svgp,
        }
    }

    pub fn kernel(&self) -> &KernelParams {
        match self {
            GpModel::Exact { kernel } | GpModel::Sparse { kernel, .. } => kernel,
        }
    }

    pub fn variational(&self) -> Option<&VariationalParams> {
        match self {
            GpModel::Exact { .. } => None,
            GpModel::Sparse { variational, .. } => Some(variational),
        }
    }

    pub fn num_params(&self) -> usize {
        KernelParams::LEN
            + self
                .variational()
                .map_or(0, |v| VariationalParams::param_len(v.num_inducing(), v.dim()))
    }

    /// Flat unconstrained parameters: the kernel, then for the sparse backend
    /// the inducing inputs and the whitened variational mean and factor
    /// (`m = c + L_K v`, `L_S = L_K L_v` with `L_K L_Kᵀ = K_MM`).
    pub fn params_vec(&self) -> Result<DVector<f64>> {
        let mut v = self.kernel().to_array().to_vec();
        if let GpModel::Sparse {
            kernel, variational, ..
        } = self
        {
            v.extend(svgp::whitened_vec(kernel, variational)?);
        }
        Ok(DVector::from_vec(v))
    }

    pub fn set_params_vec(&mut self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.num_params() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                v.len()
            )));
        }
        match self {
            GpModel::Exact { kernel } => *kernel = KernelParams::from_slice(v.as_slice()),
            GpModel::Sparse {
                kernel,
                variational,
                ..
            } => {
                *kernel = KernelParams::from_slice(&v.as_slice()[..KernelParams::LEN]);
                *variational = svgp::from_whitened(
                    kernel,
                    variational.num_inducing(),
                    variational.dim(),
                    &v.as_slice()[KernelParams::LEN..],
                )?;
            }
        }
        Ok(())
    }

    /// Zeroes gradient entries of parameters that are held fixed.
    pub fn mask_gradient(&self, grad: &mut DVector<f64>) {
        if let GpModel::Sparse {
            variational,
            train_inducing: false,
            ..
        } = self
        {
            for i in variational.z_range() {
                grad[KernelParams::LEN + i] = 0.0;
            }
        }
    }

    /// The data-fit loss minimized by training: the exact negative log
    /// marginal likelihood, or the negative (minibatch) ELBO.
    pub fn objective(
        &self,
        data: &Dataset,
        batch: Option<&[usize]>,
        with_grad: bool,
    ) -> Result<(f64, Option<DVector<f64>>)> {
        match self {
            GpModel::Exact { kernel } => match batch {
                None => exact_gp::marginal_nll(kernel, data, with_grad),
                Some(idx) => exact_gp::marginal_nll(kernel, &data.select(idx), with_grad),
            },
            GpModel::Sparse {
                kernel,
                variational,
                ..
            } => {
                let (value, grad) = svgp::elbo(kernel, variational, data, batch, with_grad)?;
                let grad = match grad {
                    Some(g) => Some(-svgp::whiten_gradient(kernel, variational, &g)?),
                    None => None,
                };
                Ok((-value, grad))
            }
        }
    }

    /// Predictive distribution at `x`. The sparse backend ignores `data` and
    /// never returns a full covariance.
    pub fn predict(&self, data: &Dataset, x: &DMatrix<f64>, full_cov: bool) -> Result<PredictiveDistribution> {
        match self {
            GpModel::Exact { kernel } => exact_gp::posterior(kernel, data, x, full_cov),
            GpModel::Sparse {
                kernel,
                variational,
                ..
            } => svgp::svgp_posterior(kernel, variational, x),
        }
    }

    pub(crate) fn predict_backprop(
        &self,
        data: &Dataset,
        x: &DMatrix<f64>,
        adjoint: impl FnOnce(&PredictiveDistribution) -> (DVector<f64>, DVector<f64>),
    ) -> Result<(PredictiveDistribution, DVector<f64>)> {
        match self {
            GpModel::Exact { kernel } => exact_gp::posterior_backprop(kernel, data, x, adjoint),
            GpModel::Sparse {
                kernel,
                variational,
                ..
            } => {
                let (pred, grad) = svgp::posterior_backprop(kernel, variational, x, adjoint)?;
                Ok((pred, svgp::whiten_gradient(kernel, variational, &grad)?))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_grad_close, central_diff, random_params, random_problem};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sparse(rng: &mut ChaCha8Rng, data: &Dataset, size: usize) -> GpModel {
        let kernel = random_params(rng);
        let z = DMatrix::from_fn(size, data.dim(), |_, _| rng.random_range(-2.0..2.0));
        let m = DVector::from_fn(size, |_, _| rng.random_range(-1.0..1.0));
        let l = DMatrix::from_fn(size, size, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => rng.random_range(-0.3..0.3),
            std::cmp::Ordering::Equal => rng.random_range(0.2..1.0),
            std::cmp::Ordering::Less => 0.0,
        });
        GpModel::sparse(kernel, VariationalParams::new(z, m, &l).unwrap())
    }

    #[test]
    fn sparse_params_vec_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = random_problem(&mut rng, 10, 2);
        let model = random_sparse(&mut rng, &data, 4);
        let theta = model.params_vec().unwrap();
        let mut back = model.clone();
        back.set_params_vec(&theta).unwrap();
        let (a, b) = (model.variational().unwrap(), back.variational().unwrap());
        assert_eq!(a.z(), b.z());
        assert!((a.mean() - b.mean()).amax() < 1e-10);
        assert!((a.l_s() - b.l_s()).amax() < 1e-10);
        assert_eq!(theta.len(), model.num_params());
    }

    #[test]
    fn sparse_objective_gradient_matches_central_differences() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = rng.random_range(1..=2);
            let data = random_problem(&mut rng, 12, d);
            let size = rng.random_range(1..=4);
            let model = random_sparse(&mut rng, &data, size);
            let (_, g) = model.objective(&data, None, true).unwrap();
            let base = model.params_vec().unwrap();
            let fd = central_diff(base.as_slice(), 1e-5, |v| {
                let mut m = model.clone();
                m.set_params_vec(&DVector::from_column_slice(v)).unwrap();
                m.objective(&data, None, false).unwrap().0
            });
            assert_grad_close(g.unwrap().as_slice(), &fd, 1e-4);
        }
    }

    #[test]
    fn exact_objective_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = random_problem(&mut rng, 8, 1);
        let model = GpModel::exact(random_params(&mut rng));
        let (_, g) = model.objective(&data, None, true).unwrap();
        let fd = central_diff(model.params_vec().unwrap().as_slice(), 1e-5, |v| {
            GpModel::exact(KernelParams::from_slice(v)).objective(&data, None, false).unwrap().0
        });
        assert_grad_close(g.unwrap().as_slice(), &fd, 1e-4);
    }

    #[test]
    fn frozen_inducing_inputs_are_masked() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = random_problem(&mut rng, 8, 2);
        let GpModel::Sparse {
            kernel, variational, ..
        } = random_sparse(&mut rng, &data, 3)
        else {
            unreachable!()
        };
        let model = GpModel::Sparse {
            kernel,
            variational,
            train_inducing: false,
        };
        let mut g = DVector::from_element(model.num_params(), 1.0);
        model.mask_gradient(&mut g);
        assert!(g.rows(KernelParams::LEN, 6).iter().all(|v| *v == 0.0));
        assert!(g.rows(KernelParams::LEN + 6, g.len() - 10).iter().all(|v| *v == 1.0));
    }

    #[test]
    fn backend_names_parse() {
        assert_eq!("exact".parse::<Backend>().unwrap(), Backend::Exact);
        assert_eq!("svgp".parse::<Backend>().unwrap(), Backend::Svgp);
        assert!("dense".parse::<Backend>().is_err());
        assert_eq!(Backend::Svgp.to_string(), "svgp");
    }
}
