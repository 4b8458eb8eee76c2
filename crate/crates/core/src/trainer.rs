//! First-order training of a [`GpModel`], either on the data-fit objective
//! alone or alternating with steps that push the predictive away from the
//! negative datapairs.

use std::str::FromStr;
use std::time::Instant;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::GpModel;
use crate::negcon::{self, NegativeSet};
use crate::optim::Adam;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Classical,
    GpNd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternation {
    /// One step on the data-fit loss, then one step on `−β·penalty`.
    Alternating,
    /// One step on `loss − β·penalty`.
    Joint,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classical" => Ok(Mode::Classical),
            "gp_nd" | "gp-nd" => Ok(Mode::GpNd),
            other => Err(Error::invalid(format!("unknown training mode '{other}'"))),
        }
    }
}

impl FromStr for Alternation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alternating" => Ok(Alternation::Alternating),
            "joint" => Ok(Alternation::Joint),
            other => Err(Error::invalid(format!("unknown alternation '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub beta: f64,
    pub sigma_neg: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Minibatch size for the sparse backend; `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub mode: Mode,
    pub alternation: Alternation,
    /// Stop as soon as convergence is detected instead of running every epoch.
    pub early_stop: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 0.0,
            sigma_neg: 1.0,
            learning_rate: 0.1,
            epochs: 400,
            batch_size: None,
            seed: 0,
            mode: Mode::Classical,
            alternation: Alternation::Alternating,
            early_stop: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid("beta must be non-negative"));
        }
        if !(self.sigma_neg > 0.0 && self.sigma_neg.is_finite()) {
            return Err(Error::invalid("sigma_neg must be positive"));
        }
        if self.batch_size == Some(0) {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(())
    }

    /// β as used by training; classical mode never applies the penalty.
    pub fn effective_beta(&self) -> f64 {
        match self.mode {
            Mode::Classical => 0.0,
            Mode::GpNd => self.beta,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    /// Data-fit loss per epoch (mean over the epoch's minibatch steps).
    pub nll_trace: Vec<f64>,
    /// Repulsion penalty per epoch; zero when no penalty step ran.
    pub penalty_trace: Vec<f64>,
    pub final_model: GpModel,
    pub wall_clock_per_epoch: Vec<f64>,
    pub converged_epoch: Option<usize>,
}

impl FitReport {
    pub fn epochs_run(&self) -> usize {
        self.nll_trace.len()
    }

    pub fn total_seconds(&self) -> f64 {
        self.wall_clock_per_epoch.iter().sum()
    }
}

const CONVERGENCE_RTOL: f64 = 1e-6;
const CONVERGENCE_WINDOW: usize = 20;

struct Run<'a> {
    model: GpModel,
    theta: DVector<f64>,
    adam: Adam,
    lr: f64,
    data: &'a Dataset,
    epoch: usize,
    steps: usize,
}

impl Run<'_> {
    fn diverged(&self, message: impl Into<String>) -> Error {
        Error::Training {
            epoch: self.epoch,
            message: message.into(),
            snapshot: self.theta.as_slice().to_vec(),
        }
    }

    fn step(&mut self, mut grad: DVector<f64>) -> Result<()> {
        self.model.mask_gradient(&mut grad);
        let epoch = self.epoch;
        self.adam
            .step(&mut self.theta, &grad, self.lr)
            .map_err(|e| match e {
                Error::Training { message, snapshot, .. } => Error::Training {
                    epoch,
                    message,
                    snapshot,
                },
                other => other,
            })?;
        self.steps += 1;
        self.model.set_params_vec(&self.theta)
    }

    /// One epoch of updates; returns the summed batch losses and the penalty.
    fn pass(
        &mut self,
        plan: &[Option<Vec<usize>>],
        neg: Option<&NegativeSet>,
        alternation: Alternation,
        beta: f64,
    ) -> Result<(f64, f64)> {
        let mut loss_sum = 0.0;
        let mut penalty = 0.0;
        match (neg, alternation) {
            (Some(neg), Alternation::Joint) => {
                for batch in plan {
                    let (loss, grad) = self.model.objective(self.data, batch.as_deref(), true)?;
                    let (p, pgrad) = negcon::nd_penalty(&self.model, self.data, neg, true)?;
                    loss_sum += self.checked(loss, "loss")?;
                    penalty = self.checked(p, "penalty")?;
                    self.step(grad.unwrap() - pgrad.unwrap() * beta)?;
                }
            }
            _ => {
                for batch in plan {
                    let (loss, grad) = self.model.objective(self.data, batch.as_deref(), true)?;
                    loss_sum += self.checked(loss, "loss")?;
                    self.step(grad.unwrap())?;
                }
                if let Some(neg) = neg {
                    let (p, pgrad) = negcon::nd_penalty(&self.model, self.data, neg, true)?;
                    penalty = self.checked(p, "penalty")?;
                    self.step(pgrad.unwrap() * -beta)?;
                }
            }
        }
        Ok((loss_sum, penalty))
    }

    fn checked(&self, value: f64, what: &str) -> Result<f64> {
        if value.is_finite() {
            Ok(value)
        } else {
            Err(self.diverged(format!("non-finite {what}: {value}")))
        }
    }
}

fn batches(n: usize, batch_size: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<Option<Vec<usize>>> {
    match batch_size {
        Some(b) if b < n => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            idx.chunks(b).map(|c| Some(c.to_vec())).collect()
        }
        _ => vec![None],
    }
}

/// Trains `model` and returns the trace and the final model.
///
/// `neg` must be given exactly when `config.mode` is [`Mode::GpNd`]; its blob
/// spread is replaced by `config.sigma_neg`. With `β = 0` the penalty step is
/// skipped entirely so the optimizer state matches classical training.
pub fn fit(
    model: &GpModel,
    data: &Dataset,
    neg: Option<&NegativeSet>,
    config: &TrainConfig,
) -> Result<FitReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training needs at least one datapair"));
    }
    let neg = match (config.mode, neg) {
        (Mode::GpNd, Some(n)) => Some(n.clone().with_sigma_neg(config.sigma_neg)?),
        (Mode::Classical, None) => None,
        (Mode::GpNd, None) => return Err(Error::invalid("gp_nd training needs negative datapairs")),
        (Mode::Classical, Some(_)) => {
            return Err(Error::invalid("classical training does not take negative datapairs"))
        }
    };
    let beta = config.effective_beta();
    let neg = neg.filter(|n| !n.is_empty() && beta > 0.0);
    let batch_size = match model {
        GpModel::Exact { .. } => None,
        GpModel::Sparse { .. } => config.batch_size,
    };

    let mut run = Run {
        theta: model.params_vec()?,
        adam: Adam::new(model.num_params()),
        model: model.clone(),
        lr: config.learning_rate,
        data,
        epoch: 0,
        steps: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut nll_trace = Vec::with_capacity(config.epochs);
    let mut penalty_trace = Vec::with_capacity(config.epochs);
    let mut wall_clock = Vec::with_capacity(config.epochs);
    let mut converged_epoch = None;
    let mut last_objective: Option<f64> = None;
    let mut stable_epochs = 0usize;

    for epoch in 0..config.epochs {
        run.epoch = epoch;
        let start = Instant::now();
        let plan = batches(data.len(), batch_size, &mut rng);
        let (loss_sum, penalty) = run.pass(&plan, neg.as_ref(), config.alternation, beta).map_err(|e| match e {
            // parameters reached by the optimizer no longer give a usable covariance
            Error::Numerical { message, .. } if run.steps > 0 => run.diverged(message),
            other => other,
        })?;

        let loss = loss_sum / plan.len() as f64;
        nll_trace.push(loss);
        penalty_trace.push(penalty);
        wall_clock.push(start.elapsed().as_secs_f64());

        let objective = loss - beta * penalty;
        if let Some(prev) = last_objective {
            if (objective - prev).abs() <= CONVERGENCE_RTOL * prev.abs().max(1e-12) {
                stable_epochs += 1;
            } else {
                stable_epochs = 0;
            }
        }
        last_objective = Some(objective);
        if stable_epochs >= CONVERGENCE_WINDOW && converged_epoch.is_none() {
            converged_epoch = Some(epoch);
            if config.early_stop {
                break;
            }
        }
    }

    Ok(FitReport {
        nll_trace,
        penalty_trace,
        final_model: run.model,
        wall_clock_per_epoch: wall_clock,
        converged_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelParams;
    use crate::svgp::VariationalParams;
    use nalgebra::DMatrix;
    use rand::Rng;

    fn sine_data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 1, |i, _| 6.0 * i as f64 / (n - 1) as f64);
        let y = DVector::from_fn(n, |i, _| x[(i, 0)].sin() + rng.random_range(-0.1..0.1));
        Dataset::new(x, y).unwrap()
    }

    fn on_curve_negatives() -> NegativeSet {
        let xs = [1.3, 3.1, 4.7];
        NegativeSet::new(
            DMatrix::from_row_slice(3, 1, &xs),
            DVector::from_iterator(3, xs.iter().map(|x| x.sin())),
            0.1,
        )
        .unwrap()
    }

    #[test]
    fn classical_descends() {
        let data = sine_data(40, 1);
        let report = fit(&GpModel::exact(KernelParams::default()), &data, None, &TrainConfig::default()).unwrap();
        assert_eq!(report.epochs_run(), 400);
        assert!(report.nll_trace.last().unwrap() < &report.nll_trace[0]);
        // tail of a full-batch exact fit is non-increasing up to noise
        let tail = &report.nll_trace[360..];
        for w in tail.windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn zero_beta_matches_classical() {
        let data = sine_data(30, 2);
        let model = GpModel::exact(KernelParams::default());
        let classical = TrainConfig {
            epochs: 60,
            ..TrainConfig::default()
        };
        let nd = TrainConfig {
            mode: Mode::GpNd,
            beta: 0.0,
            sigma_neg: 0.1,
            ..classical.clone()
        };
        let a = fit(&model, &data, None, &classical).unwrap();
        let b = fit(&model, &data, Some(&on_curve_negatives()), &nd).unwrap();
        assert_eq!(a.nll_trace, b.nll_trace);
        assert_eq!(a.penalty_trace, b.penalty_trace);
        assert_eq!(a.final_model, b.final_model);
    }

    #[test]
    fn negatives_push_the_fit_away() {
        let data = sine_data(40, 3);
        let neg = on_curve_negatives();
        let model = GpModel::exact(KernelParams::default());
        let base = TrainConfig::default();
        let classical = fit(&model, &data, None, &base).unwrap();
        let nd_cfg = TrainConfig {
            mode: Mode::GpNd,
            beta: 3.0,
            sigma_neg: 0.1,
            ..base
        };
        let nd = fit(&model, &data, Some(&neg), &nd_cfg).unwrap();
        let pc = classical.final_model.predict(&data, neg.x(), false).unwrap();
        let pn = nd.final_model.predict(&data, neg.x(), false).unwrap();
        for i in 0..neg.len() {
            let dc = (pc.means[i] - neg.y()[i]).abs();
            let dn = (pn.means[i] - neg.y()[i]).abs();
            assert!(dn > dc, "pair {i}: {dn} <= {dc}");
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let data = sine_data(50, 4);
        let kernel = KernelParams::default();
        let var = VariationalParams::init_from_data(&kernel, &data, 8, 3).unwrap();
        let model = GpModel::sparse(kernel, var);
        let cfg = TrainConfig {
            mode: Mode::GpNd,
            beta: 1.0,
            sigma_neg: 0.2,
            epochs: 15,
            batch_size: Some(16),
            seed: 9,
            ..TrainConfig::default()
        };
        let a = fit(&model, &data, Some(&on_curve_negatives()), &cfg).unwrap();
        let b = fit(&model, &data, Some(&on_curve_negatives()), &cfg).unwrap();
        assert_eq!(a.nll_trace, b.nll_trace);
        assert_eq!(a.penalty_trace, b.penalty_trace);
        assert_eq!(a.final_model, b.final_model);
    }

    #[test]
    fn joint_mode_runs_and_frozen_inducing_stay_put() {
        let data = sine_data(30, 5);
        let kernel = KernelParams::default();
        let var = VariationalParams::init_from_data(&kernel, &data, 5, 1).unwrap();
        let model = GpModel::Sparse {
            kernel,
            variational: var.clone(),
            train_inducing: false,
        };
        let cfg = TrainConfig {
            mode: Mode::GpNd,
            beta: 2.0,
            sigma_neg: 0.1,
            epochs: 20,
            alternation: Alternation::Joint,
            ..TrainConfig::default()
        };
        let r = fit(&model, &data, Some(&on_curve_negatives()), &cfg).unwrap();
        assert_eq!(r.final_model.variational().unwrap().z(), var.z());
        assert!(r.penalty_trace.iter().all(|p| *p != 0.0));
    }

    #[test]
    fn invalid_configs_rejected() {
        let data = sine_data(10, 0);
        let model = GpModel::exact(KernelParams::default());
        let bad_lr = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(fit(&model, &data, None, &bad_lr).is_err());
        let nd = TrainConfig {
            mode: Mode::GpNd,
            ..TrainConfig::default()
        };
        assert!(fit(&model, &data, None, &nd).is_err());
        assert!(fit(&model, &data, Some(&on_curve_negatives()), &TrainConfig::default()).is_err());
    }

    #[test]
    fn divergence_reports_epoch_and_snapshot() {
        // squared residuals overflow to infinity
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
        let data = Dataset::new(x, DVector::from_element(3, 1e200)).unwrap();
        let model = GpModel::exact(KernelParams::default());
        match fit(&model, &data, None, &TrainConfig::default()) {
            Err(Error::Training { epoch, snapshot, .. }) => {
                assert_eq!(epoch, 0);
                assert_eq!(snapshot, model.params_vec().unwrap().as_slice());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn runaway_steps_report_training_divergence() {
        let data = sine_data(6, 2);
        let cfg = TrainConfig {
            learning_rate: 1e300,
            epochs: 5,
            ..TrainConfig::default()
        };
        match fit(&GpModel::exact(KernelParams::default()), &data, None, &cfg) {
            Err(Error::Training { epoch, snapshot, .. }) => {
                assert!(epoch < 5);
                assert_eq!(snapshot.len(), KernelParams::LEN);
                assert!(snapshot.iter().any(|v| v.abs() > 1e200));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn early_stop_records_convergence() {
        let data = sine_data(20, 6);
        let cfg = TrainConfig {
            epochs: 3000,
            learning_rate: 0.05,
            early_stop: true,
            ..TrainConfig::default()
        };
        let r = fit(&GpModel::exact(KernelParams::default()), &data, None, &cfg).unwrap();
        let at = r.converged_epoch.expect("should converge");
        assert_eq!(r.epochs_run(), at + 1);
        assert_eq!(r.wall_clock_per_epoch.len(), r.epochs_run());
    }
}
