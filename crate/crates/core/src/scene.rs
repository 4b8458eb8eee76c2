//! Synthetic trajectory scene: noisy markers along a smooth path inside a
//! corridor, obstacles placed beside the path, and the clearance measures
//! used to compare fits.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, Metrics};
use crate::error::{Error, Result};
use crate::exact_gp::PredictiveDistribution;
use crate::kernel::KernelParams;
use crate::model::GpModel;
use crate::negcon::NegativeSet;
use crate::trainer::{self, FitReport, Mode, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathShape {
    /// `1.2 sin(0.8 t) + 0.6 sin(2.1 t + 0.5)`
    TwoSines,
    /// `0.8 sin(0.6 t)`
    Gentle,
}

impl PathShape {
    pub fn eval(self, t: f64) -> f64 {
        match self {
            PathShape::TwoSines => 1.2 * (0.8 * t).sin() + 0.6 * (2.1 * t + 0.5).sin(),
            PathShape::Gentle => 0.8 * (0.6 * t).sin(),
        }
    }
}

impl FromStr for PathShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_sines" | "default" => Ok(PathShape::TwoSines),
            "gentle" => Ok(PathShape::Gentle),
            other => Err(Error::invalid(format!("unknown path shape '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub shape: PathShape,
    pub n_markers: usize,
    pub m_obstacles: usize,
    /// Defaults to 5% of the corridor width.
    pub noise_std: Option<f64>,
    pub seed: u64,
    pub corridor: (f64, f64),
    pub t_range: (f64, f64),
    pub path_width: f64,
    /// Blob spread attached to the generated obstacles.
    pub sigma_neg: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            shape: PathShape::TwoSines,
            n_markers: 250,
            m_obstacles: 10,
            noise_std: None,
            seed: 0,
            corridor: (-2.5, 2.5),
            t_range: (0.0, 10.0),
            path_width: 0.5,
            sigma_neg: 0.1,
        }
    }
}

impl SceneConfig {
    pub fn noise_std(&self) -> f64 {
        self.noise_std
            .unwrap_or(0.05 * (self.corridor.1 - self.corridor.0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub markers: Dataset,
    pub obstacles: NegativeSet,
    pub shape: PathShape,
    pub corridor: (f64, f64),
    pub path_width: f64,
}

impl Scene {
    pub fn ground_truth(&self, t: f64) -> f64 {
        self.shape.eval(t)
    }

    /// Indices of markers held out for evaluation (every fifth, by path order).
    pub fn holdout_indices(&self) -> Vec<usize> {
        (0..self.markers.len()).filter(|i| i % 5 == 4).collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.markers.len()).filter(|i| i % 5 != 4).collect()
    }

    /// Checks that markers are inside the corridor and that no obstacle sits
    /// within one path width of the path. Returns the first violation.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let (lo, hi) = self.corridor;
        for (i, y) in self.markers.y().iter().enumerate() {
            if *y < lo || *y > hi {
                return Err(format!("marker {i} at {y} is outside the corridor"));
            }
        }
        for i in 0..self.obstacles.len() {
            let t = self.obstacles.x()[(i, 0)];
            let gap = (self.obstacles.y()[i] - self.ground_truth(t)).abs();
            if gap < self.path_width {
                return Err(format!("obstacle {i} is {gap} from the path"));
            }
        }
        Ok(())
    }
}

pub fn make_scene(config: &SceneConfig) -> Result<Scene> {
    if config.n_markers < 2 {
        return Err(Error::invalid("a scene needs at least two markers"));
    }
    let (lo, hi) = config.corridor;
    let (t0, t1) = config.t_range;
    if !(lo < hi && t0 < t1 && config.path_width > 0.0) {
        return Err(Error::invalid("corridor, path range and path width must be non-degenerate"));
    }
    let noise_std = config.noise_std();
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::invalid("noise_std must be non-negative"));
    }
    let shape = config.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::invalid(e.to_string()))?;

    let mut ts: Vec<f64> = (0..config.n_markers).map(|_| rng.random_range(t0..=t1)).collect();
    ts.sort_by(f64::total_cmp);
    let ys: Vec<f64> = ts
        .iter()
        .map(|&t| (shape.eval(t) + noise.sample(&mut rng)).clamp(lo, hi))
        .collect();
    let markers = Dataset::new(DMatrix::from_column_slice(ts.len(), 1, &ts), DVector::from_vec(ys))?
        .with_feature_names(vec!["t".into()]);

    let margin = 0.05 * (t1 - t0);
    let mut obs_t = Vec::with_capacity(config.m_obstacles);
    let mut obs_y = Vec::with_capacity(config.m_obstacles);
    for _ in 0..config.m_obstacles {
        let t = rng.random_range((t0 + margin)..=(t1 - margin));
        let offset = rng.random_range(1.0..=3.0) * config.path_width;
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let g = shape.eval(t);
        let mut y = g + side * offset;
        if y < lo || y > hi {
            y = g - side * offset;
        }
        obs_t.push(t);
        obs_y.push(y);
    }
    let obstacles = NegativeSet::new(
        DMatrix::from_column_slice(obs_t.len(), 1, &obs_t),
        DVector::from_vec(obs_y),
        config.sigma_neg,
    )?;

    Ok(Scene {
        markers,
        obstacles,
        shape,
        corridor: config.corridor,
        path_width: config.path_width,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AvoidanceReport {
    pub clearances: Vec<f64>,
    pub min_clearance: f64,
    pub mean_clearance: f64,
    pub collisions: usize,
}

pub const DEFAULT_COLLISION_K: f64 = 2.0;

/// Clearance of the predictive mean from each obstacle target. A collision is
/// a clearance below `k·σ_neg`.
pub fn evaluate_avoidance(pred: &PredictiveDistribution, neg: &NegativeSet, k: f64) -> Result<AvoidanceReport> {
    if pred.len() != neg.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} obstacles",
            pred.len(),
            neg.len()
        )));
    }
    if neg.is_empty() {
        return Err(Error::invalid("no obstacles to evaluate"));
    }
    let clearances: Vec<f64> = pred
        .means
        .iter()
        .zip(neg.y().iter())
        .map(|(m, y)| (m - y).abs())
        .collect();
    let threshold = k * neg.sigma_neg();
    Ok(AvoidanceReport {
        min_clearance: clearances.iter().copied().fold(f64::INFINITY, f64::min),
        mean_clearance: clearances.iter().sum::<f64>() / clearances.len() as f64,
        collisions: clearances.iter().filter(|c| **c < threshold).count(),
        clearances,
    })
}

/// One trained model on a scene with its avoidance and holdout scores.
#[derive(Clone, Debug)]
pub struct SceneOutcome {
    pub avoidance: AvoidanceReport,
    /// Holdout metrics against the held-out markers.
    pub holdout: Metrics,
    pub fit: FitReport,
}

fn scene_model() -> GpModel {
    GpModel::exact(KernelParams::default())
}

/// Trains on the non-held-out markers with `config` and scores the result.
/// Obstacles are used as negatives only in [`Mode::GpNd`].
pub fn fit_and_evaluate(scene: &Scene, config: &TrainConfig) -> Result<SceneOutcome> {
    let train = scene.markers.select(&scene.train_indices());
    let holdout = scene.markers.select(&scene.holdout_indices());
    let neg = match config.mode {
        Mode::GpNd => Some(&scene.obstacles),
        Mode::Classical => None,
    };
    let fit = trainer::fit(&scene_model(), &train, neg, config)?;
    let model = &fit.final_model;
    let obstacles = scene.obstacles.clone().with_sigma_neg(match config.mode {
        Mode::GpNd => config.sigma_neg,
        Mode::Classical => scene.obstacles.sigma_neg(),
    })?;
    let at_obstacles = model.predict(&train, obstacles.x(), false)?;
    let avoidance = evaluate_avoidance(&at_obstacles, &obstacles, DEFAULT_COLLISION_K)?;
    let at_holdout = model.predict(&train, holdout.x(), false)?;
    let holdout = data::metrics(&at_holdout, holdout.y(), model.kernel().noise_var())?;
    Ok(SceneOutcome {
        avoidance,
        holdout,
        fit,
    })
}

#[derive(Clone, Debug)]
pub struct Comparison {
    pub classical: SceneOutcome,
    pub gp_nd: SceneOutcome,
}

/// Paired classical and GP-ND fits sharing every setting except the penalty.
pub fn compare(scene: &Scene, nd_config: &TrainConfig) -> Result<Comparison> {
    let nd_config = TrainConfig {
        mode: Mode::GpNd,
        ..nd_config.clone()
    };
    let classical_config = TrainConfig {
        mode: Mode::Classical,
        ..nd_config.clone()
    };
    Ok(Comparison {
        classical: fit_and_evaluate(scene, &classical_config)?,
        gp_nd: fit_and_evaluate(scene, &nd_config)?,
    })
}

#[derive(Clone, Debug)]
pub struct SweepCell {
    pub beta: f64,
    pub sigma_neg: f64,
    /// Failures are kept per cell as their error message.
    pub outcome: std::result::Result<SceneOutcome, String>,
}

/// Trains one GP-ND model per `(β, σ_neg)` pair, row-major over `betas`.
/// Cells run on up to `jobs` threads; the result order never depends on it.
pub fn sweep(
    scene: &Scene,
    betas: &[f64],
    sigmas: &[f64],
    base: &TrainConfig,
    jobs: usize,
) -> Result<Vec<SweepCell>> {
    if betas.is_empty() || sigmas.is_empty() {
        return Err(Error::invalid("sweep grids must be non-empty"));
    }
    let grid: Vec<(f64, f64)> = betas
        .iter()
        .flat_map(|b| sigmas.iter().map(move |s| (*b, *s)))
        .collect();
    let run_cell = |&(beta, sigma_neg): &(f64, f64)| {
        let config = TrainConfig {
            mode: Mode::GpNd,
            beta,
            sigma_neg,
            ..base.clone()
        };
        SweepCell {
            beta,
            sigma_neg,
            outcome: fit_and_evaluate(scene, &config).map_err(|e| e.to_string()),
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::invalid(e.to_string()))?;
    Ok(pool.install(|| grid.par_iter().map(run_cell).collect()))
}

pub const SWEEP_COLUMNS: [&str; 10] = [
    "beta",
    "sigma_neg",
    "min_clearance",
    "mean_clearance",
    "collisions",
    "rmse",
    "nll",
    "epochs_run",
    "seconds",
    "status",
];

/// Writes the sweep grid as CSV. With `timings` off the `seconds` column is
/// written as zero so repeated runs produce identical files.
pub fn write_sweep_csv<W: std::io::Write>(cells: &[SweepCell], out: W, timings: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let to_io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(SWEEP_COLUMNS).map_err(to_io)?;
    for cell in cells {
        let row = match &cell.outcome {
            Ok(o) => vec![
                cell.beta.to_string(),
                cell.sigma_neg.to_string(),
                o.avoidance.min_clearance.to_string(),
                o.avoidance.mean_clearance.to_string(),
                o.avoidance.collisions.to_string(),
                o.holdout.rmse.to_string(),
                o.holdout.nll.to_string(),
                o.fit.epochs_run().to_string(),
                if timings { o.fit.total_seconds() } else { 0.0 }.to_string(),
                "ok".to_string(),
            ],
            Err(msg) => {
                let mut row = vec![cell.beta.to_string(), cell.sigma_neg.to_string()];
                row.extend(std::iter::repeat_n(String::new(), 7));
                row.push(format!("error: {msg}"));
                row
            }
        };
        w.write_record(&row).map_err(to_io)?;
    }
    w.flush()?;
    Ok(())
}
