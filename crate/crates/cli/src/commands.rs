use std::fs;
use std::path::Path;
use std::time::Instant;

use gpnd_core::data::{self, shuffle_negatives, split_standardize, LoadedCsv};
use gpnd_core::scene::{self, SceneOutcome, SweepCell};
use gpnd_core::{
    Alternation, Backend, Dataset, FitReport, GpModel, KernelParams, Metrics, Mode, NegativeSet, SceneConfig,
    Standardization, TargetColumn, TrainConfig, VariationalParams,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::CliError;
use crate::model_file::{write_atomic, ModelFile};
use crate::settings::{NegativesSource, ReportFormat, Settings};

const DEFAULT_INDUCING: usize = 1000;

fn train_config(s: &Settings, mode: Mode, defaults: &TrainConfig) -> TrainConfig {
    let beta = match mode {
        Mode::Classical => 0.0,
        Mode::GpNd => s.beta.unwrap_or(defaults.beta),
    };
    TrainConfig {
        beta,
        sigma_neg: s.sigma_neg.unwrap_or(defaults.sigma_neg),
        learning_rate: s.lr.unwrap_or(defaults.learning_rate),
        epochs: s.epochs.unwrap_or(defaults.epochs),
        batch_size: s.batch_size.or(defaults.batch_size),
        seed: s.seed.unwrap_or(defaults.seed),
        mode,
        alternation: s.alternation.unwrap_or(Alternation::Alternating),
        early_stop: Settings::flag(s.early_stop),
    }
}

fn report_format(s: &Settings, default: ReportFormat) -> ReportFormat {
    s.report.unwrap_or(default)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn write_csv_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

fn seconds(report: &FitReport, timings: bool) -> Vec<f64> {
    if timings {
        report.wall_clock_per_epoch.clone()
    } else {
        vec![0.0; report.epochs_run()]
    }
}

fn target_column(s: &Settings) -> Result<TargetColumn, CliError> {
    match &s.target {
        None => Ok(TargetColumn::Last),
        Some(t) => t.parse().map_err(|e| CliError::Config(format!("{e}"))),
    }
}

// ---------------------------------------------------------------- fit

#[derive(Serialize)]
struct MetricsRecord {
    nll: f64,
    rmse: f64,
}

impl From<Metrics> for MetricsRecord {
    fn from(m: Metrics) -> Self {
        MetricsRecord { nll: m.nll, rmse: m.rmse }
    }
}

#[derive(Serialize)]
struct FitSummary {
    backend: Backend,
    mode: Mode,
    alternation: Alternation,
    beta: f64,
    sigma_neg: f64,
    learning_rate: f64,
    seed: u64,
    train_rows: usize,
    dropped_rows: usize,
    negatives: usize,
    inducing: Option<usize>,
    epochs_run: usize,
    converged_epoch: Option<usize>,
    final_nll: f64,
    final_penalty: f64,
    kernel: KernelParams,
    /// Metrics in target units.
    train_metrics: MetricsRecord,
    valid_metrics: Option<MetricsRecord>,
    test_metrics: Option<MetricsRecord>,
    nll_trace: Vec<f64>,
    penalty_trace: Vec<f64>,
    seconds_per_epoch: Vec<f64>,
}

fn load_negatives(
    source: &NegativesSource,
    train: &Dataset,
    standardization: &Standardization,
    seed: u64,
    has_header: bool,
) -> Result<NegativeSet, CliError> {
    match source {
        NegativesSource::Shuffled { m } => Ok(shuffle_negatives(train, *m, seed)?),
        NegativesSource::File(path) => {
            let raw = data::load_csv(path, &TargetColumn::Last, has_header)?.dataset;
            if raw.dim() != train.dim() {
                return Err(CliError::Config(format!(
                    "negatives have {} features, data has {}",
                    raw.dim(),
                    train.dim()
                )));
            }
            let y = raw.y().map(|v| standardization.transform_y(v));
            Ok(NegativeSet::new(standardization.transform_x(raw.x()), y, 1.0)?)
        }
    }
}

fn evaluate(model: &GpModel, train: &Dataset, part: &Dataset, y_std: f64) -> Result<Metrics, CliError> {
    let pred = model.predict(train, part.x(), false)?;
    Ok(data::metrics(&pred, part.y(), model.kernel().noise_var())?.to_original_units(y_std))
}

pub fn fit(s: &Settings) -> Result<(), CliError> {
    let out = s.require_out()?;
    let input = s.require_data()?;
    let has_header = !Settings::flag(s.no_header);
    let LoadedCsv { dataset, dropped_rows } = data::load_csv(input, &target_column(s)?, has_header)?;
    ensure_dir(out)?;

    let seed = s.seed.unwrap_or(0);
    let (train, valid, test, standardization) = match &s.split {
        Some(f) => {
            let [train_frac, valid_frac] = f[..] else {
                return Err(CliError::Config("--split takes two fractions".into()));
            };
            let split = split_standardize(&dataset, train_frac, valid_frac, seed)?;
            (split.train, Some(split.valid), Some(split.test), split.standardization)
        }
        None => {
            let st = Standardization::fit(&dataset)?;
            (st.apply(&dataset), None, None, st)
        }
    };

    let source = s.negatives.as_deref().map(str::parse::<NegativesSource>).transpose()?;
    let mode = s.mode.unwrap_or(if source.is_some() { Mode::GpNd } else { Mode::Classical });
    let neg = match (mode, &source) {
        (Mode::GpNd, Some(src)) => Some(load_negatives(src, &train, &standardization, seed, has_header)?),
        (Mode::GpNd, None) => return Err(CliError::Config("gp_nd mode needs --negatives".into())),
        (Mode::Classical, _) => None,
    };
    let defaults = TrainConfig {
        beta: 1.0,
        ..TrainConfig::default()
    };
    let config = train_config(s, mode, &defaults);

    let kernel = KernelParams::default();
    let backend = s.backend.unwrap_or(Backend::Exact);
    let model = match backend {
        Backend::Exact => GpModel::exact(kernel),
        Backend::Svgp => {
            let size = s.inducing.unwrap_or(DEFAULT_INDUCING).min(train.len());
            let var = VariationalParams::init_from_data(&kernel, &train, size, seed)?;
            GpModel::Sparse {
                kernel,
                variational: var,
                train_inducing: !Settings::flag(s.fix_inducing),
            }
        }
    };

    let report = gpnd_core::fit(&model, &train, neg.as_ref(), &config)?;
    let trained = &report.final_model;
    let y_std = standardization.y_std;
    let summary = FitSummary {
        backend,
        mode,
        alternation: config.alternation,
        beta: config.effective_beta(),
        sigma_neg: config.sigma_neg,
        learning_rate: config.learning_rate,
        seed,
        train_rows: train.len(),
        dropped_rows,
        negatives: neg.as_ref().map_or(0, NegativeSet::len),
        inducing: trained.variational().map(VariationalParams::num_inducing),
        epochs_run: report.epochs_run(),
        converged_epoch: report.converged_epoch,
        final_nll: *report.nll_trace.last().unwrap(),
        final_penalty: *report.penalty_trace.last().unwrap(),
        kernel: *trained.kernel(),
        train_metrics: evaluate(trained, &train, &train, y_std)?.into(),
        valid_metrics: valid.as_ref().map(|v| evaluate(trained, &train, v, y_std)).transpose()?.map(Into::into),
        test_metrics: test.as_ref().map(|t| evaluate(trained, &train, t, y_std)).transpose()?.map(Into::into),
        seconds_per_epoch: seconds(&report, Settings::flag(s.timings)),
        nll_trace: report.nll_trace.clone(),
        penalty_trace: report.penalty_trace.clone(),
    };

    ModelFile::new(trained, &train, &standardization).save(&out.join("model.json"))?;
    match report_format(s, ReportFormat::Json) {
        ReportFormat::Json => write_json(&out.join("fit_report.json"), &summary),
        ReportFormat::Csv => {
            let rows: Vec<Vec<String>> = (0..summary.epochs_run)
                .map(|e| {
                    vec![
                        e.to_string(),
                        summary.nll_trace[e].to_string(),
                        summary.penalty_trace[e].to_string(),
                        summary.seconds_per_epoch[e].to_string(),
                    ]
                })
                .collect();
            write_csv_rows(&out.join("fit_report.csv"), &["epoch", "nll", "penalty", "seconds"], &rows)
        }
    }
}

// ---------------------------------------------------------------- predict

#[derive(Serialize)]
struct PredictSummary {
    rows: usize,
    nll: f64,
    rmse: f64,
}

pub fn predict(s: &Settings) -> Result<(), CliError> {
    let out = s.require_out()?;
    let query = s.require_data()?;
    let model_path = s
        .model
        .as_deref()
        .ok_or_else(|| CliError::Config("--model is required".into()))?;
    let file = ModelFile::load(model_path)?;
    let (model, train) = file.to_model()?;
    let has_header = !Settings::flag(s.no_header);
    let st = &file.standardization;

    // with --target the query carries ground truth and metrics are reported
    let (x, truth) = match &s.target {
        Some(_) => {
            let loaded = data::load_csv(query, &target_column(s)?, has_header)?.dataset;
            (loaded.x().clone(), Some(loaded.y().clone()))
        }
        None => (data::load_inputs_csv(query, has_header)?, None),
    };
    if x.ncols() != file.dim() {
        return Err(CliError::Config(format!(
            "query has {} features, model expects {}",
            x.ncols(),
            file.dim()
        )));
    }
    ensure_dir(out)?;
    let pred = model.predict(&train, &st.transform_x(&x), false)?;
    let noise = model.kernel().noise_var();
    let obs = pred.observation_variances(noise) * (st.y_std * st.y_std);
    let pred_units = st.invert_prediction(&pred);

    let rows: Vec<Vec<String>> = (0..pred_units.len())
        .map(|i| {
            vec![
                pred_units.means[i].to_string(),
                pred_units.variances[i].to_string(),
                obs[i].to_string(),
            ]
        })
        .collect();
    write_csv_rows(&out.join("predictions.csv"), &["mean", "variance", "predictive_variance"], &rows)?;

    if let Some(y) = truth {
        let y_std = DVector::from_iterator(y.len(), y.iter().map(|v| st.transform_y(*v)));
        let m = data::metrics(&pred, &y_std, noise)?.to_original_units(st.y_std);
        let summary = PredictSummary {
            rows: y.len(),
            nll: m.nll,
            rmse: m.rmse,
        };
        match report_format(s, ReportFormat::Json) {
            ReportFormat::Json => write_json(&out.join("predict_report.json"), &summary)?,
            ReportFormat::Csv => write_csv_rows(
                &out.join("predict_report.csv"),
                &["rows", "nll", "rmse"],
                &[vec![summary.rows.to_string(), summary.nll.to_string(), summary.rmse.to_string()]],
            )?,
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- scene

fn scene_config(s: &Settings) -> Result<SceneConfig, CliError> {
    let defaults = SceneConfig::default();
    Ok(SceneConfig {
        shape: match &s.shape {
            Some(name) => name.parse()?,
            None => defaults.shape,
        },
        n_markers: s.markers.unwrap_or(defaults.n_markers),
        m_obstacles: s.obstacles.unwrap_or(defaults.m_obstacles),
        noise_std: s.noise_std.or(defaults.noise_std),
        seed: s.seed.unwrap_or(defaults.seed),
        sigma_neg: s.sigma_neg.unwrap_or(defaults.sigma_neg),
        ..defaults
    })
}

/// Scene defaults: β = 3, σ_neg = 0.1, 100 epochs.
fn scene_train_defaults() -> TrainConfig {
    TrainConfig {
        beta: 3.0,
        sigma_neg: 0.1,
        epochs: 100,
        ..TrainConfig::default()
    }
}

#[derive(Serialize)]
struct OutcomeRecord {
    min_clearance: f64,
    mean_clearance: f64,
    collisions: usize,
    clearances: Vec<f64>,
    holdout_rmse: f64,
    holdout_nll: f64,
    epochs_run: usize,
    seconds: f64,
    kernel: KernelParams,
}

impl OutcomeRecord {
    fn new(o: &SceneOutcome, timings: bool) -> Self {
        OutcomeRecord {
            min_clearance: o.avoidance.min_clearance,
            mean_clearance: o.avoidance.mean_clearance,
            collisions: o.avoidance.collisions,
            clearances: o.avoidance.clearances.clone(),
            holdout_rmse: o.holdout.rmse,
            holdout_nll: o.holdout.nll,
            epochs_run: o.fit.epochs_run(),
            seconds: if timings { o.fit.total_seconds() } else { 0.0 },
            kernel: *o.fit.final_model.kernel(),
        }
    }
}

#[derive(Serialize)]
struct SceneSummary {
    scene: SceneConfig,
    beta: f64,
    sigma_neg: f64,
    classical: OutcomeRecord,
    gp_nd: OutcomeRecord,
}

const CURVE_POINTS: usize = 401;

pub fn scene(s: &Settings) -> Result<(), CliError> {
    let out = s.require_out()?;
    let scene_cfg = scene_config(s)?;
    let sc = scene::make_scene(&scene_cfg)?;
    let config = train_config(s, Mode::GpNd, &scene_train_defaults());
    ensure_dir(out)?;
    let cmp = scene::compare(&sc, &config)?;
    let timings = Settings::flag(s.timings);

    let holdout = sc.holdout_indices();
    let marker_rows: Vec<Vec<String>> = (0..sc.markers.len())
        .map(|i| {
            vec![
                sc.markers.x()[(i, 0)].to_string(),
                sc.markers.y()[i].to_string(),
                if holdout.binary_search(&i).is_ok() { "holdout" } else { "train" }.to_string(),
            ]
        })
        .collect();
    write_csv_rows(&out.join("markers.csv"), &["t", "y", "role"], &marker_rows)?;
    let obstacle_rows: Vec<Vec<String>> = (0..sc.obstacles.len())
        .map(|i| vec![sc.obstacles.x()[(i, 0)].to_string(), sc.obstacles.y()[i].to_string()])
        .collect();
    write_csv_rows(&out.join("obstacles.csv"), &["t", "y"], &obstacle_rows)?;

    let (t0, t1) = scene_cfg.t_range;
    let grid = DMatrix::from_fn(CURVE_POINTS, 1, |i, _| t0 + (t1 - t0) * i as f64 / (CURVE_POINTS - 1) as f64);
    let train = sc.markers.select(&sc.train_indices());
    let pc = cmp.classical.fit.final_model.predict(&train, &grid, false)?;
    let pn = cmp.gp_nd.fit.final_model.predict(&train, &grid, false)?;
    let curve_rows: Vec<Vec<String>> = (0..CURVE_POINTS)
        .map(|i| {
            let t = grid[(i, 0)];
            vec![
                t.to_string(),
                sc.ground_truth(t).to_string(),
                pc.means[i].to_string(),
                pc.variances[i].to_string(),
                pn.means[i].to_string(),
                pn.variances[i].to_string(),
            ]
        })
        .collect();
    write_csv_rows(
        &out.join("curves.csv"),
        &["t", "truth", "classical_mean", "classical_var", "gp_nd_mean", "gp_nd_var"],
        &curve_rows,
    )?;

    let summary = SceneSummary {
        scene: scene_cfg,
        beta: config.beta,
        sigma_neg: config.sigma_neg,
        classical: OutcomeRecord::new(&cmp.classical, timings),
        gp_nd: OutcomeRecord::new(&cmp.gp_nd, timings),
    };
    match report_format(s, ReportFormat::Json) {
        ReportFormat::Json => write_json(&out.join("scene_report.json"), &summary),
        ReportFormat::Csv => {
            let row = |name: &str, o: &OutcomeRecord| {
                vec![
                    name.to_string(),
                    o.min_clearance.to_string(),
                    o.mean_clearance.to_string(),
                    o.collisions.to_string(),
                    o.holdout_rmse.to_string(),
                    o.holdout_nll.to_string(),
                    o.epochs_run.to_string(),
                    o.seconds.to_string(),
                ]
            };
            write_csv_rows(
                &out.join("scene_report.csv"),
                &[
                    "fit",
                    "min_clearance",
                    "mean_clearance",
                    "collisions",
                    "holdout_rmse",
                    "holdout_nll",
                    "epochs_run",
                    "seconds",
                ],
                &[row("classical", &summary.classical), row("gp_nd", &summary.gp_nd)],
            )
        }
    }
}

// ---------------------------------------------------------------- sweep

#[derive(Serialize)]
struct SweepRecord {
    beta: f64,
    sigma_neg: f64,
    status: String,
    outcome: Option<OutcomeRecord>,
}

fn jobs(s: &Settings) -> usize {
    s.jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1)
}

pub fn sweep(s: &Settings) -> Result<(), CliError> {
    let out = s.require_out()?;
    let sc = scene::make_scene(&scene_config(s)?)?;
    let base = train_config(s, Mode::GpNd, &scene_train_defaults());
    let betas = s.betas.clone().unwrap_or_else(|| vec![3.0, 0.1]);
    let sigmas = s.sigmas.clone().unwrap_or_else(|| vec![3.0, 0.1]);
    ensure_dir(out)?;
    let cells: Vec<SweepCell> = scene::sweep(&sc, &betas, &sigmas, &base, jobs(s))?;
    let timings = Settings::flag(s.timings);

    let mut csv_bytes = Vec::new();
    scene::write_sweep_csv(&cells, &mut csv_bytes, timings)?;
    write_atomic(&out.join("sweep.csv"), &csv_bytes)?;
    if report_format(s, ReportFormat::Csv) == ReportFormat::Json {
        let records: Vec<SweepRecord> = cells
            .iter()
            .map(|c| SweepRecord {
                beta: c.beta,
                sigma_neg: c.sigma_neg,
                status: match &c.outcome {
                    Ok(_) => "ok".into(),
                    Err(e) => format!("error: {e}"),
                },
                outcome: c.outcome.as_ref().ok().map(|o| OutcomeRecord::new(o, timings)),
            })
            .collect();
        write_json(&out.join("sweep.json"), &records)?;
    }
    Ok(())
}

// ---------------------------------------------------------------- bench

/// Synthetic stand-in for a wine-quality style table: `rows × 11` features
/// and integer targets from 3 to 8.
pub fn synthetic_table(rows: usize, seed: u64) -> Result<Dataset, CliError> {
    let d = 11;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = DMatrix::from_fn(rows, d, |_, _| rng.random_range(-1.0..1.0));
    let y = DVector::from_fn(rows, |i, _| {
        let score: f64 = (0..d).map(|c| w[c] * x[(i, c)]).sum::<f64>() + rng.random_range(-0.5..0.5);
        (5.5 + 1.2 * score).round().clamp(3.0, 8.0)
    });
    Ok(Dataset::new(x, y)?)
}

/// Per-epoch time of one classical and one GP-ND fit, run back to back.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct PairedTiming {
    pub m: usize,
    pub run: usize,
    pub classical: f64,
    pub gp_nd: f64,
}

impl PairedTiming {
    pub fn delta(&self) -> f64 {
        self.gp_nd - self.classical
    }
}

fn mean_epoch_seconds(report: &FitReport) -> f64 {
    report.total_seconds() / report.epochs_run() as f64
}

/// Times paired classical and GP-ND fits (exact backend, standardized data)
/// for every negative count in `ms`, `runs` times each. Pairs are interleaved
/// so drift in machine load affects both arms alike.
pub fn paired_timings(data: &Dataset, ms: &[usize], runs: usize, epochs: usize, seed: u64) -> Result<Vec<PairedTiming>, CliError> {
    let st = Standardization::fit(data)?;
    let train = st.apply(data);
    let base = TrainConfig {
        epochs,
        seed,
        ..TrainConfig::default()
    };
    let nd = TrainConfig {
        mode: Mode::GpNd,
        beta: 1.0,
        sigma_neg: 1.0,
        ..base.clone()
    };
    let model = GpModel::exact(KernelParams::default());
    let mut out = Vec::with_capacity(ms.len() * runs);
    for run in 0..runs {
        for &m in ms {
            let neg = shuffle_negatives(&train, m, seed + run as u64)?;
            let c = gpnd_core::fit(&model, &train, None, &base)?;
            let g = gpnd_core::fit(&model, &train, Some(&neg), &nd)?;
            out.push(PairedTiming {
                m,
                run,
                classical: mean_epoch_seconds(&c),
                gp_nd: mean_epoch_seconds(&g),
            });
        }
    }
    Ok(out)
}

pub fn bench(s: &Settings) -> Result<(), CliError> {
    let out = s.require_out()?;
    let seed = s.seed.unwrap_or(0);
    let data = match &s.data {
        Some(path) => data::load_csv(path, &target_column(s)?, !Settings::flag(s.no_header))?.dataset,
        None => synthetic_table(s.rows.unwrap_or(1599), seed)?,
    };
    if s.backend.is_some_and(|b| b != Backend::Exact) {
        return Err(CliError::Config("bench times the exact backend only".into()));
    }
    let ms = s.ms.clone().unwrap_or_else(|| vec![10, 50, 200, 800]);
    let runs = s.runs.unwrap_or(10);
    let epochs = s.epochs.unwrap_or(50);
    if runs == 0 || epochs == 0 || ms.is_empty() {
        return Err(CliError::Config("bench needs at least one run, epoch and negative count".into()));
    }
    ensure_dir(out)?;
    let started = Instant::now();
    let timings = paired_timings(&data, &ms, runs, epochs, seed)?;
    let run_rows: Vec<Vec<String>> = timings
        .iter()
        .map(|t| {
            vec![
                t.m.to_string(),
                t.run.to_string(),
                t.classical.to_string(),
                t.gp_nd.to_string(),
                t.delta().to_string(),
            ]
        })
        .collect();
    write_csv_rows(
        &out.join("bench_runs.csv"),
        &["m", "run", "classical_s_per_epoch", "gp_nd_s_per_epoch", "delta_s_per_epoch"],
        &run_rows,
    )?;

    let summary_rows: Vec<Vec<String>> = ms
        .iter()
        .map(|&m| {
            let deltas: Vec<f64> = timings.iter().filter(|t| t.m == m).map(PairedTiming::delta).collect();
            let classical: f64 = timings.iter().filter(|t| t.m == m).map(|t| t.classical).sum::<f64>() / runs as f64;
            let mean = deltas.iter().sum::<f64>() / runs as f64;
            let se = if runs > 1 {
                let var = deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (runs - 1) as f64;
                (var / runs as f64).sqrt()
            } else {
                0.0
            };
            vec![
                m.to_string(),
                data.len().to_string(),
                epochs.to_string(),
                runs.to_string(),
                classical.to_string(),
                mean.to_string(),
                se.to_string(),
            ]
        })
        .collect();
    write_csv_rows(
        &out.join("bench.csv"),
        &[
            "m",
            "n",
            "epochs",
            "runs",
            "classical_s_per_epoch",
            "delta_s_per_epoch",
            "delta_std_error",
        ],
        &summary_rows,
    )?;
    eprintln!("bench finished in {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}
