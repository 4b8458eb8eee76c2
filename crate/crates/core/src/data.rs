//! Dataset ingestion, splitting, standardization, shuffled negatives and
//! evaluation metrics.

use std::f64::consts::PI;
use std::fs::File;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IngestError, Result};
use crate::exact_gp::PredictiveDistribution;
use crate::negcon::NegativeSet;

/// Positive datapairs: `n` inputs of dimension `d` and their targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: DVector<f64>,
    feature_names: Option<Vec<String>>,
    standardization: Option<Standardization>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::invalid(format!(
                "{} input rows but {} targets",
                x.nrows(),
                y.len()
            )));
        }
        if x.ncols() == 0 {
            return Err(Error::invalid("inputs must have at least one column"));
        }
        if !x.iter().chain(y.iter()).all(|v| v.is_finite()) {
            return Err(Error::invalid("dataset contains non-finite values"));
        }
        Ok(Dataset {
            x,
            y,
            feature_names: None,
            standardization: None,
        })
    }

    /// A dataset with no rows; GP posteriors over it are the prior.
    pub fn empty(dim: usize) -> Self {
        Dataset {
            x: DMatrix::zeros(0, dim.max(1)),
            y: DVector::zeros(0),
            feature_names: None,
            standardization: None,
        }
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Self {
        self.feature_names = Some(names);
        self
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn feature_names(&self) -> Option<&[String]> {
        self.feature_names.as_deref()
    }

    pub fn standardization(&self) -> Option<&Standardization> {
        self.standardization.as_ref()
    }

    /// Rows selected by `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        let x = self.x.select_rows(idx);
        let y = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.y[i]));
        Dataset {
            x,
            y,
            feature_names: self.feature_names.clone(),
            standardization: self.standardization.clone(),
        }
    }
}

/// Per-column z-score constants fit on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    // constant columns keep unit scale so the transform stays invertible
    (mean, if std > 0.0 { std } else { 1.0 })
}

impl Standardization {
    pub fn fit(data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::invalid("cannot standardize an empty dataset"));
        }
        let (x_mean, x_std) = (0..data.dim())
            .map(|c| mean_std(data.x.column(c).iter().copied()))
            .unzip();
        let (y_mean, y_std) = mean_std(data.y.iter().copied());
        Ok(Standardization {
            x_mean,
            x_std,
            y_mean,
            y_std,
        })
    }

    pub fn apply(&self, data: &Dataset) -> Dataset {
        let x = self.transform_x(&data.x);
        let y = data.y.map(|v| (v - self.y_mean) / self.y_std);
        Dataset {
            x,
            y,
            feature_names: data.feature_names.clone(),
            standardization: Some(self.clone()),
        }
    }

    pub fn transform_x(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, c| {
            (x[(i, c)] - self.x_mean[c]) / self.x_std[c]
        })
    }

    pub fn transform_y(&self, y: f64) -> f64 {
        (y - self.y_mean) / self.y_std
    }

    pub fn inverse_y(&self, y: f64) -> f64 {
        y * self.y_std + self.y_mean
    }

    /// Undoes [`Standardization::apply`].
    pub fn invert(&self, data: &Dataset) -> Dataset {
        let x = DMatrix::from_fn(data.x.nrows(), data.x.ncols(), |i, c| {
            data.x[(i, c)] * self.x_std[c] + self.x_mean[c]
        });
        Dataset {
            x,
            y: data.y.map(|v| self.inverse_y(v)),
            feature_names: data.feature_names.clone(),
            standardization: None,
        }
    }

    /// Maps a standardized predictive distribution back to target units.
    pub fn invert_prediction(&self, pred: &PredictiveDistribution) -> PredictiveDistribution {
        let s2 = self.y_std * self.y_std;
        PredictiveDistribution {
            means: pred.means.map(|m| self.inverse_y(m)),
            variances: &pred.variances * s2,
            covariance: pred.covariance.as_ref().map(|c| c * s2),
        }
    }
}

/// Which column of a CSV file holds the regression target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TargetColumn {
    Index(usize),
    Name(String),
    Last,
}

impl std::str::FromStr for TargetColumn {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s {
            "last" | "-1" => TargetColumn::Last,
            _ => match s.parse::<usize>() {
                Ok(i) => TargetColumn::Index(i),
                Err(_) => TargetColumn::Name(s.to_string()),
            },
        })
    }
}

#[derive(Clone, Debug)]
pub struct LoadedCsv {
    pub dataset: Dataset,
    pub dropped_rows: usize,
}

/// Reads a numeric CSV file. Rows with a missing or unparsable field are
/// dropped and counted.
pub fn load_csv(path: impl AsRef<Path>, target: &TargetColumn, has_header: bool) -> Result<LoadedCsv> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|_| IngestError::MissingFile(path.to_path_buf()))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let headers: Option<Vec<String>> = if has_header {
        let h = reader.headers().map_err(IngestError::Csv)?;
        Some(h.iter().map(str::to_string).collect())
    } else {
        None
    };

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut dropped = 0usize;
    let mut width: Option<usize> = headers.as_ref().map(Vec::len);
    for record in reader.records() {
        let Ok(record) = record else {
            dropped += 1;
            continue;
        };
        let parsed: Option<Vec<f64>> = record
            .iter()
            .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect();
        match (parsed, width) {
            (Some(vals), Some(w)) if vals.len() == w => rows.push(vals),
            (Some(vals), None) if !vals.is_empty() => {
                width = Some(vals.len());
                rows.push(vals);
            }
            _ => dropped += 1,
        }
    }

    let ncols = width.unwrap_or(0);
    let target_idx = match target {
        TargetColumn::Index(i) if *i < ncols => *i,
        TargetColumn::Index(i) => return Err(IngestError::MissingTarget(i.to_string()).into()),
        TargetColumn::Last if ncols > 0 => ncols - 1,
        TargetColumn::Last => return Err(IngestError::MissingTarget("last".into()).into()),
        TargetColumn::Name(name) => headers
            .as_ref()
            .and_then(|h| h.iter().position(|c| c == name))
            .ok_or_else(|| IngestError::MissingTarget(name.clone()))?,
    };
    if ncols < 2 {
        return Err(Error::invalid("CSV needs at least one feature column and a target"));
    }
    if rows.is_empty() {
        return Err(IngestError::NoRows {
            path: path.to_path_buf(),
            dropped,
        }
        .into());
    }

    let d = ncols - 1;
    let x = DMatrix::from_fn(rows.len(), d, |i, c| {
        rows[i][if c < target_idx { c } else { c + 1 }]
    });
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|r| r[target_idx]));
    let mut dataset = Dataset::new(x, y)?;
    if let Some(h) = headers {
        let names = h
            .into_iter()
            .enumerate()
            .filter(|(i, _)| *i != target_idx)
            .map(|(_, n)| n)
            .collect();
        dataset = dataset.with_feature_names(names);
    }
    Ok(LoadedCsv {
        dataset,
        dropped_rows: dropped,
    })
}

/// Reads a feature-only CSV (no target column) into an input matrix.
pub fn load_inputs_csv(path: impl AsRef<Path>, has_header: bool) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|_| IngestError::MissingFile(path.to_path_buf()))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(IngestError::Csv)?;
        let vals = record
            .iter()
            .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| Error::invalid(format!("non-numeric field in {}", path.display())))?;
        rows.push(vals);
    }
    if rows.is_empty() {
        return Err(IngestError::NoRows {
            path: path.to_path_buf(),
            dropped: 0,
        }
        .into());
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("ragged input rows"));
    }
    Ok(DMatrix::from_fn(rows.len(), d, |i, c| rows[i][c]))
}

/// Writes features followed by the target as the last column.
pub fn write_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(IngestError::Csv)?;
    let mut header: Vec<String> = match data.feature_names() {
        Some(names) => names.to_vec(),
        None => (0..data.dim()).map(|c| format!("x{c}")).collect(),
    };
    header.push("y".into());
    w.write_record(&header).map_err(IngestError::Csv)?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = data.x.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(data.y[i].to_string());
        w.write_record(&rec).map_err(IngestError::Csv)?;
    }
    w.flush()?;
    Ok(())
}

/// Train/validation/test partition with standardization fit on `train`.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
    pub train_idx: Vec<usize>,
    pub valid_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub standardization: Standardization,
}

pub fn split_standardize(data: &Dataset, train_frac: f64, valid_frac: f64, seed: u64) -> Result<Split> {
    if !(train_frac > 0.0 && valid_frac > 0.0 && train_frac + valid_frac < 1.0) {
        return Err(Error::invalid(format!(
            "fractions must be positive with a test remainder: {train_frac}/{valid_frac}"
        )));
    }
    let n = data.len();
    let n_train = (train_frac * n as f64).round() as usize;
    let n_valid = (valid_frac * n as f64).round() as usize;
    if n_train == 0 || n_valid == 0 || n_train + n_valid >= n {
        return Err(Error::invalid(format!(
            "split of {n} rows leaves an empty partition"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test_idx = idx.split_off(n_train + n_valid);
    let valid_idx = idx.split_off(n_train);
    let train_idx = idx;

    let standardization = Standardization::fit(&data.select(&train_idx))?;
    Ok(Split {
        train: standardization.apply(&data.select(&train_idx)),
        valid: standardization.apply(&data.select(&valid_idx)),
        test: standardization.apply(&data.select(&test_idx)),
        train_idx,
        valid_idx,
        test_idx,
        standardization,
    })
}

const MAX_RESAMPLE: usize = 1000;

/// Builds `m` negative datapairs by pairing randomly chosen inputs with labels
/// drawn from the dataset's own label pool, rejecting any draw equal to the
/// input's true label. The returned set has unit blob spread; callers set the
/// spread with [`NegativeSet::with_sigma_neg`].
pub fn shuffle_negatives(data: &Dataset, m: usize, seed: u64) -> Result<NegativeSet> {
    let n = data.len();
    if m == 0 {
        return NegativeSet::new(DMatrix::zeros(0, data.dim()), DVector::zeros(0), 1.0);
    }
    if m > n {
        return Err(Error::invalid(format!("requested {m} negatives from {n} rows")));
    }
    let y = data.y();
    if y.iter().all(|v| *v == y[0]) {
        return Err(Error::invalid(
            "all targets are identical; no valid negative label exists",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = sample(&mut rng, n, m).into_vec();
    let mut labels = Vec::with_capacity(m);
    for &r in &rows {
        let truth = y[r];
        let mut found = None;
        for _ in 0..MAX_RESAMPLE {
            let candidate = y[rng.random_range(0..n)];
            if candidate != truth {
                found = Some(candidate);
                break;
            }
        }
        let label = found.ok_or_else(|| {
            Error::Generation(format!(
                "no label different from {truth} after {MAX_RESAMPLE} draws"
            ))
        })?;
        labels.push(label);
    }
    NegativeSet::new(data.x().select_rows(&rows), DVector::from_vec(labels), 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub nll: f64,
    pub rmse: f64,
}

impl Metrics {
    /// Converts metrics computed on standardized targets to original units.
    pub fn to_original_units(self, y_std: f64) -> Metrics {
        Metrics {
            nll: self.nll + y_std.ln(),
            rmse: self.rmse * y_std,
        }
    }
}

/// Mean Gaussian negative log density of `truth` under the predictive
/// (variance plus `noise_var`) and root-mean-squared error of the means.
pub fn metrics(pred: &PredictiveDistribution, truth: &DVector<f64>, noise_var: f64) -> Result<Metrics> {
    if pred.means.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} targets",
            pred.means.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::invalid("no points to evaluate"));
    }
    let n = truth.len() as f64;
    let mut nll = 0.0;
    let mut sq = 0.0;
    for ((m, v), t) in pred.means.iter().zip(pred.variances.iter()).zip(truth.iter()) {
        let var = v + noise_var;
        let r = t - m;
        nll += 0.5 * ((2.0 * PI * var).ln() + r * r / var);
        sq += r * r;
    }
    Ok(Metrics {
        nll: nll / n,
        rmse: (sq / n).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_file(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        let mut f = File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    fn toy(n: usize) -> Dataset {
        let x = DMatrix::from_fn(n, 2, |i, c| (i * (c + 1)) as f64 * 0.37 - 1.0);
        let y = DVector::from_fn(n, |i, _| ((i as f64) * 0.9).sin() * 3.0 + 1.5);
        Dataset::new(x, y).unwrap()
    }

    #[test]
    fn load_three_rows_target_last() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(&dir, "a.csv", "a,b,t\n1,2,3\n4,5,6\n7,8,9\n");
        let loaded = load_csv(&p, &TargetColumn::Last, true).unwrap();
        assert_eq!(loaded.dataset.len(), 3);
        assert_eq!(loaded.dataset.dim(), 2);
        assert_eq!(loaded.dropped_rows, 0);
        assert_eq!(loaded.dataset.y()[2], 9.0);
        assert_eq!(loaded.dataset.feature_names().unwrap(), &["a", "b"]);
    }

    #[test]
    fn load_drops_malformed_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(&dir, "a.csv", "a,b,t\n1,2,3\n4,oops,6\n7,8,9\n1,2\n");
        let loaded = load_csv(&p, &TargetColumn::Name("t".into()), true).unwrap();
        assert_eq!(loaded.dataset.len(), 2);
        assert_eq!(loaded.dropped_rows, 2);
    }

    #[test]
    fn load_target_in_middle_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(&dir, "a.csv", "1,2,3\n4,5,6\n");
        let loaded = load_csv(&p, &TargetColumn::Index(1), false).unwrap();
        assert_eq!(loaded.dataset.x()[(1, 0)], 4.0);
        assert_eq!(loaded.dataset.x()[(1, 1)], 6.0);
        assert_eq!(loaded.dataset.y()[1], 5.0);
    }

    #[test]
    fn load_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.csv");
        assert!(matches!(
            load_csv(&missing, &TargetColumn::Last, true),
            Err(Error::Ingest(IngestError::MissingFile(_)))
        ));
        let p = write_file(&dir, "a.csv", "a,b\n1,2\n");
        assert!(matches!(
            load_csv(&p, &TargetColumn::Name("zzz".into()), true),
            Err(Error::Ingest(IngestError::MissingTarget(_)))
        ));
        let bad = write_file(&dir, "b.csv", "a,b\nx,y\n,\n");
        assert!(matches!(
            load_csv(&bad, &TargetColumn::Last, true),
            Err(Error::Ingest(IngestError::NoRows { dropped: 2, .. }))
        ));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let x = DMatrix::from_fn(7, 3, |i, c| ((i * 3 + c) as f64).sqrt() * 1.0e-3 - 0.1 / 3.0);
        let y = DVector::from_fn(7, |i, _| (i as f64).exp() / 7.0);
        let data = Dataset::new(x, y).unwrap();
        let p = dir.path().join("rt.csv");
        write_csv(&data, &p).unwrap();
        let back = load_csv(&p, &TargetColumn::Last, true).unwrap().dataset;
        assert!((back.x() - data.x()).amax() <= 1e-12);
        assert!((back.y() - data.y()).amax() <= 1e-12);
    }

    #[test]
    fn split_sizes_and_partition() {
        let data = toy(10);
        let s = split_standardize(&data, 0.8, 0.1, 4).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (8, 1, 1));
        let mut all: Vec<usize> = s
            .train_idx
            .iter()
            .chain(&s.valid_idx)
            .chain(&s.test_idx)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn split_is_deterministic() {
        let data = toy(30);
        let a = split_standardize(&data, 0.6, 0.2, 99).unwrap();
        let b = split_standardize(&data, 0.6, 0.2, 99).unwrap();
        assert_eq!(a.train_idx, b.train_idx);
        assert_eq!(a.valid_idx, b.valid_idx);
        assert_eq!(a.test_idx, b.test_idx);
    }

    #[test]
    fn standardized_train_targets_have_unit_scale() {
        let s = split_standardize(&toy(50), 0.7, 0.1, 1).unwrap();
        let y = s.train.y();
        let n = y.len() as f64;
        let mean = y.sum() / n;
        let std = (y.map(|v| (v - mean) * (v - mean)).sum() / n).sqrt();
        assert!(mean.abs() < 1e-10);
        assert!((std - 1.0).abs() < 1e-10);
    }

    #[test]
    fn standardize_inverse_is_identity() {
        let data = toy(25);
        let st = Standardization::fit(&data).unwrap();
        let back = st.invert(&st.apply(&data));
        assert!((back.x() - data.x()).amax() < 1e-10);
        assert!((back.y() - data.y()).amax() < 1e-10);
    }

    #[test]
    fn split_rejects_bad_fractions() {
        assert!(split_standardize(&toy(10), 0.9, 0.1, 0).is_err());
        assert!(split_standardize(&toy(3), 0.1, 0.1, 0).is_err());
        assert!(split_standardize(&toy(10), 0.0, 0.1, 0).is_err());
    }

    #[test]
    fn shuffle_forced_assignment() {
        let data = Dataset::new(
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DVector::from_vec(vec![0.0, 1.0]),
        )
        .unwrap();
        let neg = shuffle_negatives(&data, 2, 17).unwrap();
        for i in 0..2 {
            let xi = neg.x()[(i, 0)];
            let expected = if xi == 0.0 { 1.0 } else { 0.0 };
            assert_eq!(neg.y()[i], expected);
        }
    }

    #[test]
    fn shuffle_zero_and_errors() {
        let data = toy(5);
        assert!(shuffle_negatives(&data, 0, 0).unwrap().is_empty());
        assert!(shuffle_negatives(&data, 6, 0).is_err());
        let flat = Dataset::new(DMatrix::zeros(4, 1), DVector::from_element(4, 2.0)).unwrap();
        assert!(matches!(shuffle_negatives(&flat, 2, 0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn shuffle_discrete_targets_all_valid() {
        let n = 1599;
        let x = DMatrix::from_fn(n, 3, |i, c| ((i * 7 + c * 13) % 101) as f64);
        let y = DVector::from_fn(n, |i, _| (3 + (i * 31) % 6) as f64);
        let data = Dataset::new(x, y).unwrap();
        let neg = shuffle_negatives(&data, 200, 5).unwrap();
        assert_eq!(neg.len(), 200);
        // recover each source row from its (unique) input vector
        for i in 0..neg.len() {
            let row = (0..n)
                .find(|&r| (0..3).all(|c| data.x()[(r, c)] == neg.x()[(i, c)]) && data.y()[r] != neg.y()[i]);
            assert!(row.is_some());
        }
    }

    fn pred(means: Vec<f64>, vars: Vec<f64>) -> PredictiveDistribution {
        PredictiveDistribution {
            means: DVector::from_vec(means),
            variances: DVector::from_vec(vars),
            covariance: None,
        }
    }

    #[test]
    fn metrics_examples() {
        let truth = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let exact = metrics(&pred(vec![0.5, -1.0, 2.0], vec![0.75; 3]), &truth, 0.25).unwrap();
        assert_eq!(exact.rmse, 0.0);
        assert!((exact.nll - 0.5 * (2.0 * PI).ln()).abs() < 1e-12);
        let off = metrics(&pred(vec![1.5, 0.0, 3.0], vec![0.0; 3]), &truth, 1.0).unwrap();
        assert!((off.rmse - 1.0).abs() < 1e-12);
        assert!((off.nll - 0.5 * (1.0 + (2.0 * PI).ln())).abs() < 1e-12);
    }

    #[test]
    fn metrics_match_density_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let means: Vec<f64> = (0..20).map(|_| rng.random_range(-2.0..2.0)).collect();
        let vars: Vec<f64> = (0..20).map(|_| rng.random_range(0.01..2.0)).collect();
        let truth = DVector::from_fn(20, |_, _| rng.random_range(-2.0..2.0));
        let noise = 0.3;
        let m = metrics(&pred(means.clone(), vars.clone()), &truth, noise).unwrap();
        // product of densities, then log
        let mut log_prod = 0.0;
        let mut sse = 0.0;
        for i in 0..20 {
            let s2 = vars[i] + noise;
            let dens = (-(truth[i] - means[i]).powi(2) / (2.0 * s2)).exp() / (2.0 * PI * s2).sqrt();
            log_prod += dens.ln();
            sse += (truth[i] - means[i]).powi(2);
        }
        assert!((m.nll + log_prod / 20.0).abs() < 1e-12);
        assert!((m.rmse - (sse / 20.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn metrics_length_mismatch() {
        let truth = DVector::from_vec(vec![1.0]);
        assert!(metrics(&pred(vec![1.0, 2.0], vec![1.0, 1.0]), &truth, 0.1).is_err());
    }
}
