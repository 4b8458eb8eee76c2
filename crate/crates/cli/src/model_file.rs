//! Versioned JSON model file.

use std::fs;
use std::io::Write;
use std::path::Path;

use gpnd_core::{Backend, Dataset, GpModel, KernelParams, Standardization, VariationalParams};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const FORMAT: &str = "gpnd-model";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariationalRecord {
    pub num_inducing: usize,
    pub dim: usize,
    /// Inducing inputs, one row per point.
    pub z: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    /// Lower triangle of `L_S`, row-major, diagonal stored as its log.
    pub l_packed: Vec<f64>,
    pub train_inducing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub backend: Backend,
    /// Unconstrained kernel parameters in standardized units.
    pub kernel: KernelParams,
    pub standardization: Standardization,
    pub feature_names: Option<Vec<String>>,
    /// Standardized training inputs; the exact predictive conditions on them.
    pub train_x: Option<Vec<Vec<f64>>>,
    pub train_y: Option<Vec<f64>>,
    pub variational: Option<VariationalRecord>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], dim: usize) -> Result<DMatrix<f64>, CliError> {
    if rows.iter().any(|r| r.len() != dim) {
        return Err(CliError::Config("model file has ragged rows".into()));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), dim, &flat))
}

impl ModelFile {
    /// `train` is the standardized training set the model was fit on.
    pub fn new(model: &GpModel, train: &Dataset, standardization: &Standardization) -> Self {
        let (train_x, train_y, variational) = match model {
            GpModel::Exact { .. } => (Some(rows(train.x())), Some(train.y().iter().copied().collect()), None),
            GpModel::Sparse {
                variational,
                train_inducing,
                ..
            } => {
                let raw = variational.to_vec();
                let size = variational.num_inducing();
                let zlen = size * variational.dim();
                let record = VariationalRecord {
                    num_inducing: size,
                    dim: variational.dim(),
                    z: rows(variational.z()),
                    mean: variational.mean().iter().copied().collect(),
                    l_packed: raw[zlen + size..].to_vec(),
                    train_inducing: *train_inducing,
                };
                (None, None, Some(record))
            }
        };
        ModelFile {
            format: FORMAT.into(),
            version: VERSION,
            backend: model.backend(),
            kernel: *model.kernel(),
            standardization: standardization.clone(),
            feature_names: train.feature_names().map(<[String]>::to_vec),
            train_x,
            train_y,
            variational,
        }
    }

    pub fn dim(&self) -> usize {
        self.standardization.x_mean.len()
    }

    /// Rebuilds the model and the (standardized) conditioning set.
    pub fn to_model(&self) -> Result<(GpModel, Dataset), CliError> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(CliError::Config(format!(
                "unsupported model file {} v{}",
                self.format, self.version
            )));
        }
        let dim = self.dim();
        match (self.backend, &self.variational) {
            (Backend::Exact, None) => {
                let (Some(x), Some(y)) = (&self.train_x, &self.train_y) else {
                    return Err(CliError::Config("exact model file lacks training data".into()));
                };
                let data = Dataset::new(from_rows(x, dim)?, DVector::from_vec(y.clone()))?;
                Ok((GpModel::exact(self.kernel), data))
            }
            (Backend::Svgp, Some(v)) => {
                let mut flat: Vec<f64> = v.z.iter().flatten().copied().collect();
                if v.z.len() != v.num_inducing || flat.len() != v.num_inducing * v.dim {
                    return Err(CliError::Config("inducing inputs do not match their count".into()));
                }
                flat.extend(&v.mean);
                flat.extend(&v.l_packed);
                let variational = VariationalParams::from_slice(v.num_inducing, v.dim, &flat)?;
                let model = GpModel::Sparse {
                    kernel: self.kernel,
                    variational,
                    train_inducing: v.train_inducing,
                };
                Ok((model, Dataset::empty(dim)))
            }
            _ => Err(CliError::Config("model file backend does not match its contents".into())),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read model {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("invalid model file {}: {e}", path.display())))
    }

    /// Writes to a temporary file next to `path`, then renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| CliError::Io(e.error))?;
    Ok(())
}
