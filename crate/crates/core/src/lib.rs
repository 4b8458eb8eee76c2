//! Gaussian-process regression that can be told where the curve must not go.
//!
//! Positive datapairs are fit through the usual marginal likelihood (exact) or
//! evidence lower bound (sparse variational). Negative datapairs are Gaussian
//! blobs the predictive distribution is pushed away from through a log-KL
//! penalty, weighted by `β`.

pub mod data;
pub mod error;
pub mod exact_gp;
pub mod kernel;
mod linalg;
pub mod model;
pub mod negcon;
pub mod optim;
pub mod scene;
pub mod svgp;
pub mod trainer;

#[cfg(test)]
pub(crate) mod testutil;

pub use data::{Dataset, Metrics, Split, Standardization, TargetColumn};
pub use error::{Error, IngestError, Result};
pub use exact_gp::{marginal_nll, posterior, PredictiveDistribution};
pub use kernel::{gram, rbf_eval, KernelParams, JITTER};
pub use model::{Backend, GpModel};
pub use negcon::{combined_objective, gaussian_kl, nd_penalty, NegativeSet};
pub use optim::Adam;
pub use scene::{evaluate_avoidance, make_scene, AvoidanceReport, Scene, SceneConfig};
pub use svgp::{elbo, svgp_posterior, VariationalParams};
pub use trainer::{fit, Alternation, FitReport, Mode, TrainConfig};
