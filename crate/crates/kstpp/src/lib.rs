//! Nonparametric spatiotemporal point process modeling on structured grids.
//!
//! The intensity couples a Gaussian-process background over space with a
//! Gaussian-process influence kernel over (lag, spatial offset), linked
//! through a softplus. Both processes live on tensor-product grids, so prior
//! solves factor across axes (Kronecker structure) and likelihood integrals
//! reduce to tensor-product Gauss-Legendre sums. The crate covers MAP
//! fitting with Adam, synthetic-process simulation by thinning, next-event
//! prediction, two reference baselines, intensity-recovery metrics, and the
//! dataset/checkpoint formats shared with the command-line front end.

pub mod baselines;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod grids;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod predict;
pub mod quadrature;
pub mod simulate;
pub mod tensor;
pub mod train;

pub use baselines::{PoissonModel, SthpFitConfig, SthpModel};
pub use checkpoint::{load_checkpoint, save_checkpoint, LoadedModel, ModelCheckpoint};
pub use dataset::{import_csv, load_dataset, save_dataset, DatasetManifest};
pub use error::{Error, Result};
pub use grids::{AxisGrid, GridGP};
pub use kernels::{KernelFamily, KernelSpec};
pub use metrics::{
    prediction_errors, spatiotemporal_intensity_error, temporal_intensity_error, time_probes,
};
pub use model::{
    softplus, softplus_deriv, Domain, EventSequence, Events, IntensityModel, KstppModel,
    ModelSettings, SpatialProfiler,
};
pub use predict::{predict_next, predict_sequence, MarginalIntensity, Prediction};
pub use simulate::{make_dataset, thin, SynthConfig, SynthTruthModel};
pub use tensor::{CholeskyFactor, Matrix, Tensor3};
pub use train::{fit, FitConfig, TrainingLog};
