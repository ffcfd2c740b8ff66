//! Model checkpoints.
//!
//! A checkpoint is a single JSON document tagged with a format version and a
//! model kind. Grid values and log hyperparameters are stored verbatim, so a
//! reloaded model reproduces the saved one bit for bit (modulo the Cholesky
//! refactorization, which is deterministic).

use crate::baselines::{PoissonModel, SthpModel};
use crate::error::{Error, Result};
use crate::grids::{AxisGrid, GridGP};
use crate::kernels::KernelSpec;
use crate::model::{Domain, IntensityModel, KstppModel};
use crate::tensor::Tensor3;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

pub const CHECKPOINT_FORMAT: &str = "kstpp-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Container {
    format_version: String,
    model: ModelCheckpoint,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelCheckpoint {
    Kstpp(KstppCheckpoint),
    Poisson(PoissonModel),
    Sthp(SthpModel),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KstppCheckpoint {
    pub domain: Domain,
    pub link_beta: f64,
    pub quad_orders: (usize, usize, usize),
    pub time_horizon: Option<f64>,
    /// Influence grid: (lag, dx, dy) axis points, one kernel per axis, and
    /// the value tensor flattened row-major (last axis fastest).
    pub f_axes: Vec<Vec<f64>>,
    pub f_kernels: Vec<KernelSpec>,
    pub f_values: Vec<f64>,
    /// Background grid over (x, y), same layout.
    pub g_axes: Vec<Vec<f64>>,
    pub g_kernels: Vec<KernelSpec>,
    pub g_values: Vec<f64>,
}

impl ModelCheckpoint {
    pub fn from_kstpp(model: &KstppModel) -> Self {
        let grid_axes = |gp: &GridGP| -> Vec<Vec<f64>> {
            gp.axes().iter().map(|a| a.points().to_vec()).collect()
        };
        ModelCheckpoint::Kstpp(KstppCheckpoint {
            domain: model.domain,
            link_beta: model.link_beta,
            quad_orders: model.quad_orders,
            time_horizon: model.time_horizon,
            f_axes: grid_axes(&model.influence),
            f_kernels: model.influence.kernel_specs(),
            f_values: model.influence.values().data().to_vec(),
            g_axes: grid_axes(&model.background),
            g_kernels: model.background.kernel_specs(),
            g_values: model.background.values().data().to_vec(),
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ModelCheckpoint::Kstpp(_) => "kstpp",
            ModelCheckpoint::Poisson(_) => "poisson",
            ModelCheckpoint::Sthp(_) => "sthp",
        }
    }

    pub fn into_loaded(self) -> Result<LoadedModel> {
        match self {
            ModelCheckpoint::Kstpp(c) => Ok(LoadedModel::Kstpp(c.into_model()?)),
            ModelCheckpoint::Poisson(m) => {
                m.domain.validate()?;
                Ok(LoadedModel::Poisson(m))
            }
            ModelCheckpoint::Sthp(m) => {
                m.domain.validate()?;
                Ok(LoadedModel::Sthp(m))
            }
        }
    }
}

impl KstppCheckpoint {
    fn build_grid(axes: &[Vec<f64>], kernels: &[KernelSpec], values: &[f64]) -> Result<GridGP> {
        let axes: Result<Vec<AxisGrid>> =
            axes.iter().map(|p| AxisGrid::from_points(p.clone())).collect();
        let axes = axes?;
        let mut shape = [1usize; 3];
        for (i, a) in axes.iter().rev().enumerate() {
            shape[2 - i] = a.len();
        }
        let mut gp = GridGP::new(axes, kernels.to_vec())?;
        gp.set_values(Tensor3::from_vec((shape[0], shape[1], shape[2]), values.to_vec())?)?;
        Ok(gp)
    }

    pub fn into_model(self) -> Result<KstppModel> {
        self.domain.validate()?;
        if !(self.link_beta > 0.0) {
            return Err(Error::InvalidInput("link beta must be positive".into()));
        }
        if self.f_axes.len() != 3 || self.g_axes.len() != 2 {
            return Err(Error::DimensionMismatch(format!(
                "checkpoint has {} influence axes and {} background axes",
                self.f_axes.len(),
                self.g_axes.len()
            )));
        }
        let influence = Self::build_grid(&self.f_axes, &self.f_kernels, &self.f_values)?;
        let background = Self::build_grid(&self.g_axes, &self.g_kernels, &self.g_values)?;
        Ok(KstppModel {
            domain: self.domain,
            background,
            influence,
            link_beta: self.link_beta,
            quad_orders: self.quad_orders,
            time_horizon: self.time_horizon,
        })
    }
}

/// A checkpointed model behind the common interface.
pub enum LoadedModel {
    Kstpp(KstppModel),
    Poisson(PoissonModel),
    Sthp(SthpModel),
}

impl LoadedModel {
    pub fn as_model(&self) -> &dyn IntensityModel {
        match self {
            LoadedModel::Kstpp(m) => m,
            LoadedModel::Poisson(m) => m,
            LoadedModel::Sthp(m) => m,
        }
    }
}

pub fn save_checkpoint(path: &Path, model: &ModelCheckpoint) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(
        w,
        &Container { format_version: CHECKPOINT_FORMAT.to_string(), model: model.clone() },
    )?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let r = BufReader::new(File::open(path)?);
    let container: Container = serde_json::from_reader(r)?;
    if container.format_version != CHECKPOINT_FORMAT {
        return Err(Error::UnsupportedFormat(container.format_version));
    }
    Ok(container.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Events, ModelSettings};

    fn demo_model() -> KstppModel {
        let d = Domain::new(5.0, (-1.0, 1.0), (-1.0, 1.0)).unwrap();
        let settings = ModelSettings {
            f_grid: (5, 4, 4),
            g_grid: (6, 5),
            quad_orders: (8, 6, 6),
            init_sd: 0.3,
            time_horizon: Some(2.5),
            ..Default::default()
        };
        KstppModel::init(d, &settings, 11).unwrap()
    }

    #[test]
    fn kstpp_round_trip_reproduces_intensity_exactly() {
        let model = demo_model();
        let file = tempfile::NamedTempFile::new().unwrap();
        save_checkpoint(file.path(), &ModelCheckpoint::from_kstpp(&model)).unwrap();
        let loaded = load_checkpoint(file.path()).unwrap().into_loaded().unwrap();
        let LoadedModel::Kstpp(m2) = &loaded else { panic!("wrong kind") };
        assert_eq!(model.influence.values().data(), m2.influence.values().data());
        assert_eq!(model.background.values().data(), m2.background.values().data());
        assert_eq!(model.time_horizon, m2.time_horizon);
        let times = [0.5, 1.0];
        let xs = [0.2, -0.3];
        let ys = [-0.1, 0.4];
        let hist = Events { times: &times, xs: &xs, ys: &ys };
        let a = model.intensity(1.7, 0.1, 0.2, hist).unwrap();
        let b = loaded.as_model().intensity(1.7, 0.1, 0.2, hist).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn baseline_round_trips() {
        let d = Domain::new(5.0, (-1.0, 1.0), (-1.0, 1.0)).unwrap();
        let pois = PoissonModel { rate: 1.25, domain: d, quad_orders: (12, 12, 12) };
        let sthp = SthpModel::new(0.5, 0.4, 1.5, 0.3, d).unwrap();
        for ckpt in [ModelCheckpoint::Poisson(pois), ModelCheckpoint::Sthp(sthp)] {
            let file = tempfile::NamedTempFile::new().unwrap();
            save_checkpoint(file.path(), &ckpt).unwrap();
            let loaded = load_checkpoint(file.path()).unwrap();
            match (&ckpt, &loaded) {
                (ModelCheckpoint::Poisson(a), ModelCheckpoint::Poisson(b)) => assert_eq!(a, b),
                (ModelCheckpoint::Sthp(a), ModelCheckpoint::Sthp(b)) => assert_eq!(a, b),
                _ => panic!("kind changed in round trip"),
            }
        }
    }

    #[test]
    fn kind_tags_are_stable() {
        let d = Domain::new(5.0, (-1.0, 1.0), (-1.0, 1.0)).unwrap();
        let pois = PoissonModel { rate: 1.0, domain: d, quad_orders: (12, 12, 12) };
        let text = serde_json::to_string(&ModelCheckpoint::Poisson(pois)).unwrap();
        assert!(text.contains("\"kind\":\"poisson\""), "{}", text);
        let model = demo_model();
        let text = serde_json::to_string(&ModelCheckpoint::from_kstpp(&model)).unwrap();
        assert!(text.contains("\"kind\":\"kstpp\""), "{}", text);
    }

    #[test]
    fn version_and_shape_are_validated() {
        let model = demo_model();
        let file = tempfile::NamedTempFile::new().unwrap();
        save_checkpoint(file.path(), &ModelCheckpoint::from_kstpp(&model)).unwrap();
        let text = std::fs::read_to_string(file.path()).unwrap();
        std::fs::write(file.path(), text.replace("kstpp-v1", "kstpp-v0")).unwrap();
        assert!(matches!(load_checkpoint(file.path()), Err(Error::UnsupportedFormat(_))));

        let ModelCheckpoint::Kstpp(mut c) = ModelCheckpoint::from_kstpp(&model) else {
            unreachable!()
        };
        c.f_values.pop();
        assert!(c.into_model().is_err());
    }
}
