//! Next-event prediction from a fitted (or ground-truth) intensity model.
//!
//! With history frozen at the last observed event, the waiting time tau to
//! the next event has survival function S(tau) = exp(-Lambda(tau)) where
//! Lambda integrates the spatially-marginalized intensity forward from the
//! anchor time. The expected wait is the integral of S over (0, inf),
//! evaluated on the u / (1 - u) transform; the inner compensator uses a
//! Gauss-Legendre order that grows with log(1 + tau) so far-field nodes stay
//! accurate. The location estimate is the intensity-weighted spatial mean at
//! the predicted time.

use crate::error::{Error, Result};
use crate::model::{Events, IntensityModel, SpatialProfiler};
use crate::quadrature::{gauss_legendre, integrate_improper, DEFAULT_IMPROPER_ORDER};

/// Inner compensator order for a horizon of `tau` time units.
pub fn compensator_order(q0: usize, tau: f64) -> usize {
    let growth = 8.0 * (1.0 + tau.max(0.0)).log2().ceil();
    q0.max(growth as usize)
}

/// Spatially-marginalized intensity t -> int_S lambda(t, x, y) dx dy for a
/// fixed history, backed by the model's profiler on the tensor-product
/// quadrature grid.
pub struct MarginalIntensity<'a> {
    profiler: Box<dyn SpatialProfiler + 'a>,
    nodes_x: Vec<f64>,
    nodes_y: Vec<f64>,
    weights_x: Vec<f64>,
    weights_y: Vec<f64>,
}

impl<'a> MarginalIntensity<'a> {
    pub fn new(model: &'a dyn IntensityModel, history: Events<'_>) -> Result<Self> {
        let d = model.domain();
        let (_, q1, q2) = model.quad_orders();
        let rx = gauss_legendre(q1, d.x_range.0, d.x_range.1)?;
        let ry = gauss_legendre(q2, d.y_range.0, d.y_range.1)?;
        let mut profiler = model.profiler(rx.nodes.clone(), ry.nodes.clone())?;
        for j in 0..history.len() {
            profiler.push_event(history.times[j], history.xs[j], history.ys[j])?;
        }
        Ok(MarginalIntensity {
            profiler,
            nodes_x: rx.nodes,
            nodes_y: ry.nodes,
            weights_x: rx.weights,
            weights_y: ry.weights,
        })
    }

    pub fn at(&self, t: f64) -> Result<f64> {
        let grid = self.profiler.eval_at(t)?;
        let mut acc = 0.0;
        for (j, wx) in self.weights_x.iter().enumerate() {
            for (k, wy) in self.weights_y.iter().enumerate() {
                acc += wx * wy * grid.get(j, k);
            }
        }
        if !acc.is_finite() {
            return Err(Error::NonFinite { what: "marginal intensity".into(), t, x: 0.0, y: 0.0 });
        }
        Ok(acc)
    }

    /// Total mass and intensity-weighted spatial mean at time t.
    pub fn spatial_mean(&self, t: f64) -> Result<(f64, f64, f64)> {
        let grid = self.profiler.eval_at(t)?;
        let mut mass = 0.0;
        let mut mx = 0.0;
        let mut my = 0.0;
        for (j, wx) in self.weights_x.iter().enumerate() {
            for (k, wy) in self.weights_y.iter().enumerate() {
                let w = wx * wy * grid.get(j, k);
                mass += w;
                mx += w * self.nodes_x[j];
                my += w * self.nodes_y[k];
            }
        }
        if mass <= 0.0 {
            // flat fallback: the domain center
            let cx = (self.nodes_x[0] + self.nodes_x[self.nodes_x.len() - 1]) / 2.0;
            let cy = (self.nodes_y[0] + self.nodes_y[self.nodes_y.len() - 1]) / 2.0;
            return Ok((mass, cx, cy));
        }
        Ok((mass, mx / mass, my / mass))
    }

    /// Lambda(tau) = int_{t_from}^{t_from + tau} of the marginal, with the
    /// order scaled to the horizon.
    pub fn compensator(&self, q0: usize, t_from: f64, tau: f64) -> Result<f64> {
        if tau <= 0.0 {
            return Ok(0.0);
        }
        let rule = gauss_legendre(compensator_order(q0, tau), t_from, t_from + tau)?;
        let mut acc = 0.0;
        for (node, w) in rule.nodes.iter().zip(&rule.weights) {
            acc += w * self.at(*node)?;
        }
        Ok(acc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Prediction {
    /// Index of the event being predicted within its sequence.
    pub event_index: usize,
    /// Expected waiting time after the anchor.
    pub wait: f64,
    /// Absolute predicted time (anchor + wait).
    pub time: f64,
    pub x: f64,
    pub y: f64,
}

/// Expected next event after `t_from` under a fixed history (all history
/// times must be <= t_from). The wait integrates the survival function; the
/// location is the conditional spatial mean at the predicted time.
pub fn predict_next(
    model: &dyn IntensityModel,
    history: Events<'_>,
    t_from: f64,
    event_index: usize,
) -> Result<Prediction> {
    if let Some(last) = history.last_time() {
        if last > t_from {
            return Err(Error::InvalidInput(format!(
                "history extends to t={} beyond the anchor {}",
                last, t_from
            )));
        }
    }
    let marginal = MarginalIntensity::new(model, history)?;
    let (q0, _, _) = model.quad_orders();
    let mut err: Option<Error> = None;
    let wait = integrate_improper(
        |tau| match marginal.compensator(q0, t_from, tau) {
            Ok(v) => (-v).exp(),
            Err(e) => {
                err = Some(e);
                0.0
            }
        },
        DEFAULT_IMPROPER_ORDER,
    )?;
    if let Some(e) = err {
        return Err(e);
    }
    let t_hat = t_from + wait;
    let (_, x, y) = marginal.spatial_mean(t_hat)?;
    Ok(Prediction { event_index, wait, time: t_hat, x, y })
}

/// Teacher-forced predictions along a sequence: event n (n >= 1) is
/// predicted from the true history of events 0..n. `limit` caps the number
/// of predictions by striding evenly through the candidates.
pub fn predict_sequence(
    model: &dyn IntensityModel,
    seq: &crate::model::EventSequence,
    limit: Option<usize>,
) -> Result<Vec<Prediction>> {
    let n = seq.len();
    if n < 2 {
        return Ok(Vec::new());
    }
    let candidates: Vec<usize> = (1..n).collect();
    let chosen: Vec<usize> = match limit {
        Some(l) if l > 0 && l < candidates.len() => {
            let stride = (candidates.len() + l - 1) / l;
            candidates.into_iter().step_by(stride).collect()
        }
        _ => candidates,
    };
    let mut out = Vec::with_capacity(chosen.len());
    for ev in chosen {
        let anchor = seq.times()[ev - 1];
        out.push(predict_next(model, seq.prefix(ev), anchor, ev)?);
    }
    Ok(out)
}
