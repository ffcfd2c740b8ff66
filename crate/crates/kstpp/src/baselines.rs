//! Reference models: a homogeneous Poisson process and a parametric
//! self-exciting process (exponential decay in time, Gaussian bump in
//! space). Both implement the common model interface so they run through
//! the same prediction and metric code as the fitted nonparametric model.

use crate::error::{Error, Result};
use crate::model::{
    Domain, EventSequence, Events, IntensityModel, SpatialProfiler, LOG_CLAMP,
};
use crate::quadrature::gauss_legendre;
use crate::tensor::Matrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoissonModel {
    pub rate: f64,
    pub domain: Domain,
    pub quad_orders: (usize, usize, usize),
}

impl PoissonModel {
    /// Maximum likelihood fit: events per unit time and area.
    pub fn fit(domain: Domain, seqs: &[EventSequence]) -> Result<Self> {
        domain.validate()?;
        if seqs.is_empty() {
            return Err(Error::InvalidInput("no sequences to fit".into()));
        }
        let total: usize = seqs.iter().map(|s| s.len()).sum();
        let rate = total as f64 / (seqs.len() as f64 * domain.t_max * domain.area());
        Ok(PoissonModel { rate, domain, quad_orders: (12, 12, 12) })
    }

    /// Closed-form expected wait to the next event from any instant.
    pub fn expected_wait(&self) -> f64 {
        1.0 / (self.rate * self.domain.area())
    }
}

impl IntensityModel for PoissonModel {
    fn domain(&self) -> &Domain {
        &self.domain
    }

    fn quad_orders(&self) -> (usize, usize, usize) {
        self.quad_orders
    }

    fn intensity(&self, _t: f64, _x: f64, _y: f64, _history: Events<'_>) -> Result<f64> {
        Ok(self.rate)
    }

    fn log_likelihood(&self, seq: &EventSequence) -> Result<f64> {
        let n = seq.len() as f64;
        let comp = self.rate * self.domain.t_max * self.domain.area();
        Ok(n * self.rate.max(LOG_CLAMP).ln() - comp)
    }

    fn profiler(&self, xs: Vec<f64>, ys: Vec<f64>) -> Result<Box<dyn SpatialProfiler + '_>> {
        Ok(Box::new(ConstantProfiler { rate: self.rate, nx: xs.len(), ny: ys.len() }))
    }
}

struct ConstantProfiler {
    rate: f64,
    nx: usize,
    ny: usize,
}

impl SpatialProfiler for ConstantProfiler {
    fn push_event(&mut self, _t: f64, _x: f64, _y: f64) -> Result<()> {
        Ok(())
    }

    fn eval_at(&self, _t: f64) -> Result<Matrix> {
        let mut m = Matrix::zeros(self.nx, self.ny);
        for v in m.data_mut() {
            *v = self.rate;
        }
        Ok(m)
    }
}

/// Self-exciting baseline lambda = lambda0 + c sum_j e^{-beta lag_j}
/// G_sigma(d_j), G the normalized Gaussian bump. All four parameters live in
/// log space, so the intensity is positive by construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SthpModel {
    pub log_lambda0: f64,
    pub log_c: f64,
    pub log_beta: f64,
    pub log_sigma: f64,
    pub domain: Domain,
    pub quad_orders: (usize, usize, usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SthpFitConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Assumed branching ratio for the moment-based initialization.
    pub init_branching: f64,
    pub init_beta: f64,
}

impl Default for SthpFitConfig {
    fn default() -> Self {
        SthpFitConfig { epochs: 300, learning_rate: 0.05, init_branching: 0.3, init_beta: 1.0 }
    }
}

fn gauss(d2: f64, sigma: f64) -> f64 {
    (-d2 / (2.0 * sigma * sigma)).exp() / (2.0 * std::f64::consts::PI * sigma * sigma)
}

impl SthpModel {
    pub fn new(lambda0: f64, c: f64, beta: f64, sigma: f64, domain: Domain) -> Result<Self> {
        domain.validate()?;
        if !(lambda0 > 0.0 && c > 0.0 && beta > 0.0 && sigma > 0.0) {
            return Err(Error::InvalidInput("all intensity parameters must be positive".into()));
        }
        Ok(SthpModel {
            log_lambda0: lambda0.ln(),
            log_c: c.ln(),
            log_beta: beta.ln(),
            log_sigma: sigma.ln(),
            domain,
            quad_orders: (12, 12, 12),
        })
    }

    pub fn lambda0(&self) -> f64 {
        self.log_lambda0.exp()
    }

    pub fn excitation(&self) -> f64 {
        self.log_c.exp()
    }

    pub fn decay(&self) -> f64 {
        self.log_beta.exp()
    }

    pub fn bandwidth(&self) -> f64 {
        self.log_sigma.exp()
    }

    /// Gaussian mass inside the spatial domain around (x, y) and its
    /// derivative with respect to log sigma, by tensor-product quadrature.
    fn spatial_mass(&self, x: f64, y: f64) -> Result<(f64, f64)> {
        let (_, q1, q2) = self.quad_orders;
        let sigma = self.bandwidth();
        let rx = gauss_legendre(q1, self.domain.x_range.0, self.domain.x_range.1)?;
        let ry = gauss_legendre(q2, self.domain.y_range.0, self.domain.y_range.1)?;
        let mut mass = 0.0;
        let mut dmass = 0.0;
        for (j, gx) in rx.nodes.iter().enumerate() {
            let dx2 = (gx - x) * (gx - x);
            for (k, gy) in ry.nodes.iter().enumerate() {
                let d2 = dx2 + (gy - y) * (gy - y);
                let g = gauss(d2, sigma);
                let w = rx.weights[j] * ry.weights[k];
                mass += w * g;
                // dG/dlog sigma = G (d^2 / sigma^2 - 2)
                dmass += w * g * (d2 / (sigma * sigma) - 2.0);
            }
        }
        Ok((mass, dmass))
    }

    /// Log likelihood and its gradient in (log_lambda0, log_c, log_beta,
    /// log_sigma). The temporal part of the compensator telescopes to closed
    /// form; only the spatial Gaussian masses need quadrature.
    pub fn ll_and_grad(&self, seq: &EventSequence) -> Result<(f64, [f64; 4])> {
        let lam0 = self.lambda0();
        let c = self.excitation();
        let beta = self.decay();
        let sigma = self.bandwidth();
        let d = &self.domain;
        let times = seq.times();
        let xs = seq.xs();
        let ys = seq.ys();
        let n = seq.len();
        let mut ll = 0.0;
        let mut grad = [0.0; 4];

        // event terms; lags beyond ~36/beta underflow e^{-beta lag} and are
        // skipped via the running window
        let cutoff = 36.0 / beta;
        let mut lo = 0usize;
        for ev in 0..n {
            while lo < ev && times[ev] - times[lo] > cutoff {
                lo += 1;
            }
            let mut excite = 0.0;
            let mut d_beta = 0.0;
            let mut d_sigma = 0.0;
            for j in lo..ev {
                let lag = times[ev] - times[j];
                let ddx = xs[ev] - xs[j];
                let ddy = ys[ev] - ys[j];
                let d2 = ddx * ddx + ddy * ddy;
                let term = (-beta * lag).exp() * gauss(d2, sigma);
                excite += term;
                d_beta -= beta * lag * term;
                d_sigma += term * (d2 / (sigma * sigma) - 2.0);
            }
            let lam = lam0 + c * excite;
            ll += lam.ln();
            grad[0] += lam0 / lam;
            grad[1] += c * excite / lam;
            grad[2] += c * d_beta / lam;
            grad[3] += c * d_sigma / lam;
        }

        // compensator
        let base = lam0 * d.t_max * d.area();
        ll -= base;
        grad[0] -= base;
        let mut comp_exc = 0.0;
        let mut comp_dbeta = 0.0;
        let mut comp_dsigma = 0.0;
        for j in 0..n {
            let rem = d.t_max - times[j];
            let (mass, dmass) = self.spatial_mass(xs[j], ys[j])?;
            let decay_int = 1.0 - (-beta * rem).exp();
            comp_exc += mass * decay_int;
            comp_dsigma += dmass * decay_int;
            // d/dlog beta of (c/beta)(1 - e^{-beta rem}) S_j
            comp_dbeta += mass * (-decay_int / beta + rem * (-beta * rem).exp()) * beta;
        }
        ll -= (c / beta) * comp_exc;
        grad[1] -= (c / beta) * comp_exc;
        grad[2] -= (c / beta) * comp_dbeta;
        grad[3] -= (c / beta) * comp_dsigma;
        Ok((ll, grad))
    }

    /// Full-batch MAP-free MLE fit with Adam on the four log parameters.
    /// Returns the model and the per-epoch objective trace.
    pub fn fit(
        domain: Domain,
        train: &[EventSequence],
        cfg: &SthpFitConfig,
    ) -> Result<(SthpModel, Vec<f64>)> {
        domain.validate()?;
        if train.is_empty() {
            return Err(Error::InvalidInput("no sequences to fit".into()));
        }
        let total: usize = train.iter().map(|s| s.len()).sum();
        if total == 0 {
            return Err(Error::InvalidInput("cannot fit excitation with zero events".into()));
        }
        let rate = total as f64 / (train.len() as f64 * domain.t_max * domain.area());
        let b = cfg.init_branching.clamp(0.05, 0.9);
        let span = (domain.x_range.1 - domain.x_range.0)
            .min(domain.y_range.1 - domain.y_range.0);
        let mut model = SthpModel::new(
            rate * (1.0 - b),
            b * cfg.init_beta,
            cfg.init_beta,
            span / 8.0,
            domain,
        )?;
        let mut params = [
            model.log_lambda0,
            model.log_c,
            model.log_beta,
            model.log_sigma,
        ];
        let mut trace = Vec::with_capacity(cfg.epochs);
        let mut adam = crate::train::AdamState::new(4);
        let mut last_good = params;
        for _ in 0..cfg.epochs {
            let parts: Result<Vec<(f64, [f64; 4])>> =
                train.par_iter().map(|s| model.ll_and_grad(s)).collect();
            let mut obj = 0.0;
            let mut grad = [0.0; 4];
            for (l, g) in parts? {
                obj += l;
                for i in 0..4 {
                    grad[i] += g[i];
                }
            }
            if !obj.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                params = last_good;
                model.log_lambda0 = params[0];
                model.log_c = params[1];
                model.log_beta = params[2];
                model.log_sigma = params[3];
                break;
            }
            trace.push(obj);
            last_good = params;
            adam.step(&mut params, &grad, cfg.learning_rate);
            model.log_lambda0 = params[0];
            model.log_c = params[1];
            model.log_beta = params[2];
            model.log_sigma = params[3];
        }
        Ok((model, trace))
    }
}

impl IntensityModel for SthpModel {
    fn domain(&self) -> &Domain {
        &self.domain
    }

    fn quad_orders(&self) -> (usize, usize, usize) {
        self.quad_orders
    }

    fn intensity(&self, t: f64, x: f64, y: f64, history: Events<'_>) -> Result<f64> {
        if let Some(last) = history.last_time() {
            if !(last < t) {
                return Err(Error::InvalidInput(format!(
                    "history extends to t={} which is not before evaluation time {}",
                    last, t
                )));
            }
        }
        let c = self.excitation();
        let beta = self.decay();
        let sigma = self.bandwidth();
        let mut acc = self.lambda0();
        for j in 0..history.len() {
            let lag = t - history.times[j];
            let dx = x - history.xs[j];
            let dy = y - history.ys[j];
            acc += c * (-beta * lag).exp() * gauss(dx * dx + dy * dy, sigma);
        }
        Ok(acc)
    }

    fn log_likelihood(&self, seq: &EventSequence) -> Result<f64> {
        Ok(self.ll_and_grad(seq)?.0)
    }

    fn profiler(&self, xs: Vec<f64>, ys: Vec<f64>) -> Result<Box<dyn SpatialProfiler + '_>> {
        Ok(Box::new(SthpProfiler { model: *self, xs, ys, events: Vec::new() }))
    }
}

struct SthpProfiler {
    model: SthpModel,
    xs: Vec<f64>,
    ys: Vec<f64>,
    events: Vec<(f64, f64, f64)>,
}

impl SpatialProfiler for SthpProfiler {
    fn push_event(&mut self, t: f64, x: f64, y: f64) -> Result<()> {
        if let Some((last, _, _)) = self.events.last() {
            if t < *last {
                return Err(Error::InvalidInput(format!(
                    "events must be pushed in time order: {} after {}",
                    t, last
                )));
            }
        }
        self.events.push((t, x, y));
        Ok(())
    }

    fn eval_at(&self, t: f64) -> Result<Matrix> {
        let c = self.model.excitation();
        let beta = self.model.decay();
        let sigma = self.model.bandwidth();
        let mut out = Matrix::zeros(self.xs.len(), self.ys.len());
        for v in out.data_mut() {
            *v = self.model.lambda0();
        }
        for (tj, ex, ey) in &self.events {
            let lag = t - tj;
            if lag <= 0.0 {
                continue;
            }
            let decay = c * (-beta * lag).exp();
            if decay < 1e-300 {
                continue;
            }
            for (j, x) in self.xs.iter().enumerate() {
                let dx2 = (x - ex) * (x - ex);
                for (k, y) in self.ys.iter().enumerate() {
                    let d2 = dx2 + (y - ey) * (y - ey);
                    out.add_at(j, k, decay * gauss(d2, sigma));
                }
            }
        }
        Ok(out)
    }
}
