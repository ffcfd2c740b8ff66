//! The intensity model: a GP background plus a sum of GP influence-kernel
//! terms over past events, pushed through a softplus link.
//!
//! lambda(t, x, y | H_t) = softplus( g(x, y) + sum_{t_j < t} f(t - t_j,
//! x - x_j, y - y_j) ), with g on a 2-D spatial grid and f on a 3-D
//! lag/offset grid. The log likelihood of a sequence on [0, T] is
//! sum_n log lambda(event_n) - int_0^T int_S lambda, and the triple integral
//! is evaluated piecewise over inter-event intervals (history is constant on
//! each open interval) with tensor-product Gauss-Legendre rules.
//!
//! Evaluating lambda on a quadrature grid uses the product structure: the
//! background is two mode products, and each history event contributes
//! F x0 W0 x1 W1 x2 W2 where the W are per-axis interpolation weights. The
//! spatial weight matrices of an event do not depend on the interval, so the
//! likelihood loop caches the partial contraction F x1 W1 x2 W2 per event.

use crate::error::{Error, Result};
use crate::grids::{AxisGrid, GridGP};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::quadrature::{gauss_legendre, ProductRule3};
use crate::tensor::{Matrix, Tensor3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

pub const LOG_CLAMP: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub t_max: f64,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
}

impl Domain {
    pub fn new(t_max: f64, x_range: (f64, f64), y_range: (f64, f64)) -> Result<Self> {
        let d = Domain { t_max, x_range, y_range };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_max > 0.0) {
            return Err(Error::InvalidInput(format!("t_max must be positive, got {}", self.t_max)));
        }
        if !(self.x_range.0 < self.x_range.1) || !(self.y_range.0 < self.y_range.1) {
            return Err(Error::InvalidInput("empty spatial range".into()));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x_range.1 - self.x_range.0) * (self.y_range.1 - self.y_range.0)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_range.0 && x <= self.x_range.1 && y >= self.y_range.0 && y <= self.y_range.1
    }
}

/// Borrowed view of an event prefix; the unit every intensity evaluation
/// takes as history.
#[derive(Debug, Clone, Copy)]
pub struct Events<'a> {
    pub times: &'a [f64],
    pub xs: &'a [f64],
    pub ys: &'a [f64],
}

impl<'a> Events<'a> {
    pub fn empty() -> Events<'static> {
        Events { times: &[], xs: &[], ys: &[] }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last_time(&self) -> Option<f64> {
        self.times.last().copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSequence {
    times: Vec<f64>,
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl EventSequence {
    /// Validates strictly increasing times in (0, t_max] and spatial
    /// containment, then takes ownership.
    pub fn new(times: Vec<f64>, xs: Vec<f64>, ys: Vec<f64>, domain: &Domain) -> Result<Self> {
        if times.len() != xs.len() || times.len() != ys.len() {
            return Err(Error::DimensionMismatch(format!(
                "event sequence arrays disagree: {} times, {} xs, {} ys",
                times.len(),
                xs.len(),
                ys.len()
            )));
        }
        let mut prev = 0.0;
        for (i, t) in times.iter().enumerate() {
            if !(*t > prev) {
                return Err(Error::InvalidInput(format!(
                    "event {} at t={} is not strictly after {}",
                    i, t, prev
                )));
            }
            if *t > domain.t_max {
                return Err(Error::InvalidInput(format!(
                    "event {} at t={} exceeds horizon {}",
                    i, t, domain.t_max
                )));
            }
            prev = *t;
        }
        for i in 0..xs.len() {
            if !domain.contains(xs[i], ys[i]) {
                return Err(Error::InvalidInput(format!(
                    "event {} at ({}, {}) lies outside the spatial domain",
                    i, xs[i], ys[i]
                )));
            }
        }
        Ok(EventSequence { times, xs, ys })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn events(&self) -> Events<'_> {
        Events { times: &self.times, xs: &self.xs, ys: &self.ys }
    }

    /// First `n` events as a history view.
    pub fn prefix(&self, n: usize) -> Events<'_> {
        Events { times: &self.times[..n], xs: &self.xs[..n], ys: &self.ys[..n] }
    }
}

/// Numerically stable softplus link (1/beta) log(1 + e^{beta z}).
#[inline]
pub fn softplus(z: f64, beta: f64) -> f64 {
    let bz = beta * z;
    z.max(0.0) + (-bz.abs()).exp().ln_1p() / beta
}

/// d softplus / d z = logistic(beta z).
#[inline]
pub fn softplus_deriv(z: f64, beta: f64) -> f64 {
    let bz = beta * z;
    if bz >= 0.0 {
        1.0 / (1.0 + (-bz).exp())
    } else {
        let e = bz.exp();
        e / (1.0 + e)
    }
}

/// Inverse of `softplus`: the z with softplus(z, beta) = v, for v > 0.
pub fn softplus_inverse(v: f64, beta: f64) -> f64 {
    let bv = beta * v;
    // ln(e^bv - 1)/beta, written to stay finite for large bv
    (bv + (-(-bv).exp()).ln_1p()) / beta
}

/// Common interface over the fitted model and the baselines; prediction and
/// metric code is generic over it.
pub trait IntensityModel: Sync {
    fn domain(&self) -> &Domain;

    fn quad_orders(&self) -> (usize, usize, usize);

    /// Conditional intensity at (t, x, y) given history events, all of which
    /// must be strictly earlier than t.
    fn intensity(&self, t: f64, x: f64, y: f64, history: Events<'_>) -> Result<f64>;

    fn log_likelihood(&self, seq: &EventSequence) -> Result<f64>;

    /// Evaluator bound to a fixed spatial node set. Events pushed into it
    /// form the history; `eval_at(t)` uses pushed events with time < t, so a
    /// caller may push an entire sequence up front and sweep probe times.
    fn profiler(&self, xs: Vec<f64>, ys: Vec<f64>) -> Result<Box<dyn SpatialProfiler + '_>>;
}

pub trait SpatialProfiler {
    fn push_event(&mut self, t: f64, x: f64, y: f64) -> Result<()>;

    /// Intensity on the bound spatial nodes at time t; rows index xs, cols
    /// index ys.
    fn eval_at(&self, t: f64) -> Result<Matrix>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub f_grid: (usize, usize, usize),
    pub g_grid: (usize, usize),
    pub family: KernelFamily,
    pub link_beta: f64,
    pub quad_orders: (usize, usize, usize),
    /// Influence lookback cutoff; when set, the influence lag axis spans
    /// [0, horizon] and events older than the horizon contribute exactly 0.
    pub time_horizon: Option<f64>,
    /// Half-width of the influence offset axes; offsets beyond it decay to
    /// zero with the kernel. Defaults to the full domain extent, which wastes
    /// resolution when the true interaction range is short.
    pub offset_reach: Option<f64>,
    /// Standard deviation of the value-tensor initialization.
    pub init_sd: f64,
    /// Initial kernel lengthscale as a fraction of each axis span. Smaller
    /// values let the fit resolve finer structure from the start, which
    /// matters when hyperparameters are frozen.
    pub lengthscale_frac: f64,
    /// Initial prior marginal variance of a grid value (spread across axes as
    /// the dim-th root, since per-axis variances multiply). Doubles as a
    /// shrinkage strength: smaller values pull weakly-identified regions of
    /// the fit toward zero.
    pub kernel_variance: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            f_grid: (16, 16, 16),
            g_grid: (20, 20),
            family: KernelFamily::SquaredExponential,
            link_beta: 1.0,
            quad_orders: (12, 12, 12),
            time_horizon: None,
            offset_reach: None,
            init_sd: 0.01,
            lengthscale_frac: 0.25,
            kernel_variance: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KstppModel {
    pub domain: Domain,
    /// 2-D background GP over (x, y).
    pub background: GridGP,
    /// 3-D influence GP over (lag, dx, dy).
    pub influence: GridGP,
    pub link_beta: f64,
    pub quad_orders: (usize, usize, usize),
    pub time_horizon: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct LikelihoodReport {
    pub value: f64,
    /// Events whose intensity had to be clamped before taking the log.
    pub clamped: usize,
}

fn sample_normal(rng: &mut ChaCha12Rng, sd: f64) -> f64 {
    // Box-Muller; one value per pair keeps the stream layout simple
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    sd * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Replaces the grid values with sd * (a unit-variance prior draw), so the
/// start point is smooth under the kernels instead of white noise (white
/// noise has an enormous prior cost under tightly correlated grams).
fn sample_gp_values(gp: &mut GridGP, rng: &mut ChaCha12Rng, sd: f64) -> Result<()> {
    let mut draw = Tensor3::zeros(gp.values().shape());
    for v in draw.data_mut() {
        *v = sample_normal(rng, sd);
    }
    for axis in 0..gp.dim() {
        let mode = gp.mode_of_axis(axis);
        draw = crate::tensor::mode_product(&draw, gp.operator(axis).factor.lower(), mode)?;
    }
    gp.set_values(draw)
}

impl KstppModel {
    /// Fresh model over `domain`: background grid on the spatial box,
    /// influence grid on [0, horizon-or-T] x symmetric offset ranges,
    /// lengthscales at `lengthscale_frac` of each axis span, marginal prior
    /// variance `kernel_variance`, values drawn from the grid prior scaled to
    /// marginal sd `init_sd`.
    pub fn init(domain: Domain, settings: &ModelSettings, seed: u64) -> Result<Self> {
        domain.validate()?;
        if !(settings.link_beta > 0.0) {
            return Err(Error::InvalidInput("link beta must be positive".into()));
        }
        if !(settings.lengthscale_frac > 0.0) {
            return Err(Error::InvalidInput("lengthscale fraction must be positive".into()));
        }
        if !(settings.kernel_variance > 0.0) {
            return Err(Error::InvalidInput("kernel variance must be positive".into()));
        }
        if let Some(h) = settings.time_horizon {
            if !(h > 0.0) {
                return Err(Error::InvalidInput("time horizon must be positive".into()));
            }
        }
        if let Some(r) = settings.offset_reach {
            if !(r > 0.0) {
                return Err(Error::InvalidInput("offset reach must be positive".into()));
            }
        }
        let lag_hi = settings.time_horizon.unwrap_or(domain.t_max);
        let dx = domain.x_range.1 - domain.x_range.0;
        let dy = domain.y_range.1 - domain.y_range.0;
        let rx = settings.offset_reach.unwrap_or(dx);
        let ry = settings.offset_reach.unwrap_or(dy);
        let f_axes = vec![
            AxisGrid::uniform(0.0, lag_hi, settings.f_grid.0)?,
            AxisGrid::uniform(-rx, rx, settings.f_grid.1)?,
            AxisGrid::uniform(-ry, ry, settings.f_grid.2)?,
        ];
        let g_axes = vec![
            AxisGrid::uniform(domain.x_range.0, domain.x_range.1, settings.g_grid.0)?,
            AxisGrid::uniform(domain.y_range.0, domain.y_range.1, settings.g_grid.1)?,
        ];
        let spec_for = |axis: &AxisGrid, var: f64| {
            KernelSpec::new(settings.family, axis.span() * settings.lengthscale_frac, var)
        };
        let f_var = settings.kernel_variance.powf(1.0 / 3.0);
        let g_var = settings.kernel_variance.sqrt();
        let f_specs: Vec<KernelSpec> = f_axes.iter().map(|a| spec_for(a, f_var)).collect();
        let g_specs: Vec<KernelSpec> = g_axes.iter().map(|a| spec_for(a, g_var)).collect();
        let mut influence = GridGP::new(f_axes, f_specs)?;
        let mut background = GridGP::new(g_axes, g_specs)?;

        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        sample_gp_values(&mut influence, &mut rng, settings.init_sd)?;
        sample_gp_values(&mut background, &mut rng, settings.init_sd)?;
        Ok(KstppModel {
            domain,
            background,
            influence,
            link_beta: settings.link_beta,
            quad_orders: settings.quad_orders,
            time_horizon: settings.time_horizon,
        })
    }

    /// Overwrites the background with the flat surface whose intensity is
    /// `rate` everywhere. Starting a fit this way removes the long transient
    /// in which the likelihood inflates background and influence together to
    /// reach the empirical event rate.
    pub fn set_background_level(&mut self, rate: f64) -> Result<()> {
        if !(rate > 0.0) {
            return Err(Error::InvalidInput("background rate must be positive".into()));
        }
        let z = softplus_inverse(rate, self.link_beta);
        let shape = self.background.values().shape();
        let n = shape.0 * shape.1 * shape.2;
        self.background.set_values(Tensor3::from_vec(shape, vec![z; n])?)
    }

    /// Pre-link value g(x,y) + sum_j f(t - t_j, x - x_j, y - y_j).
    pub fn pre_intensity(&self, t: f64, x: f64, y: f64, history: Events<'_>) -> Result<f64> {
        if let Some(last) = history.last_time() {
            if !(last < t) {
                return Err(Error::InvalidInput(format!(
                    "history extends to t={} which is not before evaluation time {}",
                    last, t
                )));
            }
        }
        let mut pre = self.background.eval_point(&[x, y])?;
        for j in 0..history.len() {
            let lag = t - history.times[j];
            if let Some(h) = self.time_horizon {
                if lag > h {
                    continue;
                }
            }
            pre += self.influence.eval_point(&[lag, x - history.xs[j], y - history.ys[j]])?;
        }
        Ok(pre)
    }

    pub fn intensity(&self, t: f64, x: f64, y: f64, history: Events<'_>) -> Result<f64> {
        Ok(softplus(self.pre_intensity(t, x, y, history)?, self.link_beta))
    }

    /// Intensity on the tensor-product quadrature grid of one inter-event
    /// interval (t_lo, t_hi) under fixed history. A zero-width interval
    /// yields an empty temporal rule and a (0, q1, q2) tensor.
    pub fn intensity_on_quad_grid(
        &self,
        t_lo: f64,
        t_hi: f64,
        history: Events<'_>,
    ) -> Result<(Tensor3, ProductRule3)> {
        if !(t_lo <= t_hi) || t_lo < 0.0 {
            return Err(Error::InvalidInput(format!("bad interval ({}, {})", t_lo, t_hi)));
        }
        if let Some(last) = history.last_time() {
            if last > t_lo {
                return Err(Error::InvalidInput(format!(
                    "history extends to t={} beyond interval start {}",
                    last, t_lo
                )));
            }
        }
        let (q0, q1, q2) = self.quad_orders;
        let t_order = if t_hi > t_lo { q0 } else { 0 };
        let rt = gauss_legendre(t_order, t_lo, t_hi)?;
        let rx = gauss_legendre(q1, self.domain.x_range.0, self.domain.x_range.1)?;
        let ry = gauss_legendre(q2, self.domain.y_range.0, self.domain.y_range.1)?;
        let mut pre = self.pre_intensity_grid(&rt.nodes, &rx.nodes, &ry.nodes, history)?;
        for v in pre.data_mut() {
            *v = softplus(*v, self.link_beta);
        }
        Ok((pre, ProductRule3::new(rt, rx, ry)))
    }

    /// Pre-link values on an arbitrary product grid of times x xs x ys.
    fn pre_intensity_grid(
        &self,
        times: &[f64],
        xs: &[f64],
        ys: &[f64],
        history: Events<'_>,
    ) -> Result<Tensor3> {
        let yg = self.background.eval_on_product_grid(&[xs, ys])?;
        let (nt, nx, ny) = (times.len(), xs.len(), ys.len());
        let mut pre = Tensor3::zeros((nt, nx, ny));
        for i in 0..nt {
            for j in 0..nx {
                for k in 0..ny {
                    pre.set(i, j, k, yg.get(0, j, k));
                }
            }
        }
        for e in 0..history.len() {
            let lags: Vec<f64> = times.iter().map(|t| t - history.times[e]).collect();
            if self.all_beyond_horizon(&lags) {
                continue;
            }
            let dxs: Vec<f64> = xs.iter().map(|x| x - history.xs[e]).collect();
            let dys: Vec<f64> = ys.iter().map(|y| y - history.ys[e]).collect();
            let mut contrib = self.influence.eval_on_product_grid(&[&lags, &dxs, &dys])?;
            self.mask_horizon_rows(&mut contrib, &lags);
            pre.add_assign(&contrib)?;
        }
        Ok(pre)
    }

    fn all_beyond_horizon(&self, lags: &[f64]) -> bool {
        match self.time_horizon {
            Some(h) => lags.iter().all(|l| *l > h),
            None => false,
        }
    }

    /// Zeroes the influence contribution at temporal nodes past the horizon.
    fn mask_horizon_rows(&self, contrib: &mut Tensor3, lags: &[f64]) {
        let Some(h) = self.time_horizon else { return };
        let (n0, n1, n2) = contrib.shape();
        debug_assert_eq!(n0, lags.len());
        for (i, lag) in lags.iter().enumerate() {
            if *lag > h {
                let base = i * n1 * n2;
                for v in &mut contrib.data_mut()[base..base + n1 * n2] {
                    *v = 0.0;
                }
            }
        }
    }

    pub fn log_likelihood(&self, seq: &EventSequence) -> Result<f64> {
        Ok(self.log_likelihood_detailed(seq)?.value)
    }

    /// Piecewise evaluation: event log-intensities minus per-interval
    /// compensators. Spatial interpolation weights of each history event are
    /// interval-independent, so the partial contraction F x1 W1 x2 W2 is
    /// cached per event across intervals.
    pub fn log_likelihood_detailed(&self, seq: &EventSequence) -> Result<LikelihoodReport> {
        let (q0, q1, q2) = self.quad_orders;
        let d = &self.domain;
        let rx = gauss_legendre(q1, d.x_range.0, d.x_range.1)?;
        let ry = gauss_legendre(q2, d.y_range.0, d.y_range.1)?;
        let yg = self.background.eval_on_product_grid(&[&rx.nodes, &ry.nodes])?;
        let base_t = gauss_legendre(q0, 0.0, 1.0)?;
        let n = seq.len();
        let f_vals = self.influence.values();
        let mut h_cache: Vec<Option<Tensor3>> = vec![None; n];

        let mut value = 0.0;
        let mut clamped = 0usize;
        // event terms
        for ev in 0..n {
            let pre = self.pre_intensity(seq.times[ev], seq.xs[ev], seq.ys[ev], seq.prefix(ev))?;
            let lam = softplus(pre, self.link_beta);
            if lam < LOG_CLAMP {
                clamped += 1;
            }
            value += lam.max(LOG_CLAMP).ln();
        }
        // interval compensators
        let (m0, _, _) = f_vals.shape();
        let mut pre = Tensor3::zeros((q0, rx.len(), ry.len()));
        let mut node_t = vec![0.0; q0];
        let mut w0 = Matrix::zeros(q0, m0);
        for iv in 0..=n {
            let lo = if iv == 0 { 0.0 } else { seq.times[iv - 1] };
            let hi = if iv == n { d.t_max } else { seq.times[iv] };
            if !(hi > lo) {
                continue;
            }
            let width = hi - lo;
            for (i, u) in base_t.nodes.iter().enumerate() {
                node_t[i] = lo + width * u;
            }
            // background replicated across time nodes
            for i in 0..q0 {
                for j in 0..rx.len() {
                    for k in 0..ry.len() {
                        pre.set(i, j, k, yg.get(0, j, k));
                    }
                }
            }
            for e in 0..iv {
                let first_lag = node_t[0] - seq.times[e];
                if let Some(hz) = self.time_horizon {
                    if first_lag > hz {
                        continue; // lags only grow within the interval
                    }
                }
                if h_cache[e].is_none() {
                    h_cache[e] = Some(self.event_spatial_cache(e, seq, &rx.nodes, &ry.nodes)?);
                }
                let h_e = h_cache[e].as_ref().unwrap();
                self.fill_temporal_weights(&mut w0, &node_t, seq.times[e]);
                add_mode0_product(&mut pre, h_e, &w0);
            }
            let mut comp = 0.0;
            for i in 0..q0 {
                let wt = width * base_t.weights[i];
                for j in 0..rx.len() {
                    let wx = wt * rx.weights[j];
                    for k in 0..ry.len() {
                        comp += wx * ry.weights[k] * softplus(pre.get(i, j, k), self.link_beta);
                    }
                }
            }
            value -= comp;
        }
        Ok(LikelihoodReport { value, clamped })
    }

    /// F x1 W1 x2 W2 for one history event on the fixed spatial quadrature
    /// nodes; shape (m0, q1, q2).
    fn event_spatial_cache(
        &self,
        event: usize,
        seq: &EventSequence,
        xs: &[f64],
        ys: &[f64],
    ) -> Result<Tensor3> {
        let dxs: Vec<f64> = xs.iter().map(|x| x - seq.xs[event]).collect();
        let dys: Vec<f64> = ys.iter().map(|y| y - seq.ys[event]).collect();
        let (w1, _) = self.influence.operator(1).cross_weight_matrix(&dxs);
        let (w2, _) = self.influence.operator(2).cross_weight_matrix(&dys);
        let t = crate::tensor::mode_product(self.influence.values(), &w1, 1)?;
        crate::tensor::mode_product(&t, &w2, 2)
    }

    /// Temporal interpolation weight rows at the interval's time nodes for
    /// one event, with rows past the horizon zeroed.
    fn fill_temporal_weights(&self, w0: &mut Matrix, node_t: &[f64], event_time: f64) {
        let op = self.influence.operator(0);
        let m0 = op.size();
        for (r, t) in node_t.iter().enumerate() {
            let lag = t - event_time;
            let beyond = self.time_horizon.map(|h| lag > h).unwrap_or(false);
            if beyond {
                for c in 0..m0 {
                    w0.set(r, c, 0.0);
                }
            } else {
                let row = op.cross_weights(lag);
                for c in 0..m0 {
                    w0.set(r, c, row[c]);
                }
            }
        }
    }

    /// Log joint: both GP log priors plus the summed sequence likelihoods.
    pub fn log_joint(&self, batch: &[EventSequence]) -> Result<f64> {
        let mut acc = self.background.log_prior() + self.influence.log_prior();
        for seq in batch {
            acc += self.log_likelihood(seq)?;
        }
        Ok(acc)
    }

    /// Mini-batch objective: the likelihood sum is rescaled by |D|/B so the
    /// stochastic gradient is unbiased for the full-dataset joint.
    pub fn log_joint_minibatch(&self, batch: &[EventSequence], dataset_size: usize) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty mini-batch".into()));
        }
        let scale = dataset_size as f64 / batch.len() as f64;
        let mut ll = 0.0;
        for seq in batch {
            ll += self.log_likelihood(seq)?;
        }
        Ok(self.background.log_prior() + self.influence.log_prior() + scale * ll)
    }
}

/// pre[r, :, :] += sum_i w0[r, i] * h[i, :, :], the fused per-event temporal
/// contraction of the likelihood inner loop.
pub(crate) fn add_mode0_product(pre: &mut Tensor3, h: &Tensor3, w0: &Matrix) {
    let (m0, n1, n2) = h.shape();
    let slab = n1 * n2;
    let (rows, _) = (w0.rows(), w0.cols());
    debug_assert_eq!(pre.shape().0, rows);
    debug_assert_eq!(w0.cols(), m0);
    let hd = h.data();
    let pd = pre.data_mut();
    for r in 0..rows {
        let wrow = w0.row(r);
        let obase = r * slab;
        for i in 0..m0 {
            let a = wrow[i];
            if a == 0.0 {
                continue;
            }
            let ibase = i * slab;
            for u in 0..slab {
                pd[obase + u] += a * hd[ibase + u];
            }
        }
    }
}

impl IntensityModel for KstppModel {
    fn domain(&self) -> &Domain {
        &self.domain
    }

    fn quad_orders(&self) -> (usize, usize, usize) {
        self.quad_orders
    }

    fn intensity(&self, t: f64, x: f64, y: f64, history: Events<'_>) -> Result<f64> {
        KstppModel::intensity(self, t, x, y, history)
    }

    fn log_likelihood(&self, seq: &EventSequence) -> Result<f64> {
        KstppModel::log_likelihood(self, seq)
    }

    fn profiler(&self, xs: Vec<f64>, ys: Vec<f64>) -> Result<Box<dyn SpatialProfiler + '_>> {
        let bg = self.background.eval_on_product_grid(&[&xs, &ys])?;
        Ok(Box::new(KstppProfiler { model: self, xs, ys, bg, events: Vec::new() }))
    }
}

struct KstppProfiler<'a> {
    model: &'a KstppModel,
    xs: Vec<f64>,
    ys: Vec<f64>,
    /// Pre-link background on the node grid, shape (1, nx, ny).
    bg: Tensor3,
    /// (time, F x1 W1 x2 W2) per pushed event.
    events: Vec<(f64, Tensor3)>,
}

impl SpatialProfiler for KstppProfiler<'_> {
    fn push_event(&mut self, t: f64, x: f64, y: f64) -> Result<()> {
        if let Some((last, _)) = self.events.last() {
            if t < *last {
                return Err(Error::InvalidInput(format!(
                    "events must be pushed in time order: {} after {}",
                    t, last
                )));
            }
        }
        let dxs: Vec<f64> = self.xs.iter().map(|v| v - x).collect();
        let dys: Vec<f64> = self.ys.iter().map(|v| v - y).collect();
        let f = &self.model.influence;
        let (w1, _) = f.operator(1).cross_weight_matrix(&dxs);
        let (w2, _) = f.operator(2).cross_weight_matrix(&dys);
        let t1 = crate::tensor::mode_product(f.values(), &w1, 1)?;
        let h = crate::tensor::mode_product(&t1, &w2, 2)?;
        self.events.push((t, h));
        Ok(())
    }

    fn eval_at(&self, t: f64) -> Result<Matrix> {
        let (nx, ny) = (self.xs.len(), self.ys.len());
        let mut pre = Matrix::zeros(nx, ny);
        for j in 0..nx {
            for k in 0..ny {
                pre.set(j, k, self.bg.get(0, j, k));
            }
        }
        let op0 = self.model.influence.operator(0);
        let horizon = self.model.time_horizon;
        for (tj, h) in &self.events {
            let lag = t - tj;
            if lag <= 0.0 {
                continue; // not yet in the history of time t
            }
            if let Some(hz) = horizon {
                if lag > hz {
                    continue;
                }
            }
            let eta = op0.cross_weights(lag);
            let (m0, n1, n2) = h.shape();
            debug_assert_eq!((n1, n2), (nx, ny));
            let slab = n1 * n2;
            for (i, a) in eta.iter().enumerate().take(m0) {
                if *a == 0.0 {
                    continue;
                }
                let base = i * slab;
                for u in 0..slab {
                    pre.data_mut()[u] += a * h.data()[base + u];
                }
            }
        }
        let beta = self.model.link_beta;
        for v in pre.data_mut() {
            *v = softplus(*v, beta);
        }
        Ok(pre)
    }
}
