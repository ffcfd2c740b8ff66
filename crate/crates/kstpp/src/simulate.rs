//! Synthetic ground-truth processes and exact simulation by thinning.
//!
//! The generator intensity is
//!
//!   lambda(t, x, y) = max(0, lambda0 + sum_{t_n < t} c_n e^{-beta (t - t_n)}
//!                     G_sigma(dist((x, y), (x_n, y_n))))
//!
//! with G_sigma the bivariate Gaussian bump e^{-d^2 / 2 sigma^2} / (2 pi
//! sigma^2) and c_n a sign-switching coefficient: either a function of the
//! elapsed lag or of the distance to the triggering event. Simulation uses
//! thinning with a bound recomputed after every proposal; because each
//! excitation term decays in time, the positive part of the intensity at any
//! future instant is dominated by the current-lag envelope, which gives a
//! valid and reasonably tight bound per rule type. A proposal consumes
//! uniforms in the fixed order (wait, x, y, accept), so sequences are
//! reproducible from their seed alone.

use crate::error::{Error, Result};
use crate::model::{
    Domain, EventSequence, Events, IntensityModel, SpatialProfiler, LOG_CLAMP,
};
use crate::quadrature::gauss_legendre;
use crate::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CRule {
    /// Coefficient switches on the elapsed lag: `before` while lag <
    /// threshold, `after` from the threshold on.
    TemporalSwitch { threshold: f64, before: f64, after: f64 },
    /// Coefficient switches on the distance to the trigger: `near` for
    /// d <= threshold, `far` beyond.
    DistanceSwitch { threshold: f64, near: f64, far: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub lambda0: f64,
    pub beta: f64,
    pub sigma: f64,
    pub c_rule: CRule,
    pub domain: Domain,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ThinningTrace {
    pub proposals: usize,
    pub accepted: usize,
    /// Rejected proposals at which the unclamped intensity was negative.
    pub rejected_negative: usize,
}

impl SynthConfig {
    /// Self-exciting-then-inhibiting process: events boost the intensity for
    /// one time unit, then suppress it.
    pub fn syn1() -> Self {
        SynthConfig {
            lambda0: 2.0,
            beta: 2.0,
            sigma: 0.3,
            c_rule: CRule::TemporalSwitch { threshold: 1.0, before: 1.0, after: -2.0 },
            domain: Domain { t_max: 50.0, x_range: (-2.0, 2.0), y_range: (-2.0, 2.0) },
        }
    }

    /// Locally inhibiting, remotely exciting process: suppression inside the
    /// unit disk around each event, excitation outside it.
    pub fn syn2() -> Self {
        SynthConfig {
            lambda0: 2.0,
            beta: 1.5,
            sigma: 0.5,
            c_rule: CRule::DistanceSwitch { threshold: 1.0, near: -0.3, far: 1.0 },
            domain: Domain { t_max: 50.0, x_range: (-2.0, 2.0), y_range: (-2.0, 2.0) },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        if !(self.lambda0 > 0.0) || !(self.beta > 0.0) || !(self.sigma > 0.0) {
            return Err(Error::InvalidInput(
                "lambda0, beta and sigma must all be positive".into(),
            ));
        }
        let thr = match self.c_rule {
            CRule::TemporalSwitch { threshold, .. } => threshold,
            CRule::DistanceSwitch { threshold, .. } => threshold,
        };
        if !(thr > 0.0) {
            return Err(Error::InvalidInput("switch threshold must be positive".into()));
        }
        Ok(())
    }

    fn gauss_peak(&self) -> f64 {
        1.0 / (2.0 * std::f64::consts::PI * self.sigma * self.sigma)
    }

    fn gauss(&self, d2: f64) -> f64 {
        self.gauss_peak() * (-d2 / (2.0 * self.sigma * self.sigma)).exp()
    }

    /// Unclamped intensity; negative values are meaningful to the thinning
    /// diagnostics.
    pub fn raw_intensity(&self, t: f64, x: f64, y: f64, history: Events<'_>) -> f64 {
        let mut acc = self.lambda0;
        for j in 0..history.len() {
            let lag = t - history.times[j];
            if lag <= 0.0 {
                continue;
            }
            let dx = x - history.xs[j];
            let dy = y - history.ys[j];
            let d2 = dx * dx + dy * dy;
            let c = match self.c_rule {
                CRule::TemporalSwitch { threshold, before, after } => {
                    if lag < threshold {
                        before
                    } else {
                        after
                    }
                }
                CRule::DistanceSwitch { threshold, near, far } => {
                    if d2.sqrt() <= threshold {
                        near
                    } else {
                        far
                    }
                }
            };
            acc += c * (-self.beta * lag).exp() * self.gauss(d2);
        }
        acc
    }

    pub fn intensity(&self, t: f64, x: f64, y: f64, history: Events<'_>) -> f64 {
        self.raw_intensity(t, x, y, history).max(0.0)
    }

    /// Pointwise bound on lambda(tau, ., .) valid for every tau >= t: each
    /// event's positive part is enveloped at its current lag, using the
    /// larger of the rule's branches where both remain reachable.
    fn intensity_sup(&self, t: f64, history: Events<'_>) -> f64 {
        let peak = self.gauss_peak();
        let mut acc = self.lambda0;
        for tj in history.times {
            let lag = t - tj;
            if lag < 0.0 {
                continue;
            }
            acc += match self.c_rule {
                CRule::TemporalSwitch { threshold, before, after } => {
                    let mut term = 0.0;
                    if lag < threshold && before > 0.0 {
                        term = before * (-self.beta * lag).exp() * peak;
                    }
                    if after > 0.0 {
                        let from = lag.max(threshold);
                        term = term.max(after * (-self.beta * from).exp() * peak);
                    }
                    term
                }
                CRule::DistanceSwitch { threshold, near, far } => {
                    let spatial_sup = (near.max(0.0) * peak)
                        .max(far.max(0.0) * self.gauss(threshold * threshold));
                    spatial_sup * (-self.beta * lag).exp()
                }
            };
        }
        acc
    }
}

/// Draws one sequence on [0, t_max] by thinning. Returns the events and the
/// proposal statistics. Errors with `BoundViolation` if the intensity ever
/// exceeds its bound, which would invalidate the draw.
pub fn thin(config: &SynthConfig, rng: &mut ChaCha12Rng) -> Result<(EventSequence, ThinningTrace)> {
    config.validate()?;
    let d = &config.domain;
    let area = d.area();
    let mut times: Vec<f64> = Vec::new();
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut trace = ThinningTrace::default();
    let mut t = 0.0;
    loop {
        let history = Events { times: &times, xs: &xs, ys: &ys };
        let total_bound = area * config.intensity_sup(t, history);
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let wait = -u1.ln() / total_bound;
        let t_prop = t + wait;
        if t_prop > d.t_max {
            break;
        }
        let x = d.x_range.0 + rng.gen::<f64>() * (d.x_range.1 - d.x_range.0);
        let y = d.y_range.0 + rng.gen::<f64>() * (d.y_range.1 - d.y_range.0);
        let u_accept: f64 = rng.gen();
        trace.proposals += 1;
        let raw = config.raw_intensity(t_prop, x, y, history);
        let lam = raw.max(0.0);
        let ratio = lam * area / total_bound;
        if ratio > 1.0 + 1e-9 {
            return Err(Error::BoundViolation {
                t: t_prop,
                intensity: lam,
                bound: total_bound / area,
            });
        }
        if u_accept < ratio {
            times.push(t_prop);
            xs.push(x);
            ys.push(y);
            trace.accepted += 1;
        } else if raw < 0.0 {
            trace.rejected_negative += 1;
        }
        t = t_prop;
    }
    let seq = EventSequence::new(times, xs, ys, d)?;
    Ok((seq, trace))
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for sequence `index` of a named split, independent of how many
/// sequences are drawn or in what order.
pub fn sequence_seed(master: u64, split: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in split.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3);
    }
    splitmix64(master ^ splitmix64(h ^ splitmix64(index)))
}

/// Simulates `count` independent sequences for one split. Sequences are
/// seeded individually, so the result does not depend on thread count.
pub fn make_dataset(
    config: &SynthConfig,
    count: usize,
    split: &str,
    master_seed: u64,
) -> Result<(Vec<EventSequence>, Vec<ThinningTrace>)> {
    config.validate()?;
    let drawn: Result<Vec<_>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng =
                ChaCha12Rng::seed_from_u64(sequence_seed(master_seed, split, i as u64));
            thin(config, &mut rng)
        })
        .collect();
    let mut seqs = Vec::with_capacity(count);
    let mut traces = Vec::with_capacity(count);
    for (s, tr) in drawn? {
        seqs.push(s);
        traces.push(tr);
    }
    Ok((seqs, traces))
}

/// The generating process exposed through the common model interface, for
/// oracle comparisons against fitted models.
#[derive(Debug, Clone)]
pub struct SynthTruthModel {
    pub config: SynthConfig,
    pub quad_orders: (usize, usize, usize),
}

impl SynthTruthModel {
    pub fn new(config: SynthConfig) -> Self {
        SynthTruthModel { config, quad_orders: (12, 12, 12) }
    }
}

impl IntensityModel for SynthTruthModel {
    fn domain(&self) -> &Domain {
        &self.config.domain
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
        Ok(self.config.intensity(t, x, y, history))
    }

    /// Piecewise quadrature like the fitted model. The switching rules make
    /// the integrand mildly discontinuous, so this is a good approximation
    /// rather than a closed form; raise the orders if more digits matter.
    fn log_likelihood(&self, seq: &EventSequence) -> Result<f64> {
        let d = &self.config.domain;
        let (q0, q1, q2) = self.quad_orders;
        let rx = gauss_legendre(q1, d.x_range.0, d.x_range.1)?;
        let ry = gauss_legendre(q2, d.y_range.0, d.y_range.1)?;
        let n = seq.len();
        let times = seq.times();
        let mut value = 0.0;
        for ev in 0..n {
            let lam =
                self.config.intensity(times[ev], seq.xs()[ev], seq.ys()[ev], seq.prefix(ev));
            value += lam.max(LOG_CLAMP).ln();
        }
        for iv in 0..=n {
            let lo = if iv == 0 { 0.0 } else { times[iv - 1] };
            let hi = if iv == n { d.t_max } else { times[iv] };
            if !(hi > lo) {
                continue;
            }
            let rt = gauss_legendre(q0, lo, hi)?;
            let hist = seq.prefix(iv);
            let mut comp = 0.0;
            for (i, t) in rt.nodes.iter().enumerate() {
                let mut plane = 0.0;
                for (j, x) in rx.nodes.iter().enumerate() {
                    for (k, y) in ry.nodes.iter().enumerate() {
                        plane += rx.weights[j]
                            * ry.weights[k]
                            * self.config.intensity(*t, *x, *y, hist);
                    }
                }
                comp += rt.weights[i] * plane;
            }
            value -= comp;
        }
        Ok(value)
    }

    fn profiler(&self, xs: Vec<f64>, ys: Vec<f64>) -> Result<Box<dyn SpatialProfiler + '_>> {
        Ok(Box::new(SynthProfiler { config: self.config, xs, ys, events: Vec::new() }))
    }
}

struct SynthProfiler {
    config: SynthConfig,
    xs: Vec<f64>,
    ys: Vec<f64>,
    events: Vec<(f64, f64, f64)>,
}

impl SpatialProfiler for SynthProfiler {
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
        let mut out = Matrix::zeros(self.xs.len(), self.ys.len());
        let active: Vec<(f64, f64, f64)> =
            self.events.iter().copied().filter(|(tj, _, _)| *tj < t).collect();
        let times: Vec<f64> = active.iter().map(|e| e.0).collect();
        let exs: Vec<f64> = active.iter().map(|e| e.1).collect();
        let eys: Vec<f64> = active.iter().map(|e| e.2).collect();
        let hist = Events { times: &times, xs: &exs, ys: &eys };
        for (j, x) in self.xs.iter().enumerate() {
            for (k, y) in self.ys.iter().enumerate() {
                out.set(j, k, self.config.intensity(t, *x, *y, hist));
            }
        }
        Ok(out)
    }
}
