//! MAP fitting: exact reverse-mode gradients of the log joint, Adam, and the
//! mini-batch loop with validation-based early stopping.
//!
//! Every place the forward pass touches the GPs is one of two primitives:
//! a contraction of grid values against per-axis interpolation weights
//! W = C K^{-1} (C the query/node cross-covariance), or the Kronecker log
//! prior. The backward pass mirrors that. For an adjoint Wbar,
//!
//!   Cbar = Wbar K^{-1},   Kbar += -W^T Cbar,
//!
//! and C contributes to the hyperparameter gradient directly through
//! dC/dlog_lengthscale and dC/dlog_variance = C. Per-axis Kbar buckets are
//! accumulated across the whole objective and folded into the two log
//! hyperparameters once at the end, using dK/dlog_variance = K (the jitter
//! scales with the variance, so this is exact) and the closed-form
//! lengthscale derivative of the Gram matrix.

use crate::error::{Error, Result};
use crate::grids::GridGP;
use crate::model::{
    add_mode0_product, softplus, softplus_deriv, EventSequence, KstppModel, LOG_CLAMP,
};
use crate::quadrature::gauss_legendre;
use crate::tensor::{mode_product, Matrix, Tensor3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Gradient accumulator for one grid GP.
struct GpGradient {
    values: Tensor3,
    /// Per-axis adjoint of the (jittered) Gram matrix.
    kbar: Vec<Matrix>,
    /// Per-axis (d/dlog_lengthscale, d/dlog_variance).
    hyper: Vec<(f64, f64)>,
}

impl GpGradient {
    fn zeros(gp: &GridGP) -> Self {
        let dim = gp.dim();
        GpGradient {
            values: Tensor3::zeros(gp.values().shape()),
            kbar: (0..dim)
                .map(|i| {
                    let n = gp.operator(i).size();
                    Matrix::zeros(n, n)
                })
                .collect(),
            hyper: vec![(0.0, 0.0); dim],
        }
    }

    fn add_assign(&mut self, other: &GpGradient) -> Result<()> {
        self.values.add_assign(&other.values)?;
        for (a, b) in self.kbar.iter_mut().zip(&other.kbar) {
            a.add_assign(b)?;
        }
        for (a, b) in self.hyper.iter_mut().zip(&other.hyper) {
            a.0 += b.0;
            a.1 += b.1;
        }
        Ok(())
    }

    fn scale(&mut self, s: f64) {
        self.values.scale(s);
        for k in &mut self.kbar {
            k.scale(s);
        }
        for h in &mut self.hyper {
            h.0 *= s;
            h.1 *= s;
        }
    }

    /// Folds the Gram adjoints into the log-hyperparameter slots.
    fn finalize(&mut self, gp: &GridGP) -> Result<()> {
        for axis in 0..gp.dim() {
            let op = gp.operator(axis);
            let dl = op.dgram_dlog_lengthscale();
            self.hyper[axis].0 += self.kbar[axis].frob_dot(&dl)?;
            self.hyper[axis].1 += self.kbar[axis].frob_dot(&op.gram)?;
            self.kbar[axis].scale(0.0);
        }
        Ok(())
    }
}

/// Reverse step through one cross-weight usage W = C K^{-1} on `axis`.
/// Rows of `wbar` belonging to masked queries must already be zero; every
/// term below then vanishes for them automatically.
fn backprop_cross(
    gp: &GridGP,
    axis: usize,
    queries: &[f64],
    w: &Matrix,
    c: &Matrix,
    wbar: &Matrix,
    grad: &mut GpGradient,
) -> Result<()> {
    if queries.is_empty() {
        return Ok(());
    }
    let op = gp.operator(axis);
    let cbar = wbar.matmul(op.inverse())?;
    grad.hyper[axis].1 += cbar.frob_dot(c)?;
    let mut dl = 0.0;
    for (r, q) in queries.iter().enumerate() {
        let row = cbar.row(r);
        for (col, node) in op.nodes.iter().enumerate() {
            if row[col] != 0.0 {
                dl += row[col] * op.spec.eval_dlog_lengthscale(*q, *node);
            }
        }
    }
    grad.hyper[axis].0 += dl;
    let wt_cbar = w.transpose().matmul(&cbar)?;
    for (a, b) in grad.kbar[axis].data_mut().iter_mut().zip(wt_cbar.data()) {
        *a -= b;
    }
    Ok(())
}

/// d log prior: the value adjoint is the negated precision-weighted values,
/// and each axis Gram receives (M_i - (m/m_i) K_i^{-1}) / 2 where M_i pairs
/// the all-axes solve against the single-axis solve.
fn accumulate_prior_gradient(gp: &GridGP, grad: &mut GpGradient) -> Result<()> {
    let a = gp.precision_weighted_values();
    for (g, v) in grad.values.data_mut().iter_mut().zip(a.data()) {
        *g -= v;
    }
    let m_total = gp.size() as f64;
    for axis in 0..gp.dim() {
        let op = gp.operator(axis);
        let mode = gp.mode_of_axis(axis);
        let p_i = op.factor.mode_solve(gp.values(), mode)?;
        let m_i = a.unfold(mode).matmul(&p_i.unfold(mode).transpose())?;
        let ratio = m_total / op.size() as f64;
        let kinv = op.inverse();
        for (idx, slot) in grad.kbar[axis].data_mut().iter_mut().enumerate() {
            *slot += 0.5 * (m_i.data()[idx] - ratio * kinv.data()[idx]);
        }
    }
    Ok(())
}

/// out[i, :, :] += sum_r w[r, i] * src[r, :, :] (transpose counterpart of
/// the forward temporal contraction).
fn add_mode0_transposed(out: &mut Tensor3, src: &Tensor3, w: &Matrix) {
    let (rows, n1, n2) = src.shape();
    let slab = n1 * n2;
    debug_assert_eq!(w.rows(), rows);
    debug_assert_eq!(out.shape().0, w.cols());
    let sd = src.data();
    let od = out.data_mut();
    for r in 0..rows {
        let wrow = w.row(r);
        let sbase = r * slab;
        for (i, a) in wrow.iter().enumerate() {
            if *a == 0.0 {
                continue;
            }
            let obase = i * slab;
            for u in 0..slab {
                od[obase + u] += a * sd[sbase + u];
            }
        }
    }
}

/// Spatial state of one history event reused across intervals: the partial
/// contraction h = F x1 W1 x2 W2 on the quadrature nodes, the pieces needed
/// to run its backward pass, and the adjoint accumulated over intervals.
struct EventCache {
    h: Tensor3,
    /// F x1 W1, kept for the axis-2 weight adjoint.
    t1: Tensor3,
    w1: Matrix,
    c1: Matrix,
    w2: Matrix,
    c2: Matrix,
    dxs: Vec<f64>,
    dys: Vec<f64>,
    hbar: Tensor3,
}

/// Log likelihood of one sequence together with its adjoints into the
/// influence and background GPs (values, Gram buckets, direct hyper terms).
fn sequence_gradient(
    model: &KstppModel,
    seq: &EventSequence,
) -> Result<(f64, GpGradient, GpGradient)> {
    let (q0, q1, q2) = model.quad_orders;
    let d = &model.domain;
    let beta = model.link_beta;
    let f_gp = &model.influence;
    let g_gp = &model.background;
    let fvals = f_gp.values();
    let (m0, m1, m2) = fvals.shape();
    let gvals = g_gp.values();
    let (_, ga, gb) = gvals.shape();

    let mut fgrad = GpGradient::zeros(f_gp);
    let mut ggrad = GpGradient::zeros(g_gp);
    let mut ll = 0.0;

    let n = seq.len();
    let times = seq.times();
    let exs = seq.xs();
    let eys = seq.ys();

    // ---- event terms: sum_n log softplus(pre_n) ----
    if n > 0 {
        let (wgx, cgx) = g_gp.operator(0).cross_weight_matrix(exs);
        let (wgy, cgy) = g_gp.operator(1).cross_weight_matrix(eys);
        let gm = gvals.data(); // (ga, gb) row-major

        // influence pairs within the lookback window
        let mut pair_n: Vec<usize> = Vec::new();
        let mut pair_lags: Vec<f64> = Vec::new();
        let mut pair_dxs: Vec<f64> = Vec::new();
        let mut pair_dys: Vec<f64> = Vec::new();
        let mut lo = 0usize;
        for ev in 0..n {
            if let Some(h) = model.time_horizon {
                while lo < ev && times[ev] - times[lo] > h {
                    lo += 1;
                }
            }
            for j in lo..ev {
                pair_n.push(ev);
                pair_lags.push(times[ev] - times[j]);
                pair_dxs.push(exs[ev] - exs[j]);
                pair_dys.push(eys[ev] - eys[j]);
            }
        }
        let np = pair_n.len();
        let (w0p, c0p) = f_gp.operator(0).cross_weight_matrix(&pair_lags);
        let (w1p, c1p) = f_gp.operator(1).cross_weight_matrix(&pair_dxs);
        let (w2p, c2p) = f_gp.operator(2).cross_weight_matrix(&pair_dys);

        let mut pre = vec![0.0; n];
        for ev in 0..n {
            let rx = wgx.row(ev);
            let ry = wgy.row(ev);
            let mut acc = 0.0;
            for a in 0..ga {
                let mut inner = 0.0;
                let base = a * gb;
                for b in 0..gb {
                    inner += ry[b] * gm[base + b];
                }
                acc += rx[a] * inner;
            }
            pre[ev] += acc;
        }
        let mut u = vec![0.0; m0 * m1];
        for p in 0..np {
            let w0 = w0p.row(p);
            let w1 = w1p.row(p);
            let w2 = w2p.row(p);
            let fd = fvals.data();
            let mut val = 0.0;
            for a in 0..m0 {
                let mut sa = 0.0;
                for b in 0..m1 {
                    let base = (a * m1 + b) * m2;
                    let mut sc = 0.0;
                    for c in 0..m2 {
                        sc += w2[c] * fd[base + c];
                    }
                    sa += w1[b] * sc;
                }
                val += w0[a] * sa;
            }
            pre[pair_n[p]] += val;
        }

        // link and clamp
        let mut s = vec![0.0; n];
        for ev in 0..n {
            let lam = softplus(pre[ev], beta);
            ll += lam.max(LOG_CLAMP).ln();
            if lam >= LOG_CLAMP {
                s[ev] = softplus_deriv(pre[ev], beta) / lam;
            }
        }

        // backward: background part
        let mut wgx_bar = Matrix::zeros(n, ga);
        let mut wgy_bar = Matrix::zeros(n, gb);
        for ev in 0..n {
            let sv = s[ev];
            if sv == 0.0 {
                continue;
            }
            let rx = wgx.row(ev).to_vec();
            let ry = wgy.row(ev).to_vec();
            let gvd = ggrad.values.data_mut();
            for a in 0..ga {
                let base = a * gb;
                let mut dx_acc = 0.0;
                let coeff = sv * rx[a];
                for b in 0..gb {
                    gvd[base + b] += coeff * ry[b];
                    dx_acc += ry[b] * gm[base + b];
                }
                wgx_bar.set(ev, a, sv * dx_acc);
            }
            for b in 0..gb {
                let mut acc = 0.0;
                for a in 0..ga {
                    acc += rx[a] * gm[a * gb + b];
                }
                wgy_bar.set(ev, b, sv * acc);
            }
        }
        backprop_cross(g_gp, 0, exs, &wgx, &cgx, &wgx_bar, &mut ggrad)?;
        backprop_cross(g_gp, 1, eys, &wgy, &cgy, &wgy_bar, &mut ggrad)?;

        // backward: influence pairs
        if np > 0 {
            let mut w0bar = Matrix::zeros(np, m0);
            let mut w1bar = Matrix::zeros(np, m1);
            let mut w2bar = Matrix::zeros(np, m2);
            let fd = fvals.data();
            for p in 0..np {
                let sp = s[pair_n[p]];
                if sp == 0.0 {
                    continue;
                }
                let w0 = w0p.row(p);
                let w1 = w1p.row(p);
                let w2 = w2p.row(p);
                // u[a, b] = sum_c w2[c] F[a, b, c]
                for a in 0..m0 {
                    for b in 0..m1 {
                        let base = (a * m1 + b) * m2;
                        let mut sc = 0.0;
                        for c in 0..m2 {
                            sc += w2[c] * fd[base + c];
                        }
                        u[a * m1 + b] = sc;
                    }
                }
                for a in 0..m0 {
                    let mut acc = 0.0;
                    let base = a * m1;
                    for b in 0..m1 {
                        acc += w1[b] * u[base + b];
                    }
                    w0bar.set(p, a, sp * acc);
                }
                for b in 0..m1 {
                    let mut acc = 0.0;
                    for a in 0..m0 {
                        acc += w0[a] * u[a * m1 + b];
                    }
                    w1bar.set(p, b, sp * acc);
                }
                let fvd = fgrad.values.data_mut();
                for c in 0..m2 {
                    let mut acc = 0.0;
                    for a in 0..m0 {
                        let wa = w0[a];
                        if wa == 0.0 {
                            continue;
                        }
                        let abase = a * m1;
                        for b in 0..m1 {
                            acc += wa * w1[b] * fd[(abase + b) * m2 + c];
                        }
                    }
                    w2bar.set(p, c, sp * acc);
                }
                for a in 0..m0 {
                    let coeff_a = sp * w0[a];
                    if coeff_a == 0.0 {
                        continue;
                    }
                    for b in 0..m1 {
                        let coeff = coeff_a * w1[b];
                        let base = (a * m1 + b) * m2;
                        for c in 0..m2 {
                            fvd[base + c] += coeff * w2[c];
                        }
                    }
                }
            }
            backprop_cross(f_gp, 0, &pair_lags, &w0p, &c0p, &w0bar, &mut fgrad)?;
            backprop_cross(f_gp, 1, &pair_dxs, &w1p, &c1p, &w1bar, &mut fgrad)?;
            backprop_cross(f_gp, 2, &pair_dys, &w2p, &c2p, &w2bar, &mut fgrad)?;
        }
    }

    // ---- compensator terms over inter-event intervals ----
    let rx = gauss_legendre(q1, d.x_range.0, d.x_range.1)?;
    let ry = gauss_legendre(q2, d.y_range.0, d.y_range.1)?;
    let base_t = gauss_legendre(q0, 0.0, 1.0)?;
    let gq = g_gp.cross_weight_matrices(&[&rx.nodes, &ry.nodes])?;
    let (wqx, cqx) = &gq[0];
    let (wqy, cqy) = &gq[1];
    let g_t1 = mode_product(gvals, wqx, 1)?;
    let yg = mode_product(&g_t1, wqy, 2)?; // (1, q1, q2)
    let mut ygbar = Tensor3::zeros((1, q1, q2));

    let mut caches: Vec<Option<EventCache>> = (0..n).map(|_| None).collect();
    let mut pre = Tensor3::zeros((q0, q1, q2));
    let mut node_t = vec![0.0; q0];
    let mut prebar = Tensor3::zeros((q0, q1, q2));
    for iv in 0..=n {
        let lo_t = if iv == 0 { 0.0 } else { times[iv - 1] };
        let hi_t = if iv == n { d.t_max } else { times[iv] };
        if !(hi_t > lo_t) {
            continue;
        }
        let width = hi_t - lo_t;
        for (i, uu) in base_t.nodes.iter().enumerate() {
            node_t[i] = lo_t + width * uu;
        }
        for i in 0..q0 {
            for j in 0..q1 {
                for k in 0..q2 {
                    pre.set(i, j, k, yg.get(0, j, k));
                }
            }
        }
        // forward event contributions; remember per-usage temporal weights
        let mut usages: Vec<(usize, Matrix, Matrix, Vec<f64>)> = Vec::new();
        for e in 0..iv {
            let first_lag = node_t[0] - times[e];
            if let Some(hz) = model.time_horizon {
                if first_lag > hz {
                    continue; // lags only grow across the interval
                }
            }
            if caches[e].is_none() {
                let dxs: Vec<f64> = rx.nodes.iter().map(|x| x - exs[e]).collect();
                let dys: Vec<f64> = ry.nodes.iter().map(|y| y - eys[e]).collect();
                let (w1, c1) = f_gp.operator(1).cross_weight_matrix(&dxs);
                let (w2, c2) = f_gp.operator(2).cross_weight_matrix(&dys);
                let t1 = mode_product(fvals, &w1, 1)?;
                let h = mode_product(&t1, &w2, 2)?;
                let hbar = Tensor3::zeros(h.shape());
                caches[e] = Some(EventCache { h, t1, w1, c1, w2, c2, dxs, dys, hbar });
            }
            let lags: Vec<f64> = node_t.iter().map(|t| t - times[e]).collect();
            let (mut w0, c0) = f_gp.operator(0).cross_weight_matrix(&lags);
            if let Some(hz) = model.time_horizon {
                for (r, lag) in lags.iter().enumerate() {
                    if *lag > hz {
                        for cidx in 0..m0 {
                            w0.set(r, cidx, 0.0);
                        }
                    }
                }
            }
            add_mode0_product(&mut pre, &caches[e].as_ref().unwrap().h, &w0);
            usages.push((e, w0, c0, lags));
        }
        // compensator value and the pre-link adjoint
        let mut comp = 0.0;
        for i in 0..q0 {
            let wt = width * base_t.weights[i];
            for j in 0..q1 {
                let wx = wt * rx.weights[j];
                for k in 0..q2 {
                    let wgt = wx * ry.weights[k];
                    let z = pre.get(i, j, k);
                    comp += wgt * softplus(z, beta);
                    prebar.set(i, j, k, -wgt * softplus_deriv(z, beta));
                }
            }
        }
        ll -= comp;
        // background adjoint: collapse the time axis
        for j in 0..q1 {
            for k in 0..q2 {
                let mut acc = 0.0;
                for i in 0..q0 {
                    acc += prebar.get(i, j, k);
                }
                ygbar.add_at(0, j, k, acc);
            }
        }
        // per-usage backward
        if !usages.is_empty() {
            let pbar_unf0 = prebar.unfold(0);
            for (e, w0, c0, lags) in &mut usages {
                let cache = caches[*e].as_mut().unwrap();
                let mut w0bar = pbar_unf0.matmul(&cache.h.unfold(0).transpose())?;
                if let Some(hz) = model.time_horizon {
                    for (r, lag) in lags.iter().enumerate() {
                        if *lag > hz {
                            for cidx in 0..m0 {
                                w0bar.set(r, cidx, 0.0);
                            }
                        }
                    }
                }
                backprop_cross(f_gp, 0, lags, w0, c0, &w0bar, &mut fgrad)?;
                add_mode0_transposed(&mut cache.hbar, &prebar, w0);
            }
        }
    }

    // close out the background quadrature usage
    let gbar_part = mode_product(&mode_product(&ygbar, &wqx.transpose(), 1)?, &wqy.transpose(), 2)?;
    ggrad.values.add_assign(&gbar_part)?;
    let g_x2 = mode_product(gvals, wqy, 2)?; // (1, ga, q2)
    let wqx_bar = ygbar.unfold(1).matmul(&g_x2.unfold(1).transpose())?;
    let wqy_bar = ygbar.unfold(2).matmul(&g_t1.unfold(2).transpose())?;
    backprop_cross(g_gp, 0, &rx.nodes, wqx, cqx, &wqx_bar, &mut ggrad)?;
    backprop_cross(g_gp, 1, &ry.nodes, wqy, cqy, &wqy_bar, &mut ggrad)?;

    // close out per-event spatial usages
    for cache in caches.into_iter().flatten() {
        let fb = mode_product(
            &mode_product(&cache.hbar, &cache.w1.transpose(), 1)?,
            &cache.w2.transpose(),
            2,
        )?;
        fgrad.values.add_assign(&fb)?;
        let t2 = mode_product(fvals, &cache.w2, 2)?; // (m0, m1, q2)
        let w1bar = cache.hbar.unfold(1).matmul(&t2.unfold(1).transpose())?;
        backprop_cross(f_gp, 1, &cache.dxs, &cache.w1, &cache.c1, &w1bar, &mut fgrad)?;
        let w2bar = cache.hbar.unfold(2).matmul(&cache.t1.unfold(2).transpose())?;
        backprop_cross(f_gp, 2, &cache.dys, &cache.w2, &cache.c2, &w2bar, &mut fgrad)?;
    }

    Ok((ll, fgrad, ggrad))
}

/// Parameter layout: influence values, background values, then per-axis
/// (log_lengthscale, log_variance) pairs for the influence axes followed by
/// the background axes.
pub fn param_len(model: &KstppModel) -> usize {
    model.influence.size()
        + model.background.size()
        + 2 * (model.influence.dim() + model.background.dim())
}

pub fn pack_params(model: &KstppModel) -> Vec<f64> {
    let mut v = Vec::with_capacity(param_len(model));
    v.extend_from_slice(model.influence.values().data());
    v.extend_from_slice(model.background.values().data());
    for spec in model.influence.kernel_specs() {
        v.push(spec.log_lengthscale);
        v.push(spec.log_variance);
    }
    for spec in model.background.kernel_specs() {
        v.push(spec.log_lengthscale);
        v.push(spec.log_variance);
    }
    v
}

/// Writes a parameter vector back into the model, rebuilding kernel
/// operators only when a hyperparameter actually changed. Fails (leaving the
/// values updated but the old operators intact) if a new Gram matrix is not
/// positive definite.
pub fn apply_params(model: &mut KstppModel, params: &[f64]) -> Result<()> {
    let expect = param_len(model);
    if params.len() != expect {
        return Err(Error::DimensionMismatch(format!(
            "parameter vector has {} entries, model needs {}",
            params.len(),
            expect
        )));
    }
    let nf = model.influence.size();
    let ng = model.background.size();
    model.influence.values_mut().data_mut().copy_from_slice(&params[..nf]);
    model.background.values_mut().data_mut().copy_from_slice(&params[nf..nf + ng]);
    let mut idx = nf + ng;
    let mut f_specs = model.influence.kernel_specs();
    let mut f_changed = false;
    for spec in f_specs.iter_mut() {
        if spec.log_lengthscale != params[idx] || spec.log_variance != params[idx + 1] {
            f_changed = true;
        }
        spec.log_lengthscale = params[idx];
        spec.log_variance = params[idx + 1];
        idx += 2;
    }
    let mut g_specs = model.background.kernel_specs();
    let mut g_changed = false;
    for spec in g_specs.iter_mut() {
        if spec.log_lengthscale != params[idx] || spec.log_variance != params[idx + 1] {
            g_changed = true;
        }
        spec.log_lengthscale = params[idx];
        spec.log_variance = params[idx + 1];
        idx += 2;
    }
    if f_changed {
        model.influence.set_kernel_specs(&f_specs)?;
    }
    if g_changed {
        model.background.set_kernel_specs(&g_specs)?;
    }
    Ok(())
}

/// Whitened coordinates u with values = u x_i L_i (L_i the per-axis
/// Cholesky factors). The prior over u is a standard normal, so the
/// optimizer never fights the Kronecker prior's conditioning (per-axis
/// jitter floors multiply across axes, putting the raw precision many
/// orders of magnitude above the smooth directions).
fn whiten_values(gp: &GridGP) -> Result<Tensor3> {
    let mut u = gp.values().clone();
    for axis in 0..gp.dim() {
        let mode = gp.mode_of_axis(axis);
        u = gp.operator(axis).factor.mode_solve_lower(&u, mode)?;
    }
    Ok(u)
}

fn unwhiten_values(gp: &GridGP, u: &Tensor3) -> Result<Tensor3> {
    let mut f = u.clone();
    for axis in 0..gp.dim() {
        let mode = gp.mode_of_axis(axis);
        f = mode_product(&f, gp.operator(axis).factor.lower(), mode)?;
    }
    Ok(f)
}

/// dL for K = L L^T under a symmetric Gram perturbation dK:
/// dL = L Phi(L^{-1} dK L^{-T}), Phi keeping the strict lower triangle and
/// half the diagonal.
fn dcholesky(factor: &crate::tensor::CholeskyFactor, dk: &Matrix) -> Result<Matrix> {
    let a = factor.solve_lower(dk)?;
    let p = factor.solve_lower(&a.transpose())?;
    let n = factor.size();
    let mut phi = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            phi.set(i, j, p.get(i, j));
        }
        phi.set(i, i, 0.5 * p.get(i, i));
    }
    factor.lower().matmul(&phi)
}

/// Converts a value-space likelihood gradient into whitened coordinates and
/// collects the hyperparameter terms the reparameterization introduces:
/// grad_u = L^T grad_F - u, and each axis hyper gains
/// <grad_F, u x_i dL_i x_{j!=i} L_j> - (m / 2 m_i) tr(K_i^{-1} dK_i).
fn whitened_value_gradient(
    gp: &GridGP,
    u: &Tensor3,
    gf: &Tensor3,
) -> Result<(Tensor3, Vec<(f64, f64)>)> {
    let mut grad_u = gf.clone();
    for axis in 0..gp.dim() {
        let mode = gp.mode_of_axis(axis);
        let lt = gp.operator(axis).factor.lower().transpose();
        grad_u = mode_product(&grad_u, &lt, mode)?;
    }
    for (g, uv) in grad_u.data_mut().iter_mut().zip(u.data()) {
        *g -= uv;
    }
    let m_total = gp.size() as f64;
    let mut hyper = vec![(0.0, 0.0); gp.dim()];
    for axis in 0..gp.dim() {
        let op = gp.operator(axis);
        let ratio = m_total / op.size() as f64;
        let kinv = op.inverse();
        for (slot, dk) in [
            (0usize, op.dgram_dlog_lengthscale()),
            (1usize, op.dgram_dlog_variance()),
        ] {
            let dl = dcholesky(&op.factor, &dk)?;
            let mut df = u.clone();
            for j in 0..gp.dim() {
                let mode = gp.mode_of_axis(j);
                let mat = if j == axis { &dl } else { gp.operator(j).factor.lower() };
                df = mode_product(&df, mat, mode)?;
            }
            let term = gf.frob_dot(&df)? - 0.5 * ratio * kinv.frob_dot(&dk)?;
            if slot == 0 {
                hyper[axis].0 += term;
            } else {
                hyper[axis].1 += term;
            }
        }
    }
    Ok((grad_u, hyper))
}

/// Whitened twin of `pack_params`: value blocks hold u = L^{-1}-applied
/// values, the hyper tail is unchanged.
pub fn pack_params_whitened(model: &KstppModel) -> Result<Vec<f64>> {
    let mut v = Vec::with_capacity(param_len(model));
    v.extend_from_slice(whiten_values(&model.influence)?.data());
    v.extend_from_slice(whiten_values(&model.background)?.data());
    for spec in model.influence.kernel_specs() {
        v.push(spec.log_lengthscale);
        v.push(spec.log_variance);
    }
    for spec in model.background.kernel_specs() {
        v.push(spec.log_lengthscale);
        v.push(spec.log_variance);
    }
    Ok(v)
}

/// Writes a whitened parameter vector back: hyperparameters first (possibly
/// rebuilding operators), then values = u pushed through the new factors.
pub fn apply_params_whitened(model: &mut KstppModel, params: &[f64]) -> Result<()> {
    let expect = param_len(model);
    if params.len() != expect {
        return Err(Error::DimensionMismatch(format!(
            "parameter vector has {} entries, model needs {}",
            params.len(),
            expect
        )));
    }
    let nf = model.influence.size();
    let ng = model.background.size();
    let mut idx = nf + ng;
    let mut f_specs = model.influence.kernel_specs();
    let mut f_changed = false;
    for spec in f_specs.iter_mut() {
        if spec.log_lengthscale != params[idx] || spec.log_variance != params[idx + 1] {
            f_changed = true;
        }
        spec.log_lengthscale = params[idx];
        spec.log_variance = params[idx + 1];
        idx += 2;
    }
    let mut g_specs = model.background.kernel_specs();
    let mut g_changed = false;
    for spec in g_specs.iter_mut() {
        if spec.log_lengthscale != params[idx] || spec.log_variance != params[idx + 1] {
            g_changed = true;
        }
        spec.log_lengthscale = params[idx];
        spec.log_variance = params[idx + 1];
        idx += 2;
    }
    if f_changed {
        model.influence.set_kernel_specs(&f_specs)?;
    }
    if g_changed {
        model.background.set_kernel_specs(&g_specs)?;
    }
    let uf = Tensor3::from_vec(model.influence.values().shape(), params[..nf].to_vec())?;
    let ug = Tensor3::from_vec(model.background.values().shape(), params[nf..nf + ng].to_vec())?;
    let f = unwhiten_values(&model.influence, &uf)?;
    let g = unwhiten_values(&model.background, &ug)?;
    model.influence.set_values(f)?;
    model.background.set_values(g)?;
    Ok(())
}

/// Mini-batch objective and gradient in whitened coordinates. `params` must
/// be the vector the model state was produced from (see
/// `apply_params_whitened`). The objective value equals the raw log joint:
/// <F, K^{-1} F> = |u|^2 identically under the reparameterization.
pub fn grad_log_joint_whitened(
    model: &KstppModel,
    params: &[f64],
    batch: &[EventSequence],
    dataset_size: usize,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty mini-batch".into()));
    }
    if params.len() != param_len(model) {
        return Err(Error::DimensionMismatch(format!(
            "parameter vector has {} entries, model needs {}",
            params.len(),
            param_len(model)
        )));
    }
    let nf = model.influence.size();
    let ng = model.background.size();
    let uf = Tensor3::from_vec(model.influence.values().shape(), params[..nf].to_vec())?;
    let ug = Tensor3::from_vec(model.background.values().shape(), params[nf..nf + ng].to_vec())?;
    let parts: Result<Vec<_>> =
        batch.par_iter().map(|s| sequence_gradient(model, s)).collect();
    let parts = parts?;
    let scale = dataset_size as f64 / batch.len() as f64;
    let mut fgrad = GpGradient::zeros(&model.influence);
    let mut ggrad = GpGradient::zeros(&model.background);
    let mut ll = 0.0;
    for (l, fg, gg) in &parts {
        ll += l;
        fgrad.add_assign(fg)?;
        ggrad.add_assign(gg)?;
    }
    fgrad.scale(scale);
    ggrad.scale(scale);
    ll *= scale;
    // likelihood K-dependence through the cross weights
    fgrad.finalize(&model.influence)?;
    ggrad.finalize(&model.background)?;
    let obj = model.background.log_prior() + model.influence.log_prior() + ll;
    let (guf, f_extra) = whitened_value_gradient(&model.influence, &uf, &fgrad.values)?;
    let (gug, g_extra) = whitened_value_gradient(&model.background, &ug, &ggrad.values)?;
    let mut v = Vec::with_capacity(params.len());
    v.extend_from_slice(guf.data());
    v.extend_from_slice(gug.data());
    for (axis, h) in fgrad.hyper.iter().enumerate() {
        v.push(h.0 + f_extra[axis].0);
        v.push(h.1 + f_extra[axis].1);
    }
    for (axis, h) in ggrad.hyper.iter().enumerate() {
        v.push(h.0 + g_extra[axis].0);
        v.push(h.1 + g_extra[axis].1);
    }
    Ok((obj, v))
}

fn flatten(fgrad: &GpGradient, ggrad: &GpGradient) -> Vec<f64> {
    let mut v =
        Vec::with_capacity(fgrad.values.len() + ggrad.values.len() + 2 * (fgrad.hyper.len() + ggrad.hyper.len()));
    v.extend_from_slice(fgrad.values.data());
    v.extend_from_slice(ggrad.values.data());
    for h in &fgrad.hyper {
        v.push(h.0);
        v.push(h.1);
    }
    for h in &ggrad.hyper {
        v.push(h.0);
        v.push(h.1);
    }
    v
}

/// Mini-batch objective and its gradient in the `pack_params` layout. The
/// likelihood part is scaled by dataset_size / batch_size so the stochastic
/// gradient is unbiased for the full-data log joint; pass
/// `dataset_size = batch.len()` for the exact full-batch value. Sequences
/// are processed in parallel and reduced in index order, so the result is
/// reproducible for a fixed thread-independent input.
pub fn grad_log_joint(
    model: &KstppModel,
    batch: &[EventSequence],
    dataset_size: usize,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty mini-batch".into()));
    }
    let parts: Result<Vec<_>> =
        batch.par_iter().map(|s| sequence_gradient(model, s)).collect();
    let parts = parts?;
    let scale = dataset_size as f64 / batch.len() as f64;
    let mut fgrad = GpGradient::zeros(&model.influence);
    let mut ggrad = GpGradient::zeros(&model.background);
    let mut ll = 0.0;
    for (l, fg, gg) in &parts {
        ll += l;
        fgrad.add_assign(fg)?;
        ggrad.add_assign(gg)?;
    }
    fgrad.scale(scale);
    ggrad.scale(scale);
    ll *= scale;
    accumulate_prior_gradient(&model.influence, &mut fgrad)?;
    accumulate_prior_gradient(&model.background, &mut ggrad)?;
    fgrad.finalize(&model.influence)?;
    ggrad.finalize(&model.background)?;
    let obj = model.background.log_prior() + model.influence.log_prior() + ll;
    Ok((obj, flatten(&fgrad, &ggrad)))
}

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    /// One ascent step along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let b2t = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grad[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] += lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs without validation improvement before stopping. Ignored when
    /// no validation split is given.
    pub patience: usize,
    /// Seed for the per-epoch shuffle.
    pub seed: u64,
    /// Train values only, keeping kernel hyperparameters at their initial
    /// settings.
    pub freeze_hyperparams: bool,
    /// Epochs to hold hyperparameters fixed before releasing them. Lets the
    /// values form structure first; otherwise the prior tends to drive the
    /// lengthscales up while the values are still near zero, flattening the
    /// fit. No effect when `freeze_hyperparams` is set.
    pub hyper_warmup: usize,
    /// Ratio of the last epoch's learning rate to the first's, interpolated
    /// geometrically per epoch. 1.0 keeps the rate constant; a value like 0.1
    /// damps the stochastic-step noise the final iterate inherits.
    pub lr_decay: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epochs: 100,
            batch_size: 1,
            learning_rate: 1e-3,
            patience: 10,
            seed: 0,
            freeze_hyperparams: false,
            hyper_warmup: 0,
            lr_decay: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    /// Mini-batch objective at the pre-step parameters.
    pub objective: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValRecord {
    pub epoch: usize,
    pub mean_log_likelihood: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub steps: Vec<StepRecord>,
    pub validation: Vec<ValRecord>,
    /// Epoch whose parameters the model was restored to, when validation ran.
    pub best_epoch: Option<usize>,
    /// Set when a non-finite objective or a failed operator rebuild stopped
    /// training; the model is left at the last finite iterate (or the best
    /// validation iterate if one exists).
    pub diverged_at_step: Option<u64>,
}

/// Stochastic MAP ascent in whitened coordinates (identity prior Hessian).
/// Shuffles per epoch, rescales each mini-batch to the full dataset,
/// early-stops on the validation mean log likelihood, and restores the best
/// validation iterate at the end. Divergence (NaN or a hyperparameter step
/// that breaks a Cholesky) rolls back to the last good parameters instead
/// of erroring, and is recorded in the log.
pub fn fit(
    model: &mut KstppModel,
    train: &[EventSequence],
    val: &[EventSequence],
    cfg: &FitConfig,
) -> Result<TrainingLog> {
    if train.is_empty() {
        return Err(Error::InvalidInput("no training sequences".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be at least 1".into()));
    }
    if !(cfg.lr_decay > 0.0) {
        return Err(Error::InvalidInput("lr decay ratio must be positive".into()));
    }
    let mut params = pack_params_whitened(model)?;
    let hyper_tail = 2 * (model.influence.dim() + model.background.dim());
    let value_len = params.len() - hyper_tail;
    let mut adam = AdamState::new(params.len());
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut log = TrainingLog::default();
    let mut last_good = params.clone();
    let mut best: Option<(f64, Vec<f64>, usize)> = None;
    let mut since_best = 0usize;
    let mut step: u64 = 0;
    let mut indices: Vec<usize> = (0..train.len()).collect();

    'outer: for epoch in 0..cfg.epochs {
        let lr = if cfg.epochs > 1 {
            cfg.learning_rate
                * cfg.lr_decay.powf(epoch as f64 / (cfg.epochs - 1) as f64)
        } else {
            cfg.learning_rate
        };
        indices.shuffle(&mut rng);
        for chunk in indices.chunks(cfg.batch_size) {
            let t0 = Instant::now();
            let batch: Vec<EventSequence> =
                chunk.iter().map(|&i| train[i].clone()).collect();
            let (obj, mut grad) = grad_log_joint_whitened(model, &params, &batch, train.len())?;
            if cfg.freeze_hyperparams || epoch < cfg.hyper_warmup {
                for g in &mut grad[value_len..] {
                    *g = 0.0;
                }
            }
            let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !obj.is_finite() || !gnorm.is_finite() {
                apply_params_whitened(model, &last_good)?;
                log.diverged_at_step = Some(step);
                break 'outer;
            }
            adam.step(&mut params, &grad, lr);
            if apply_params_whitened(model, &params).is_err() {
                params.copy_from_slice(&last_good);
                apply_params_whitened(model, &params)?;
                log.diverged_at_step = Some(step);
                break 'outer;
            }
            log.steps.push(StepRecord {
                step,
                epoch,
                objective: obj,
                grad_norm: gnorm,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            });
            last_good.copy_from_slice(&params);
            step += 1;
        }
        if !val.is_empty() {
            let lls: Result<Vec<f64>> =
                val.par_iter().map(|s| model.log_likelihood(s)).collect();
            let mean = lls?.iter().sum::<f64>() / val.len() as f64;
            log.validation.push(ValRecord { epoch, mean_log_likelihood: mean });
            let improved = best.as_ref().map(|b| mean > b.0).unwrap_or(true);
            if improved {
                best = Some((mean, params.clone(), epoch));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
    }
    if let Some((_, bp, be)) = best {
        apply_params_whitened(model, &bp)?;
        log.best_epoch = Some(be);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelFamily;
    use crate::model::{Domain, ModelSettings};

    fn tiny_settings() -> ModelSettings {
        ModelSettings {
            f_grid: (3, 3, 3),
            g_grid: (3, 3),
            quad_orders: (4, 4, 4),
            init_sd: 0.4,
            ..ModelSettings::default()
        }
    }

    fn tiny_domain() -> Domain {
        Domain::new(1.5, (0.0, 1.0), (0.0, 1.0)).unwrap()
    }

    fn tiny_seq(domain: &Domain, k: usize) -> EventSequence {
        let all_t = [0.3, 0.7, 1.2];
        let all_x = [0.4, 0.8, 0.2];
        let all_y = [0.6, 0.3, 0.9];
        EventSequence::new(
            all_t[..k].to_vec(),
            all_x[..k].to_vec(),
            all_y[..k].to_vec(),
            domain,
        )
        .unwrap()
    }

    fn check_fd(model: &KstppModel, seqs: &[EventSequence], label: &str) {
        let (obj, grad) = grad_log_joint(model, seqs, seqs.len()).unwrap();
        let base = model.log_joint(seqs).unwrap();
        assert!(
            (obj - base).abs() < 1e-9 * (1.0 + base.abs()),
            "{}: objective {} vs log_joint {}",
            label,
            obj,
            base
        );
        let params = pack_params(model);
        let h = 1e-5;
        for i in 0..params.len() {
            let mut plus = model.clone();
            let mut pv = params.clone();
            pv[i] += h;
            apply_params(&mut plus, &pv).unwrap();
            let fp = plus.log_joint(seqs).unwrap();
            let mut minus = model.clone();
            pv[i] -= 2.0 * h;
            apply_params(&mut minus, &pv).unwrap();
            let fm = minus.log_joint(seqs).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let tol = 1e-7 + 1e-4 * fd.abs().max(grad[i].abs());
            assert!(
                (fd - grad[i]).abs() <= tol,
                "{}: coordinate {}: fd {} vs analytic {}",
                label,
                i,
                fd,
                grad[i]
            );
        }
    }

    #[test]
    fn pack_apply_roundtrip() {
        let mut model = KstppModel::init(tiny_domain(), &tiny_settings(), 40).unwrap();
        let mut params = pack_params(&model);
        assert_eq!(params.len(), param_len(&model));
        for (i, p) in params.iter_mut().enumerate() {
            *p += 0.01 * (i as f64 % 7.0 - 3.0);
        }
        apply_params(&mut model, &params).unwrap();
        let back = pack_params(&model);
        assert_eq!(params, back);
    }

    #[test]
    fn apply_params_rejects_wrong_length() {
        let mut model = KstppModel::init(tiny_domain(), &tiny_settings(), 41).unwrap();
        let params = pack_params(&model);
        assert!(apply_params(&mut model, &params[..params.len() - 1]).is_err());
    }

    #[test]
    fn fd_gradient_two_events() {
        let model = KstppModel::init(tiny_domain(), &tiny_settings(), 42).unwrap();
        let seqs = vec![tiny_seq(&model.domain, 2)];
        check_fd(&model, &seqs, "two events");
    }

    #[test]
    fn fd_gradient_empty_sequence() {
        let model = KstppModel::init(tiny_domain(), &tiny_settings(), 43).unwrap();
        let seqs = vec![tiny_seq(&model.domain, 0)];
        check_fd(&model, &seqs, "empty");
    }

    #[test]
    fn fd_gradient_with_horizon() {
        let mut settings = tiny_settings();
        settings.time_horizon = Some(0.6);
        let model = KstppModel::init(tiny_domain(), &settings, 44).unwrap();
        let seqs = vec![tiny_seq(&model.domain, 3)];
        check_fd(&model, &seqs, "horizon");
    }

    #[test]
    fn fd_gradient_matern_multi_sequence() {
        let mut settings = tiny_settings();
        settings.family = KernelFamily::Matern52;
        settings.link_beta = 1.7;
        let model = KstppModel::init(tiny_domain(), &settings, 45).unwrap();
        let seqs = vec![tiny_seq(&model.domain, 3), tiny_seq(&model.domain, 1)];
        check_fd(&model, &seqs, "matern multi");
    }

    #[test]
    fn whiten_round_trips_and_identifies_prior() {
        let model = KstppModel::init(tiny_domain(), &tiny_settings(), 52).unwrap();
        let u = whiten_values(&model.influence).unwrap();
        let back = unwhiten_values(&model.influence, &u).unwrap();
        for (a, b) in back.data().iter().zip(model.influence.values().data()) {
            assert!((a - b).abs() < 1e-10, "{} vs {}", a, b);
        }
        // <F, K^{-1} F> = |u|^2: compare through the prior value
        let datafit: f64 = u.data().iter().map(|v| v * v).sum();
        let direct = model
            .influence
            .values()
            .frob_dot(&model.influence.precision_weighted_values())
            .unwrap();
        assert!(
            (datafit - direct).abs() < 1e-8 * (1.0 + direct.abs()),
            "{} vs {}",
            datafit,
            direct
        );
    }

    #[test]
    fn whitened_apply_matches_raw_model_state() {
        let mut model = KstppModel::init(tiny_domain(), &tiny_settings(), 53).unwrap();
        let mut params = pack_params_whitened(&model).unwrap();
        for (i, p) in params.iter_mut().enumerate() {
            *p += 0.02 * ((i % 5) as f64 - 2.0);
        }
        apply_params_whitened(&mut model, &params).unwrap();
        let back = pack_params_whitened(&model).unwrap();
        for (a, b) in params.iter().zip(&back) {
            assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }
    }

    #[test]
    fn fd_gradient_whitened() {
        // exercises the Cholesky-derivative chain: bumping a hyperparameter
        // now also moves the values through F = L(theta) u
        let model = KstppModel::init(tiny_domain(), &tiny_settings(), 54).unwrap();
        let seqs = vec![tiny_seq(&model.domain, 3), tiny_seq(&model.domain, 2)];
        let params = pack_params_whitened(&model).unwrap();
        let (_, grad) = grad_log_joint_whitened(&model, &params, &seqs, seqs.len()).unwrap();
        let h = 1e-5;
        for i in 0..params.len() {
            let eval = |delta: f64| {
                let mut m = model.clone();
                let mut pv = params.clone();
                pv[i] += delta;
                apply_params_whitened(&mut m, &pv).unwrap();
                let (o, _) = grad_log_joint_whitened(&m, &pv, &seqs, seqs.len()).unwrap();
                o
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let tol = 1e-6 + 1e-4 * fd.abs().max(grad[i].abs());
            assert!(
                (fd - grad[i]).abs() <= tol,
                "whitened coordinate {}: fd {} vs analytic {}",
                i,
                fd,
                grad[i]
            );
        }
    }

    #[test]
    fn whitened_objective_equals_raw_log_joint() {
        let model = KstppModel::init(tiny_domain(), &tiny_settings(), 55).unwrap();
        let seqs = vec![tiny_seq(&model.domain, 3)];
        let params = pack_params_whitened(&model).unwrap();
        let (obj, _) = grad_log_joint_whitened(&model, &params, &seqs, seqs.len()).unwrap();
        let raw = model.log_joint(&seqs).unwrap();
        assert!((obj - raw).abs() < 1e-8 * (1.0 + raw.abs()), "{} vs {}", obj, raw);
    }

    #[test]
    fn fd_gradient_minibatch_scaling() {
        let model = KstppModel::init(tiny_domain(), &tiny_settings(), 46).unwrap();
        let seq = tiny_seq(&model.domain, 2);
        let (o1, g1) = grad_log_joint(&model, std::slice::from_ref(&seq), 1).unwrap();
        let (o5, g5) = grad_log_joint(&model, std::slice::from_ref(&seq), 5).unwrap();
        let priors = model.background.log_prior() + model.influence.log_prior();
        let ll = o1 - priors;
        assert!((o5 - (priors + 5.0 * ll)).abs() < 1e-9 * (1.0 + o5.abs()));
        // prior part of the gradient is unscaled; check one value coordinate
        // by reconstructing: g5 = prior_grad + 5 * ll_grad, g1 = prior + ll
        // so g5 - g1 = 4 * ll_grad and g5 - 5*g1 = -4 * prior_grad; verify
        // consistency via a third scale
        let (_, g3) = grad_log_joint(&model, std::slice::from_ref(&seq), 3).unwrap();
        for i in 0..g1.len() {
            let ll_grad = (g5[i] - g1[i]) / 4.0;
            let expect = g1[i] + 2.0 * ll_grad;
            assert!(
                (g3[i] - expect).abs() < 1e-9 * (1.0 + expect.abs()),
                "coordinate {}: {} vs {}",
                i,
                g3[i],
                expect
            );
        }
    }

    #[test]
    fn adam_maximizes_quadratic() {
        let target = [1.5, -2.0, 0.25];
        let mut params = vec![0.0; 3];
        let mut adam = AdamState::new(3);
        for _ in 0..4000 {
            let grad: Vec<f64> =
                params.iter().zip(&target).map(|(p, t)| -2.0 * (p - t)).collect();
            adam.step(&mut params, &grad, 0.01);
        }
        for (p, t) in params.iter().zip(&target) {
            assert!((p - t).abs() < 1e-3, "{} vs {}", p, t);
        }
    }

    #[test]
    fn fit_improves_objective() {
        let mut model = KstppModel::init(tiny_domain(), &tiny_settings(), 47).unwrap();
        let train = vec![tiny_seq(&model.domain, 3), tiny_seq(&model.domain, 2)];
        let before = model.log_joint(&train).unwrap();
        let cfg = FitConfig {
            epochs: 15,
            batch_size: 2,
            learning_rate: 0.05,
            ..FitConfig::default()
        };
        let log = fit(&mut model, &train, &[], &cfg).unwrap();
        assert_eq!(log.steps.len(), 15);
        assert!(log.diverged_at_step.is_none());
        assert!(log.validation.is_empty());
        let after = model.log_joint(&train).unwrap();
        assert!(after > before, "{} vs {}", after, before);
    }

    #[test]
    fn fit_freeze_hyperparams_keeps_kernels() {
        let mut model = KstppModel::init(tiny_domain(), &tiny_settings(), 48).unwrap();
        let specs_before: Vec<_> = model.influence.kernel_specs();
        let values_before = model.influence.values().data().to_vec();
        let train = vec![tiny_seq(&model.domain, 2)];
        let cfg = FitConfig {
            epochs: 5,
            learning_rate: 0.05,
            freeze_hyperparams: true,
            ..FitConfig::default()
        };
        fit(&mut model, &train, &[], &cfg).unwrap();
        let specs_after = model.influence.kernel_specs();
        for (a, b) in specs_before.iter().zip(&specs_after) {
            assert_eq!(a.log_lengthscale, b.log_lengthscale);
            assert_eq!(a.log_variance, b.log_variance);
        }
        assert_ne!(values_before, model.influence.values().data());
    }

    #[test]
    fn fit_is_deterministic_for_fixed_seed() {
        let domain = tiny_domain();
        let train = vec![tiny_seq(&domain, 3), tiny_seq(&domain, 2), tiny_seq(&domain, 1)];
        let cfg = FitConfig { epochs: 4, learning_rate: 0.02, seed: 9, ..FitConfig::default() };
        let run = |seed: u64| {
            let mut model = KstppModel::init(domain, &tiny_settings(), seed).unwrap();
            let log = fit(&mut model, &train, &[], &cfg).unwrap();
            (pack_params(&model), log)
        };
        let (p1, l1) = run(50);
        let (p2, l2) = run(50);
        assert_eq!(p1, p2);
        let o1: Vec<f64> = l1.steps.iter().map(|s| s.objective).collect();
        let o2: Vec<f64> = l2.steps.iter().map(|s| s.objective).collect();
        assert_eq!(o1, o2);
    }

    #[test]
    fn fit_early_stops_on_flat_validation() {
        let domain = tiny_domain();
        let mut model = KstppModel::init(domain, &tiny_settings(), 51).unwrap();
        let train = vec![tiny_seq(&domain, 2)];
        let val = vec![tiny_seq(&domain, 1)];
        // zero learning rate: validation never improves after epoch 0
        let cfg = FitConfig {
            epochs: 50,
            learning_rate: 0.0,
            patience: 2,
            ..FitConfig::default()
        };
        let log = fit(&mut model, &train, &val, &cfg).unwrap();
        assert_eq!(log.validation.len(), 3);
        assert_eq!(log.best_epoch, Some(0));
    }
}
