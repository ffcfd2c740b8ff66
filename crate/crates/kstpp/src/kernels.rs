//! Separable 1-D covariance kernels and per-axis Gram operators.
//!
//! Each grid axis carries its own stationary kernel; the full covariance over
//! a product grid is the Kronecker product of the per-axis Grams, which is
//! why these operators only ever factorize matrices of the per-axis size.
//! Hyperparameters live in log space so optimizer steps keep them positive.
//! The diagonal jitter is proportional to the variance, so cross-weight rows
//! kappa(q, nodes) K^{-1} are exactly invariant to variance rescaling.

use crate::error::{Error, Result};
use crate::tensor::{cholesky, CholeskyFactor, Matrix};
use serde::{Deserialize, Serialize};

pub const DEFAULT_JITTER_RATIO: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    SquaredExponential,
    Matern52,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub log_lengthscale: f64,
    pub log_variance: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, lengthscale: f64, variance: f64) -> Self {
        KernelSpec {
            family,
            log_lengthscale: lengthscale.ln(),
            log_variance: variance.ln(),
        }
    }

    pub fn lengthscale(&self) -> f64 {
        self.log_lengthscale.exp()
    }

    pub fn variance(&self) -> f64 {
        self.log_variance.exp()
    }

    /// k(a, b) for a stationary kernel of distance |a - b|.
    pub fn eval(&self, a: f64, b: f64) -> f64 {
        let var = self.variance();
        let ell = self.lengthscale();
        let d = (a - b).abs();
        match self.family {
            KernelFamily::SquaredExponential => {
                let z = d / ell;
                var * (-0.5 * z * z).exp()
            }
            KernelFamily::Matern52 => {
                let s = 5.0f64.sqrt() * d / ell;
                var * (1.0 + s + s * s / 3.0) * (-s).exp()
            }
        }
    }

    /// d k(a, b) / d log_lengthscale. Zero at coincident points for both
    /// families, so the variance-proportional jitter never enters here.
    pub fn eval_dlog_lengthscale(&self, a: f64, b: f64) -> f64 {
        let var = self.variance();
        let ell = self.lengthscale();
        let d = (a - b).abs();
        match self.family {
            KernelFamily::SquaredExponential => {
                let z = d / ell;
                let z2 = z * z;
                var * (-0.5 * z2).exp() * z2
            }
            KernelFamily::Matern52 => {
                let s = 5.0f64.sqrt() * d / ell;
                var * (-s).exp() * s * s * (1.0 + s) / 3.0
            }
        }
    }
}

/// Gram operator for one axis: kernel spec, node coordinates, Gram matrix
/// (with jitter on the diagonal), its Cholesky factor, and the cached
/// explicit inverse used to form interpolation weight rows.
#[derive(Debug, Clone)]
pub struct KernelOperator {
    pub spec: KernelSpec,
    pub nodes: Vec<f64>,
    pub gram: Matrix,
    pub factor: CholeskyFactor,
    pub jitter: f64,
    inverse: Matrix,
}

/// Builds the Gram operator over strictly increasing nodes. `jitter_ratio`
/// scales the kernel variance to produce the diagonal jitter; pass
/// `DEFAULT_JITTER_RATIO` unless a test needs otherwise.
pub fn build_operator(spec: KernelSpec, nodes: &[f64], jitter_ratio: f64) -> Result<KernelOperator> {
    if nodes.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "kernel operator needs at least 2 nodes, got {}",
            nodes.len()
        )));
    }
    for w in nodes.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::InvalidInput(format!(
                "kernel nodes must be strictly increasing, saw {} then {}",
                w[0], w[1]
            )));
        }
    }
    if !spec.log_lengthscale.is_finite() || !spec.log_variance.is_finite() {
        return Err(Error::InvalidInput("non-finite kernel hyperparameters".into()));
    }
    let n = nodes.len();
    let mut gram = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = spec.eval(nodes[i], nodes[j]);
            gram.set(i, j, v);
            gram.set(j, i, v);
        }
    }
    let jitter = jitter_ratio * spec.variance();
    let factor = cholesky(&gram, jitter)?;
    // fold jitter into the stored Gram so gram == L L^T exactly
    for i in 0..n {
        gram.add_at(i, i, jitter);
    }
    let inverse = factor.inverse();
    Ok(KernelOperator {
        spec,
        nodes: nodes.to_vec(),
        gram,
        factor,
        jitter,
        inverse,
    })
}

impl KernelOperator {
    pub fn size(&self) -> usize {
        self.nodes.len()
    }

    pub fn inverse(&self) -> &Matrix {
        &self.inverse
    }

    /// Cross-covariance row kappa(query, nodes).
    pub fn cross_row(&self, query: f64) -> Vec<f64> {
        self.nodes.iter().map(|z| self.spec.eval(query, *z)).collect()
    }

    /// Interpolation weight row eta = kappa(query, nodes) K^{-1}. Summing
    /// eta against values on the nodes gives the GP conditional mean at the
    /// query.
    pub fn cross_weights(&self, query: f64) -> Vec<f64> {
        let c = self.cross_row(query);
        self.inverse.matvec(&c).expect("inverse size matches node count")
    }

    /// Stacked weight rows for a batch of queries, plus the raw
    /// cross-covariance rows (needed again on the gradient path).
    pub fn cross_weight_matrix(&self, queries: &[f64]) -> (Matrix, Matrix) {
        let n = self.size();
        let q = queries.len();
        let mut cross = Matrix::zeros(q, n);
        for (r, qv) in queries.iter().enumerate() {
            for (c, z) in self.nodes.iter().enumerate() {
                cross.set(r, c, self.spec.eval(*qv, *z));
            }
        }
        let weights = cross.matmul(&self.inverse).expect("shapes agree by construction");
        (weights, cross)
    }

    /// d Gram / d log_variance is the Gram itself (jitter included, since
    /// jitter is proportional to variance).
    pub fn dgram_dlog_variance(&self) -> Matrix {
        self.gram.clone()
    }

    /// d Gram / d log_lengthscale; zero diagonal.
    pub fn dgram_dlog_lengthscale(&self) -> Matrix {
        let n = self.size();
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..i {
                let v = self.spec.eval_dlog_lengthscale(self.nodes[i], self.nodes[j]);
                out.set(i, j, v);
                out.set(j, i, v);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dot;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn se_closed_form_values() {
        let k = KernelSpec::new(KernelFamily::SquaredExponential, 0.5, 2.0);
        assert!((k.eval(1.0, 1.0) - 2.0).abs() < 1e-15);
        // d = 0.5 = one lengthscale: k = 2 e^{-1/2}
        let expect = 2.0 * (-0.5f64).exp();
        assert!((k.eval(0.0, 0.5) - expect).abs() < 1e-15);
    }

    #[test]
    fn matern52_closed_form_values() {
        let k = KernelSpec::new(KernelFamily::Matern52, 1.0, 1.0);
        assert!((k.eval(2.0, 2.0) - 1.0).abs() < 1e-15);
        let d: f64 = 0.7;
        let s = 5.0f64.sqrt() * d;
        let expect = (1.0 + s + s * s / 3.0) * (-s).exp();
        assert!((k.eval(0.0, d) - expect).abs() < 1e-15);
    }

    #[test]
    fn kernels_decay_monotonically() {
        for family in [KernelFamily::SquaredExponential, KernelFamily::Matern52] {
            let k = KernelSpec::new(family, 0.8, 1.5);
            let mut prev = k.eval(0.0, 0.0);
            for step in 1..40 {
                let v = k.eval(0.0, step as f64 * 0.25);
                assert!(v < prev, "{family:?} not decaying at step {step}");
                assert!(v > 0.0);
                prev = v;
            }
        }
    }

    #[test]
    fn dlog_lengthscale_matches_finite_difference() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for family in [KernelFamily::SquaredExponential, KernelFamily::Matern52] {
            for _ in 0..30 {
                let ll: f64 = rng.gen_range(-1.0..1.0);
                let lv: f64 = rng.gen_range(-1.0..1.0);
                let a: f64 = rng.gen_range(-2.0..2.0);
                let b: f64 = rng.gen_range(-2.0..2.0);
                let h = 1e-6;
                let up = KernelSpec { family, log_lengthscale: ll + h, log_variance: lv };
                let dn = KernelSpec { family, log_lengthscale: ll - h, log_variance: lv };
                let fd = (up.eval(a, b) - dn.eval(a, b)) / (2.0 * h);
                let an = KernelSpec { family, log_lengthscale: ll, log_variance: lv }
                    .eval_dlog_lengthscale(a, b);
                assert!(
                    (fd - an).abs() < 1e-6 * (1.0 + an.abs()),
                    "{family:?}: fd {} vs analytic {}",
                    fd,
                    an
                );
            }
        }
    }

    #[test]
    fn build_rejects_bad_nodes() {
        let spec = KernelSpec::new(KernelFamily::SquaredExponential, 1.0, 1.0);
        assert!(build_operator(spec, &[0.0], DEFAULT_JITTER_RATIO).is_err());
        assert!(build_operator(spec, &[0.0, 0.0, 1.0], DEFAULT_JITTER_RATIO).is_err());
        assert!(build_operator(spec, &[0.0, 1.0, 0.5], DEFAULT_JITTER_RATIO).is_err());
    }

    #[test]
    fn gram_is_factorized_consistently() {
        let spec = KernelSpec::new(KernelFamily::Matern52, 0.6, 1.3);
        let nodes: Vec<f64> = (0..9).map(|i| i as f64 * 0.25).collect();
        let op = build_operator(spec, &nodes, DEFAULT_JITTER_RATIO).unwrap();
        let rec = op.factor.lower().matmul(&op.factor.lower().transpose()).unwrap();
        for i in 0..9 {
            for j in 0..9 {
                assert!((rec.get(i, j) - op.gram.get(i, j)).abs() < 1e-12);
            }
        }
        assert!((op.gram.get(0, 0) - (spec.variance() * (1.0 + DEFAULT_JITTER_RATIO))).abs() < 1e-12);
    }

    #[test]
    fn cross_weights_interpolate_at_nodes() {
        // at a node, eta selects (nearly) that node's value: eta . k-col is
        // exact by construction, and residual |eta.gram - kappa| stays tiny
        let spec = KernelSpec::new(KernelFamily::SquaredExponential, 0.4, 1.0);
        let nodes: Vec<f64> = (0..8).map(|i| i as f64 * 0.3).collect();
        let op = build_operator(spec, &nodes, DEFAULT_JITTER_RATIO).unwrap();
        for (i, q) in nodes.iter().enumerate() {
            let eta = op.cross_weights(*q);
            let c = op.cross_row(*q);
            // residual of the defining linear system
            for j in 0..nodes.len() {
                let mut acc = 0.0;
                for k in 0..nodes.len() {
                    acc += eta[k] * op.gram.get(k, j);
                }
                assert!((acc - c[j]).abs() < 1e-8, "node {} col {}", i, j);
            }
        }
    }

    #[test]
    fn cross_weights_invariant_to_variance_scaling() {
        let nodes: Vec<f64> = (0..7).map(|i| i as f64 * 0.5 - 1.0).collect();
        let base = KernelSpec::new(KernelFamily::SquaredExponential, 0.7, 1.0);
        let scaled = KernelSpec::new(KernelFamily::SquaredExponential, 0.7, 37.5);
        let op1 = build_operator(base, &nodes, DEFAULT_JITTER_RATIO).unwrap();
        let op2 = build_operator(scaled, &nodes, DEFAULT_JITTER_RATIO).unwrap();
        for q in [-0.9, 0.13, 1.4, 2.2] {
            let w1 = op1.cross_weights(q);
            let w2 = op2.cross_weights(q);
            for (a, b) in w1.iter().zip(&w2) {
                assert!((a - b).abs() < 1e-10, "q={}: {} vs {}", q, a, b);
            }
        }
    }

    #[test]
    fn far_queries_give_vanishing_weights() {
        let spec = KernelSpec::new(KernelFamily::SquaredExponential, 0.3, 1.0);
        let nodes: Vec<f64> = (0..6).map(|i| i as f64 * 0.2).collect();
        let op = build_operator(spec, &nodes, DEFAULT_JITTER_RATIO).unwrap();
        let w = op.cross_weights(50.0);
        for v in w {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn cross_weight_matrix_matches_rows() {
        let spec = KernelSpec::new(KernelFamily::Matern52, 0.5, 2.0);
        let nodes: Vec<f64> = (0..5).map(|i| i as f64).collect();
        let op = build_operator(spec, &nodes, DEFAULT_JITTER_RATIO).unwrap();
        let queries = [0.1, 1.7, 3.9];
        let (w, c) = op.cross_weight_matrix(&queries);
        for (r, q) in queries.iter().enumerate() {
            let row = op.cross_weights(*q);
            let crow = op.cross_row(*q);
            for j in 0..nodes.len() {
                assert!((w.get(r, j) - row[j]).abs() < 1e-13);
                assert!((c.get(r, j) - crow[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dgram_dlog_variance_scales_gram() {
        // K = sigma^2 (R + jitter_ratio I) means dK/dlog sigma^2 = K; check
        // against finite differences of the rebuilt operator
        let nodes: Vec<f64> = (0..6).map(|i| i as f64 * 0.4).collect();
        let spec = KernelSpec {
            family: KernelFamily::SquaredExponential,
            log_lengthscale: -0.3,
            log_variance: 0.4,
        };
        let op = build_operator(spec, &nodes, DEFAULT_JITTER_RATIO).unwrap();
        let h = 1e-6;
        let up = build_operator(
            KernelSpec { log_variance: spec.log_variance + h, ..spec },
            &nodes,
            DEFAULT_JITTER_RATIO,
        )
        .unwrap();
        let dn = build_operator(
            KernelSpec { log_variance: spec.log_variance - h, ..spec },
            &nodes,
            DEFAULT_JITTER_RATIO,
        )
        .unwrap();
        let an = op.dgram_dlog_variance();
        for i in 0..6 {
            for j in 0..6 {
                let fd = (up.gram.get(i, j) - dn.gram.get(i, j)) / (2.0 * h);
                assert!((fd - an.get(i, j)).abs() < 1e-6 * (1.0 + an.get(i, j).abs()));
            }
        }
    }

    #[test]
    fn interpolation_reproduces_smooth_function() {
        // conditional-mean weights applied to samples of a smooth function
        // approximately reproduce it between nodes
        let spec = KernelSpec::new(KernelFamily::SquaredExponential, 0.5, 1.0);
        let nodes: Vec<f64> = (0..13).map(|i| i as f64 * 0.25).collect();
        let op = build_operator(spec, &nodes, DEFAULT_JITTER_RATIO).unwrap();
        let f = |x: f64| (x * 1.3).sin();
        let vals: Vec<f64> = nodes.iter().map(|x| f(*x)).collect();
        for q in [0.4, 1.1, 2.3, 2.9] {
            let w = op.cross_weights(q);
            let est = dot(&w, &vals);
            assert!((est - f(q)).abs() < 5e-3, "q={}: {} vs {}", q, est, f(q));
        }
    }
}
