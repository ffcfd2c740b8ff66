//! Gauss-Legendre quadrature: 1-D rules on arbitrary intervals, tensor
//! products of three 1-D rules for box integrals, and a rational change of
//! variables for integrals over [0, inf).
//!
//! Nodes come from Newton iteration on the Legendre polynomial recurrence.
//! An order-n rule integrates polynomials up to degree 2n-1 exactly; the
//! affine map to [a, b] scales weights by (b-a)/2, so the weights of any rule
//! sum to the interval length.

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule1D {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub interval: (f64, f64),
}

/// Legendre P_n(x) and its derivative via the three-term recurrence.
fn legendre_and_deriv(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    // P'_n(x) = n (x P_n - P_{n-1}) / (x^2 - 1)
    let d = (n as f64) * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Order-n Gauss-Legendre rule on [a, b]. Nodes are returned in ascending
/// order and lie strictly inside the open interval.
pub fn gauss_legendre(n: usize, a: f64, b: f64) -> Result<QuadratureRule1D> {
    if n == 0 {
        return Ok(QuadratureRule1D { nodes: vec![], weights: vec![], interval: (a, b) });
    }
    if !(a.is_finite() && b.is_finite()) || b < a {
        return Err(Error::InvalidInput(format!("bad quadrature interval [{}, {}]", a, b)));
    }
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    // roots are symmetric; solve the lower half and mirror
    let half = (n + 1) / 2;
    for i in 0..half {
        // Chebyshev-based initial guess, standard for this iteration
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut converged = false;
        for _ in 0..100 {
            let (p, d) = legendre_and_deriv(n, x);
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-14 {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::InvalidInput(format!(
                "legendre root iteration failed to converge for order {}",
                n
            )));
        }
        let (_, d) = legendre_and_deriv(n, x);
        let w = 2.0 / ((1.0 - x * x) * d * d);
        // cos guess descends from +1, so index i is the (n-1-i)-th ascending node
        nodes[n - 1 - i] = x;
        weights[n - 1 - i] = w;
        nodes[i] = -x;
        weights[i] = w;
    }
    // affine map z = (b-a)/2 * xi + (b+a)/2, w = (b-a)/2 * alpha
    let c = 0.5 * (b - a);
    let mid = 0.5 * (b + a);
    for i in 0..n {
        nodes[i] = c * nodes[i] + mid;
        weights[i] *= c;
    }
    Ok(QuadratureRule1D { nodes, weights, interval: (a, b) })
}

impl QuadratureRule1D {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        let mut acc = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(*x);
        }
        acc
    }
}

/// Tensor product of three 1-D rules; `weight(i,j,k)` is the product of the
/// per-axis weights, stored as a tensor so box integrals reduce to one
/// Frobenius inner product against intensity values on the node grid.
#[derive(Debug, Clone)]
pub struct ProductRule3 {
    pub rules: [QuadratureRule1D; 3],
    weight_tensor: Tensor3,
}

impl ProductRule3 {
    pub fn new(r0: QuadratureRule1D, r1: QuadratureRule1D, r2: QuadratureRule1D) -> Self {
        let shape = (r0.len(), r1.len(), r2.len());
        let mut w = Tensor3::zeros(shape);
        for i in 0..shape.0 {
            for j in 0..shape.1 {
                for k in 0..shape.2 {
                    w.set(i, j, k, r0.weights[i] * r1.weights[j] * r2.weights[k]);
                }
            }
        }
        ProductRule3 { rules: [r0, r1, r2], weight_tensor: w }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.weight_tensor.shape()
    }

    pub fn weight_tensor(&self) -> &Tensor3 {
        &self.weight_tensor
    }

    /// Integrates values already evaluated on the node grid.
    pub fn integrate_values(&self, values: &Tensor3) -> Result<f64> {
        self.weight_tensor.frob_dot(values)
    }
}

/// Integrates f over the box described by the product rule. A non-finite
/// integrand value is reported with the node where it occurred.
pub fn integrate_box<F>(rule: &ProductRule3, mut f: F) -> Result<f64>
where
    F: FnMut(f64, f64, f64) -> f64,
{
    let (n0, n1, n2) = rule.shape();
    let mut acc = 0.0;
    for i in 0..n0 {
        let t = rule.rules[0].nodes[i];
        for j in 0..n1 {
            let x = rule.rules[1].nodes[j];
            for k in 0..n2 {
                let y = rule.rules[2].nodes[k];
                let v = f(t, x, y);
                if !v.is_finite() {
                    return Err(Error::NonFinite { what: "integrand".into(), t, x, y });
                }
                acc += rule.weight_tensor.get(i, j, k) * v;
            }
        }
    }
    Ok(acc)
}

/// Integral of h over [0, inf) via tau = u/(1-u):
/// int_0^inf h(tau) dtau = int_0^1 h(u/(1-u)) / (1-u)^2 du,
/// evaluated with an order-n Gauss-Legendre rule on (0, 1). Suited to
/// integrands decaying at least exponentially.
pub fn integrate_improper<F>(mut h: F, n: usize) -> Result<f64>
where
    F: FnMut(f64) -> f64,
{
    let rule = gauss_legendre(n, 0.0, 1.0)?;
    let mut acc = 0.0;
    for (u, w) in rule.nodes.iter().zip(&rule.weights) {
        let om = 1.0 - u;
        let tau = u / om;
        let v = h(tau);
        if !v.is_finite() {
            return Err(Error::NonFinite { what: "improper integrand".into(), t: tau, x: 0.0, y: 0.0 });
        }
        acc += w * v / (om * om);
    }
    Ok(acc)
}

pub const DEFAULT_IMPROPER_ORDER: usize = 32;
