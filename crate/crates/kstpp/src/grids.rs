//! Gaussian-process function representations on structured grids.
//!
//! A `GridGP` holds latent function values on a 2-D or 3-D product grid with
//! one stationary kernel per axis. The prior covariance over the grid is the
//! Kronecker product of per-axis Grams, so its log density and the
//! conditional-mean evaluation at off-grid points decompose into per-axis
//! operations; nothing here ever materializes the full Gram.
//!
//! 2-D grids reuse the order-3 tensor machinery with a degenerate leading
//! mode of size 1.

use crate::error::{Error, Result};
use crate::kernels::{build_operator, KernelOperator, KernelSpec, DEFAULT_JITTER_RATIO};
use crate::tensor::{dot, mode_product, Matrix, Tensor3};

pub const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, PartialEq)]
pub struct AxisGrid {
    points: Vec<f64>,
    range: (f64, f64),
}

impl AxisGrid {
    /// Uniformly spaced grid including both endpoints; needs lo < hi and at
    /// least 2 points.
    pub fn uniform(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidInput(format!("axis grid needs >= 2 points, got {}", n)));
        }
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidInput(format!("bad axis range [{}, {}]", lo, hi)));
        }
        let step = (hi - lo) / (n as f64 - 1.0);
        let points = (0..n).map(|i| lo + step * i as f64).collect();
        Ok(AxisGrid { points, range: (lo, hi) })
    }

    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidInput("axis grid needs >= 2 points".into()));
        }
        for w in points.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::InvalidInput("axis grid points must be strictly increasing".into()));
            }
        }
        let range = (points[0], *points.last().unwrap());
        Ok(AxisGrid { points, range })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn range(&self) -> (f64, f64) {
        self.range
    }

    pub fn span(&self) -> f64 {
        self.range.1 - self.range.0
    }
}

#[derive(Debug, Clone)]
pub struct GridGP {
    axes: Vec<AxisGrid>,
    operators: Vec<KernelOperator>,
    values: Tensor3,
}

impl GridGP {
    /// Builds a grid GP with zero values. `axes` and `specs` must both have
    /// length 2 or 3.
    pub fn new(axes: Vec<AxisGrid>, specs: Vec<KernelSpec>) -> Result<Self> {
        let dim = axes.len();
        if dim != 2 && dim != 3 {
            return Err(Error::DimensionMismatch(format!("grid GP must be 2-D or 3-D, got {}-D", dim)));
        }
        if specs.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "{} axes but {} kernel specs",
                dim,
                specs.len()
            )));
        }
        let mut operators = Vec::with_capacity(dim);
        for (axis, spec) in axes.iter().zip(&specs) {
            operators.push(build_operator(*spec, axis.points(), DEFAULT_JITTER_RATIO)?);
        }
        let shape = match dim {
            2 => (1, axes[0].len(), axes[1].len()),
            _ => (axes[0].len(), axes[1].len(), axes[2].len()),
        };
        Ok(GridGP { axes, operators, values: Tensor3::zeros(shape) })
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[AxisGrid] {
        &self.axes
    }

    pub fn operator(&self, axis: usize) -> &KernelOperator {
        &self.operators[axis]
    }

    pub fn kernel_specs(&self) -> Vec<KernelSpec> {
        self.operators.iter().map(|o| o.spec).collect()
    }

    /// Tensor mode carrying grid axis `axis` (2-D grids shift by one for the
    /// degenerate leading mode).
    pub fn mode_of_axis(&self, axis: usize) -> usize {
        axis + 3 - self.dim()
    }

    pub fn values(&self) -> &Tensor3 {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Tensor3 {
        &mut self.values
    }

    pub fn set_values(&mut self, values: Tensor3) -> Result<()> {
        if values.shape() != self.values.shape() {
            return Err(Error::DimensionMismatch(format!(
                "value tensor {:?} does not match grid {:?}",
                values.shape(),
                self.values.shape()
            )));
        }
        self.values = values;
        Ok(())
    }

    /// Replaces the kernel hyperparameters and rebuilds the per-axis
    /// operators. Called by the trainer after each hyperparameter step.
    pub fn set_kernel_specs(&mut self, specs: &[KernelSpec]) -> Result<()> {
        if specs.len() != self.dim() {
            return Err(Error::DimensionMismatch("kernel spec count".into()));
        }
        let mut ops = Vec::with_capacity(specs.len());
        for (axis, spec) in self.axes.iter().zip(specs) {
            ops.push(build_operator(*spec, axis.points(), DEFAULT_JITTER_RATIO)?);
        }
        self.operators = ops;
        Ok(())
    }

    /// Number of grid values.
    pub fn size(&self) -> usize {
        self.values.len()
    }

    /// Log prior density of the current values under the Kronecker GP:
    /// -1/2 sum_i (m/m_i) log|K_i| - 1/2 vec(F)^T (kron K)^{-1} vec(F)
    /// - m/2 log 2pi.
    pub fn log_prior(&self) -> f64 {
        let m = self.size() as f64;
        let mut logdet = 0.0;
        let mut solved = self.values.clone();
        for axis in 0..self.dim() {
            let op = &self.operators[axis];
            logdet += m / op.size() as f64 * op.factor.logdet();
            solved = op
                .factor
                .mode_solve(&solved, self.mode_of_axis(axis))
                .expect("operator sizes match values by construction");
        }
        let qform = dot(self.values.data(), solved.data());
        -0.5 * logdet - 0.5 * qform - 0.5 * m * LN_2PI
    }

    /// vec(F x_i K_i^{-1} ...) as a tensor: the prior-precision-weighted
    /// values, needed by both the prior and its gradient.
    pub fn precision_weighted_values(&self) -> Tensor3 {
        let mut solved = self.values.clone();
        for axis in 0..self.dim() {
            solved = self.operators[axis]
                .factor
                .mode_solve(&solved, self.mode_of_axis(axis))
                .expect("operator sizes match values");
        }
        solved
    }

    /// GP conditional mean at one query point (`coords.len()` == dim).
    pub fn eval_point(&self, coords: &[f64]) -> Result<f64> {
        if coords.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "query has {} coords for {}-D grid",
                coords.len(),
                self.dim()
            )));
        }
        let rows: Vec<Vec<f64>> =
            coords.iter().zip(&self.operators).map(|(q, op)| op.cross_weights(*q)).collect();
        Ok(self.contract_rows(&rows))
    }

    fn contract_rows(&self, rows: &[Vec<f64>]) -> f64 {
        let (m0, m1, m2) = self.values.shape();
        let one = [1.0];
        let (r0, r1, r2): (&[f64], &[f64], &[f64]) = if self.dim() == 2 {
            (&one, &rows[0], &rows[1])
        } else {
            (&rows[0], &rows[1], &rows[2])
        };
        let mut acc = 0.0;
        for i in 0..m0 {
            let wi = r0[i];
            if wi == 0.0 {
                continue;
            }
            for j in 0..m1 {
                let wj = r1[j];
                if wj == 0.0 {
                    continue;
                }
                let base = (i * m1 + j) * m2;
                let mut inner = 0.0;
                for k in 0..m2 {
                    inner += r2[k] * self.values.data()[base + k];
                }
                acc += wi * wj * inner;
            }
        }
        acc
    }

    /// Conditional mean at a batch of query points.
    pub fn eval_batch(&self, queries: &[Vec<f64>]) -> Result<Vec<f64>> {
        queries.iter().map(|q| self.eval_point(q)).collect()
    }

    /// Conditional mean on a product grid of per-axis query lists, via one
    /// cross-weight matrix and one mode product per axis. Output shape is
    /// (1, |q0|, |q1|) for 2-D grids and (|q0|, |q1|, |q2|) for 3-D.
    pub fn eval_on_product_grid(&self, axis_queries: &[&[f64]]) -> Result<Tensor3> {
        if axis_queries.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "{} query axes for {}-D grid",
                axis_queries.len(),
                self.dim()
            )));
        }
        let mut out = self.values.clone();
        for axis in 0..self.dim() {
            let (w, _) = self.operators[axis].cross_weight_matrix(axis_queries[axis]);
            out = mode_product(&out, &w, self.mode_of_axis(axis))?;
        }
        Ok(out)
    }

    /// Cross-weight matrices for a product-grid query, exposed for callers
    /// that reuse them across many evaluations (training, profiling).
    pub fn cross_weight_matrices(&self, axis_queries: &[&[f64]]) -> Result<Vec<(Matrix, Matrix)>> {
        if axis_queries.len() != self.dim() {
            return Err(Error::DimensionMismatch("query axis count".into()));
        }
        Ok(self
            .operators
            .iter()
            .zip(axis_queries)
            .map(|(op, q)| op.cross_weight_matrix(q))
            .collect())
    }
}
