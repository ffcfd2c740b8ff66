//! Dense matrices, order-3 tensors, and the Kronecker-structured operations
//! the rest of the crate is built on.
//!
//! Layout convention, fixed once and relied on everywhere: matrices are
//! row-major; a `Tensor3` of shape (m0, m1, m2) stores entry (i, j, k) at
//! offset (i*m1 + j)*m2 + k, so the last index varies fastest. Under this
//! convention `vec(t)` is just the data slice, and
//! vec(t x0 A x1 B x2 C) = (A kron B kron C) vec(t),
//! which is what ties the mode products to Kronecker-structured Gram
//! matrices. Tests check that identity against densely materialized
//! Kronecker products.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn eye(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, 0));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Ok(Matrix { rows: rows.len(), cols, data })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "matrix {}x{} needs {} entries, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn add_at(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] += v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert!(i < self.rows);
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = k * other.cols;
                let base = i * other.cols;
                for j in 0..other.cols {
                    out.data[base + j] += a * other.data[orow + j];
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.cols != v.len() {
            return Err(Error::DimensionMismatch(format!(
                "matvec {}x{} by vector of {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = self.row(i);
            let mut acc = 0.0;
            for j in 0..self.cols {
                acc += row[j] * v[j];
            }
            out[i] = acc;
        }
        Ok(out)
    }

    /// Kronecker product, used by tests and small dense oracles only; the
    /// production paths never materialize one of these.
    pub fn kron(&self, other: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.rows * other.rows, self.cols * other.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                let a = self.get(i, j);
                for p in 0..other.rows {
                    for q in 0..other.cols {
                        out.set(i * other.rows + p, j * other.cols + q, a * other.get(p, q));
                    }
                }
            }
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch("matrix add".into()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    /// Frobenius inner product <self, other>.
    pub fn frob_dot(&self, other: &Matrix) -> Result<f64> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch("frobenius dot".into()));
        }
        Ok(dot(&self.data, &other.data))
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    shape: (usize, usize, usize),
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        Tensor3 { shape, data: vec![0.0; shape.0 * shape.1 * shape.2] }
    }

    pub fn from_vec(shape: (usize, usize, usize), data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.0 * shape.1 * shape.2 {
            return Err(Error::DimensionMismatch(format!(
                "tensor {:?} needs {} entries, got {}",
                shape,
                shape.0 * shape.1 * shape.2,
                data.len()
            )));
        }
        Ok(Tensor3 { shape, data })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.shape.1 + j) * self.shape.2 + k]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        self.data[(i * self.shape.1 + j) * self.shape.2 + k] = v;
    }

    #[inline]
    pub fn add_at(&mut self, i: usize, j: usize, k: usize, v: f64) {
        self.data[(i * self.shape.1 + j) * self.shape.2 + k] += v;
    }

    /// vec(t) under the crate layout: the raw data slice.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn add_assign(&mut self, other: &Tensor3) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::DimensionMismatch("tensor add".into()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn frob_dot(&self, other: &Tensor3) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::DimensionMismatch("tensor frobenius dot".into()));
        }
        Ok(dot(&self.data, &other.data))
    }

    /// Mode-i matricization: an (shape[i]) x (len/shape[i]) matrix whose
    /// columns enumerate the other two indices with the crate's last-fastest
    /// ordering preserved among them.
    pub fn unfold(&self, mode: usize) -> Matrix {
        let (m0, m1, m2) = self.shape;
        match mode {
            0 => Matrix { rows: m0, cols: m1 * m2, data: self.data.clone() },
            1 => {
                let mut out = Matrix::zeros(m1, m0 * m2);
                for i in 0..m0 {
                    for j in 0..m1 {
                        for k in 0..m2 {
                            out.set(j, i * m2 + k, self.get(i, j, k));
                        }
                    }
                }
                out
            }
            2 => {
                let mut out = Matrix::zeros(m2, m0 * m1);
                for i in 0..m0 {
                    for j in 0..m1 {
                        for k in 0..m2 {
                            out.set(k, i * m1 + j, self.get(i, j, k));
                        }
                    }
                }
                out
            }
            _ => panic!("mode out of range"),
        }
    }
}

/// Mode product t x_mode m: contracts index `mode` of `t` (length must equal
/// m.cols) against the columns of `m`, replacing it with an index of length
/// m.rows.
pub fn mode_product(t: &Tensor3, m: &Matrix, mode: usize) -> Result<Tensor3> {
    let (m0, m1, m2) = t.shape;
    let (rows, cols) = (m.rows, m.cols);
    let dim = [m0, m1, m2][mode];
    if cols != dim {
        return Err(Error::DimensionMismatch(format!(
            "mode-{} product: matrix has {} cols, tensor dim is {}",
            mode, cols, dim
        )));
    }
    match mode {
        0 => {
            let mut out = Tensor3::zeros((rows, m1, m2));
            let slab = m1 * m2;
            for r in 0..rows {
                let mrow = &m.data[r * cols..(r + 1) * cols];
                let obase = r * slab;
                for s in 0..m0 {
                    let a = mrow[s];
                    if a == 0.0 {
                        continue;
                    }
                    let ibase = s * slab;
                    for u in 0..slab {
                        out.data[obase + u] += a * t.data[ibase + u];
                    }
                }
            }
            Ok(out)
        }
        1 => {
            let mut out = Tensor3::zeros((m0, rows, m2));
            for i in 0..m0 {
                for r in 0..rows {
                    let mrow = &m.data[r * cols..(r + 1) * cols];
                    let obase = (i * rows + r) * m2;
                    for s in 0..m1 {
                        let a = mrow[s];
                        if a == 0.0 {
                            continue;
                        }
                        let ibase = (i * m1 + s) * m2;
                        for k in 0..m2 {
                            out.data[obase + k] += a * t.data[ibase + k];
                        }
                    }
                }
            }
            Ok(out)
        }
        2 => {
            let mut out = Tensor3::zeros((m0, m1, rows));
            for ij in 0..m0 * m1 {
                let ibase = ij * m2;
                let obase = ij * rows;
                for r in 0..rows {
                    let mrow = &m.data[r * cols..(r + 1) * cols];
                    let mut acc = 0.0;
                    for s in 0..m2 {
                        acc += mrow[s] * t.data[ibase + s];
                    }
                    out.data[obase + r] = acc;
                }
            }
            Ok(out)
        }
        _ => Err(Error::InvalidInput(format!("mode {} out of range", mode))),
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    lower: Matrix,
}

/// Cholesky factorization. `jitter` is added to the diagonal before
/// factorizing; a non-positive pivot reports the failing index so callers can
/// name the offending axis.
pub fn cholesky(m: &Matrix, jitter: f64) -> Result<CholeskyFactor> {
    if m.rows != m.cols {
        return Err(Error::DimensionMismatch(format!(
            "cholesky of non-square {}x{}",
            m.rows, m.cols
        )));
    }
    let n = m.rows;
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = m.get(i, j);
            if i == j {
                sum += jitter;
            }
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::NotPositiveDefinite { pivot: i });
                }
                l.set(i, j, sum.sqrt());
            } else {
                l.set(i, j, sum / l.get(j, j));
            }
        }
    }
    Ok(CholeskyFactor { lower: l })
}

impl CholeskyFactor {
    pub fn size(&self) -> usize {
        self.lower.rows
    }

    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    /// log det K = 2 * sum log diag(L).
    pub fn logdet(&self) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.lower.rows {
            acc += self.lower.get(i, i).ln();
        }
        2.0 * acc
    }

    /// Solves K x = b for a single right-hand side.
    pub fn solve_vec(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.size();
        if b.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "solve: rhs has {} entries, factor is {}",
                b.len(),
                n
            )));
        }
        // forward: L y = b
        let mut y = b.to_vec();
        for i in 0..n {
            let row = self.lower.row(i);
            let mut acc = y[i];
            for k in 0..i {
                acc -= row[k] * y[k];
            }
            y[i] = acc / row[i];
        }
        // backward: L^T x = y
        for i in (0..n).rev() {
            let mut acc = y[i];
            for k in i + 1..n {
                acc -= self.lower.get(k, i) * y[k];
            }
            y[i] = acc / self.lower.get(i, i);
        }
        Ok(y)
    }

    /// Solves K X = B column-blockwise.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        let n = self.size();
        if b.rows != n {
            return Err(Error::DimensionMismatch(format!(
                "solve: rhs has {} rows, factor is {}",
                b.rows, n
            )));
        }
        let mut out = Matrix::zeros(n, b.cols);
        let mut col = vec![0.0; n];
        for j in 0..b.cols {
            for i in 0..n {
                col[i] = b.get(i, j);
            }
            let x = self.solve_vec(&col)?;
            for i in 0..n {
                out.set(i, j, x[i]);
            }
        }
        Ok(out)
    }

    /// Explicit inverse, used to apply K^{-1} repeatedly to short rows.
    pub fn inverse(&self) -> Matrix {
        let n = self.size();
        self.solve(&Matrix::eye(n)).expect("identity rhs has matching shape")
    }

    /// Solves L Y = B (forward substitution only), the half solve used to
    /// whiten values against this factor.
    pub fn solve_lower(&self, b: &Matrix) -> Result<Matrix> {
        let n = self.size();
        if b.rows != n {
            return Err(Error::DimensionMismatch(format!(
                "lower solve: rhs has {} rows, factor is {}",
                b.rows, n
            )));
        }
        let mut out = b.clone();
        for i in 0..n {
            let li = self.lower.row(i);
            for j in 0..out.cols {
                let mut acc = out.get(i, j);
                for k in 0..i {
                    acc -= li[k] * out.get(k, j);
                }
                out.set(i, j, acc / li[i]);
            }
        }
        Ok(out)
    }

    /// Applies L^{-1} along one tensor mode.
    pub fn mode_solve_lower(&self, t: &Tensor3, mode: usize) -> Result<Tensor3> {
        let dims = [t.shape.0, t.shape.1, t.shape.2];
        if dims[mode] != self.size() {
            return Err(Error::DimensionMismatch(format!(
                "mode-{} lower solve: tensor dim {}, factor {}",
                mode, dims[mode], self.size()
            )));
        }
        let unf = t.unfold(mode);
        let solved = self.solve_lower(&unf)?;
        Ok(fold(&solved, t.shape, mode))
    }

    /// Applies K^{-1} along one tensor mode: t x_mode K^{-1}.
    pub fn mode_solve(&self, t: &Tensor3, mode: usize) -> Result<Tensor3> {
        let dims = [t.shape.0, t.shape.1, t.shape.2];
        if dims[mode] != self.size() {
            return Err(Error::DimensionMismatch(format!(
                "mode-{} solve: tensor dim {}, factor {}",
                mode, dims[mode], self.size()
            )));
        }
        let unf = t.unfold(mode);
        let solved = self.solve(&unf)?;
        Ok(fold(&solved, t.shape, mode))
    }
}

/// Inverse of unfold: rebuilds a tensor of `shape` from its mode-i
/// matricization.
pub fn fold(m: &Matrix, shape: (usize, usize, usize), mode: usize) -> Tensor3 {
    let (m0, m1, m2) = shape;
    let mut out = Tensor3::zeros(shape);
    match mode {
        0 => {
            out.data.copy_from_slice(&m.data);
        }
        1 => {
            for i in 0..m0 {
                for j in 0..m1 {
                    for k in 0..m2 {
                        out.set(i, j, k, m.get(j, i * m2 + k));
                    }
                }
            }
        }
        2 => {
            for i in 0..m0 {
                for j in 0..m1 {
                    for k in 0..m2 {
                        out.set(i, j, k, m.get(k, i * m1 + j));
                    }
                }
            }
        }
        _ => panic!("mode out of range"),
    }
    out
}

/// vec(t)^T (K0 kron K1 kron K2)^{-1} vec(t) for SPD Kronecker factors,
/// computed with one mode solve per factor; never materializes the full Gram.
pub fn kron_quadratic_form(t: &Tensor3, factors: &[&CholeskyFactor]) -> Result<f64> {
    if factors.len() != 3 {
        return Err(Error::DimensionMismatch(format!(
            "kron_quadratic_form needs 3 factors, got {}",
            factors.len()
        )));
    }
    let mut s = factors[0].mode_solve(t, 0)?;
    s = factors[1].mode_solve(&s, 1)?;
    s = factors[2].mode_solve(&s, 2)?;
    Ok(dot(t.data(), s.data()))
}
