//! Dense row-major matrices and the small-matrix factorizations used across
//! the crate: LU with partial pivoting, cyclic Jacobi eigendecomposition,
//! Cholesky, and power iteration for the spectral norm.
//!
//! Row-major storage doubles as the vectorization convention: `vec(X)` of a
//! `V x C` node-feature matrix lists node 0's channels first, then node 1's,
//! and so on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "new",
                format!("{} values for {rows}x{cols}", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from nested rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(
                    "from_rows",
                    format!("row {i} has {} entries, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn column_vector(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value of a 1x1 matrix.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn check_same(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!(
                    "{}x{} vs {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same(other, "add")?;
        Ok(self.zip(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same(other, "sub")?;
        Ok(self.zip(other, |a, b| a - b))
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.check_same(other, "hadamard")?;
        Ok(self.zip(other, |a, b| a * b))
    }

    fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.check_same(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!(
                    "{}x{} * {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        gemm(false, false, self, other, 1.0, 0.0, &mut out);
        Ok(out)
    }

    /// `self^T * other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "t_matmul",
                format!(
                    "({}x{})^T * {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let mut out = Self::zeros(self.cols, other.cols);
        gemm(true, false, self, other, 1.0, 0.0, &mut out);
        Ok(out)
    }

    /// `self * other^T` without materializing the transpose.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "matmul_t",
                format!(
                    "{}x{} * ({}x{})^T",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let mut out = Self::zeros(self.rows, other.rows);
        gemm(false, true, self, other, 1.0, 0.0, &mut out);
        Ok(out)
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Kronecker product with the row-major identity
    /// `vec(S X T) = (S ⊗ T^T) vec(X)`.
    pub fn kron(&self, other: &Self) -> Self {
        let (p, q) = other.shape();
        let mut out = Self::zeros(self.rows * p, self.cols * q);
        let oc = out.cols;
        for i in 0..self.rows {
            for j in 0..self.cols {
                let a = self.get(i, j);
                if a == 0.0 {
                    continue;
                }
                for k in 0..p {
                    let dst = (i * p + k) * oc + j * q;
                    for (d, &b) in out.data[dst..dst + q].iter_mut().zip(other.row(k)) {
                        *d = a * b;
                    }
                }
            }
        }
        out
    }

    /// Square diagonal matrix from the entries of a row or column vector.
    pub fn diag_embed(v: &Self) -> Result<Self> {
        if v.rows != 1 && v.cols != 1 {
            return Err(Error::shape(
                "diag_embed",
                format!("expected a vector, got {}x{}", v.rows, v.cols),
            ));
        }
        let n = v.data.len();
        let mut out = Self::zeros(n, n);
        for (i, &x) in v.data.iter().enumerate() {
            out.data[i * n + i] = x;
        }
        Ok(out)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols))
            .map(|i| self.get(i, i))
            .collect()
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{}x{} -> {rows}x{cols}", self.rows, self.cols),
            ));
        }
        Ok(Self {
            rows,
            cols,
            data: self.data.clone(),
        })
    }

    /// Sub-block `[r0, r1) x [c0, c1)`.
    pub fn slice(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> Result<Self> {
        if r0 > r1 || c0 > c1 || r1 > self.rows || c1 > self.cols {
            return Err(Error::shape(
                "slice",
                format!("[{r0},{r1})x[{c0},{c1}) of {}x{}", self.rows, self.cols),
            ));
        }
        Ok(Self::from_fn(r1 - r0, c1 - c0, |i, j| {
            self.get(r0 + i, c0 + j)
        }))
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks `n` copies of `self` vertically.
    pub fn tile_rows(&self, n: usize) -> Self {
        let mut data = Vec::with_capacity(n * self.data.len());
        for _ in 0..n {
            data.extend_from_slice(&self.data);
        }
        Self {
            rows: n * self.rows,
            cols: self.cols,
            data,
        }
    }

    /// Repeats every row `g` times consecutively.
    pub fn repeat_rows(&self, g: usize) -> Self {
        let mut data = Vec::with_capacity(g * self.data.len());
        for i in 0..self.rows {
            for _ in 0..g {
                data.extend_from_slice(self.row(i));
            }
        }
        Self {
            rows: g * self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn vstack(parts: &[&Self]) -> Result<Self> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::shape(
                    "vstack",
                    format!("{} vs {cols} columns", p.cols),
                ));
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Self { rows, cols, data })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn asymmetry(&self) -> f64 {
        let mut m = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                m = m.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        m
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.is_square() && self.asymmetry() <= tol
    }

    pub fn symmetrized(&self) -> Self {
        Self::from_fn(self.rows, self.cols, |i, j| {
            0.5 * (self.get(i, j) + self.get(j, i))
        })
    }

    /// Applies a `nodes x nodes` spatial operator along the node axis of every
    /// row: row `r` is read as a `nodes x (cols / nodes)` matrix `Z_r` and
    /// replaced with `S Z_r`. Equivalent to right-multiplying each row by
    /// `(S ⊗ I)^T`.
    pub fn node_mix(s: &Self, z: &Self, nodes: usize) -> Result<Self> {
        if !s.is_square() || s.rows != nodes || nodes == 0 || !z.cols.is_multiple_of(nodes) {
            return Err(Error::shape(
                "node_mix",
                format!(
                    "operator {}x{}, input {}x{}, nodes {nodes}",
                    s.rows, s.cols, z.rows, z.cols
                ),
            ));
        }
        let c = z.cols / nodes;
        let mut out = Self::zeros(z.rows, z.cols);
        for r in 0..z.rows {
            let src = z.row(r);
            let dst = &mut out.data[r * z.cols..(r + 1) * z.cols];
            for v in 0..nodes {
                let d = &mut dst[v * c..(v + 1) * c];
                for u in 0..nodes {
                    let a = s.data[v * nodes + u];
                    if a == 0.0 {
                        continue;
                    }
                    for (x, &y) in d.iter_mut().zip(&src[u * c..(u + 1) * c]) {
                        *x += a * y;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Multiplies every node's channel vector by `w` (`C_in x C_out`):
    /// rows of width `nodes * C_in` become rows of width `nodes * C_out`.
    pub fn nodewise_matmul(&self, w: &Self) -> Result<Self> {
        if w.rows == 0 || !self.cols.is_multiple_of(w.rows) {
            return Err(Error::shape(
                "nodewise_matmul",
                format!(
                    "input {}x{}, weight {}x{}",
                    self.rows, self.cols, w.rows, w.cols
                ),
            ));
        }
        let nodes = self.cols / w.rows;
        let flat = Self {
            rows: self.rows * nodes,
            cols: w.rows,
            data: self.data.clone(),
        };
        let prod = flat.matmul(w)?;
        Ok(Self {
            rows: self.rows,
            cols: nodes * w.cols,
            data: prod.data,
        })
    }
}

/// `out = alpha * op(a) * op(b) + beta * out`, backed by `matrixmultiply`.
pub(crate) fn gemm(
    ta: bool,
    tb: bool,
    a: &DenseMatrix,
    b: &DenseMatrix,
    alpha: f64,
    beta: f64,
    out: &mut DenseMatrix,
) {
    let (m, k) = if ta {
        (a.cols, a.rows)
    } else {
        (a.rows, a.cols)
    };
    let n = if tb { b.rows } else { b.cols };
    debug_assert_eq!(out.rows, m);
    debug_assert_eq!(out.cols, n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in out.data.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta {
        (1, a.cols as isize)
    } else {
        (a.cols as isize, 1)
    };
    let (rsb, csb) = if tb {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    // SAFETY: strides and extents describe the backing slices exactly.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// LU factorization with partial pivoting, `P A = L U`.
#[derive(Clone, Debug)]
pub struct LuFactor {
    lu: DenseMatrix,
    perm: Vec<usize>,
    sign: f64,
}

impl LuFactor {
    pub fn new(a: &DenseMatrix) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::shape(
                "lu",
                format!("{}x{} is not square", a.rows, a.cols),
            ));
        }
        let n = a.rows;
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        let scale = a.max_abs();
        let tiny = scale * f64::EPSILON * n.max(1) as f64;
        for k in 0..n {
            let mut p = k;
            let mut best = lu.get(k, k).abs();
            for i in (k + 1)..n {
                let v = lu.get(i, k).abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if !(best > tiny) || !best.is_finite() {
                return Err(Error::Singular);
            }
            if p != k {
                for j in 0..n {
                    lu.data.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let pivot = lu.get(k, k);
            for i in (k + 1)..n {
                let f = lu.get(i, k) / pivot;
                lu.set(i, k, f);
                if f != 0.0 {
                    for j in (k + 1)..n {
                        let v = lu.data[i * n + j] - f * lu.data[k * n + j];
                        lu.data[i * n + j] = v;
                    }
                }
            }
        }
        Ok(Self { lu, perm, sign })
    }

    pub fn dim(&self) -> usize {
        self.lu.rows
    }

    /// Row permutation: row `i` of `P A` is row `perm[i]` of `A`.
    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn parity(&self) -> f64 {
        self.sign
    }

    pub fn lower(&self) -> DenseMatrix {
        let n = self.dim();
        DenseMatrix::from_fn(n, n, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => self.lu.get(i, j),
            std::cmp::Ordering::Equal => 1.0,
            std::cmp::Ordering::Less => 0.0,
        })
    }

    pub fn upper(&self) -> DenseMatrix {
        let n = self.dim();
        DenseMatrix::from_fn(n, n, |i, j| if i <= j { self.lu.get(i, j) } else { 0.0 })
    }

    /// `(log|det A|, sign(det A))`.
    pub fn logabsdet(&self) -> (f64, f64) {
        let mut log = 0.0;
        let mut sign = self.sign;
        for i in 0..self.dim() {
            let u = self.lu.get(i, i);
            log += u.abs().ln();
            if u < 0.0 {
                sign = -sign;
            }
        }
        (log, sign)
    }

    pub fn solve(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        let n = self.dim();
        if b.rows != n {
            return Err(Error::shape(
                "solve",
                format!("{n}x{n} system, rhs {}x{}", b.rows, b.cols),
            ));
        }
        let m = b.cols;
        let mut x = DenseMatrix::zeros(n, m);
        for i in 0..n {
            x.row_mut(i).copy_from_slice(b.row(self.perm[i]));
        }
        for i in 0..n {
            for k in 0..i {
                let l = self.lu.get(i, k);
                if l != 0.0 {
                    for j in 0..m {
                        x.data[i * m + j] -= l * x.data[k * m + j];
                    }
                }
            }
        }
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                let u = self.lu.get(i, k);
                if u != 0.0 {
                    for j in 0..m {
                        x.data[i * m + j] -= u * x.data[k * m + j];
                    }
                }
            }
            let d = self.lu.get(i, i);
            for j in 0..m {
                x.data[i * m + j] /= d;
            }
        }
        Ok(x)
    }

    pub fn inverse(&self) -> DenseMatrix {
        self.solve(&DenseMatrix::identity(self.dim()))
            .expect("identity has matching rows")
    }
}

/// `(log|det A|, sign)`; fails with [`Error::Singular`] when `|det A|` drops
/// below `1e-300` or a pivot vanishes.
pub fn logabsdet(a: &DenseMatrix) -> Result<(f64, f64)> {
    let lu = LuFactor::new(a)?;
    let (log, sign) = lu.logabsdet();
    if log < 1e-300f64.ln() {
        return Err(Error::Singular);
    }
    Ok((log, sign))
}

pub fn solve(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    LuFactor::new(a)?.solve(b)
}

pub fn inverse(a: &DenseMatrix) -> Result<DenseMatrix> {
    Ok(LuFactor::new(a)?.inverse())
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations. Eigenvalues are
/// returned in ascending order with matching eigenvector columns of `U`.
pub fn eig_sym(a: &DenseMatrix) -> Result<(Vec<f64>, DenseMatrix)> {
    if !a.is_square() {
        return Err(Error::shape(
            "eig_sym",
            format!("{}x{} is not square", a.rows, a.cols),
        ));
    }
    let asym = a.asymmetry();
    if asym > 1e-10 * a.max_abs().max(1.0) {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    let n = a.rows;
    let mut m = a.symmetrized();
    let mut v = DenseMatrix::identity(n);
    let scale = m.frobenius_norm().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m.get(i, j) * m.get(i, j);
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() < f64::MIN_POSITIVE {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(i, i).total_cmp(&m.get(j, j)));
    let values = order.iter().map(|&i| m.get(i, i)).collect();
    let vectors = DenseMatrix::from_fn(n, n, |i, j| v.get(i, order[j]));
    Ok((values, vectors))
}

/// Rebuilds `U diag(f(λ)) U^T` from an eigendecomposition.
pub fn spectral_apply(
    values: &[f64],
    vectors: &DenseMatrix,
    f: impl Fn(f64) -> f64,
) -> DenseMatrix {
    let n = values.len();
    let mut out = DenseMatrix::zeros(n, n);
    for (k, &lam) in values.iter().enumerate() {
        let w = f(lam);
        for i in 0..n {
            let ui = vectors.get(i, k) * w;
            for j in 0..n {
                out.data[i * n + j] += ui * vectors.get(j, k);
            }
        }
    }
    out
}

/// Largest singular value via power iteration on `A^T A`.
pub fn spectral_norm(a: &DenseMatrix) -> Result<f64> {
    const TOL: f64 = 1e-10;
    const MAX_ITER: usize = 10_000;
    let n = a.cols;
    if n == 0 || a.rows == 0 {
        return Ok(0.0);
    }
    let gram = a.t_matmul(a)?;
    let mut v = DenseMatrix::from_fn(n, 1, |i, _| 1.0 + 0.37 * i as f64 / n as f64);
    let norm = v.frobenius_norm();
    v = v.scale(1.0 / norm);
    let mut lambda = 0.0;
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_ITER {
        let w = gram.matmul(&v)?;
        let next = v.t_matmul(&w)?.item();
        let wn = w.frobenius_norm();
        if wn == 0.0 {
            return Ok(0.0);
        }
        residual = w.sub(&v.scale(next))?.frobenius_norm();
        let converged = (next - lambda).abs() <= TOL * next.abs().max(f64::MIN_POSITIVE);
        lambda = next;
        v = w.scale(1.0 / wn);
        if converged {
            return Ok(lambda.max(0.0).sqrt());
        }
    }
    Err(Error::NoConvergence {
        what: "spectral_norm power iteration",
        residual,
    })
}

/// Lower-triangular Cholesky factor `L` with `A = L L^T`.
pub fn cholesky(a: &DenseMatrix) -> Result<DenseMatrix> {
    if !a.is_square() {
        return Err(Error::shape(
            "cholesky",
            format!("{}x{} is not square", a.rows, a.cols),
        ));
    }
    let n = a.rows;
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if !(d > 0.0) {
            return Err(Error::NotPositiveDefinite);
        }
        let d = d.sqrt();
        l.set(j, j, d);
        for i in (j + 1)..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / d);
        }
    }
    Ok(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseMatrix {
        DenseMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn well_conditioned(rng: &mut ChaCha8Rng, n: usize) -> DenseMatrix {
        let mut m = random(rng, n, n);
        for i in 0..n {
            let v = m.get(i, i) + n as f64;
            m.set(i, i, v);
        }
        m
    }

    #[test]
    fn identities() {
        let i2 = DenseMatrix::identity(2);
        assert_eq!(i2.add(&DenseMatrix::zeros(2, 2)).unwrap(), i2);
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(a.matmul(&i2).unwrap(), a);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let a = DenseMatrix::zeros(2, 3);
        let err = a.matmul(&a).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("2x3"), "{err}");
    }

    #[test]
    fn kron_swap_permutes_node_rows() {
        let s = DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let x = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let k = s.kron(&DenseMatrix::identity(2));
        let v = k.matmul(&x.reshape(4, 1).unwrap()).unwrap();
        let direct = s.matmul(&x).unwrap();
        assert_eq!(v.data(), direct.data());
        assert_eq!(v.data(), &[3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn kron_vec_identity_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let v = rng.random_range(1..5);
            let ci = rng.random_range(1..4);
            let co = rng.random_range(1..4);
            let s = random(&mut rng, v, v);
            let x = random(&mut rng, v, ci);
            let th = random(&mut rng, ci, co);
            let lhs = s.matmul(&x).unwrap().matmul(&th).unwrap();
            let rhs = s
                .kron(&th.transpose())
                .matmul(&x.reshape(v * ci, 1).unwrap())
                .unwrap();
            assert!(lhs.reshape(v * co, 1).unwrap().max_abs_diff(&rhs).unwrap() < 1e-12);
            // node_mix + nodewise_matmul agree with the Kronecker form on vec rows
            let row = x.reshape(1, v * ci).unwrap();
            let structured =
                DenseMatrix::node_mix(&s, &row.nodewise_matmul(&th).unwrap(), v).unwrap();
            assert!(
                structured
                    .reshape(v * co, 1)
                    .unwrap()
                    .max_abs_diff(&rhs)
                    .unwrap()
                    < 1e-12
            );
        }
    }

    #[test]
    fn logabsdet_basics() {
        assert_eq!(logabsdet(&DenseMatrix::identity(5)).unwrap(), (0.0, 1.0));
        let d = DenseMatrix::diag_embed(&DenseMatrix::row_vector(&[2.0, 3.0])).unwrap();
        let (l, s) = logabsdet(&d).unwrap();
        assert!((l - 6f64.ln()).abs() < 1e-15);
        assert_eq!(s, 1.0);
        let sing = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(matches!(logabsdet(&sing), Err(Error::Singular)));
    }

    #[test]
    fn lu_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..9 {
            let a = well_conditioned(&mut rng, n);
            let lu = LuFactor::new(&a).unwrap();
            let pa = a.select_rows(lu.permutation());
            let recon = lu.lower().matmul(&lu.upper()).unwrap();
            let rel = pa.sub(&recon).unwrap().frobenius_norm() / a.frobenius_norm();
            assert!(rel < 1e-10, "n={n} rel={rel}");
        }
    }

    #[test]
    fn logabsdet_is_multiplicative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.random_range(1..7);
            let a = well_conditioned(&mut rng, n);
            let b = random(&mut rng, n, n)
                .add(&DenseMatrix::identity(n).scale(2.0))
                .unwrap();
            let Ok((lb, _)) = logabsdet(&b) else { continue };
            let (la, _) = logabsdet(&a).unwrap();
            let (lab, _) = logabsdet(&a.matmul(&b).unwrap()).unwrap();
            assert!((lab - la - lb).abs() < 1e-8);
        }
    }

    fn cofactor_inverse(a: &DenseMatrix) -> DenseMatrix {
        let det3 = |m: [[f64; 3]; 3]| {
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        };
        let m = [
            [a.get(0, 0), a.get(0, 1), a.get(0, 2)],
            [a.get(1, 0), a.get(1, 1), a.get(1, 2)],
            [a.get(2, 0), a.get(2, 1), a.get(2, 2)],
        ];
        let det = det3(m);
        DenseMatrix::from_fn(3, 3, |i, j| {
            // adjugate entry (i, j) is the (j, i) cofactor
            let rows: Vec<usize> = (0..3).filter(|&r| r != j).collect();
            let cols: Vec<usize> = (0..3).filter(|&c| c != i).collect();
            let minor = m[rows[0]][cols[0]] * m[rows[1]][cols[1]]
                - m[rows[0]][cols[1]] * m[rows[1]][cols[0]];
            let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            sign * minor / det
        })
    }

    #[test]
    fn solve_matches_cofactor_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = well_conditioned(&mut rng, 3);
            let x = solve(&a, &DenseMatrix::identity(3)).unwrap();
            assert!(x.max_abs_diff(&cofactor_inverse(&a)).unwrap() <= 1e-9);
        }
    }

    #[test]
    fn eig_sym_reconstructs() {
        let (vals, _) = eig_sym(&DenseMatrix::identity(3)).unwrap();
        assert_eq!(vals, vec![1.0, 1.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for n in 1..10 {
            let b = random(&mut rng, n, n);
            let a = b.add(&b.transpose()).unwrap();
            let (vals, u) = eig_sym(&a).unwrap();
            let recon = spectral_apply(&vals, &u, |x| x);
            assert!(a.sub(&recon).unwrap().frobenius_norm() < 1e-8);
            assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        }
        let asym = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(eig_sym(&asym), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        let d = DenseMatrix::diag_embed(&DenseMatrix::row_vector(&[3.0, -5.0])).unwrap();
        assert!((spectral_norm(&d).unwrap() - 5.0).abs() < 1e-8);
    }

    #[test]
    fn cholesky_roundtrip() {
        let a = DenseMatrix::from_rows(&[
            vec![1.0, 0.6, 0.0],
            vec![0.6, 1.0, -0.4],
            vec![0.0, -0.4, 1.0],
        ])
        .unwrap();
        let l = cholesky(&a).unwrap();
        assert!(l.matmul_t(&l).unwrap().max_abs_diff(&a).unwrap() < 1e-14);
        let bad = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(cholesky(&bad), Err(Error::NotPositiveDefinite)));
    }
}
