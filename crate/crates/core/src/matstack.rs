//! Small dense linear algebra: row-major matrices, cyclic Jacobi symmetric
//! eigendecomposition, one-sided Jacobi SVD, shifted Cholesky solves and a
//! Hessenberg-QR eigenvalue routine for general real matrices.
//!
//! Everything here targets matrices of at most a few hundred rows. Sums are
//! accumulated in row-major order so results are bit-reproducible.

use crate::error::{LabError, Result};
use crate::scalar::Real;
use std::fmt;
use std::ops::{Add, Index, IndexMut, Mul, Neg, Sub};

const MAX_SWEEPS: usize = 100;

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Mat<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            write!(f, "  ")?;
            for j in 0..self.cols {
                write!(f, "{:?} ", self.data[i * self.cols + j])?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_diag(diag: &[T]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(LabError::dim(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    /// Builds a matrix from nested rows; all rows must share one length.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(LabError::dim("ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Ok(Mat {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    /// Column vector from a slice.
    pub fn column(v: &[T]) -> Self {
        Mat {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
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
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn col(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_col(&mut self, j: usize, v: &[T]) {
        for (i, &x) in v.iter().enumerate() {
            self[(i, j)] = x;
        }
    }

    pub fn diag(&self) -> Vec<T> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, a: T) -> Self {
        self.map(|x| x * a)
    }

    /// `self + a * other`, shapes must match.
    pub fn axpy(&self, a: T, other: &Self) -> Self {
        assert_eq!(self.shape(), other.shape(), "axpy shape mismatch");
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&x, &y)| x + a * y)
                .collect(),
        }
    }

    pub fn trace(&self) -> T {
        self.diag().into_iter().sum()
    }

    pub fn frobenius(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Self) -> T {
        assert_eq!(self.shape(), other.shape(), "dot shape mismatch");
        self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum()
    }

    pub fn symmetrize(&self) -> Self {
        let t = self.transpose();
        (self + &t).scale(T::lit(0.5))
    }

    /// Largest entry of `|m - mᵀ|`.
    pub fn asymmetry(&self) -> T {
        let mut worst = T::zero();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// Integer power of a square matrix.
    pub fn powi(&self, k: u32) -> Self {
        assert!(self.is_square());
        let mut out = Mat::identity(self.rows);
        for _ in 0..k {
            out = &out * self;
        }
        out
    }

    pub fn cast<U: Real>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::lit(x.to_f64_lossy())).collect(),
        }
    }
}

impl<T> Index<(usize, usize)> for Mat<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Mat<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl<T: Real> Mul for &Mat<T> {
    type Output = Mat<T>;

    /// Panics on non-conforming shapes; use [`matmul`] for a checked product.
    fn mul(self, rhs: &Mat<T>) -> Mat<T> {
        assert_eq!(
            self.cols, rhs.rows,
            "matmul shape mismatch {}x{} * {}x{}",
            self.rows, self.cols, rhs.rows, rhs.cols
        );
        let mut out = Mat::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == T::zero() {
                    continue;
                }
                let brow = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }
}

impl<T: Real> Add for &Mat<T> {
    type Output = Mat<T>;
    fn add(self, rhs: &Mat<T>) -> Mat<T> {
        self.axpy(T::one(), rhs)
    }
}

impl<T: Real> Sub for &Mat<T> {
    type Output = Mat<T>;
    fn sub(self, rhs: &Mat<T>) -> Mat<T> {
        self.axpy(-T::one(), rhs)
    }
}

impl<T: Real> Neg for &Mat<T> {
    type Output = Mat<T>;
    fn neg(self) -> Mat<T> {
        self.scale(-T::one())
    }
}

/// Checked matrix product.
pub fn matmul<T: Real>(a: &Mat<T>, b: &Mat<T>) -> Result<Mat<T>> {
    if a.cols() != b.rows() {
        return Err(LabError::dim(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(a * b)
}

pub fn transpose<T: Real>(m: &Mat<T>) -> Mat<T> {
    m.transpose()
}

pub fn trace<T: Real>(m: &Mat<T>) -> Result<T> {
    if !m.is_square() {
        return Err(LabError::dim("trace of non-square matrix"));
    }
    Ok(m.trace())
}

pub fn frobenius<T: Real>(m: &Mat<T>) -> T {
    m.frobenius()
}

/// Eigendecomposition of a symmetric matrix, eigenvalues non-increasing and
/// eigenvectors stored as the columns of `vectors`.
#[derive(Debug, Clone)]
pub struct SymSpectrum<T> {
    pub values: Vec<T>,
    pub vectors: Mat<T>,
}

impl<T: Real> SymSpectrum<T> {
    /// `V diag(values) Vᵀ`.
    pub fn reconstruct(&self) -> Mat<T> {
        let n = self.values.len();
        let scaled = Mat::from_fn(n, n, |i, j| self.vectors[(i, j)] * self.values[j]);
        &scaled * &self.vectors.transpose()
    }

    /// `V f(diag(values)) Vᵀ` for a scalar function `f`.
    pub fn apply(&self, f: impl Fn(T) -> T) -> Mat<T> {
        let n = self.values.len();
        let fv: Vec<T> = self.values.iter().map(|&x| f(x)).collect();
        let scaled = Mat::from_fn(n, n, |i, j| self.vectors[(i, j)] * fv[j]);
        &scaled * &self.vectors.transpose()
    }
}

fn check_symmetric<T: Real>(m: &Mat<T>) -> Result<()> {
    if !m.is_square() {
        return Err(LabError::dim(format!(
            "expected square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let asym = m.asymmetry();
    if asym > T::tol(1e-9) * (T::one() + m.max_abs()) {
        return Err(LabError::Asymmetric(asym.to_f64_lossy()));
    }
    Ok(())
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
pub fn sym_eig<T: Real>(m: &Mat<T>) -> Result<SymSpectrum<T>> {
    check_symmetric(m)?;
    if !m.is_finite() {
        return Err(LabError::Numerical("non-finite entry in sym_eig input".into()));
    }
    let n = m.rows();
    let mut a = m.symmetrize();
    let mut v = Mat::identity(n);
    let norm = a.frobenius();
    let threshold = T::tol(1e-14) * norm;
    let off = |a: &Mat<T>| -> T {
        let mut s = T::zero();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[(i, j)] * a[(i, j)];
                }
            }
        }
        s.sqrt()
    };

    let mut converged = norm == T::zero() || off(&a) <= threshold;
    let mut sweep = 0;
    while !converged {
        if sweep == MAX_SWEEPS {
            return Err(LabError::Numerical(format!(
                "Jacobi eigensolver did not converge in {MAX_SWEEPS} sweeps"
            )));
        }
        sweep += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (T::lit(2.0) * apq);
                let t = if theta.is_infinite() {
                    T::zero()
                } else {
                    let sgn = if theta >= T::zero() { T::one() } else { -T::one() };
                    sgn / (theta.abs() + (theta * theta + T::one()).sqrt())
                };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = T::zero();
                a[(q, p)] = T::zero();
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
        converged = off(&a) <= threshold;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a[(j, j)]
            .partial_cmp(&a[(i, i)])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = Mat::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(SymSpectrum { values, vectors })
}

/// Thin singular value decomposition `m = U diag(S) Vᵀ` with
/// `min(rows, cols)` singular triplets, singular values non-increasing.
#[derive(Debug, Clone)]
pub struct Svd<T> {
    pub u: Mat<T>,
    pub s: Vec<T>,
    pub v: Mat<T>,
}

impl<T: Real> Svd<T> {
    pub fn reconstruct(&self) -> Mat<T> {
        let r = self.s.len();
        let us = Mat::from_fn(self.u.rows(), r, |i, j| self.u[(i, j)] * self.s[j]);
        &us * &self.v.transpose()
    }

    /// Number of singular values above `rel_tol * s_max`.
    pub fn rank(&self, rel_tol: T) -> usize {
        let smax = self.s.first().copied().unwrap_or(T::zero());
        self.s
            .iter()
            .filter(|&&x| x > rel_tol * smax && x > T::zero())
            .count()
    }
}

/// One-sided (Hestenes) Jacobi SVD.
pub fn svd<T: Real>(m: &Mat<T>) -> Result<Svd<T>> {
    if !m.is_finite() {
        return Err(LabError::Numerical("non-finite entry in svd input".into()));
    }
    if m.rows() < m.cols() {
        let t = svd(&m.transpose())?;
        return Ok(Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        });
    }
    let (rows, n) = m.shape();
    // work on columns stored contiguously: a[j] is column j
    let mut a: Vec<Vec<T>> = (0..n).map(|j| m.col(j)).collect();
    let mut v: Vec<Vec<T>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { T::one() } else { T::zero() }).collect())
        .collect();
    let tol = T::tol(1e-15);
    let total: T = a.iter().flatten().map(|&x| x * x).sum();
    let tiny = T::min_positive_value().sqrt() + total * T::epsilon() * T::epsilon();

    let mut sweep = 0;
    loop {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha: T = a[p].iter().map(|&x| x * x).sum();
                let beta: T = a[q].iter().map(|&x| x * x).sum();
                let gamma: T = a[p].iter().zip(&a[q]).map(|(&x, &y)| x * y).sum();
                if gamma == T::zero()
                    || alpha <= tiny
                    || beta <= tiny
                    || gamma.abs() <= tol * (alpha * beta).sqrt()
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let sgn = if zeta >= T::zero() { T::one() } else { -T::one() };
                let t = sgn / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = a.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (xp, xq) = (*x, *y);
                    *x = c * xp - s * xq;
                    *y = s * xp + c * xq;
                }
                let (lo, hi) = v.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (xp, xq) = (*x, *y);
                    *x = c * xp - s * xq;
                    *y = s * xp + c * xq;
                }
            }
        }
        if !rotated {
            break;
        }
        sweep += 1;
        if sweep == MAX_SWEEPS {
            return Err(LabError::Numerical(format!(
                "one-sided Jacobi SVD did not converge in {MAX_SWEEPS} sweeps"
            )));
        }
    }

    let norms: Vec<T> = a
        .iter()
        .map(|col| col.iter().map(|&x| x * x).sum::<T>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        norms[j]
            .partial_cmp(&norms[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let smax = norms[order[0]];
    let zero_cut = smax * T::epsilon() * T::lit(n.max(rows) as f64);

    let mut s = Vec::with_capacity(n);
    let mut ucols: Vec<Vec<T>> = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        if sigma > zero_cut && sigma > T::zero() {
            ucols.push(a[j].iter().map(|&x| x / sigma).collect());
            s.push(sigma);
        } else {
            ucols.push(vec![T::zero(); rows]);
            s.push(T::zero());
            missing.push(slot);
        }
    }
    if !missing.is_empty() {
        let filled: Vec<Vec<T>> = ucols
            .iter()
            .enumerate()
            .filter(|(i, _)| !missing.contains(i))
            .map(|(_, c)| c.clone())
            .collect();
        let extra = complete_basis(&filled, rows, missing.len());
        for (slot, col) in missing.into_iter().zip(extra) {
            ucols[slot] = col;
        }
    }
    let u = Mat::from_fn(rows, n, |i, j| ucols[j][i]);
    let vm = Mat::from_fn(n, n, |i, j| v[order[j]][i]);
    Ok(Svd { u, s, v: vm })
}

/// Extends an orthonormal family of `dim`-vectors by `count` further
/// orthonormal vectors (Gram-Schmidt against the canonical basis, run twice).
pub fn complete_basis<T: Real>(existing: &[Vec<T>], dim: usize, count: usize) -> Vec<Vec<T>> {
    let mut basis: Vec<Vec<T>> = existing.to_vec();
    let mut out = Vec::with_capacity(count);
    for e in 0..dim {
        if out.len() == count {
            break;
        }
        let mut cand: Vec<T> = (0..dim)
            .map(|i| if i == e { T::one() } else { T::zero() })
            .collect();
        for _ in 0..2 {
            for b in &basis {
                let proj: T = b.iter().zip(&cand).map(|(&x, &y)| x * y).sum();
                for (c, &bi) in cand.iter_mut().zip(b) {
                    *c -= proj * bi;
                }
            }
        }
        let norm = cand.iter().map(|&x| x * x).sum::<T>().sqrt();
        if norm > T::lit(1e-6) {
            let unit: Vec<T> = cand.into_iter().map(|x| x / norm).collect();
            basis.push(unit.clone());
            out.push(unit);
        }
    }
    out
}

/// Solves `(m + shift I) x = rhs` for symmetric PSD `m` by Cholesky.
pub fn solve_spd<T: Real>(m: &Mat<T>, shift: T, rhs: &Mat<T>) -> Result<Mat<T>> {
    if !(shift > T::zero()) {
        return Err(LabError::domain("solve_spd shift must be positive"));
    }
    check_symmetric(m)?;
    if rhs.rows() != m.rows() {
        return Err(LabError::dim(format!(
            "rhs has {} rows, system has {}",
            rhs.rows(),
            m.rows()
        )));
    }
    let l = cholesky_shifted(m, shift)?;
    Ok(cholesky_solve(&l, rhs))
}

/// `(m + shift I)^{-1}` for symmetric PSD `m`.
pub fn inverse_spd<T: Real>(m: &Mat<T>, shift: T) -> Result<Mat<T>> {
    let inv = solve_spd(m, shift, &Mat::identity(m.rows()))?;
    Ok(inv.symmetrize())
}

fn cholesky_shifted<T: Real>(m: &Mat<T>, shift: T) -> Result<Mat<T>> {
    let n = m.rows();
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)] + shift;
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > T::zero()) || !d.is_finite() {
            return Err(LabError::Numerical(format!(
                "Cholesky breakdown at pivot {j} (value {d:e}); matrix is not PSD"
            )));
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = (m[(i, j)] + m[(j, i)]) * T::lit(0.5);
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

fn cholesky_solve<T: Real>(l: &Mat<T>, rhs: &Mat<T>) -> Mat<T> {
    let n = l.rows();
    let mut x = rhs.clone();
    for c in 0..rhs.cols() {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    x
}

/// Eigenvalues `(re, im)` of a general real square matrix via Hessenberg
/// reduction and Francis double-shift QR. Order is unspecified.
pub fn general_eigenvalues<T: Real>(m: &Mat<T>) -> Result<Vec<(T, T)>> {
    if !m.is_square() {
        return Err(LabError::dim("eigenvalues of non-square matrix"));
    }
    if !m.is_finite() {
        return Err(LabError::Numerical("non-finite entry in eigenvalue input".into()));
    }
    let n = m.rows();
    if n == 0 {
        return Ok(Vec::new());
    }
    // 1-based working copy keeps the classical indexing readable
    let mut a = vec![vec![T::zero(); n + 1]; n + 1];
    for i in 0..n {
        for j in 0..n {
            a[i + 1][j + 1] = m[(i, j)];
        }
    }
    hessenberg(&mut a, n);
    for i in 3..=n {
        for j in 1..(i - 1) {
            a[i][j] = T::zero();
        }
    }
    hessenberg_qr(&mut a, n)
}

fn hessenberg<T: Real>(a: &mut [Vec<T>], n: usize) {
    for m in 2..n {
        let mut x = T::zero();
        let mut i = m;
        for j in m..=n {
            if a[j][m - 1].abs() > x.abs() {
                x = a[j][m - 1];
                i = j;
            }
        }
        if i != m {
            for j in (m - 1)..=n {
                let tmp = a[i][j];
                a[i][j] = a[m][j];
                a[m][j] = tmp;
            }
            for row in a.iter_mut().take(n + 1).skip(1) {
                row.swap(i, m);
            }
        }
        if x != T::zero() {
            for i in (m + 1)..=n {
                let mut y = a[i][m - 1];
                if y != T::zero() {
                    y /= x;
                    a[i][m - 1] = y;
                    for j in m..=n {
                        let amj = a[m][j];
                        a[i][j] -= y * amj;
                    }
                    for row in a.iter_mut().take(n + 1).skip(1) {
                        let rji = row[i];
                        row[m] += y * rji;
                    }
                }
            }
        }
    }
}

fn sign<T: Real>(a: T, b: T) -> T {
    if b >= T::zero() {
        a.abs()
    } else {
        -a.abs()
    }
}

#[allow(clippy::many_single_char_names)]
fn hessenberg_qr<T: Real>(a: &mut [Vec<T>], n: usize) -> Result<Vec<(T, T)>> {
    let mut wr = vec![T::zero(); n + 1];
    let mut wi = vec![T::zero(); n + 1];
    let mut anorm = T::zero();
    for i in 1..=n {
        for j in (i.max(2) - 1)..=n {
            anorm += a[i][j].abs();
        }
    }
    let (mut p, mut q, mut r);
    let (mut x, mut y, mut z, mut w);
    let mut nn = n;
    let mut t = T::zero();
    while nn >= 1 {
        let mut its = 0;
        loop {
            let mut l = nn;
            while l >= 2 {
                let mut s = a[l - 1][l - 1].abs() + a[l][l].abs();
                if s == T::zero() {
                    s = anorm;
                }
                if a[l][l - 1].abs() + s == s {
                    a[l][l - 1] = T::zero();
                    break;
                }
                l -= 1;
            }
            x = a[nn][nn];
            if l == nn {
                wr[nn] = x + t;
                wi[nn] = T::zero();
                nn -= 1;
            } else {
                y = a[nn - 1][nn - 1];
                w = a[nn][nn - 1] * a[nn - 1][nn];
                if l == nn - 1 {
                    p = T::lit(0.5) * (y - x);
                    q = p * p + w;
                    z = q.abs().sqrt();
                    x += t;
                    if q >= T::zero() {
                        z = p + sign(z, p);
                        wr[nn - 1] = x + z;
                        wr[nn] = x + z;
                        if z != T::zero() {
                            wr[nn] = x - w / z;
                        }
                        wi[nn - 1] = T::zero();
                        wi[nn] = T::zero();
                    } else {
                        wr[nn - 1] = x + p;
                        wr[nn] = x + p;
                        wi[nn - 1] = -z;
                        wi[nn] = z;
                    }
                    nn = nn.saturating_sub(2);
                } else {
                    if its == 60 {
                        return Err(LabError::Numerical(
                            "Hessenberg QR did not converge".into(),
                        ));
                    }
                    if its == 10 || its == 20 || its == 40 {
                        t += x;
                        for i in 1..=nn {
                            a[i][i] -= x;
                        }
                        let s = a[nn][nn - 1].abs() + a[nn - 1][nn - 2].abs();
                        x = T::lit(0.75) * s;
                        y = x;
                        w = T::lit(-0.4375) * s * s;
                    }
                    its += 1;
                    let mut m = nn - 2;
                    loop {
                        z = a[m][m];
                        r = x - z;
                        let s0 = y - z;
                        p = (r * s0 - w) / a[m + 1][m] + a[m][m + 1];
                        q = a[m + 1][m + 1] - z - r - s0;
                        r = a[m + 2][m + 1];
                        let s = p.abs() + q.abs() + r.abs();
                        p /= s;
                        q /= s;
                        r /= s;
                        if m == l {
                            break;
                        }
                        let u = a[m][m - 1].abs() * (q.abs() + r.abs());
                        let v = p.abs() * (a[m - 1][m - 1].abs() + z.abs() + a[m + 1][m + 1].abs());
                        if u + v == v {
                            break;
                        }
                        m -= 1;
                    }
                    for i in (m + 2)..=nn {
                        a[i][i - 2] = T::zero();
                        if i != m + 2 {
                            a[i][i - 3] = T::zero();
                        }
                    }
                    let mut k = m;
                    while k + 1 <= nn {
                        if k != m {
                            p = a[k][k - 1];
                            q = a[k + 1][k - 1];
                            r = T::zero();
                            if k != nn - 1 {
                                r = a[k + 2][k - 1];
                            }
                            x = p.abs() + q.abs() + r.abs();
                            if x != T::zero() {
                                p /= x;
                                q /= x;
                                r /= x;
                            }
                        }
                        let s = sign((p * p + q * q + r * r).sqrt(), p);
                        if s != T::zero() {
                            if k == m {
                                if l != m {
                                    a[k][k - 1] = -a[k][k - 1];
                                }
                            } else {
                                a[k][k - 1] = -s * x;
                            }
                            p += s;
                            x = p / s;
                            y = q / s;
                            z = r / s;
                            q /= p;
                            r /= p;
                            for j in k..=nn {
                                p = a[k][j] + q * a[k + 1][j];
                                if k != nn - 1 {
                                    p += r * a[k + 2][j];
                                    a[k + 2][j] -= p * z;
                                }
                                a[k + 1][j] -= p * y;
                                a[k][j] -= p * x;
                            }
                            let mmin = if nn < k + 3 { nn } else { k + 3 };
                            for i in l..=mmin {
                                p = x * a[i][k] + y * a[i][k + 1];
                                if k != nn - 1 {
                                    p += z * a[i][k + 2];
                                    a[i][k + 2] -= p * r;
                                }
                                a[i][k + 1] -= p * q;
                                a[i][k] -= p;
                            }
                        }
                        k += 1;
                    }
                }
            }
            if nn == 0 || l + 1 >= nn {
                break;
            }
        }
    }
    Ok((1..=n).map(|i| (wr[i], wi[i])).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m2(a: f64, b: f64, c: f64, d: f64) -> Mat<f64> {
        Mat::from_rows(&[[a, b], [c, d]]).unwrap()
    }

    fn random_sym(n: usize, seed: u64) -> Mat<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        a.symmetrize()
    }

    fn orth_err(v: &Mat<f64>) -> f64 {
        let g = &v.transpose() * v;
        (&g - &Mat::identity(g.rows())).max_abs()
    }

    #[test]
    fn sym_eig_two_by_two() {
        let e = sym_eig(&m2(0.8, 0.2, 0.2, 0.8)).unwrap();
        assert!((e.values[0] - 1.0).abs() < 1e-14);
        assert!((e.values[1] - 0.6).abs() < 1e-14);
    }

    #[test]
    fn sym_eig_identity_and_diagonal() {
        let e = sym_eig(&Mat::<f64>::identity(3)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0, 1.0]);
        let e = sym_eig(&m2(2.0, 0.0, 0.0, -1.0)).unwrap();
        assert_eq!(e.values, vec![2.0, -1.0]);
        assert_eq!(e.vectors, Mat::identity(2));
    }

    #[test]
    fn sym_eig_rejects_bad_input() {
        assert!(matches!(
            sym_eig(&Mat::<f64>::zeros(2, 3)),
            Err(LabError::Dimension(_))
        ));
        assert!(matches!(
            sym_eig(&m2(1.0, 0.5, 0.0, 1.0)),
            Err(LabError::Asymmetric(_))
        ));
    }

    #[test]
    fn svd_examples() {
        let s = svd(&m2(3.0, 0.0, 0.0, 1.0)).unwrap();
        assert_eq!(s.s, vec![3.0, 1.0]);
        let s = svd(&Mat::<f64>::zeros(3, 2)).unwrap();
        assert!(s.s.iter().all(|&x| x == 0.0));
        assert!(orth_err(&s.u) < 1e-12);
        let s = svd(&m2(0.8, 0.2, 0.2, 0.8)).unwrap();
        assert!((s.s[0] - 1.0).abs() < 1e-14 && (s.s[1] - 0.6).abs() < 1e-14);
    }

    #[test]
    fn svd_rectangular_and_rank_deficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Mat::from_fn(5, 2, |_, _| rng.random_range(-1.0..1.0));
        let b = Mat::from_fn(2, 7, |_, _| rng.random_range(-1.0..1.0));
        let m = &a * &b; // rank 2, 5x7
        let s = svd(&m).unwrap();
        assert_eq!(s.s.len(), 5);
        assert!(orth_err(&s.u) < 1e-10);
        assert!(orth_err(&s.v) < 1e-10);
        assert!((&s.reconstruct() - &m).frobenius() < 1e-9 * (1.0 + m.frobenius()));
        assert_eq!(s.rank(1e-10), 2);
    }

    #[test]
    fn solve_spd_examples() {
        let x = solve_spd(&Mat::<f64>::zeros(2, 2), 0.5, &Mat::identity(2)).unwrap();
        assert!((&x - &Mat::identity(2).scale(2.0)).max_abs() < 1e-15);
        let x = solve_spd(&Mat::<f64>::identity(2), 1.0, &Mat::identity(2)).unwrap();
        assert!((&x - &Mat::identity(2).scale(0.5)).max_abs() < 1e-15);
        let x = solve_spd(&m2(2.0, 0.0, 0.0, 0.0), 0.5, &Mat::column(&[1.0, 1.0])).unwrap();
        assert!((x[(0, 0)] - 0.4).abs() < 1e-15 && (x[(1, 0)] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn solve_spd_errors() {
        assert!(matches!(
            solve_spd(&Mat::<f64>::identity(2), 0.0, &Mat::identity(2)),
            Err(LabError::Domain(_))
        ));
        let neg = Mat::from_diag(&[-2.0, 1.0]);
        assert!(matches!(
            solve_spd(&neg, 0.5, &Mat::identity(2)),
            Err(LabError::Numerical(_))
        ));
    }

    #[test]
    fn basic_ops() {
        assert_eq!(Mat::<f64>::identity(3).trace(), 3.0);
        assert_eq!(Mat::from_diag(&[3.0, 4.0]).frobenius(), 5.0);
        let m = m2(1.0, 2.0, 3.0, 4.0);
        assert_eq!(matmul(&Mat::identity(2), &m).unwrap(), m);
        assert!(matmul(&Mat::<f64>::identity(3), &m).is_err());
        assert!(trace(&Mat::<f64>::zeros(2, 3)).is_err());
        assert_eq!(transpose(&m)[(0, 1)], 3.0);
    }

    #[test]
    fn general_eigenvalues_known_cases() {
        // rotation generator: eigenvalues ±i
        let ev = general_eigenvalues(&m2(0.0, -1.0, 1.0, 0.0)).unwrap();
        let mut im: Vec<f64> = ev.iter().map(|e| e.1).collect();
        im.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((im[0] + 1.0).abs() < 1e-12 && (im[1] - 1.0).abs() < 1e-12);
        // upper triangular
        let t = Mat::from_rows(&[[3.0, 1.0, 2.0], [0.0, -1.0, 5.0], [0.0, 0.0, 0.5]]).unwrap();
        let mut re: Vec<f64> = general_eigenvalues(&t).unwrap().iter().map(|e| e.0).collect();
        re.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((re[0] + 1.0).abs() < 1e-12 && (re[1] - 0.5).abs() < 1e-12 && (re[2] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn general_eigenvalues_match_similarity_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 12;
        let d: Vec<f64> = (0..n).map(|i| i as f64 - 4.5).collect();
        let p = Mat::from_fn(n, n, |i, j| {
            if i == j {
                3.0
            } else {
                rng.random_range(-0.5..0.5)
            }
        });
        let pinv_cols = {
            // p is diagonally dominant; invert through the normal equations
            let ptp = &p.transpose() * &p;
            let inv = inverse_spd(&ptp, 1e-300).unwrap();
            &inv * &p.transpose()
        };
        let a = &(&p * &Mat::from_diag(&d)) * &pinv_cols;
        let mut re: Vec<f64> = general_eigenvalues(&a).unwrap().iter().map(|e| e.0).collect();
        re.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (x, y) in re.iter().zip(&d) {
            assert!((x - y).abs() < 1e-8, "{x} vs {y}");
        }
    }

    #[test]
    fn f32_path_converges() {
        let m: Mat<f32> = Mat::from_rows(&[[2.0f32, 1.0], [1.0, 2.0]]).unwrap();
        let e = sym_eig(&m).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-5 && (e.values[1] - 1.0).abs() < 1e-5);
        let s = svd(&m).unwrap();
        assert!((s.s[0] - 3.0).abs() < 1e-5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn sym_eig_reconstructs(n in 1usize..64, seed in any::<u64>()) {
            let m = random_sym(n, seed);
            let e = sym_eig(&m).unwrap();
            prop_assert!(orth_err(&e.vectors) <= 1e-10);
            prop_assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
            let err = (&e.reconstruct() - &m).frobenius();
            prop_assert!(err <= 1e-9 * (1.0 + m.frobenius()));
        }

        #[test]
        fn solve_spd_round_trips(n in 1usize..24, seed in any::<u64>(), shift in 0.01f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let m = &b * &b.transpose();
            let rhs = Mat::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
            let x = solve_spd(&m, shift, &rhs).unwrap();
            let shifted = m.axpy(shift, &Mat::identity(n));
            let res = (&(&shifted * &x) - &rhs).frobenius();
            prop_assert!(res <= 1e-10 * (1.0 + rhs.frobenius()));
        }

        #[test]
        fn svd_transpose_swaps_factors(r in 1usize..12, c in 1usize..12, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m: Mat<f64> = Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
            let a = svd(&m).unwrap();
            let b = svd(&m.transpose()).unwrap();
            for (x, y) in a.s.iter().zip(&b.s) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
            prop_assert!(orth_err(&a.u) <= 1e-10 && orth_err(&a.v) <= 1e-10);
            prop_assert!((&a.reconstruct() - &m).frobenius() <= 1e-9 * (1.0 + m.frobenius()));
        }
    }
}
