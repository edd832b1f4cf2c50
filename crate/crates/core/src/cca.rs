//! Exact nonlinear CCA of a finite joint table and the eigenbasis of the
//! cross-covariance operator `A(f, g) = (E[g(Y)|X=·], E[f(X)|Y=·])`.

use crate::distributions::JointTable;
use crate::error::{LabError, Result};
use crate::matstack::{complete_basis, svd, Mat};
use crate::objectives::EncoderPair;
use crate::scalar::Real;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

/// Canonical correlations `c` (descending, `c[0] = 1`) with directions
/// `psi` (`R x nx`) and `xi` (`R x ny`), orthonormal under the marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct CcaDecomposition<T> {
    pub c: Vec<T>,
    pub psi: Mat<T>,
    pub xi: Mat<T>,
    pub px: Vec<T>,
    pub py: Vec<T>,
}

#[derive(Serialize, Deserialize)]
struct CcaJson<T> {
    c: Vec<T>,
    psi: Vec<Vec<T>>,
    xi: Vec<Vec<T>>,
}

impl<T: Real> Serialize for CcaDecomposition<T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows = |m: &Mat<T>| (0..m.rows()).map(|i| m.row(i).to_vec()).collect();
        CcaJson {
            c: self.c.clone(),
            psi: rows(&self.psi),
            xi: rows(&self.xi),
        }
        .serialize(s)
    }
}

impl<T: Real> CcaDecomposition<T> {
    /// Number of retained canonical pairs, the constant pair included.
    pub fn rank(&self) -> usize {
        self.c.len()
    }

    pub fn nx(&self) -> usize {
        self.px.len()
    }

    pub fn ny(&self) -> usize {
        self.py.len()
    }

    /// Smallest gap between consecutive canonical correlations, or `None`
    /// when only the constant pair exists.
    pub fn min_gap(&self) -> Option<T> {
        self.c
            .windows(2)
            .map(|w| w[0] - w[1])
            .reduce(|a, b| a.min(b))
    }

    /// Cross-correlation matrix `Σ_{x,y} p(x,y) ψ_i(x) ξ_j(y)`.
    pub fn cross_correlation(&self, table: &JointTable<T>) -> Mat<T> {
        &(&self.psi * table.p()) * &self.xi.transpose()
    }
}

/// Nonlinear CCA as the SVD of `p(x,y) / √(pX(x) pY(y))`.
pub fn exact_cca<T: Real>(table: &JointTable<T>) -> Result<CcaDecomposition<T>> {
    let (nx, ny) = (table.nx(), table.ny());
    if table.px().iter().chain(table.py()).any(|&w| w <= T::zero()) {
        return Err(LabError::domain("table has a zero marginal"));
    }
    let dec = svd(&table.normalized())?;
    let keep = T::tol(1e-12);
    let sx: Vec<T> = table.px().iter().map(|w| w.sqrt()).collect();
    let sy: Vec<T> = table.py().iter().map(|w| w.sqrt()).collect();

    let mut pairs: Vec<(T, Vec<T>, Vec<T>)> = Vec::new();
    for (j, &s) in dec.s.iter().enumerate() {
        if s <= keep {
            continue;
        }
        let mut psi: Vec<T> = (0..nx).map(|x| dec.u[(x, j)] / sx[x]).collect();
        let mut xi: Vec<T> = (0..ny).map(|y| dec.v[(y, j)] / sy[y]).collect();
        let scale = psi.iter().fold(T::zero(), |a, &b| a.max(b.abs()));
        if let Some(&first) = psi.iter().find(|v| v.abs() > keep * scale) {
            if first < T::zero() {
                psi.iter_mut().for_each(|v| *v = -*v);
                xi.iter_mut().for_each(|v| *v = -*v);
            }
        }
        let c = if (T::one() - s).abs() <= keep { T::one() } else { s.min(T::one()) };
        pairs.push((c, psi, xi));
    }
    pairs.sort_by(|a, b| {
        b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| {
            a.1.iter()
                .zip(&b.1)
                .map(|(x, y)| x.partial_cmp(y).unwrap_or(Ordering::Equal))
                .find(|o| *o != Ordering::Equal)
                .unwrap_or(Ordering::Equal)
        })
    });
    let r = pairs.len();
    Ok(CcaDecomposition {
        c: pairs.iter().map(|p| p.0).collect(),
        psi: Mat::from_fn(r, nx, |i, x| pairs[i].1[x]),
        xi: Mat::from_fn(r, ny, |i, y| pairs[i].2[y]),
        px: table.px().to_vec(),
        py: table.py().to_vec(),
    })
}

/// Provenance of an eigenpair of `A`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeLabel {
    /// `+c_j` with eigenvector `(ψ_j, ξ_j)/√2`.
    Positive(usize),
    /// `−c_j` with eigenvector `(ψ_j, −ξ_j)/√2`.
    Negative(usize),
    /// Kernel direction.
    Null,
}

/// Full eigen-decomposition of `A` on `L²(P_X) x L²(P_Y)`.
///
/// Column `i` of `vectors` holds `ζ_i` in function form: entries `0..nx` are
/// its `X` part, entries `nx..nx+ny` its `Y` part. Eigenvalues are sorted by
/// value, descending: positive modes, kernel, then negative modes.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorSpectrum<T> {
    pub values: Vec<T>,
    pub vectors: Mat<T>,
    pub labels: Vec<ModeLabel>,
    pub px: Vec<T>,
    pub py: Vec<T>,
}

impl<T: Real> OperatorSpectrum<T> {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn nx(&self) -> usize {
        self.px.len()
    }

    pub fn ny(&self) -> usize {
        self.py.len()
    }

    /// Index of the eigenpair with the given label.
    pub fn index_of(&self, label: ModeLabel) -> Option<usize> {
        self.labels.iter().position(|&l| l == label)
    }

    /// Marginal-weighted Gram matrix of the eigenvectors (the identity).
    pub fn gram(&self) -> Mat<T> {
        let weighted = Mat::from_fn(self.dim(), self.dim(), |a, i| {
            self.vectors[(a, i)] * self.weight(a)
        });
        &self.vectors.transpose() * &weighted
    }

    fn weight(&self, a: usize) -> T {
        let nx = self.nx();
        if a < nx {
            self.px[a]
        } else {
            self.py[a - nx]
        }
    }
}

/// Applies `A` to a function pair given as a length-`nx+ny` vector.
pub fn apply_operator<T: Real>(table: &JointTable<T>, f: &[T]) -> Result<Vec<T>> {
    let (nx, ny) = (table.nx(), table.ny());
    if f.len() != nx + ny {
        return Err(LabError::dim("operand length must be nx + ny"));
    }
    let mut out = vec![T::zero(); nx + ny];
    for x in 0..nx {
        for y in 0..ny {
            let p = table.prob(x, y);
            out[x] += p * f[nx + y] / table.px()[x];
            out[nx + y] += p * f[x] / table.py()[y];
        }
    }
    Ok(out)
}

pub fn operator_spectrum<T: Real>(cca: &CcaDecomposition<T>) -> OperatorSpectrum<T> {
    let (nx, ny, r) = (cca.nx(), cca.ny(), cca.rank());
    let d = nx + ny;
    let h = T::lit(0.5).sqrt();
    let sx: Vec<T> = cca.px.iter().map(|w| w.sqrt()).collect();
    let sy: Vec<T> = cca.py.iter().map(|w| w.sqrt()).collect();

    let whitened = |m: &Mat<T>, s: &[T]| -> Vec<Vec<T>> {
        (0..r)
            .map(|j| (0..s.len()).map(|a| m[(j, a)] * s[a]).collect())
            .collect()
    };
    let null_x = complete_basis(&whitened(&cca.psi, &sx), nx, nx - r);
    let null_y = complete_basis(&whitened(&cca.xi, &sy), ny, ny - r);

    let mut values = Vec::with_capacity(d);
    let mut labels = Vec::with_capacity(d);
    let mut cols: Vec<Vec<T>> = Vec::with_capacity(d);
    let pair = |j: usize, sign: T| -> Vec<T> {
        let mut v: Vec<T> = (0..nx).map(|x| cca.psi[(j, x)] * h).collect();
        v.extend((0..ny).map(|y| sign * cca.xi[(j, y)] * h));
        v
    };
    for j in 0..r {
        values.push(cca.c[j]);
        labels.push(ModeLabel::Positive(j));
        cols.push(pair(j, T::one()));
    }
    for b in &null_x {
        let mut v: Vec<T> = b.iter().zip(&sx).map(|(&e, &s)| e / s).collect();
        v.extend(std::iter::repeat_n(T::zero(), ny));
        values.push(T::zero());
        labels.push(ModeLabel::Null);
        cols.push(v);
    }
    for b in &null_y {
        let mut v = vec![T::zero(); nx];
        v.extend(b.iter().zip(&sy).map(|(&e, &s)| e / s));
        values.push(T::zero());
        labels.push(ModeLabel::Null);
        cols.push(v);
    }
    for j in (0..r).rev() {
        values.push(-cca.c[j]);
        labels.push(ModeLabel::Negative(j));
        cols.push(pair(j, -T::one()));
    }
    OperatorSpectrum {
        values,
        vectors: Mat::from_fn(d, d, |a, i| cols[i][a]),
        labels,
        px: cca.px.clone(),
        py: cca.py.clone(),
    }
}

/// Coordinates `w` (`k x d`) of an encoder pair in the eigenbasis of `A`,
/// together with the diagonal spectrum `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinatePoint<T> {
    pub w: Mat<T>,
    pub s: Vec<T>,
}

pub fn coordinates_of<T: Real>(
    w: &EncoderPair<T>,
    spec: &OperatorSpectrum<T>,
) -> Result<CoordinatePoint<T>> {
    let (nx, ny) = (spec.nx(), spec.ny());
    if w.nx() != nx || w.ny() != ny {
        return Err(LabError::dim(format!(
            "encoder domains {}/{} do not match spectrum {nx}/{ny}",
            w.nx(),
            w.ny()
        )));
    }
    let weighted = Mat::from_fn(w.k(), nx + ny, |p, a| {
        if a < nx {
            w.u[(p, a)] * spec.px[a]
        } else {
            w.v[(p, a - nx)] * spec.py[a - nx]
        }
    });
    Ok(CoordinatePoint {
        w: &weighted * &spec.vectors,
        s: spec.values.clone(),
    })
}

pub fn from_coordinates<T: Real>(
    point: &CoordinatePoint<T>,
    spec: &OperatorSpectrum<T>,
) -> Result<EncoderPair<T>> {
    let (nx, ny) = (spec.nx(), spec.ny());
    if point.w.cols() != nx + ny {
        return Err(LabError::dim(format!(
            "coordinate matrix has {} columns, expected {}",
            point.w.cols(),
            nx + ny
        )));
    }
    let full = &point.w * &spec.vectors.transpose();
    let k = point.w.rows();
    EncoderPair::new(
        Mat::from_fn(k, nx, |p, x| full[(p, x)]),
        Mat::from_fn(k, ny, |p, y| full[(p, nx + y)]),
    )
}

/// Principal angles between the row spans of `U` and `V` and the top-`r`
/// canonical subspaces.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrincipalAngles<T> {
    pub u: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> PrincipalAngles<T> {
    pub fn max(&self) -> T {
        self.u
            .iter()
            .chain(&self.v)
            .fold(T::zero(), |a, &b| a.max(b))
    }
}

pub fn principal_angles<T: Real>(
    w: &EncoderPair<T>,
    cca: &CcaDecomposition<T>,
    r: usize,
) -> Result<PrincipalAngles<T>> {
    if r > cca.rank() {
        return Err(LabError::Precondition(format!(
            "requested {r} directions but only {} canonical pairs exist",
            cca.rank()
        )));
    }
    if w.nx() != cca.nx() || w.ny() != cca.ny() {
        return Err(LabError::dim("encoder domains do not match the decomposition"));
    }
    Ok(PrincipalAngles {
        u: side_angles(&w.u, &cca.psi, &cca.px, r)?,
        v: side_angles(&w.v, &cca.xi, &cca.py, r)?,
    })
}

/// Angles `θ_i = atan2(sin_i, cos_i)` between `span(rows of m)` and the
/// first `r` rows of `dirs`, after whitening by `√weights`.
fn side_angles<T: Real>(m: &Mat<T>, dirs: &Mat<T>, weights: &[T], r: usize) -> Result<Vec<T>> {
    if r == 0 {
        return Ok(Vec::new());
    }
    let n = weights.len();
    let sw: Vec<T> = weights.iter().map(|w| w.sqrt()).collect();
    let span = Mat::from_fn(n, m.rows(), |a, p| m[(p, a)] * sw[a]);
    let target = Mat::from_fn(n, r, |a, j| dirs[(j, a)] * sw[a]);

    let dec = svd(&span)?;
    let rank = dec.rank(T::tol(1e-10));
    let basis = Mat::from_fn(n, rank, |a, j| dec.u[(a, j)]);

    let mut cos = if rank > 0 {
        svd(&(&basis.transpose() * &target))?.s
    } else {
        Vec::new()
    };
    cos.resize(r, T::zero());
    let resid = if rank > 0 {
        &target - &(&basis * &(&basis.transpose() * &target))
    } else {
        target
    };
    let mut sin = svd(&resid)?.s;
    sin.reverse();
    let half_pi = T::lit(std::f64::consts::FRAC_PI_2);
    Ok(cos
        .iter()
        .zip(&sin)
        .map(|(&c, &s)| s.atan2(c.min(T::one())).min(half_pi).max(T::zero()))
        .collect())
}
