//! Population-exact objectives and vector fields on a finite joint table.
//!
//! Encoders are tabular: `U` is `k x nx` with `U(x)` its column `x`, `V` is
//! `k x ny`. Every expectation is an exact weighted sum over table cells.
//!
//! Gradients and vector fields are returned in function space, i.e. as the
//! Riesz representers in `L²(P_X; R^k) x L²(P_Y; R^k)`. Multiplying column
//! `x` by `pX(x)` (see [`EncoderPair::weighted`]) yields the Euclidean
//! partial derivatives with respect to the table entries.

use crate::distributions::JointTable;
use crate::error::{LabError, Result};
use crate::matstack::{inverse_spd, sym_eig, Mat};
use crate::scalar::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Tabular encoder pair `W = (U, V)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderPair<T> {
    pub u: Mat<T>,
    pub v: Mat<T>,
}

impl<T: Real> EncoderPair<T> {
    pub fn new(u: Mat<T>, v: Mat<T>) -> Result<Self> {
        if u.rows() != v.rows() {
            return Err(LabError::dim(format!(
                "encoders have different feature dimensions {} and {}",
                u.rows(),
                v.rows()
            )));
        }
        Ok(EncoderPair { u, v })
    }

    pub fn zeros(k: usize, nx: usize, ny: usize) -> Self {
        EncoderPair {
            u: Mat::zeros(k, nx),
            v: Mat::zeros(k, ny),
        }
    }

    /// Entries i.i.d. uniform on `[-scale, scale]`.
    pub fn random(k: usize, nx: usize, ny: usize, scale: T, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| Mat::from_fn(k, n, |_, _| scale * T::lit(rng.random_range(-1.0..1.0)));
        let u = draw(nx);
        let v = draw(ny);
        EncoderPair { u, v }
    }

    pub fn k(&self) -> usize {
        self.u.rows()
    }

    pub fn nx(&self) -> usize {
        self.u.cols()
    }

    pub fn ny(&self) -> usize {
        self.v.cols()
    }

    pub fn check(&self, table: &JointTable<T>) -> Result<()> {
        if self.nx() != table.nx() || self.ny() != table.ny() || self.u.rows() != self.v.rows() {
            return Err(LabError::dim(format!(
                "encoder domains {}/{} do not match table {}x{}",
                self.nx(),
                self.ny(),
                table.nx(),
                table.ny()
            )));
        }
        if !self.is_finite() {
            return Err(LabError::Numerical("encoder has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }

    /// Marginal-weighted inner product `E<U,U'> + E<V,V'>`.
    pub fn inner(&self, other: &Self, table: &JointTable<T>) -> T {
        let mut s = T::zero();
        for p in 0..self.k() {
            for (x, &w) in table.px().iter().enumerate() {
                s += w * self.u[(p, x)] * other.u[(p, x)];
            }
            for (y, &w) in table.py().iter().enumerate() {
                s += w * self.v[(p, y)] * other.v[(p, y)];
            }
        }
        s
    }

    /// `‖U‖₂² + ‖V‖₂²` with `‖U‖₂² = E‖U(x)‖²`.
    pub fn norm_sq(&self, table: &JointTable<T>) -> T {
        self.inner(self, table)
    }

    pub fn norm(&self, table: &JointTable<T>) -> T {
        self.norm_sq(table).sqrt()
    }

    pub fn axpy(&self, a: T, other: &Self) -> Self {
        EncoderPair {
            u: self.u.axpy(a, &other.u),
            v: self.v.axpy(a, &other.v),
        }
    }

    pub fn scale(&self, a: T) -> Self {
        EncoderPair {
            u: self.u.scale(a),
            v: self.v.scale(a),
        }
    }

    /// Left-multiplies both encoders by a `k x k` matrix.
    pub fn transform(&self, r: &Mat<T>) -> Self {
        EncoderPair {
            u: r * &self.u,
            v: r * &self.v,
        }
    }

    /// Multiplies column `x` of `U` by `pX(x)` and column `y` of `V` by `pY(y)`.
    pub fn weighted(&self, table: &JointTable<T>) -> Self {
        self.column_scaled(table, |w| w)
    }

    /// Inverse of [`EncoderPair::weighted`].
    pub fn unweighted(&self, table: &JointTable<T>) -> Self {
        self.column_scaled(table, |w| T::one() / w)
    }

    fn column_scaled(&self, table: &JointTable<T>, f: impl Fn(T) -> T) -> Self {
        let px: Vec<T> = table.px().iter().map(|&w| f(w)).collect();
        let py: Vec<T> = table.py().iter().map(|&w| f(w)).collect();
        EncoderPair {
            u: Mat::from_fn(self.k(), self.nx(), |p, x| self.u[(p, x)] * px[x]),
            v: Mat::from_fn(self.k(), self.ny(), |p, y| self.v[(p, y)] * py[y]),
        }
    }

    /// `[U diag(√pX) | V diag(√pY)]`, a `k x (nx+ny)` matrix whose Euclidean
    /// geometry is the function-space geometry of `W`.
    pub fn whitened(&self, table: &JointTable<T>) -> Mat<T> {
        let nx = self.nx();
        Mat::from_fn(self.k(), nx + self.ny(), |p, i| {
            if i < nx {
                self.u[(p, i)] * table.px()[i].sqrt()
            } else {
                self.v[(p, i - nx)] * table.py()[i - nx].sqrt()
            }
        })
    }

    /// Singular values of `W` as an operator from the paired function space
    /// to `R^k`, non-increasing.
    pub fn singular_values(&self, table: &JointTable<T>) -> Result<Vec<T>> {
        let w = self.whitened(table);
        let gram = &w * &w.transpose();
        let e = sym_eig(&gram)?;
        Ok(e.values.into_iter().map(|x| x.max(T::zero()).sqrt()).collect())
    }

    /// Flattens `(U, V)` row-major, `U` first.
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = self.u.as_slice().to_vec();
        out.extend_from_slice(self.v.as_slice());
        out
    }

    pub fn from_flat(k: usize, nx: usize, ny: usize, flat: &[T]) -> Result<Self> {
        if flat.len() != k * (nx + ny) {
            return Err(LabError::dim("flat encoder length mismatch"));
        }
        Ok(EncoderPair {
            u: Mat::from_vec(k, nx, flat[..k * nx].to_vec())?,
            v: Mat::from_vec(k, ny, flat[k * nx..].to_vec())?,
        })
    }
}

/// Which dynamics a field or flow belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dynamics {
    /// Gradient flow of the predictor-trace objective (`κ = 0`).
    Peira,
    /// Stop-gradient self-distillation flow (`κ = 1`).
    Ssl,
}

impl Dynamics {
    pub fn kappa(self) -> u32 {
        match self {
            Dynamics::Peira => 0,
            Dynamics::Ssl => 1,
        }
    }

    pub fn from_kappa(kappa: u32) -> Result<Self> {
        match kappa {
            0 => Ok(Dynamics::Peira),
            1 => Ok(Dynamics::Ssl),
            _ => Err(LabError::domain(format!("kappa must be 0 or 1, got {kappa}"))),
        }
    }
}

/// Signal `Σ = E[VUᵀ + UVᵀ]` and noise `N = E[UUᵀ + VVᵀ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub sigma: Mat<T>,
    pub noise: Mat<T>,
}

impl<T: Real> Moments<T> {
    /// Moments of coordinates `w` with diagonal spectrum `s`:
    /// `Σ = w S wᵀ`, `N = w wᵀ`.
    pub fn from_coordinates(w: &Mat<T>, s: &[T]) -> Self {
        let ws = Mat::from_fn(w.rows(), w.cols(), |p, i| w[(p, i)] * s[i]);
        let wt = w.transpose();
        Moments {
            sigma: (&ws * &wt).symmetrize(),
            noise: (w * &wt).symmetrize(),
        }
    }
}

/// Optimal ridge predictor `P = Σ (N + λI)^{-1}` and `Q = (N + λI)^{-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor<T> {
    pub p: Mat<T>,
    pub q: Mat<T>,
    pub lambda: T,
}

pub(crate) fn check_lambda<T: Real>(lambda: T) -> Result<()> {
    if !(lambda > T::zero() && lambda < T::one()) {
        return Err(LabError::domain(format!("lambda must lie in (0, 1), got {lambda}")));
    }
    Ok(())
}

pub fn moments<T: Real>(w: &EncoderPair<T>, table: &JointTable<T>) -> Result<Moments<T>> {
    w.check(table)?;
    // C = Σ_{x,y} p(x,y) U(x) V(y)ᵀ = U P Vᵀ
    let c = &(&w.u * table.p()) * &w.v.transpose();
    let sigma = &c + &c.transpose();
    let uw = w.weighted(table);
    let noise = &(&uw.u * &w.u.transpose()) + &(&uw.v * &w.v.transpose());
    Ok(Moments {
        sigma: sigma.symmetrize(),
        noise: noise.symmetrize(),
    })
}

pub fn optimal_predictor<T: Real>(m: &Moments<T>, lambda: T) -> Result<Predictor<T>> {
    check_lambda(lambda)?;
    let q = inverse_spd(&m.noise, lambda)?;
    let p = &m.sigma * &q;
    Ok(Predictor { p, q, lambda })
}

/// `-½ Tr(P) + (λ/2) Tr(N)`, valid because `Tr N = ‖U‖₂² + ‖V‖₂²`.
pub fn peira_objective_from_moments<T: Real>(m: &Moments<T>, lambda: T) -> Result<T> {
    let pred = optimal_predictor(m, lambda)?;
    Ok(-T::lit(0.5) * pred.p.trace() + T::lit(0.5) * lambda * m.noise.trace())
}

pub fn peira_objective<T: Real>(w: &EncoderPair<T>, table: &JointTable<T>, lambda: T) -> Result<T> {
    check_lambda(lambda)?;
    let pred = optimal_predictor(&moments(w, table)?, lambda)?;
    let reg = T::lit(0.5) * lambda * w.norm_sq(table);
    Ok(-T::lit(0.5) * pred.p.trace() + reg)
}

/// Symmetric predictive objective for an arbitrary predictor `P`, with all
/// expectations as explicit sums over cells.
pub fn predictive_loss<T: Real>(
    p: &Mat<T>,
    w: &EncoderPair<T>,
    table: &JointTable<T>,
    lambda: T,
) -> Result<T> {
    w.check(table)?;
    let k = w.k();
    if p.shape() != (k, k) {
        return Err(LabError::dim("predictor must be k x k"));
    }
    let pu = p * &w.u;
    let pv = p * &w.v;
    let mut fit = T::zero();
    for x in 0..table.nx() {
        for y in 0..table.ny() {
            let pxy = table.prob(x, y);
            if pxy == T::zero() {
                continue;
            }
            let mut a = T::zero();
            let mut b = T::zero();
            for r in 0..k {
                let d1 = pu[(r, x)] - w.v[(r, y)];
                let d2 = pv[(r, y)] - w.u[(r, x)];
                a += d1 * d1;
                b += d2 * d2;
            }
            fit += pxy * (a + b);
        }
    }
    let half = T::lit(0.5);
    let pf = p.frobenius();
    Ok(half * fit + half * lambda * w.norm_sq(table) + half * lambda * pf * pf)
}

/// Residual objective: the predictive objective at the optimal predictor.
pub fn residual_objective<T: Real>(w: &EncoderPair<T>, table: &JointTable<T>, lambda: T) -> Result<T> {
    let pred = optimal_predictor(&moments(w, table)?, lambda)?;
    predictive_loss(&pred.p, w, table, lambda)
}

/// Residual objective expanded through the moments:
/// `½[Tr(PNPᵀ) − 2Tr(PΣ) + Tr N] + (λ/2)Tr N + (λ/2)‖P‖²`.
pub fn residual_objective_from_moments<T: Real>(m: &Moments<T>, lambda: T) -> Result<T> {
    let pred = optimal_predictor(m, lambda)?;
    let p = &pred.p;
    let pnp = (&(p * &m.noise) * &p.transpose()).trace();
    let ps = (p * &m.sigma).trace();
    let tn = m.noise.trace();
    let pf = p.frobenius();
    let half = T::lit(0.5);
    Ok(half * (pnp - T::lit(2.0) * ps + tn) + half * lambda * tn + half * lambda * pf * pf)
}

/// Auxiliary loss
/// `½E[Uᵀ Q(PU − V) + Vᵀ Q(PV − U)] + (λ/2)E[‖U‖² + ‖V‖²]`
/// for arbitrary `P`, `Q`.
pub fn aux_loss<T: Real>(
    w: &EncoderPair<T>,
    pred: &Predictor<T>,
    table: &JointTable<T>,
    lambda: T,
) -> Result<T> {
    w.check(table)?;
    let k = w.k();
    if pred.p.shape() != (k, k) || pred.q.shape() != (k, k) {
        return Err(LabError::dim("predictor matrices must be k x k"));
    }
    let qpu = &(&pred.q * &pred.p) * &w.u;
    let qpv = &(&pred.q * &pred.p) * &w.v;
    let qu = &pred.q.transpose() * &w.u;
    let qv = &pred.q * &w.v;
    let mut s = T::zero();
    for x in 0..table.nx() {
        for y in 0..table.ny() {
            let pxy = table.prob(x, y);
            if pxy == T::zero() {
                continue;
            }
            let mut term = T::zero();
            for r in 0..k {
                // U(x)ᵀQ(PU(x) − V(y)) + V(y)ᵀQ(PV(y) − U(x))
                term += w.u[(r, x)] * (qpu[(r, x)] - qv[(r, y)]);
                term += w.v[(r, y)] * (qpv[(r, y)] - qu[(r, x)]);
            }
            s += pxy * term;
        }
    }
    let half = T::lit(0.5);
    Ok(half * s + half * lambda * w.norm_sq(table))
}

/// Function-space gradient of the predictor-trace objective:
/// `∇_U(x) = ½(QP + PᵀQ)U(x) − Q E[V|x] + λU(x)` and symmetrically for `V`,
/// with `(P, Q)` frozen at the optimal predictor.
pub fn peira_gradient<T: Real>(
    w: &EncoderPair<T>,
    table: &JointTable<T>,
    lambda: T,
) -> Result<EncoderPair<T>> {
    let pred = optimal_predictor(&moments(w, table)?, lambda)?;
    Ok(aux_gradient(w, &pred, table, lambda))
}

/// Partial derivative of [`aux_loss`] in `(U, V)` with `(P, Q)` held fixed,
/// as a function-space field.
pub fn aux_gradient<T: Real>(
    w: &EncoderPair<T>,
    pred: &Predictor<T>,
    table: &JointTable<T>,
    lambda: T,
) -> EncoderPair<T> {
    let qp = &pred.q * &pred.p;
    let sym = (&qp + &qp.transpose()).scale(T::lit(0.5));
    let qs = pred.q.symmetrize();
    let (ubar, vbar) = conditional_means(w, table);
    let gu = (&sym * &w.u).axpy(-T::one(), &(&qs * &vbar)).axpy(lambda, &w.u);
    let gv = (&sym * &w.v).axpy(-T::one(), &(&qs * &ubar)).axpy(lambda, &w.v);
    EncoderPair { u: gu, v: gv }
}

/// `(E[U|y], E[V|x])` as `k x ny` and `k x nx` matrices.
fn conditional_means<T: Real>(w: &EncoderPair<T>, table: &JointTable<T>) -> (Mat<T>, Mat<T>) {
    // Σ_y p(x,y) V(y) = (V Pᵀ)[:, x]
    let vp = &w.v * &table.p().transpose();
    let up = &w.u * table.p();
    let vbar = Mat::from_fn(w.k(), table.nx(), |r, x| vp[(r, x)] / table.px()[x]);
    let ubar = Mat::from_fn(w.k(), table.ny(), |r, y| up[(r, y)] / table.py()[y]);
    (ubar, vbar)
}

/// Stop-gradient self-distillation field at the optimal predictor:
/// `F_U(x) = Pᵀ(PU(x) − E[V|x]) + λU(x)`, `F_V(y) = Pᵀ(PV(y) − E[U|y]) + λV(y)`.
pub fn ssl_vector_field<T: Real>(
    w: &EncoderPair<T>,
    table: &JointTable<T>,
    lambda: T,
) -> Result<EncoderPair<T>> {
    let pred = optimal_predictor(&moments(w, table)?, lambda)?;
    let pt = pred.p.transpose();
    let ptp = &pt * &pred.p;
    let (ubar, vbar) = conditional_means(w, table);
    let fu = (&ptp * &w.u).axpy(-T::one(), &(&pt * &vbar)).axpy(lambda, &w.u);
    let fv = (&ptp * &w.v).axpy(-T::one(), &(&pt * &ubar)).axpy(lambda, &w.v);
    Ok(EncoderPair { u: fu, v: fv })
}

/// Field driving a function-space flow `Ẇ = −field(W)`.
pub fn function_field<T: Real>(
    dynamics: Dynamics,
    w: &EncoderPair<T>,
    table: &JointTable<T>,
    lambda: T,
) -> Result<EncoderPair<T>> {
    match dynamics {
        Dynamics::Peira => peira_gradient(w, table, lambda),
        Dynamics::Ssl => ssl_vector_field(w, table, lambda),
    }
}

/// `(1/3)Tr((N+λI)³) − 1/(κ+1) Tr(Σ^{κ+1})`.
pub fn lyapunov_from_moments<T: Real>(m: &Moments<T>, dynamics: Dynamics, lambda: T) -> T {
    let k = m.noise.rows();
    let shifted = m.noise.axpy(lambda, &Mat::identity(k));
    let cube = (&(&shifted * &shifted) * &shifted).trace();
    let kappa = dynamics.kappa();
    let sig = m.sigma.powi(kappa + 1).trace();
    cube / T::lit(3.0) - sig / T::lit(f64::from(kappa + 1))
}

/// Lyapunov function in coordinates,
/// `(1/3)Tr((wwᵀ+λI)³) − 1/(κ+1) Tr((w S wᵀ)^{κ+1})`.
pub fn lyapunov<T: Real>(w: &Mat<T>, s: &[T], dynamics: Dynamics, lambda: T) -> T {
    lyapunov_from_moments(&Moments::from_coordinates(w, s), dynamics, lambda)
}

/// Gradient of [`lyapunov`]: `2(wwᵀ+λI)² w − 2(wSwᵀ)^κ w S`.
pub fn lyapunov_gradient<T: Real>(w: &Mat<T>, s: &[T], dynamics: Dynamics, lambda: T) -> Mat<T> {
    let k = w.rows();
    let shifted = (w * &w.transpose()).axpy(lambda, &Mat::identity(k));
    let first = &(&shifted * &shifted) * w;
    let ws = Mat::from_fn(w.rows(), w.cols(), |p, i| w[(p, i)] * s[i]);
    let second = match dynamics {
        Dynamics::Peira => ws,
        Dynamics::Ssl => &(&ws * &w.transpose()) * &ws,
    };
    (&first - &second).scale(T::lit(2.0))
}
