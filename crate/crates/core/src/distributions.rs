//! Finite joint distributions of two discrete views and i.i.d. sampling.

use crate::error::{LabError, Result};
use crate::matstack::Mat;
use crate::scalar::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Default cap on `nx * ny` for product constructions.
pub const DEFAULT_PRODUCT_CAP: usize = 4096;

/// Joint probability table `p(x, y)` over `nx * ny` cells with strictly
/// positive marginals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTable<T>", into = "RawTable<T>")]
#[serde(bound = "T: Real")]
pub struct JointTable<T: Real> {
    p: Mat<T>,
    px: Vec<T>,
    py: Vec<T>,
}

/// On-disk layout: `{ "nx": int, "ny": int, "p": [row-major] }`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(bound = "T: Real")]
pub struct RawTable<T: Real> {
    pub nx: usize,
    pub ny: usize,
    pub p: Vec<T>,
}

impl<T: Real> TryFrom<RawTable<T>> for JointTable<T> {
    type Error = LabError;
    fn try_from(raw: RawTable<T>) -> Result<Self> {
        JointTable::new(Mat::from_vec(raw.nx, raw.ny, raw.p)?)
    }
}

impl<T: Real> From<JointTable<T>> for RawTable<T> {
    fn from(t: JointTable<T>) -> Self {
        RawTable {
            nx: t.nx(),
            ny: t.ny(),
            p: t.p.into_vec(),
        }
    }
}

impl<T: Real> JointTable<T> {
    /// Validates and wraps an `nx x ny` probability matrix.
    pub fn new(p: Mat<T>) -> Result<Self> {
        let (nx, ny) = p.shape();
        if nx < 2 || ny < 2 {
            return Err(LabError::domain(format!(
                "joint table must be at least 2x2, got {nx}x{ny}"
            )));
        }
        if p.as_slice().iter().any(|&v| !v.is_finite() || v < T::zero()) {
            return Err(LabError::domain("joint table entries must be finite and >= 0"));
        }
        let total: T = p.as_slice().iter().copied().sum();
        if (total - T::one()).abs() > T::tol(1e-12) {
            return Err(LabError::domain(format!(
                "joint table must sum to 1, sums to {total}"
            )));
        }
        let px: Vec<T> = (0..nx).map(|x| p.row(x).iter().copied().sum()).collect();
        let py: Vec<T> = (0..ny).map(|y| (0..nx).map(|x| p[(x, y)]).sum()).collect();
        if px.iter().chain(&py).any(|&m| m <= T::zero()) {
            return Err(LabError::domain("all marginal probabilities must be positive"));
        }
        Ok(JointTable { p, px, py })
    }

    /// Renormalizes a nonnegative weight matrix and wraps it.
    pub fn from_weights(w: Mat<T>) -> Result<Self> {
        let total: T = w.as_slice().iter().copied().sum();
        if !(total > T::zero()) {
            return Err(LabError::domain("weights must have positive mass"));
        }
        JointTable::new(w.scale(T::one() / total))
    }

    pub fn nx(&self) -> usize {
        self.p.rows()
    }

    pub fn ny(&self) -> usize {
        self.p.cols()
    }

    /// Dimension of the paired function space, `nx + ny`.
    pub fn dim(&self) -> usize {
        self.nx() + self.ny()
    }

    pub fn p(&self) -> &Mat<T> {
        &self.p
    }

    #[inline]
    pub fn prob(&self, x: usize, y: usize) -> T {
        self.p[(x, y)]
    }

    pub fn px(&self) -> &[T] {
        &self.px
    }

    pub fn py(&self) -> &[T] {
        &self.py
    }

    /// `Q[x,y] = p(x,y) / sqrt(pX(x) pY(y))`.
    pub fn normalized(&self) -> Mat<T> {
        Mat::from_fn(self.nx(), self.ny(), |x, y| {
            self.p[(x, y)] / (self.px[x] * self.py[y]).sqrt()
        })
    }

    pub fn cast<U: Real>(&self) -> JointTable<U> {
        JointTable::from_weights(self.p.cast()).expect("cast preserves table validity")
    }
}

/// Symmetric binary channel with correlation `rho`.
pub fn make_two_state<T: Real>(rho: T) -> Result<JointTable<T>> {
    if !(rho.abs() < T::one()) {
        return Err(LabError::domain(format!("|rho| must be < 1, got {rho}")));
    }
    let q = T::lit(0.25);
    let same = (T::one() + rho) * q;
    let diff = (T::one() - rho) * q;
    JointTable::new(Mat::from_rows(&[[same, diff], [diff, same]])?)
}

/// Product of independent factors with the default size cap.
pub fn make_product<T: Real>(factors: &[JointTable<T>]) -> Result<JointTable<T>> {
    make_product_capped(factors, DEFAULT_PRODUCT_CAP)
}

/// Kronecker product of factor tables. Combined index of `(x1, x2)` is
/// `x1 * nx2 + x2`.
pub fn make_product_capped<T: Real>(factors: &[JointTable<T>], cap: usize) -> Result<JointTable<T>> {
    let (first, rest) = factors
        .split_first()
        .ok_or_else(|| LabError::domain("product of an empty factor list"))?;
    let mut cells = first.nx() * first.ny();
    for f in rest {
        cells = cells.saturating_mul(f.nx() * f.ny());
    }
    if cells > cap {
        return Err(LabError::Size(format!(
            "product table has {cells} cells, cap is {cap}"
        )));
    }
    let mut acc = first.p.clone();
    for f in rest {
        let (ax, ay) = acc.shape();
        let (bx, by) = f.p.shape();
        acc = Mat::from_fn(ax * bx, ay * by, |x, y| {
            acc[(x / bx, y / by)] * f.p[(x % bx, y % by)]
        });
    }
    JointTable::from_weights(acc)
}

/// Mixes `table` with weight `eps` of a random strictly positive table to
/// break exact ties in the canonical spectrum.
pub fn perturb_distinct<T: Real>(table: &JointTable<T>, eps: T, seed: u64) -> Result<JointTable<T>> {
    if eps < T::zero() || eps > T::lit(1e-2) {
        return Err(LabError::domain(format!(
            "perturbation weight must lie in [0, 1e-2], got {eps}"
        )));
    }
    if eps == T::zero() {
        return Ok(table.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nx, ny) = table.p.shape();
    let noise = Mat::from_fn(nx, ny, |_, _| T::lit(rng.random_range(0.05..1.0)));
    let total: T = noise.as_slice().iter().copied().sum();
    let noise = noise.scale(T::one() / total);
    let mixed = table.p.scale(T::one() - eps).axpy(eps, &noise);
    JointTable::from_weights(mixed)
}

/// I.i.d. index pairs drawn from a joint table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePairs {
    pub n: usize,
    pub xs: Vec<usize>,
    pub ys: Vec<usize>,
    pub seed: u64,
}

impl SamplePairs {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

/// Inverse-CDF sampling over the row-major flattened table.
pub fn sample<T: Real>(table: &JointTable<T>, n: usize, seed: u64) -> Result<SamplePairs> {
    if n == 0 {
        return Err(LabError::domain("sample count must be at least 1"));
    }
    let ny = table.ny();
    let mut cdf = Vec::with_capacity(table.nx() * ny);
    let mut acc = 0.0f64;
    for &v in table.p.as_slice() {
        acc += v.to_f64_lossy();
        cdf.push(acc);
    }
    let last_positive = table
        .p
        .as_slice()
        .iter()
        .rposition(|&v| v > T::zero())
        .unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random::<f64>() * acc;
        let cell = cdf.partition_point(|&c| c <= u).min(last_positive);
        xs.push(cell / ny);
        ys.push(cell % ny);
    }
    Ok(SamplePairs { n, xs, ys, seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_state_formula() {
        let t = make_two_state(0.6f64).unwrap();
        let expect = [[0.4, 0.1], [0.1, 0.4]];
        for x in 0..2 {
            for y in 0..2 {
                assert!((t.prob(x, y) - expect[x][y]).abs() < 1e-15);
            }
        }
        let t0 = make_two_state(0.0f64).unwrap();
        assert!(t0.p().as_slice().iter().all(|&v| v == 0.25));
        assert_eq!(t0.px(), &[0.5, 0.5]);
    }

    #[test]
    fn two_state_rejects_unit_correlation() {
        assert!(matches!(make_two_state(1.0f64), Err(LabError::Domain(_))));
        assert!(matches!(make_two_state(-1.2f64), Err(LabError::Domain(_))));
    }

    #[test]
    fn table_validation() {
        let bad_sum = Mat::from_rows(&[[0.5, 0.1], [0.1, 0.1]]).unwrap();
        assert!(JointTable::<f64>::new(bad_sum).is_err());
        let zero_marginal = Mat::from_rows(&[[0.5, 0.5], [0.0, 0.0]]).unwrap();
        assert!(JointTable::<f64>::new(zero_marginal).is_err());
        let negative = Mat::from_rows(&[[0.6, -0.1], [0.25, 0.25]]).unwrap();
        assert!(JointTable::<f64>::new(negative).is_err());
    }

    #[test]
    fn product_single_factor_is_identity() {
        let t = make_two_state(0.3f64).unwrap();
        assert_eq!(make_product(&[t.clone()]).unwrap(), t);
    }

    #[test]
    fn product_cap_enforced() {
        let t = make_two_state(0.3f64).unwrap();
        let many = vec![t; 7]; // 4^7 cells
        assert!(matches!(make_product(&many), Err(LabError::Size(_))));
        assert!(make_product::<f64>(&[]).is_err());
    }

    #[test]
    fn perturb_zero_is_identity_and_keeps_positivity() {
        let t = make_product(&[make_two_state(0.6f64).unwrap(), make_two_state(0.6).unwrap()]).unwrap();
        assert_eq!(perturb_distinct(&t, 0.0, 1).unwrap(), t);
        let p = perturb_distinct(&t, 1e-3, 1).unwrap();
        assert!(p.px().iter().chain(p.py()).all(|&m| m > 0.0));
        assert!(perturb_distinct(&t, 0.5, 1).is_err());
    }

    #[test]
    fn json_layout() {
        let t = make_two_state(0.6f64).unwrap();
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(s, r#"{"nx":2,"ny":2,"p":[0.4,0.1,0.1,0.4]}"#);
        let back: JointTable<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
        assert!(serde_json::from_str::<JointTable<f64>>(r#"{"nx":2,"ny":2,"p":[1,0,0]}"#).is_err());
        assert!(serde_json::from_str::<JointTable<f64>>(
            r#"{"nx":2,"ny":2,"p":[0.25,0.25,0.25,0.25],"extra":1}"#
        )
        .is_err());
    }

    #[test]
    fn point_mass_sampling() {
        // marginals must stay positive, so the "point mass" sits in a table
        // whose other cells are exactly zero but share rows/columns
        let p = Mat::from_rows(&[[0.0, 0.5], [0.5, 0.0]]).unwrap();
        let t = JointTable::<f64>::new(p).unwrap();
        let s = sample(&t, 500, 9).unwrap();
        assert!(s.xs.iter().zip(&s.ys).all(|(&x, &y)| x != y));
        let single = JointTable::new(Mat::from_rows(&[[0.0, 0.0, 1.0 / 3.0], [1.0 / 3.0, 1.0 / 3.0, 0.0]]).unwrap()).unwrap();
        let s = sample(&single, 2000, 2).unwrap();
        assert!(s.xs.iter().zip(&s.ys).all(|(&x, &y)| single.prob(x, y) > 0.0));
    }

    #[test]
    fn sampling_is_deterministic() {
        let t = make_two_state(0.6f64).unwrap();
        assert_eq!(sample(&t, 1000, 42).unwrap(), sample(&t, 1000, 42).unwrap());
        assert_ne!(sample(&t, 1000, 42).unwrap().xs, sample(&t, 1000, 43).unwrap().xs);
    }

    #[test]
    fn monte_carlo_correlation() {
        let t = make_two_state(0.6f64).unwrap();
        let s = sample(&t, 1_000_000, 5).unwrap();
        let sign = |i: usize| if i == 0 { 1.0 } else { -1.0 };
        let mean: f64 = s
            .xs
            .iter()
            .zip(&s.ys)
            .map(|(&x, &y)| sign(x) * sign(y))
            .sum::<f64>()
            / s.n as f64;
        assert!((mean - 0.6).abs() < 0.01, "E[xy] = {mean}");
    }
}
