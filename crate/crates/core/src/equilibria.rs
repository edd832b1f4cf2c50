//! Spectral filters, equilibrium constructors, closed-form Jacobian spectra
//! at critical points and stability classification.
//!
//! A critical point in coordinates has the form
//! `w = Σ_p √m_p q_p e_{i(p)}ᵀ`, where `q_p` is column `p` of an orthogonal
//! `k x k` rotation, `i(p)` is an eigen-index of `A` and `√m_p` is a filter
//! value of the matching eigenvalue.

use crate::cca::{exact_cca, from_coordinates, operator_spectrum, CcaDecomposition, ModeLabel, OperatorSpectrum};
use crate::distributions::JointTable;
use crate::error::{LabError, Result};
use crate::flows::coordinate_field;
use crate::matstack::{general_eigenvalues, Mat};
use crate::objectives::{check_lambda, Dynamics, EncoderPair};
use crate::scalar::Real;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Eigenvalues closer than this are treated as repeated.
pub const MIN_SPECTRAL_GAP: f64 = 1e-6;

/// Jacobian eigenvalues at or above this count as non-destabilizing.
pub const STABILITY_TOL: f64 = -1e-9;

/// `g(c, λ) = (√c − λ)₊^{1/2}`.
pub fn filter_g<T: Real>(c: T, lambda: T) -> T {
    (c.max(T::zero()).sqrt() - lambda).max(T::zero()).sqrt()
}

/// `f_ε(c, λ) = ½(|c| + ε√(c² − 4λ))` when `c² ≥ 4λ`, else `0`.
pub fn filter_f<T: Real>(c: T, lambda: T, branch: Branch) -> T {
    let disc = c * c - T::lit(4.0) * lambda;
    if disc < -T::tol(1e-12) * c * c {
        return T::zero();
    }
    let disc = disc.max(T::zero());
    let eps = match branch {
        Branch::Stable => T::one(),
        Branch::Unstable => -T::one(),
    };
    T::lit(0.5) * (c.abs() + eps * disc.sqrt())
}

/// Sign `ε` of the self-distillation filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// `f₁`
    Stable,
    /// `f₋₁`
    Unstable,
}

/// One eigen-direction of `A` occupied by a critical point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeSelection {
    pub mode: ModeLabel,
    pub branch: Branch,
}

impl ModeSelection {
    pub fn positive(j: usize) -> Self {
        ModeSelection {
            mode: ModeLabel::Positive(j),
            branch: Branch::Stable,
        }
    }

    pub fn negative(j: usize) -> Self {
        ModeSelection {
            mode: ModeLabel::Negative(j),
            branch: Branch::Stable,
        }
    }

    pub fn with_branch(self, branch: Branch) -> Self {
        ModeSelection { branch, ..self }
    }
}

/// A critical point: dynamics, regularization, occupied modes and rotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Real")]
pub struct EquilibriumSpec<T> {
    pub dynamics: Dynamics,
    pub lambda: T,
    pub modes: Vec<ModeSelection>,
    #[serde(with = "rotation_serde")]
    pub rotation: Mat<T>,
}

mod rotation_serde {
    use crate::matstack::Mat;
    use crate::scalar::Real;
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<T: Real, S: Serializer>(m: &Mat<T>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<T>> = (0..m.rows()).map(|i| m.row(i).to_vec()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, T: Real, D: Deserializer<'de>>(d: D) -> Result<Mat<T>, D::Error> {
        let rows: Vec<Vec<T>> = Vec::deserialize(d)?;
        Mat::from_rows(&rows).map_err(D::Error::custom)
    }
}

impl<T: Real> EquilibriumSpec<T> {
    /// Spec with identity rotation in `R^k`.
    pub fn new(dynamics: Dynamics, lambda: T, k: usize, modes: Vec<ModeSelection>) -> Self {
        EquilibriumSpec {
            dynamics,
            lambda,
            modes,
            rotation: Mat::identity(k),
        }
    }

    pub fn k(&self) -> usize {
        self.rotation.rows()
    }

    /// Compact label such as `{+1,-2*}` (1-based canonical indices, `*` marks
    /// the unstable branch).
    pub fn describe(&self) -> String {
        let parts: Vec<String> = self
            .modes
            .iter()
            .map(|m| {
                let star = if m.branch == Branch::Unstable { "*" } else { "" };
                match m.mode {
                    ModeLabel::Positive(j) => format!("+{}{star}", j + 1),
                    ModeLabel::Negative(j) => format!("-{}{star}", j + 1),
                    ModeLabel::Null => format!("0{star}"),
                }
            })
            .collect();
        format!("{{{}}}", parts.join(","))
    }
}

impl<T: Real> fmt::Display for EquilibriumSpec<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "kappa={} {}", self.dynamics.kappa(), self.describe())
    }
}

/// A spec resolved against a spectrum: eigen-indices `i(p)` in increasing
/// order and the matching `m_{i(p)}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedSpec<T> {
    pub support: Vec<usize>,
    pub m: Vec<T>,
}

/// Checks a spec against a spectrum and computes `(i(p), m_{i(p)})`.
pub fn resolve<T: Real>(spec: &EquilibriumSpec<T>, spectrum: &OperatorSpectrum<T>) -> Result<ResolvedSpec<T>> {
    check_lambda(spec.lambda)?;
    let k = spec.k();
    if !spec.rotation.is_square() {
        return Err(LabError::dim("rotation must be square"));
    }
    let orth = &(&spec.rotation.transpose() * &spec.rotation) - &Mat::identity(k);
    if orth.max_abs() > T::tol(1e-12) {
        return Err(LabError::domain(format!(
            "rotation is not orthogonal (deviation {:e})",
            orth.max_abs()
        )));
    }
    if spec.modes.len() > k {
        return Err(LabError::domain(format!(
            "{} modes exceed feature dimension {k}",
            spec.modes.len()
        )));
    }
    let mut pairs = Vec::with_capacity(spec.modes.len());
    for sel in &spec.modes {
        if sel.mode == ModeLabel::Null {
            return Err(LabError::domain("kernel directions cannot carry an equilibrium mode"));
        }
        let i = spectrum
            .index_of(sel.mode)
            .ok_or_else(|| LabError::domain(format!("mode {:?} is out of range", sel.mode)))?;
        if pairs.iter().any(|&(j, _)| j == i) {
            return Err(LabError::domain(format!("mode {:?} selected twice", sel.mode)));
        }
        let s = spectrum.values[i];
        let root = match spec.dynamics {
            Dynamics::Peira => {
                if matches!(sel.mode, ModeLabel::Negative(_)) {
                    return Err(LabError::domain("the PEIRA flow has no critical points on negative modes"));
                }
                filter_g(s, spec.lambda)
            }
            Dynamics::Ssl => filter_f(s, spec.lambda, sel.branch),
        };
        if !(root > T::zero()) {
            return Err(LabError::domain(format!(
                "mode {:?} is removed by the spectral filter at lambda = {}",
                sel.mode, spec.lambda
            )));
        }
        pairs.push((i, root * root));
    }
    pairs.sort_by_key(|&(i, _)| i);
    Ok(ResolvedSpec {
        support: pairs.iter().map(|p| p.0).collect(),
        m: pairs.iter().map(|p| p.1).collect(),
    })
}

/// Coordinates `w = Q w₀ M^{1/2}` of the critical point described by `spec`.
pub fn equilibrium_coordinates<T: Real>(spec: &EquilibriumSpec<T>, spectrum: &OperatorSpectrum<T>) -> Result<Mat<T>> {
    let res = resolve(spec, spectrum)?;
    let k = spec.k();
    let mut w0 = Mat::zeros(k, spectrum.dim());
    for (p, (&i, &m)) in res.support.iter().zip(&res.m).enumerate() {
        w0[(p, i)] = m.sqrt();
    }
    Ok(&spec.rotation * &w0)
}

/// The critical point as a tabular encoder pair.
pub fn build_equilibrium<T: Real>(cca: &CcaDecomposition<T>, spec: &EquilibriumSpec<T>) -> Result<EncoderPair<T>> {
    let spectrum = operator_spectrum(cca);
    let w = equilibrium_coordinates(spec, &spectrum)?;
    from_coordinates(
        &crate::cca::CoordinatePoint {
            w,
            s: spectrum.values.clone(),
        },
        &spectrum,
    )
}

/// `r_max = max{ i ≤ min(k, R) : √c_i > λ }`.
pub fn r_max<T: Real>(c: &[T], lambda: T, k: usize) -> usize {
    c.iter().take(k).take_while(|&&ci| ci.sqrt() > lambda).count()
}

/// Optimal PEIRA value `−½ Σ_{i ≤ r_max} (√c_i − λ)²`.
pub fn optimal_value<T: Real>(c: &[T], lambda: T, k: usize) -> Result<T> {
    check_lambda(lambda)?;
    let r = r_max(c, lambda, k);
    Ok(-T::lit(0.5) * c[..r].iter().map(|&ci| (ci.sqrt() - lambda).powi(2)).sum::<T>())
}

/// Which branch of the Jacobian case table produced an eigenvalue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianCase {
    /// `j ∉ I_sup`, `p > r`: `1 − λ⁻² s_j 𝟙[κ=0]`.
    Free,
    /// `j ∉ I_sup`, `p ≤ r`: `δ_{p,j}`.
    Cross,
    /// `j = i(p)`: `4m/(m+λ) − 2·𝟙[κ=1]`.
    Diagonal,
    /// `j = i(p') > i(p)`: `γ_{p,p'}`.
    Pair,
    /// Rotational degeneracy inside the occupied subspace.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JacobianEntry<T> {
    pub p: usize,
    pub j: usize,
    pub mu: T,
    pub case: JacobianCase,
}

/// All `k·d` eigenvalues `μ_{p,j}` of the Jacobian of `F^κ` at a critical point.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianSpectrum<T> {
    pub entries: Vec<JacobianEntry<T>>,
    pub min_eigenvalue: T,
    pub stable: bool,
}

impl<T: Real> JacobianSpectrum<T> {
    pub fn witness(&self) -> Option<JacobianEntry<T>> {
        if self.stable {
            return None;
        }
        self.entries
            .iter()
            .copied()
            .min_by(|a, b| a.mu.partial_cmp(&b.mu).unwrap_or(std::cmp::Ordering::Equal))
    }

    pub fn sorted_values(&self) -> Vec<T> {
        let mut v: Vec<T> = self.entries.iter().map(|e| e.mu).collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        v
    }
}

/// Refuses spectra whose nonzero eigenvalues are not separated.
pub fn check_distinct<T: Real>(values: &[T]) -> Result<()> {
    let mut nz: Vec<T> = values.iter().copied().filter(|v| v.abs() > T::tol(1e-12)).collect();
    nz.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    for w in nz.windows(2) {
        if w[1] - w[0] <= T::lit(MIN_SPECTRAL_GAP) {
            return Err(LabError::Precondition(format!(
                "nonzero eigenvalues {} and {} are not distinct",
                w[0], w[1]
            )));
        }
    }
    Ok(())
}

/// Closed-form Jacobian eigenvalues at the critical point described by
/// `spec`, for the eigenvalues `s` of `A`.
pub fn jacobian_spectrum_closed_form<T: Real>(
    spec: &EquilibriumSpec<T>,
    spectrum: &OperatorSpectrum<T>,
) -> Result<JacobianSpectrum<T>> {
    check_distinct(&spectrum.values)?;
    let res = resolve(spec, spectrum)?;
    let s = &spectrum.values;
    let lambda = spec.lambda;
    let k = spec.k();
    let r = res.support.len();
    let ssl = spec.dynamics == Dynamics::Ssl;
    let two = T::lit(2.0);
    let kappa = T::lit(f64::from(spec.dynamics.kappa()));

    let mut entries = Vec::with_capacity(k * s.len());
    for p in 0..k {
        for (j, &sj) in s.iter().enumerate() {
            let occupant = res.support.iter().position(|&i| i == j);
            let (mu, case) = match occupant {
                None if p >= r => {
                    let mu = if ssl { T::one() } else { T::one() - sj / (lambda * lambda) };
                    (mu, JacobianCase::Free)
                }
                None => {
                    let (si, m) = (s[res.support[p]], res.m[p]);
                    let factor = if ssl { m * si } else { T::one() };
                    ((si - sj) / (lambda * (m + lambda)) * factor, JacobianCase::Cross)
                }
                Some(q) if q == p => {
                    let m = res.m[p];
                    let shift = if ssl { two } else { T::zero() };
                    (T::lit(4.0) * m / (m + lambda) - shift, JacobianCase::Diagonal)
                }
                Some(q) if p < r && q > p => {
                    let (si, mi) = (s[res.support[p]], res.m[p]);
                    let (sq, mq) = (sj, res.m[q]);
                    let e = (kappa + T::one()) / two;
                    let h = kappa / two;
                    let mut num = si.abs().powf(e) * mi.powf(h) + sq.abs().powf(e) * mq.powf(h);
                    if ssl {
                        num -= si * sq;
                    }
                    ((mi + mq) * num / ((mi + lambda) * (mq + lambda)), JacobianCase::Pair)
                }
                Some(_) => (T::zero(), JacobianCase::Zero),
            };
            entries.push(JacobianEntry { p, j, mu, case });
        }
    }
    let min_eigenvalue = entries.iter().map(|e| e.mu).fold(T::infinity(), T::min);
    Ok(JacobianSpectrum {
        stable: min_eigenvalue >= T::lit(STABILITY_TOL),
        min_eigenvalue,
        entries,
    })
}

/// Central-difference Jacobian of `F^κ` at a critical point `w0`, with step
/// `1e-5 (1 + ‖w0‖)`. Rows and columns follow the row-major flattening of
/// `w`.
pub fn jacobian_fd<T: Real>(
    w0: &Mat<T>,
    s: &[T],
    dynamics: Dynamics,
    lambda: T,
) -> Result<Mat<T>> {
    let f0 = coordinate_field(w0, s, dynamics, lambda)?;
    if f0.frobenius() >= T::tol(1e-9) {
        return Err(LabError::Precondition(format!(
            "point is not critical (field norm {:e})",
            f0.frobenius()
        )));
    }
    let n = w0.rows() * w0.cols();
    let h = T::lit(1e-5) * (T::one() + w0.frobenius());
    let mut jac = Mat::zeros(n, n);
    for col in 0..n {
        let mut plus = w0.clone();
        let mut minus = w0.clone();
        plus.as_mut_slice()[col] += h;
        minus.as_mut_slice()[col] -= h;
        let fp = coordinate_field(&plus, s, dynamics, lambda)?;
        let fm = coordinate_field(&minus, s, dynamics, lambda)?;
        for row in 0..n {
            jac[(row, col)] = (fp.as_slice()[row] - fm.as_slice()[row]) / (h + h);
        }
    }
    Ok(jac)
}

/// Real parts of the eigenvalues of [`jacobian_fd`], ascending.
pub fn jacobian_fd_spectrum<T: Real>(w0: &Mat<T>, s: &[T], dynamics: Dynamics, lambda: T) -> Result<Vec<T>> {
    let jac = jacobian_fd(w0, s, dynamics, lambda)?;
    let mut re: Vec<T> = general_eigenvalues(&jac)?.into_iter().map(|(r, _)| r).collect();
    re.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    Ok(re)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Stable,
    Unstable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Witness<T> {
    pub p: usize,
    pub j: usize,
    pub mu: T,
    pub case: JacobianCase,
}

/// Classification record, serialized as
/// `{spec, verdict, min_mu, witness: {p, j, mu, case} | null}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "T: Real")]
pub struct StabilityReport<T> {
    pub spec: EquilibriumSpec<T>,
    pub verdict: Verdict,
    pub min_mu: T,
    pub witness: Option<Witness<T>>,
}

/// Closed-form stability verdict with a negative-eigenvalue witness.
pub fn classify_stability<T: Real>(spec: &EquilibriumSpec<T>, cca: &CcaDecomposition<T>) -> Result<StabilityReport<T>> {
    classify_against(spec, &operator_spectrum(cca))
}

pub fn classify_against<T: Real>(spec: &EquilibriumSpec<T>, spectrum: &OperatorSpectrum<T>) -> Result<StabilityReport<T>> {
    let jac = jacobian_spectrum_closed_form(spec, spectrum)?;
    Ok(StabilityReport {
        spec: spec.clone(),
        verdict: if jac.stable { Verdict::Stable } else { Verdict::Unstable },
        min_mu: jac.min_eigenvalue,
        witness: jac.witness().map(|e| Witness {
            p: e.p,
            j: e.j,
            mu: e.mu,
            case: e.case,
        }),
    })
}

/// Stable families as characterized directly: for `κ = 0` exactly the
/// top-`r_max` positive modes; for `κ = 1` any top-`r⁺` positive plus
/// bottom-`r⁻` negative modes, all on the stable branch.
pub fn predicted_stable<T: Real>(spec: &EquilibriumSpec<T>, cca: &CcaDecomposition<T>) -> bool {
    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for sel in &spec.modes {
        match sel.mode {
            ModeLabel::Positive(j) => pos.push(j),
            ModeLabel::Negative(j) => neg.push(j),
            ModeLabel::Null => return false,
        }
    }
    pos.sort_unstable();
    neg.sort_unstable();
    let prefix = |v: &[usize]| v.iter().enumerate().all(|(a, &b)| a == b);
    match spec.dynamics {
        Dynamics::Peira => {
            let r = r_max(&cca.c, spec.lambda, spec.k());
            neg.is_empty() && pos.len() == r && prefix(&pos)
        }
        Dynamics::Ssl => {
            let floor = T::lit(2.0) * spec.lambda.sqrt();
            spec.modes.iter().all(|m| m.branch == Branch::Stable)
                && prefix(&pos)
                && prefix(&neg)
                && pos.iter().chain(&neg).all(|&j| cca.c[j] >= floor)
                && pos.len() + neg.len() <= spec.k()
        }
    }
}

/// Every spec with at most `k` modes whose filter value is positive, with
/// identity rotation. For `κ = 1` each mode appears on both branches unless
/// they coincide.
pub fn enumerate_specs<T: Real>(cca: &CcaDecomposition<T>, dynamics: Dynamics, lambda: T, k: usize) -> Vec<EquilibriumSpec<T>> {
    let mut choices: Vec<Vec<ModeSelection>> = Vec::new();
    for (j, &c) in cca.c.iter().enumerate() {
        match dynamics {
            Dynamics::Peira => {
                if filter_g(c, lambda) > T::zero() {
                    choices.push(vec![ModeSelection::positive(j)]);
                }
            }
            Dynamics::Ssl => {
                for base in [ModeSelection::positive(j), ModeSelection::negative(j)] {
                    let stable = filter_f(c, lambda, Branch::Stable);
                    let unstable = filter_f(c, lambda, Branch::Unstable);
                    let mut opts = Vec::new();
                    if stable > T::zero() {
                        opts.push(base);
                    }
                    if unstable > T::zero() && unstable != stable {
                        opts.push(base.with_branch(Branch::Unstable));
                    }
                    if !opts.is_empty() {
                        choices.push(opts);
                    }
                }
            }
        }
    }
    let mut out = Vec::new();
    let mut current = Vec::new();
    fn recurse<T: Real>(
        choices: &[Vec<ModeSelection>],
        start: usize,
        k: usize,
        current: &mut Vec<ModeSelection>,
        out: &mut Vec<EquilibriumSpec<T>>,
        make: &dyn Fn(Vec<ModeSelection>) -> EquilibriumSpec<T>,
    ) {
        out.push(make(current.clone()));
        if current.len() == k {
            return;
        }
        for idx in start..choices.len() {
            for &sel in &choices[idx] {
                current.push(sel);
                recurse(choices, idx + 1, k, current, out, make);
                current.pop();
            }
        }
    }
    let make = |modes| EquilibriumSpec::new(dynamics, lambda, k, modes);
    recurse(&choices, 0, k, &mut current, &mut out, &make);
    out
}

/// Closed form, finite-difference and rule-based assessments of one spec.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "T: Real")]
pub struct StabilityComparison<T> {
    pub report: StabilityReport<T>,
    pub min_mu_fd: T,
    /// Largest deviation between sorted closed-form and finite-difference
    /// eigenvalues.
    pub max_deviation: T,
    pub predicted_stable: bool,
}

impl<T: Real> StabilityComparison<T> {
    /// Closed form, finite differences and the rule all agree.
    pub fn agreement(&self, tol: T) -> bool {
        let closed = self.report.verdict == Verdict::Stable;
        let fd = self.min_mu_fd >= T::lit(STABILITY_TOL) - tol;
        self.max_deviation <= tol && closed == self.predicted_stable && (closed == fd || self.min_mu_fd.abs() <= tol)
    }
}

pub fn compare_stability<T: Real>(
    spec: &EquilibriumSpec<T>,
    cca: &CcaDecomposition<T>,
    spectrum: &OperatorSpectrum<T>,
) -> Result<StabilityComparison<T>> {
    let report = classify_against(spec, spectrum)?;
    let closed = jacobian_spectrum_closed_form(spec, spectrum)?.sorted_values();
    let w = equilibrium_coordinates(spec, spectrum)?;
    let fd = jacobian_fd_spectrum(&w, &spectrum.values, spec.dynamics, spec.lambda)?;
    let max_deviation = closed
        .iter()
        .zip(&fd)
        .map(|(a, b)| (*a - *b).abs())
        .fold(T::zero(), T::max);
    Ok(StabilityComparison {
        min_mu_fd: fd.first().copied().unwrap_or(T::zero()),
        max_deviation,
        predicted_stable: predicted_stable(spec, cca),
        report,
    })
}

/// Convenience: decomposition and spectrum of a table in one call.
pub fn spectral_setup<T: Real>(table: &JointTable<T>) -> Result<(CcaDecomposition<T>, OperatorSpectrum<T>)> {
    let cca = exact_cca(table)?;
    let spectrum = operator_spectrum(&cca);
    Ok((cca, spectrum))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cca::coordinates_of;
    use crate::distributions::{make_product, make_two_state};
    use crate::objectives::{aux_loss, moments, optimal_predictor, peira_gradient, peira_objective, ssl_vector_field};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_state() -> (JointTable<f64>, CcaDecomposition<f64>, OperatorSpectrum<f64>) {
        let t = make_two_state(0.6f64).unwrap();
        let (c, s) = spectral_setup(&t).unwrap();
        (t, c, s)
    }

    fn four_mode() -> (JointTable<f64>, CcaDecomposition<f64>, OperatorSpectrum<f64>) {
        let t = make_product(&[make_two_state(0.8f64).unwrap(), make_two_state(0.5).unwrap()]).unwrap();
        let (c, s) = spectral_setup(&t).unwrap();
        (t, c, s)
    }

    fn random_rotation(k: usize, seed: u64) -> Mat<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Mat::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
        let mut cols: Vec<Vec<f64>> = Vec::new();
        for j in 0..k {
            let mut v = m.col(j);
            for _ in 0..2 {
                for c in &cols {
                    let d: f64 = c.iter().zip(&v).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(c).for_each(|(x, y)| *x -= d * y);
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            cols.push(v.into_iter().map(|x| x / n).collect());
        }
        Mat::from_fn(k, k, |i, j| cols[j][i])
    }

    #[test]
    fn filter_examples() {
        assert_eq!(filter_g(0.04, 0.2), 0.0);
        assert!((filter_g(1.0f64, 0.2) - 0.894427).abs() < 1e-6);
        let want = (0.6f64.sqrt() - 0.2).sqrt();
        assert!((filter_g(0.6, 0.2) - want).abs() < 1e-15);
        assert!((filter_g(0.6f64, 0.2) - 0.758022).abs() < 1e-6);
        let c = 2.0 * 0.05f64.sqrt();
        assert!((filter_f(c, 0.05, Branch::Stable) - c / 2.0).abs() < 1e-12);
        assert!((filter_f(c, 0.05, Branch::Unstable) - c / 2.0).abs() < 1e-12);
        assert!((filter_f(0.6f64, 0.05, Branch::Stable) - 0.5).abs() < 1e-12);
        assert!((filter_f(0.6f64, 0.05, Branch::Unstable) - 0.1).abs() < 1e-12);
        assert_eq!(filter_f(0.3, 0.05, Branch::Stable), 0.0);
        assert!((filter_f(-0.6f64, 0.05, Branch::Stable) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn optimal_value_examples() {
        let c = [1.0, 0.6];
        let want = -0.5 * (0.8f64.powi(2) + (0.6f64.sqrt() - 0.2).powi(2));
        assert!((optimal_value(&c, 0.2, 2).unwrap() - want).abs() < 1e-15);
        assert!((optimal_value(&c, 0.2, 2).unwrap() + 0.485081).abs() < 1e-6);
        assert!((optimal_value(&c, 0.2, 1).unwrap() + 0.32).abs() < 1e-15);
        assert_eq!(optimal_value(&[0.01], 0.2, 1).unwrap(), 0.0);
    }

    #[test]
    fn empty_spec_is_zero() {
        let (_, cca, _) = two_state();
        let w = build_equilibrium(&cca, &EquilibriumSpec::new(Dynamics::Ssl, 0.1, 2, vec![])).unwrap();
        assert_eq!(w.u.max_abs() + w.v.max_abs(), 0.0);
    }

    #[test]
    fn peira_top_two_equilibrium_is_critical_and_optimal() {
        let (t, cca, _) = two_state();
        let spec = EquilibriumSpec::new(
            Dynamics::Peira,
            0.2,
            2,
            vec![ModeSelection::positive(0), ModeSelection::positive(1)],
        );
        let w = build_equilibrium(&cca, &spec).unwrap();
        assert!(peira_gradient(&w, &t, 0.2).unwrap().norm(&t) < 1e-10);
        let opt = optimal_value(&cca.c, 0.2, 2).unwrap();
        assert!((peira_objective(&w, &t, 0.2).unwrap() - opt).abs() < 1e-12);
        let pred = optimal_predictor(&moments(&w, &t).unwrap(), 0.2).unwrap();
        assert!(aux_loss(&w, &pred, &t, 0.2).unwrap().abs() < 1e-10);
    }

    #[test]
    fn ssl_equilibrium_is_critical() {
        let (t, cca, _) = two_state();
        for branch in [Branch::Stable, Branch::Unstable] {
            let spec = EquilibriumSpec::new(Dynamics::Ssl, 0.05, 2, vec![ModeSelection::positive(1).with_branch(branch)]);
            let w = build_equilibrium(&cca, &spec).unwrap();
            assert!(ssl_vector_field(&w, &t, 0.05).unwrap().norm(&t) < 1e-10);
        }
        let spec = EquilibriumSpec {
            rotation: random_rotation(3, 4),
            ..EquilibriumSpec::new(
                Dynamics::Ssl,
                0.05,
                3,
                vec![ModeSelection::positive(0), ModeSelection::negative(1), ModeSelection::negative(0)],
            )
        };
        let w = build_equilibrium(&cca, &spec).unwrap();
        assert!(ssl_vector_field(&w, &t, 0.05).unwrap().norm(&t) < 1e-10);
    }

    #[test]
    fn every_enumerated_spec_is_critical() {
        let (t, cca, spectrum) = four_mode();
        for (dynamics, lambda) in [(Dynamics::Peira, 0.2), (Dynamics::Ssl, 0.05)] {
            for spec in enumerate_specs(&cca, dynamics, lambda, 2) {
                let w = build_equilibrium(&cca, &spec).unwrap();
                let f = crate::objectives::function_field(dynamics, &w, &t, lambda).unwrap();
                assert!(f.norm(&t) < 1e-9, "{spec}");
                let c = coordinates_of(&w, &spectrum).unwrap();
                let fc = coordinate_field(&c.w, &c.s, dynamics, lambda).unwrap();
                assert!(fc.frobenius() < 1e-9);
            }
        }
    }

    #[test]
    fn spec_validation_errors() {
        let (_, cca, spectrum) = two_state();
        let too_many = EquilibriumSpec::new(
            Dynamics::Peira,
            0.2,
            1,
            vec![ModeSelection::positive(0), ModeSelection::positive(1)],
        );
        assert!(matches!(build_equilibrium(&cca, &too_many), Err(LabError::Domain(_))));
        let missing = EquilibriumSpec::new(Dynamics::Peira, 0.2, 2, vec![ModeSelection::positive(5)]);
        assert!(build_equilibrium(&cca, &missing).is_err());
        let twice = EquilibriumSpec::new(Dynamics::Peira, 0.2, 2, vec![ModeSelection::positive(0); 2]);
        assert!(build_equilibrium(&cca, &twice).is_err());
        let negative = EquilibriumSpec::new(Dynamics::Peira, 0.2, 2, vec![ModeSelection::negative(0)]);
        assert!(resolve(&negative, &spectrum).is_err());
        let mut skew = EquilibriumSpec::new(Dynamics::Ssl, 0.05, 2, vec![]);
        skew.rotation[(0, 1)] = 0.1;
        assert!(resolve(&skew, &spectrum).is_err());
    }

    #[test]
    fn closed_form_examples() {
        let (_, cca, spectrum) = two_state();
        let zero_ssl = jacobian_spectrum_closed_form(&EquilibriumSpec::new(Dynamics::Ssl, 0.2, 2, vec![]), &spectrum).unwrap();
        assert!(zero_ssl.stable);
        assert!(zero_ssl.entries.iter().all(|e| e.mu == 1.0 || e.mu == 0.0));
        let zero_peira = classify_stability(&EquilibriumSpec::new(Dynamics::Peira, 0.2, 2, vec![]), &cca).unwrap();
        assert_eq!(zero_peira.verdict, Verdict::Unstable);
        assert!((zero_peira.min_mu + 24.0).abs() < 1e-12);
        let bad_branch = EquilibriumSpec::new(
            Dynamics::Ssl,
            0.05,
            2,
            vec![ModeSelection::positive(1).with_branch(Branch::Unstable)],
        );
        let jac = jacobian_spectrum_closed_form(&bad_branch, &spectrum).unwrap();
        let diag = jac.entries.iter().find(|e| e.case == JacobianCase::Diagonal).unwrap();
        assert!((diag.mu + 4.0 / 3.0).abs() < 1e-12);
        assert!(!jac.stable);
        assert_eq!(jac.entries.len(), 2 * 4);
    }

    #[test]
    fn skipping_the_top_mode_is_unstable_via_cross_term() {
        let (_, cca, spectrum) = two_state();
        let spec = EquilibriumSpec::new(Dynamics::Peira, 0.2, 2, vec![ModeSelection::positive(1)]);
        let rep = classify_stability(&spec, &cca).unwrap();
        assert_eq!(rep.verdict, Verdict::Unstable);
        let jac = jacobian_spectrum_closed_form(&spec, &spectrum).unwrap();
        let top = spectrum.index_of(ModeLabel::Positive(0)).unwrap();
        let cross = jac.entries.iter().find(|e| e.p == 0 && e.j == top).unwrap();
        assert_eq!(cross.case, JacobianCase::Cross);
        assert!(cross.mu < 0.0);
        let json = serde_json::to_value(&rep).unwrap();
        assert_eq!(json["verdict"], "unstable");
        assert!(json["witness"]["mu"].as_f64().unwrap() < 0.0);
    }

    #[test]
    fn closed_form_matches_finite_differences() {
        let (_, cca, spectrum) = two_state();
        let mut specs = enumerate_specs(&cca, Dynamics::Peira, 0.2, 2);
        specs.extend(enumerate_specs(&cca, Dynamics::Ssl, 0.05, 2));
        for spec in &specs {
            let cmp = compare_stability(spec, &cca, &spectrum).unwrap();
            assert!(cmp.max_deviation < 1e-4, "{spec}: {}", cmp.max_deviation);
            assert!(cmp.agreement(1e-4), "{spec}");
        }
    }

    #[test]
    fn zero_equilibrium_fd_spectrum() {
        let (_, _, spectrum) = two_state();
        let fd = jacobian_fd_spectrum(&Mat::zeros(2, 4), &spectrum.values, Dynamics::Peira, 0.2).unwrap();
        let mut want: Vec<f64> = spectrum.values.iter().flat_map(|s| [1.0 - s / 0.04; 2]).collect();
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (a, b) in fd.iter().zip(&want) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn rotated_equilibrium_has_same_fd_spectrum() {
        let (_, _, spectrum) = two_state();
        let base = EquilibriumSpec::new(
            Dynamics::Peira,
            0.2,
            2,
            vec![ModeSelection::positive(0), ModeSelection::positive(1)],
        );
        let rotated = EquilibriumSpec {
            rotation: random_rotation(2, 9),
            ..base.clone()
        };
        let a = jacobian_fd_spectrum(&equilibrium_coordinates(&base, &spectrum).unwrap(), &spectrum.values, Dynamics::Peira, 0.2).unwrap();
        let b = jacobian_fd_spectrum(&equilibrium_coordinates(&rotated, &spectrum).unwrap(), &spectrum.values, Dynamics::Peira, 0.2).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn fd_refuses_non_critical_points() {
        let (_, _, spectrum) = two_state();
        let mut w = Mat::zeros(1, 4);
        w[(0, 0)] = 0.3;
        assert!(matches!(
            jacobian_fd(&w, &spectrum.values, Dynamics::Peira, 0.2),
            Err(LabError::Precondition(_))
        ));
    }

    #[test]
    fn repeated_eigenvalues_are_refused() {
        let f = make_two_state(0.6f64).unwrap();
        let t = make_product(&[f.clone(), f]).unwrap();
        let (_, spectrum) = spectral_setup(&t).unwrap();
        let spec = EquilibriumSpec::new(Dynamics::Peira, 0.2, 2, vec![]);
        assert!(matches!(
            jacobian_spectrum_closed_form(&spec, &spectrum),
            Err(LabError::Precondition(_))
        ));
    }

    #[test]
    fn four_mode_enumeration_reproduces_stable_families() {
        let (t, cca, spectrum) = four_mode();
        let peira = enumerate_specs(&cca, Dynamics::Peira, 0.2, 2);
        assert_eq!(peira.len(), 11);
        let opt = optimal_value(&cca.c, 0.2, 2).unwrap();
        let mut stable = Vec::new();
        for spec in &peira {
            let rep = classify_against(spec, &spectrum).unwrap();
            assert_eq!(rep.verdict == Verdict::Stable, predicted_stable(spec, &cca));
            let e = peira_objective(&build_equilibrium(&cca, spec).unwrap(), &t, 0.2).unwrap();
            if rep.verdict == Verdict::Stable {
                stable.push(spec.describe());
                assert!((e - opt).abs() < 1e-10);
            } else {
                assert!(rep.witness.unwrap().mu < 0.0);
                assert!(e > opt);
            }
        }
        assert_eq!(stable, vec!["{+1,+2}"]);

        let ssl = enumerate_specs(&cca, Dynamics::Ssl, 0.05, 2);
        assert_eq!(ssl.len(), 73);
        let mut stable = Vec::new();
        for spec in &ssl {
            let rep = classify_against(spec, &spectrum).unwrap();
            assert_eq!(rep.verdict == Verdict::Stable, predicted_stable(spec, &cca), "{spec}");
            if rep.verdict == Verdict::Stable {
                stable.push(spec.describe());
            }
        }
        stable.sort();
        assert_eq!(stable, vec!["{+1,+2}", "{+1,-1}", "{+1}", "{-1,-2}", "{-1}", "{}"]);
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = EquilibriumSpec::new(
            Dynamics::Ssl,
            0.05,
            2,
            vec![ModeSelection::negative(1).with_branch(Branch::Unstable)],
        );
        let text = serde_json::to_string(&spec).unwrap();
        let back: EquilibriumSpec<f64> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }
}
