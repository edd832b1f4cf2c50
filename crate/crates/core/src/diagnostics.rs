//! Label-free training diagnostics: effective rank, signal/noise eigenvector
//! alignment, the signal spectrum and rank correlation.

use crate::error::{LabError, Result};
use crate::matstack::{svd, sym_eig, Mat};
use crate::objectives::Moments;
use crate::scalar::Real;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::io::Write;

/// `exp(−Σ p_i log p_i)` with `p_i = σ_i / Σσ`, zero values skipped.
pub fn effective_rank_of<T: Real>(singular_values: &[T]) -> Result<T> {
    let total: T = singular_values.iter().map(|s| s.abs()).sum();
    if !(total > T::zero()) {
        return Err(LabError::domain("effective rank of an all-zero matrix"));
    }
    let entropy: T = singular_values
        .iter()
        .map(|s| s.abs() / total)
        .filter(|&p| p > T::zero())
        .map(|p| -p * p.ln())
        .sum();
    Ok(entropy.exp())
}

/// Effective rank of a feature matrix from its singular values.
pub fn effective_rank<T: Real>(z: &Mat<T>) -> Result<T> {
    effective_rank_of(&svd(z)?.s)
}

/// Eigenvalues of `Σ`, descending.
pub fn signal_spectrum<T: Real>(m: &Moments<T>) -> Result<Vec<T>> {
    Ok(sym_eig(&m.sigma)?.values)
}

/// `α_i = e_iᵀ N e_i / (‖e_i‖ ‖N e_i‖)` for the eigenvectors `e_i` of `Σ`,
/// ordered by decreasing `|eigenvalue|`. Returned with the eigenvalues.
pub fn alignment_with_values<T: Real>(m: &Moments<T>) -> Result<Vec<(T, T)>> {
    let eig = sym_eig(&m.sigma)?;
    let k = eig.values.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        eig.values[b]
            .abs()
            .partial_cmp(&eig.values[a].abs())
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let floor = T::tol(1e-14);
    Ok(order
        .into_iter()
        .map(|i| {
            let e = Mat::column(&eig.vectors.col(i));
            let ne = &m.noise * &e;
            let nn = ne.frobenius();
            let alpha = if nn < floor {
                T::one()
            } else {
                (e.dot(&ne) / (e.frobenius() * nn)).max(T::zero()).min(T::one())
            };
            (eig.values[i], alpha)
        })
        .collect())
}

pub fn alignment<T: Real>(m: &Moments<T>) -> Result<Vec<T>> {
    Ok(alignment_with_values(m)?.into_iter().map(|(_, a)| a).collect())
}

/// Smallest alignment over eigenvectors of `Σ` whose eigenvalue exceeds
/// `rel_tol` times the largest in magnitude; `1` if `Σ = 0`.
pub fn min_active_alignment<T: Real>(m: &Moments<T>, rel_tol: T) -> Result<T> {
    let pairs = alignment_with_values(m)?;
    let top = pairs.first().map_or(T::zero(), |p| p.0.abs());
    Ok(pairs
        .iter()
        .filter(|(v, _)| v.abs() > rel_tol * top && top > T::zero())
        .map(|&(_, a)| a)
        .fold(T::one(), T::min))
}

/// Average ranks, ties sharing the mean of their positions (1-based).
fn ranks<T: Real>(x: &[T]) -> Vec<T> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap_or(Ordering::Equal));
    let mut out = vec![T::zero(); x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = T::lit((i + j) as f64 / 2.0 + 1.0);
        for &pos in &idx[i..=j] {
            out[pos] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman<T: Real>(x: &[T], y: &[T]) -> Result<T> {
    if x.len() != y.len() {
        return Err(LabError::dim("rank correlation needs equal-length inputs"));
    }
    if x.len() < 2 {
        return Err(LabError::domain("rank correlation needs at least two points"));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = T::lit(x.len() as f64);
    let mx = rx.iter().copied().sum::<T>() / n;
    let my = ry.iter().copied().sum::<T>() / n;
    let mut sxy = T::zero();
    let mut sxx = T::zero();
    let mut syy = T::zero();
    for (&a, &b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == T::zero() || syy == T::zero() {
        return Err(LabError::domain("rank correlation of a constant sequence"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// One logged training checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub eta: f64,
    /// Objective estimated from the EMA buffers.
    pub objective_buffered: f64,
    /// Exact objective of the tabulated encoders, when the table is known.
    pub objective_population: Option<f64>,
    /// Effective rank of the buffered features; `0` once they collapse.
    pub erank: f64,
    /// Smallest alignment over the active modes of the buffered `Σ`.
    pub min_alignment: f64,
    pub principal_angle_max: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    /// CSV with header `step,eta,objective_buffered,objective_population,
    /// erank,min_alignment,principal_angle_max`; unknown values are empty.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        if self.rows.is_empty() {
            w.write_record([
                "step",
                "eta",
                "objective_buffered",
                "objective_population",
                "erank",
                "min_alignment",
                "principal_angle_max",
            ])?;
        }
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::make_two_state;
    use crate::equilibria::{build_equilibrium, EquilibriumSpec, ModeSelection};
    use crate::cca::exact_cca;
    use crate::objectives::{moments, Dynamics};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn effective_rank_examples() {
        let rank_one = Mat::from_fn(4, 3, |i, j| (i + 1) as f64 * (j + 2) as f64);
        assert!((effective_rank(&rank_one).unwrap() - 1.0).abs() < 1e-10);
        assert!((effective_rank(&Mat::<f64>::identity(5).scale(3.0)).unwrap() - 5.0).abs() < 1e-12);
        let z = Mat::from_diag(&[2.0f64, 1.0, 1.0]);
        assert!((effective_rank(&z).unwrap() - 2f64.powf(1.5)).abs() < 1e-12);
        assert!(matches!(effective_rank(&Mat::<f64>::zeros(2, 2)), Err(LabError::Domain(_))));
    }

    #[test]
    fn alignment_examples() {
        let diag = Moments {
            sigma: Mat::from_diag(&[2.0f64, -1.0, 0.5]),
            noise: Mat::from_diag(&[1.0, 3.0, 0.0]),
        };
        assert!(alignment(&diag).unwrap().iter().all(|&a| (a - 1.0).abs() < 1e-14));
        let tilted = Moments {
            sigma: Mat::from_rows(&[[1.0f64, 1.0], [1.0, 1.0]]).unwrap(),
            noise: Mat::from_diag(&[1.0, 0.0]),
        };
        let a = alignment(&tilted).unwrap();
        assert!((a[0] - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn equilibrium_is_aligned_with_predicted_signal_spectrum() {
        let t = make_two_state(0.6f64).unwrap();
        let cca = exact_cca(&t).unwrap();
        let spec = EquilibriumSpec::new(
            Dynamics::Peira,
            0.2,
            2,
            vec![ModeSelection::positive(0), ModeSelection::positive(1)],
        );
        let m = moments(&build_equilibrium(&cca, &spec).unwrap(), &t).unwrap();
        assert!(alignment(&m).unwrap().iter().all(|&a| (a - 1.0).abs() < 1e-10));
        let s = signal_spectrum(&m).unwrap();
        assert!((s[0] - 0.8).abs() < 1e-9);
        assert!((s[1] - 0.6 * (0.6f64.sqrt() - 0.2)).abs() < 1e-9);
        assert!(signal_spectrum(&Moments::<f64> { sigma: Mat::zeros(2, 2), noise: Mat::zeros(2, 2) })
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn spearman_examples() {
        let x = [1.0f64, 2.0, 3.0, 4.0];
        assert!((spearman(&x, &[10.0, 20.0, 25.0, 100.0]).unwrap() - 1.0).abs() < 1e-14);
        assert!((spearman(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-14);
        let tied = spearman(&[1.0f64, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((tied - 0.8660254037844386).abs() < 1e-12);
        assert!(spearman(&[1.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn erank_is_orthogonally_invariant(n in 2usize..7, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z: Mat<f64> = Mat::from_fn(n + 2, n, |_, _| rng.random_range(-1.0..1.0));
            let th: f64 = rng.random_range(0.0..6.0);
            let mut rot = Mat::identity(n);
            rot[(0, 0)] = th.cos();
            rot[(0, 1)] = -th.sin();
            rot[(1, 0)] = th.sin();
            rot[(1, 1)] = th.cos();
            let a = effective_rank(&z).unwrap();
            let b = effective_rank(&(&z * &rot)).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
            prop_assert!(a >= 1.0 - 1e-12 && a <= n as f64 + 1e-12);
        }

        #[test]
        fn alignment_lies_in_unit_interval(k in 1usize..5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Mat<f64> = Mat::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
            let b: Mat<f64> = Mat::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
            let m = Moments { sigma: (&a + &a.transpose()), noise: &b * &b.transpose() };
            for v in alignment(&m).unwrap() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
