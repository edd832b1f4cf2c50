//! Fixed-step RK4 integration of the population flows, both on tabular
//! encoders and on their coordinates in the eigenbasis of `A`.

use crate::cca::OperatorSpectrum;
use crate::distributions::JointTable;
use crate::error::{LabError, Result};
use crate::matstack::{inverse_spd, sym_eig, Mat};
use crate::objectives::{
    check_lambda, function_field, lyapunov_from_moments, lyapunov_gradient, moments,
    peira_objective_from_moments, Dynamics, EncoderPair, Moments,
};
use crate::scalar::Real;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Integration settings for a single trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Real")]
pub struct FlowConfig<T> {
    pub kind: Dynamics,
    pub lambda: T,
    pub step: T,
    pub t_end: T,
    pub log_every: usize,
    pub stop_field_norm: T,
}

impl<T: Real> FlowConfig<T> {
    /// Defaults: largest admissible step `λ/8`, early stop at `1e-10`.
    pub fn new(kind: Dynamics, lambda: T, t_end: T) -> Self {
        FlowConfig {
            kind,
            lambda,
            step: lambda / T::lit(8.0),
            t_end,
            log_every: 10,
            stop_field_norm: T::lit(1e-10),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        let cap = self.lambda / T::lit(8.0);
        if !(self.step > T::zero()) || self.step > cap * (T::one() + T::tol(1e-12)) {
            return Err(LabError::domain(format!(
                "step must lie in (0, lambda/8 = {cap}], got {}",
                self.step
            )));
        }
        if !(self.t_end > T::zero()) || !self.t_end.is_finite() {
            return Err(LabError::domain("t_end must be positive and finite"));
        }
        if self.log_every == 0 {
            return Err(LabError::domain("log_every must be at least 1"));
        }
        if self.stop_field_norm < T::zero() {
            return Err(LabError::domain("stop_field_norm must be non-negative"));
        }
        Ok(())
    }
}

/// One logged point of a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowRecord<T> {
    pub t: T,
    pub objective: T,
    pub lyapunov: T,
    pub field_norm: T,
    /// Singular values of the encoder in the function-space norm.
    pub singular_values: Vec<T>,
}

/// How an integration ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowOutcome {
    ReachedEnd,
    Converged,
    Diverged,
}

/// Logged records and matching state snapshots (`EncoderPair` for function
/// flows, the `k x d` coordinate matrix for coordinate flows).
#[derive(Debug, Clone)]
pub struct Trajectory<T, S> {
    pub records: Vec<FlowRecord<T>>,
    pub snapshots: Vec<S>,
    pub outcome: FlowOutcome,
    pub steps: usize,
}

impl<T: Real, S: Clone> Trajectory<T, S> {
    pub fn last_record(&self) -> &FlowRecord<T> {
        self.records.last().expect("trajectory always holds the initial record")
    }

    pub fn final_state(&self) -> &S {
        self.snapshots.last().expect("trajectory always holds the initial state")
    }

    pub fn times(&self) -> Vec<T> {
        self.records.iter().map(|r| r.t).collect()
    }

    /// Writes `t, objective, lyapunov, field_norm, sv_1..sv_k`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let k = self.records.first().map_or(0, |r| r.singular_values.len());
        let mut header: Vec<String> = ["t", "objective", "lyapunov", "field_norm"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((1..=k).map(|i| format!("sv_{i}")));
        wtr.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.t.to_string(),
                r.objective.to_string(),
                r.lyapunov.to_string(),
                r.field_norm.to_string(),
            ];
            row.extend(r.singular_values.iter().map(|v| v.to_string()));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// A trajectory together with the error that cut it short, if any. On
/// divergence the trajectory keeps every finite record up to that point.
#[derive(Debug, Clone)]
pub struct FlowRun<T, S> {
    pub trajectory: Trajectory<T, S>,
    pub error: Option<LabError>,
}

impl<T, S> FlowRun<T, S> {
    pub fn into_result(self) -> Result<Trajectory<T, S>> {
        match self.error {
            Some(e) => Err(e),
            None => Ok(self.trajectory),
        }
    }
}

fn summarize<T: Real>(m: &Moments<T>, cfg: &FlowConfig<T>, t: T, field_norm: T) -> Result<FlowRecord<T>> {
    let svs = sym_eig(&m.noise)?
        .values
        .into_iter()
        .map(|v| v.max(T::zero()).sqrt())
        .collect();
    Ok(FlowRecord {
        t,
        objective: peira_objective_from_moments(m, cfg.lambda)?,
        lyapunov: lyapunov_from_moments(m, cfg.kind, cfg.lambda),
        field_norm,
        singular_values: svs,
    })
}

/// Problem-specific pieces of an RK4 run on a flat state vector.
struct System<'a, T, S> {
    /// Velocity `−field(x)`.
    velocity: Box<dyn Fn(&[T]) -> Result<Vec<T>> + 'a>,
    /// Norm of a velocity in the flow's geometry.
    norm: Box<dyn Fn(&[T]) -> T + 'a>,
    moments: Box<dyn Fn(&[T]) -> Result<Moments<T>> + 'a>,
    snapshot: Box<dyn Fn(&[T]) -> S + 'a>,
}

fn all_finite<T: Real>(v: &[T]) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn run_rk4<T: Real, S: Clone>(x0: Vec<T>, cfg: &FlowConfig<T>, sys: &System<'_, T, S>) -> FlowRun<T, S> {
    let mut traj = Trajectory {
        records: Vec::new(),
        snapshots: Vec::new(),
        outcome: FlowOutcome::ReachedEnd,
        steps: 0,
    };
    let fail = |traj: Trajectory<T, S>, e: LabError| FlowRun {
        trajectory: traj,
        error: Some(e),
    };
    if let Err(e) = cfg.validate() {
        return fail(traj, e);
    }
    if !all_finite(&x0) {
        return fail(traj, LabError::Numerical("initial state is not finite".into()));
    }

    let mut x = x0;
    let mut t = T::zero();
    let record = |x: &[T], t: T, k1: &[T], traj: &mut Trajectory<T, S>| -> Result<()> {
        let m = (sys.moments)(x)?;
        traj.records.push(summarize(&m, cfg, t, (sys.norm)(k1))?);
        traj.snapshots.push((sys.snapshot)(x));
        Ok(())
    };
    let diverged = |t: T| LabError::Divergence {
        last_finite_time: t.to_f64_lossy(),
    };

    let mut step = 0usize;
    loop {
        let k1 = match (sys.velocity)(&x) {
            Ok(v) if all_finite(&v) => v,
            Ok(_) => {
                traj.outcome = FlowOutcome::Diverged;
                return fail(traj, diverged(t));
            }
            Err(e) => return fail(traj, e),
        };
        let converged = (sys.norm)(&k1) < cfg.stop_field_norm;
        let done = converged || t >= cfg.t_end * (T::one() - T::tol(1e-12));
        if step % cfg.log_every == 0 || done {
            if let Err(e) = record(&x, t, &k1, &mut traj) {
                return fail(traj, e);
            }
        }
        if done {
            traj.outcome = if converged {
                FlowOutcome::Converged
            } else {
                FlowOutcome::ReachedEnd
            };
            break;
        }
        let h = cfg.step.min(cfg.t_end - t);
        let half = h * T::lit(0.5);
        let stage = |x: &[T], k: &[T], a: T| -> Vec<T> { x.iter().zip(k).map(|(&xi, &ki)| xi + a * ki).collect() };
        let next = (|| -> Result<Vec<T>> {
            let k2 = (sys.velocity)(&stage(&x, &k1, half))?;
            let k3 = (sys.velocity)(&stage(&x, &k2, half))?;
            let k4 = (sys.velocity)(&stage(&x, &k3, h))?;
            let sixth = h / T::lit(6.0);
            Ok((0..x.len())
                .map(|i| x[i] + sixth * (k1[i] + T::lit(2.0) * (k2[i] + k3[i]) + k4[i]))
                .collect())
        })();
        match next {
            Ok(v) if all_finite(&v) => x = v,
            Ok(_) | Err(LabError::Numerical(_)) => {
                traj.outcome = FlowOutcome::Diverged;
                return fail(traj, diverged(t));
            }
            Err(e) => return fail(traj, e),
        }
        t += h;
        step += 1;
        traj.steps = step;
    }
    FlowRun {
        trajectory: traj,
        error: None,
    }
}

/// Integrates `Ẇ = −field(W)` on tabular encoders.
pub fn run_function_flow<T: Real>(
    w0: &EncoderPair<T>,
    table: &JointTable<T>,
    cfg: &FlowConfig<T>,
) -> FlowRun<T, EncoderPair<T>> {
    let (k, nx, ny) = (w0.k(), w0.nx(), w0.ny());
    let unflat = move |x: &[T]| EncoderPair::from_flat(k, nx, ny, x);
    let sys = System {
        velocity: Box::new(move |x| {
            let f = function_field(cfg.kind, &unflat(x)?, table, cfg.lambda)?;
            Ok(f.to_flat().into_iter().map(|v| -v).collect())
        }),
        norm: Box::new(move |v| match unflat(v) {
            Ok(p) => p.norm(table),
            Err(_) => T::nan(),
        }),
        moments: Box::new(move |x| moments(&unflat(x)?, table)),
        snapshot: Box::new(move |x| unflat(x).expect("state length is fixed")),
    };
    if let Err(e) = w0.check(table) {
        return FlowRun {
            trajectory: Trajectory {
                records: Vec::new(),
                snapshots: Vec::new(),
                outcome: FlowOutcome::ReachedEnd,
                steps: 0,
            },
            error: Some(e),
        };
    }
    run_rk4(w0.to_flat(), cfg, &sys)
}

pub fn integrate_function_flow<T: Real>(
    w0: &EncoderPair<T>,
    table: &JointTable<T>,
    cfg: &FlowConfig<T>,
) -> Result<Trajectory<T, EncoderPair<T>>> {
    run_function_flow(w0, table, cfg).into_result()
}

fn scale_cols<T: Real>(w: &Mat<T>, s: &[T]) -> Mat<T> {
    Mat::from_fn(w.rows(), w.cols(), |p, i| w[(p, i)] * s[i])
}

/// `F^κ(w) = w − w G S (wᵀ w S)^κ G` with `G = (wᵀw + λI)^{-1}`.
pub fn coordinate_field<T: Real>(w: &Mat<T>, s: &[T], dynamics: Dynamics, lambda: T) -> Result<Mat<T>> {
    if w.cols() != s.len() {
        return Err(LabError::dim("coordinate matrix and spectrum disagree"));
    }
    check_lambda(lambda)?;
    let g = inverse_spd(&(&w.transpose() * w), lambda)?;
    let wg = w * &g;
    let mut inner = scale_cols(&wg, s);
    if dynamics == Dynamics::Ssl {
        inner = &inner * &scale_cols(&(&w.transpose() * w), s);
    }
    Ok(w - &(&inner * &g))
}

/// Integrates `ẇ = −λ F^κ(w)` in the eigenbasis of `A`.
pub fn run_coordinate_flow<T: Real>(
    w0: &Mat<T>,
    spec: &OperatorSpectrum<T>,
    cfg: &FlowConfig<T>,
) -> FlowRun<T, Mat<T>> {
    let (k, d) = w0.shape();
    let s = &spec.values;
    let unflat = move |x: &[T]| Mat::from_vec(k, d, x.to_vec());
    let sys = System {
        velocity: Box::new(move |x| {
            let f = coordinate_field(&unflat(x)?, s, cfg.kind, cfg.lambda)?;
            Ok(f.into_vec().into_iter().map(|v| -cfg.lambda * v).collect())
        }),
        norm: Box::new(|v| v.iter().map(|&a| a * a).sum::<T>().sqrt()),
        moments: Box::new(move |x| Ok(Moments::from_coordinates(&unflat(x)?, s))),
        snapshot: Box::new(move |x| unflat(x).expect("state length is fixed")),
    };
    if d != spec.dim() {
        return FlowRun {
            trajectory: Trajectory {
                records: Vec::new(),
                snapshots: Vec::new(),
                outcome: FlowOutcome::ReachedEnd,
                steps: 0,
            },
            error: Some(LabError::dim("coordinate matrix must have d columns")),
        };
    }
    run_rk4(w0.as_slice().to_vec(), cfg, &sys)
}

pub fn integrate_coordinate_flow<T: Real>(
    w0: &Mat<T>,
    spec: &OperatorSpectrum<T>,
    cfg: &FlowConfig<T>,
) -> Result<Trajectory<T, Mat<T>>> {
    run_coordinate_flow(w0, spec, cfg).into_result()
}

/// The three quantities of the sufficient-decrease chain at `w`:
/// `‖∇L‖²/(4(‖w‖²+λ)⁴)`, `‖F‖²` and `−(1/(2λ³)) dL/dt = ⟨∇L, F⟩/(2λ²)`.
pub fn dissipation_bounds<T: Real>(w: &Mat<T>, s: &[T], dynamics: Dynamics, lambda: T) -> Result<(T, T, T)> {
    let f = coordinate_field(w, s, dynamics, lambda)?;
    let g = lyapunov_gradient(w, s, dynamics, lambda);
    let wn = w.frobenius();
    let base = wn * wn + lambda;
    let gn = g.frobenius();
    let fnorm = f.frobenius();
    let lower = gn * gn / (T::lit(4.0) * base.powi(4));
    let upper = g.dot(&f) / (T::lit(2.0) * lambda * lambda);
    Ok((lower, fnorm * fnorm, upper))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cca::{coordinates_of, exact_cca, operator_spectrum};
    use crate::distributions::make_two_state;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pair(k: usize, n: usize, scale: f64, seed: u64) -> EncoderPair<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EncoderPair::new(
            Mat::from_fn(k, n, |_, _| scale * rng.random_range(-1.0..1.0)),
            Mat::from_fn(k, n, |_, _| scale * rng.random_range(-1.0..1.0)),
        )
        .unwrap()
    }

    fn random_coords(k: usize, d: usize, seed: u64) -> Mat<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(k, d, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn config_validation() {
        let mut cfg = FlowConfig::new(Dynamics::Peira, 0.2, 1.0);
        assert!(cfg.validate().is_ok());
        cfg.step = 0.2 / 7.0;
        assert!(matches!(cfg.validate(), Err(LabError::Domain(_))));
        let bad: FlowConfig<f64> = FlowConfig::new(Dynamics::Peira, 1.5, 1.0);
        assert!(bad.validate().is_err());
        let json = r#"{"kind":"ssl","lambda":0.1,"step":0.01,"t_end":1.0,"log_every":1,"stop_field_norm":0.0,"extra":1}"#;
        assert!(serde_json::from_str::<FlowConfig<f64>>(json).is_err());
    }

    #[test]
    fn peira_flow_recovers_filtered_spectrum() {
        let t = make_two_state(0.6f64).unwrap();
        let cfg = FlowConfig::new(Dynamics::Peira, 0.2, 400.0);
        let traj = integrate_function_flow(&random_pair(2, 2, 0.5, 3), &t, &cfg).unwrap();
        let sv = &traj.last_record().singular_values;
        assert!((sv[0] - 0.8f64.sqrt()).abs() < 1e-4);
        assert!((sv[1] - (0.6f64.sqrt() - 0.2).sqrt()).abs() < 1e-4);
        let opt = -0.5 * (0.8f64.powi(2) + (0.6f64.sqrt() - 0.2).powi(2));
        assert!((traj.last_record().objective - opt).abs() < 1e-6);
        for pair in traj.records.windows(2) {
            assert!(pair[1].objective <= pair[0].objective + 1e-12);
            assert!(pair[1].t > pair[0].t);
        }
    }

    #[test]
    fn ssl_collapses_from_small_init_and_peira_escapes() {
        let t = make_two_state(0.6f64).unwrap();
        let w0 = random_pair(2, 2, 1.0, 8);
        let w0 = w0.scale(1e-3 / w0.norm(&t));
        let ssl = integrate_function_flow(&w0, &t, &FlowConfig::new(Dynamics::Ssl, 0.2, 100.0)).unwrap();
        assert!(ssl.final_state().norm(&t) < 1e-6);
        let peira = integrate_function_flow(&w0, &t, &FlowConfig::new(Dynamics::Peira, 0.2, 100.0)).unwrap();
        assert!(peira.snapshots.iter().any(|w| w.norm(&t) > 0.1));
    }

    #[test]
    fn coordinate_field_examples() {
        let s = [1.0, 0.6, -0.6, -1.0];
        for dynamics in [Dynamics::Peira, Dynamics::Ssl] {
            let f = coordinate_field(&Mat::zeros(2, 4), &s, dynamics, 0.2).unwrap();
            assert_eq!(f.max_abs(), 0.0);
            let m: f64 = 0.37;
            let mut w = Mat::zeros(2, 4);
            w[(0, 1)] = m.sqrt();
            let f = coordinate_field(&w, &s, dynamics, 0.2).unwrap();
            let kappa = dynamics.kappa() as i32;
            let want = m.sqrt() * (1.0 - m.powi(kappa) * 0.6f64.powi(kappa + 1) / (m + 0.2).powi(2));
            assert!((f[(0, 1)] - want).abs() < 1e-14);
            assert!((f.frobenius() - f[(0, 1)].abs()).abs() < 1e-14);
        }
    }

    #[test]
    fn coordinate_field_matches_small_gram_form() {
        let s = [1.0, 0.8, 0.3, 0.0, -0.3, -0.8, -1.0];
        let lambda = 0.15;
        for seed in 0..5 {
            let w = random_coords(3, 7, seed);
            for dynamics in [Dynamics::Peira, Dynamics::Ssl] {
                let f = coordinate_field(&w, &s, dynamics, lambda).unwrap();
                // push-through: w(wᵀw+λ)^{-1} = (wwᵀ+λ)^{-1}w
                let m = inverse_spd(&(&w * &w.transpose()), lambda).unwrap();
                let mw = &m * &w;
                let ws = scale_cols(&w, &s);
                let b = match dynamics {
                    Dynamics::Peira => ws,
                    Dynamics::Ssl => &(&ws * &w.transpose()) * &ws,
                };
                let mb = &m * &b;
                let alt = &w - &(&mb - &(&(&mb * &w.transpose()) * &mw)).scale(1.0 / lambda);
                assert!((&f - &alt).max_abs() < 1e-10);
            }
        }
    }

    #[test]
    fn function_fields_match_coordinate_fields() {
        let t = make_two_state(0.6f64).unwrap();
        let spec = operator_spectrum(&exact_cca(&t).unwrap());
        let lambda = 0.2;
        for seed in 0..5 {
            let w = random_pair(2, 2, 1.0, seed);
            let c = coordinates_of(&w, &spec).unwrap();
            for dynamics in [Dynamics::Peira, Dynamics::Ssl] {
                let field = function_field(dynamics, &w, &t, lambda).unwrap();
                let fc = coordinates_of(&field, &spec).unwrap().w;
                let want = coordinate_field(&c.w, &c.s, dynamics, lambda).unwrap().scale(lambda);
                assert!((&fc - &want).max_abs() < 1e-9);
            }
        }
    }

    #[test]
    fn function_and_coordinate_flows_agree() {
        let t = make_two_state(0.6f64).unwrap();
        let spec = operator_spectrum(&exact_cca(&t).unwrap());
        let w0 = random_pair(2, 2, 0.5, 21);
        let c0 = coordinates_of(&w0, &spec).unwrap().w;
        for dynamics in [Dynamics::Peira, Dynamics::Ssl] {
            let mut cfg = FlowConfig::new(dynamics, 0.2, 20.0);
            cfg.log_every = 20;
            cfg.stop_field_norm = 0.0;
            let a = integrate_function_flow(&w0, &t, &cfg).unwrap();
            let b = integrate_coordinate_flow(&c0, &spec, &cfg).unwrap();
            assert_eq!(a.snapshots.len(), b.snapshots.len());
            for (wa, wb) in a.snapshots.iter().zip(&b.snapshots) {
                let ca = coordinates_of(wa, &spec).unwrap().w;
                assert!((&ca - wb).max_abs() < 1e-6);
            }
        }
    }

    #[test]
    fn ssl_lyapunov_dissipates_and_decrease_chain_holds() {
        let s = vec![1.0, 0.8, 0.5, 0.0, -0.5, -0.8, -1.0];
        let spec = OperatorSpectrum {
            values: s.clone(),
            vectors: Mat::identity(7),
            labels: vec![crate::cca::ModeLabel::Null; 7],
            px: vec![0.25; 4],
            py: vec![1.0 / 3.0; 3],
        };
        let lambda = 0.1;
        for dynamics in [Dynamics::Peira, Dynamics::Ssl] {
            let mut cfg = FlowConfig::new(dynamics, lambda, 30.0);
            cfg.log_every = 1;
            let traj = integrate_coordinate_flow(&random_coords(3, 7, 5), &spec, &cfg).unwrap();
            for pair in traj.records.windows(2) {
                assert!(pair[1].lyapunov <= pair[0].lyapunov + 1e-12);
            }
            for w in traj.snapshots.iter().step_by(50) {
                let (lo, mid, hi) = dissipation_bounds(w, &s, dynamics, lambda).unwrap();
                assert!(lo <= mid * (1.0 + 1e-9) + 1e-15);
                assert!(mid <= hi * (1.0 + 1e-9) + 1e-15);
            }
        }
    }

    #[test]
    fn ssl_flow_lands_on_stable_filter_values() {
        let t = make_two_state(0.6f64).unwrap();
        let spec = operator_spectrum(&exact_cca(&t).unwrap());
        let lambda = 0.05;
        let f1 = |c: f64| 0.5 * (c + (c * c - 4.0 * lambda).sqrt());
        let targets = [f1(1.0), f1(0.6), 0.0];
        assert!((targets[0] - 0.947214).abs() < 1e-6 && (targets[1] - 0.5).abs() < 1e-12);
        let mut cfg = FlowConfig::new(Dynamics::Ssl, lambda, 4000.0);
        cfg.log_every = 1000;
        let traj = integrate_coordinate_flow(&random_coords(2, 4, 13), &spec, &cfg).unwrap();
        let w = traj.final_state();
        for i in 0..4 {
            let norm = (0..2).map(|p| w[(p, i)] * w[(p, i)]).sum::<f64>().sqrt();
            let near = targets.iter().map(|v| (v - norm).abs()).fold(f64::MAX, f64::min);
            assert!(near < 1e-4, "mode {i}: norm {norm}");
        }
    }

    #[test]
    fn step_halving_changes_final_state_little() {
        let t = make_two_state(0.6f64).unwrap();
        let w0 = random_pair(2, 2, 0.5, 2);
        let mut cfg = FlowConfig::new(Dynamics::Ssl, 0.2, 10.0);
        cfg.stop_field_norm = 0.0;
        let a = integrate_function_flow(&w0, &t, &cfg).unwrap();
        cfg.step *= 0.5;
        let b = integrate_function_flow(&w0, &t, &cfg).unwrap();
        let d = a.final_state().axpy(-1.0, b.final_state());
        assert!(d.u.max_abs().max(d.v.max_abs()) < 1e-6);
    }

    #[test]
    fn divergence_keeps_partial_trajectory() {
        let spec = OperatorSpectrum {
            values: vec![1.0, -1.0],
            vectors: Mat::identity(2),
            labels: vec![crate::cca::ModeLabel::Null; 2],
            px: vec![1.0],
            py: vec![1.0],
        };
        let mut w0 = Mat::zeros(1, 2);
        w0[(0, 0)] = f64::MAX.sqrt();
        let run = run_coordinate_flow(&w0, &spec, &FlowConfig::new(Dynamics::Peira, 0.2, 1.0));
        assert!(matches!(run.error, Some(LabError::Divergence { .. }) | Some(LabError::Numerical(_))));
    }

    #[test]
    fn csv_export_layout() {
        let t = make_two_state(0.6f64).unwrap();
        let mut cfg = FlowConfig::new(Dynamics::Peira, 0.2, 0.1);
        cfg.log_every = 1;
        let traj = integrate_function_flow(&random_pair(2, 2, 0.5, 1), &t, &cfg).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,objective,lyapunov,field_norm,sv_1,sv_2");
        assert_eq!(lines.count(), traj.records.len());
    }
}
