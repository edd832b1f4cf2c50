//! One function per subcommand; each writes its files under `out`.

use crate::config::{
    parse, FlowFileConfig, OracleConfig, ReportConfig, ReportInput, StabilityConfig, TrainFileConfig,
};
use crate::error::CliError;
use peira_core::cca::{exact_cca, principal_angles};
use peira_core::diagnostics::spearman;
use peira_core::equilibria::{
    compare_stability, enumerate_specs, filter_f, filter_g, optimal_value, r_max, spectral_setup, Branch,
    StabilityComparison, Verdict,
};
use peira_core::flows::{run_function_flow, FlowConfig, FlowOutcome};
use peira_core::objectives::{Dynamics, EncoderPair};
use peira_core::trainer::train;
use serde::Serialize;
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

/// Settings shared by every subcommand.
pub struct Context {
    pub config_path: PathBuf,
    pub out: Option<PathBuf>,
    pub jobs: usize,
    pub seed: Option<u64>,
}

impl Context {
    fn out_dir(&self, from_config: Option<PathBuf>) -> Result<PathBuf, CliError> {
        let dir = self
            .out
            .clone()
            .or(from_config)
            .ok_or_else(|| CliError::Config("no output directory: pass --out or set `out`".into()))?;
        fs::create_dir_all(&dir)
            .map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
        Ok(dir)
    }

    fn seed(&self, from_config: u64) -> u64 {
        self.seed.unwrap_or(from_config)
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(dir.join(name), text).map_err(|e| CliError::Config(format!("cannot write {name}: {e}")))
}

pub fn oracle(ctx: &Context, value: Value) -> Result<(), CliError> {
    let cfg: OracleConfig = parse(value)?;
    let table = cfg.table.build()?;
    let out = ctx.out_dir(cfg.out)?;
    let cca = exact_cca(&table)?;
    let mut doc = serde_json::to_value(&cca)?;
    doc["px"] = json!(table.px());
    doc["py"] = json!(table.py());
    doc["seed"] = json!(ctx.seed(cfg.seed));
    write_json(&out, "cca.json", &doc)?;
    let mut w = csv::Writer::from_writer(create(&out, "spectrum.csv")?);
    w.write_record(["index", "c"])?;
    for (i, c) in cca.c.iter().enumerate() {
        w.write_record([(i + 1).to_string(), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Final singular values against the filter prediction.
#[derive(Debug, Serialize)]
struct FlowSummary {
    kind: Dynamics,
    lambda: f64,
    outcome: FlowOutcome,
    steps: usize,
    t_final: f64,
    final_objective: f64,
    final_lyapunov: f64,
    final_field_norm: f64,
    final_norm: f64,
    singular_values: Vec<f64>,
    predicted: Vec<f64>,
    deviation: f64,
    error: Option<String>,
}

/// Predicted singular values: the top filtered modes for PEIRA, and for
/// self-distillation the nearest stable-branch value or zero per mode.
fn predicted_values(kind: Dynamics, c: &[f64], lambda: f64, k: usize, sv: &[f64]) -> Vec<f64> {
    match kind {
        Dynamics::Peira => {
            let r = r_max(c, lambda, k);
            let mut p: Vec<f64> = c[..r].iter().map(|&ci| filter_g(ci, lambda)).collect();
            p.resize(k, 0.0);
            p
        }
        Dynamics::Ssl => {
            let mut candidates: Vec<f64> = c.iter().map(|&ci| filter_f(ci, lambda, Branch::Stable)).collect();
            candidates.push(0.0);
            sv.iter()
                .map(|&s| {
                    candidates
                        .iter()
                        .copied()
                        .min_by(|a, b| (a - s).abs().total_cmp(&(b - s).abs()))
                        .unwrap_or(0.0)
                })
                .collect()
        }
    }
}

pub fn flow(ctx: &Context, value: Value) -> Result<(), CliError> {
    let cfg: FlowFileConfig = parse(value)?;
    let table = cfg.table.build()?;
    let mut fc = FlowConfig::new(cfg.kind, cfg.lambda, cfg.t_end);
    if let Some(step) = cfg.step {
        fc.step = step;
    }
    if let Some(n) = cfg.log_every {
        fc.log_every = n;
    }
    if let Some(s) = cfg.stop_field_norm {
        fc.stop_field_norm = s;
    }
    fc.validate()?;
    if cfg.k == 0 {
        return Err(CliError::Config("k must be at least 1".into()));
    }
    let cca = exact_cca(&table)?;
    let out = ctx.out_dir(cfg.out)?;

    let mut w0 = EncoderPair::random(cfg.k, table.nx(), table.ny(), 1.0, ctx.seed(cfg.seed));
    if let Some(n) = cfg.init_norm {
        if !(n > 0.0 && n.is_finite()) {
            return Err(CliError::Config("init_norm must be positive and finite".into()));
        }
        w0 = w0.scale(n / w0.norm(&table));
    }
    let run = run_function_flow(&w0, &table, &fc);
    let traj = &run.trajectory;
    traj.write_csv(create(&out, "trajectory.csv")?)?;
    if let Some(last) = traj.records.last() {
        let sv = last.singular_values.clone();
        let predicted = predicted_values(cfg.kind, &cca.c, cfg.lambda, cfg.k, &sv);
        let deviation = sv.iter().zip(&predicted).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let summary = FlowSummary {
            kind: cfg.kind,
            lambda: cfg.lambda,
            outcome: traj.outcome,
            steps: traj.steps,
            t_final: last.t,
            final_objective: last.objective,
            final_lyapunov: last.lyapunov,
            final_field_norm: last.field_norm,
            final_norm: traj.final_state().norm(&table),
            singular_values: sv,
            predicted,
            deviation,
            error: run.error.as_ref().map(ToString::to_string),
        };
        write_json(&out, "summary.json", &summary)?;
    }
    match run.error {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

pub fn stability(ctx: &Context, value: Value) -> Result<(), CliError> {
    let cfg: StabilityConfig = parse(value)?;
    if !(cfg.tolerance > 0.0) {
        return Err(CliError::Config("tolerance must be positive".into()));
    }
    let table = cfg.table.build()?;
    let (cca, spectrum) = spectral_setup(&table)?;
    let specs = enumerate_specs(&cca, cfg.kind, cfg.lambda, cfg.k);
    if specs.is_empty() {
        return Err(CliError::Config("no equilibrium specifications to enumerate".into()));
    }
    let out = ctx.out_dir(cfg.out)?;

    let jobs = ctx.jobs.max(1).min(specs.len());
    let chunk = specs.len().div_ceil(jobs);
    let results: Vec<Result<StabilityComparison<f64>, CliError>> = std::thread::scope(|s| {
        let handles: Vec<_> = specs
            .chunks(chunk)
            .map(|part| {
                let (cca, spectrum) = (&cca, &spectrum);
                s.spawn(move || {
                    part.iter()
                        .map(|spec| compare_stability(spec, cca, spectrum).map_err(CliError::from))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| {
                h.join()
                    .unwrap_or_else(|_| vec![Err(CliError::Numerical("worker thread panicked".into()))])
            })
            .collect()
    });
    let comparisons = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let mut w = csv::Writer::from_writer(create(&out, "stability.csv")?);
    w.write_record([
        "spec_id",
        "modes",
        "kappa",
        "verdict_closed_form",
        "min_mu_closed_form",
        "min_mu_finite_difference",
        "agreement",
    ])?;
    let mut disagreements = 0;
    let mut docs = Vec::new();
    for (id, cmp) in comparisons.iter().enumerate() {
        let agree = cmp.agreement(cfg.tolerance);
        disagreements += usize::from(!agree);
        let verdict = match cmp.report.verdict {
            Verdict::Stable => "stable",
            Verdict::Unstable => "unstable",
        };
        w.write_record([
            id.to_string(),
            cmp.report.spec.describe(),
            cfg.kind.kappa().to_string(),
            verdict.to_string(),
            cmp.report.min_mu.to_string(),
            cmp.min_mu_fd.to_string(),
            agree.to_string(),
        ])?;
        docs.push(json!({ "spec_id": id, "agreement": agree, "comparison": cmp }));
    }
    w.flush()?;
    write_json(&out, "stability.json", &json!({ "seed": ctx.seed(cfg.seed), "specs": docs }))?;
    if disagreements > 0 {
        return Err(CliError::Numerical(format!(
            "{disagreements} of {} specs disagree between closed form and finite differences",
            comparisons.len()
        )));
    }
    Ok(())
}

pub fn train_cmd(ctx: &Context, value: Value) -> Result<(), CliError> {
    let mut cfg = TrainFileConfig::from_value(value)?;
    cfg.trainer.seed = ctx.seed(cfg.trainer.seed);
    cfg.trainer.validate()?;
    let table = cfg.table.build()?;
    if cfg.trainer.shared_encoder && table.nx() != table.ny() {
        return Err(CliError::Config(format!(
            "shared_encoder needs identical view domains, got {} and {} states",
            table.nx(),
            table.ny()
        )));
    }
    let out = ctx.out_dir(cfg.out.clone())?;
    let outcome = train(&table, &cfg.trainer)?;
    outcome.log.write_csv(create(&out, "metrics.csv")?)?;

    let cca = exact_cca(&table)?;
    let r = r_max(&cca.c, cfg.trainer.lambda, cfg.trainer.k);
    let pair = outcome.state.encoders.population();
    let angles = principal_angles(&pair, &cca, r)?;
    let optimum = optimal_value(&cca.c, cfg.trainer.lambda, cfg.trainer.k)?;
    let last = outcome
        .log
        .last()
        .ok_or_else(|| CliError::Numerical("training produced no log rows".into()))?;
    let objective = last.objective_population.unwrap_or(f64::NAN);
    write_json(
        &out,
        "final.json",
        &json!({
            "steps": last.step,
            "objective": objective,
            "objective_buffered": last.objective_buffered,
            "optimum": optimum,
            "relative_gap": ((objective - optimum) / optimum).abs(),
            "erank": last.erank,
            "min_alignment": last.min_alignment,
            "principal_angles": angles,
            "principal_angle_max": angles.max(),
            "seed": cfg.trainer.seed,
        }),
    )
}

/// Checkpoints of one metrics file: `(step, −objective, −max angle)`.
fn read_checkpoints(path: &Path) -> Result<Vec<(usize, f64, f64)>, CliError> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Config(format!("{} lacks column `{name}`", path.display())))
    };
    let (step, obj, angle) = (col("step")?, col("objective_population")?, col("principal_angle_max")?);
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let field = |i: usize| -> Result<f64, CliError> {
            rec.get(i)
                .unwrap_or("")
                .parse()
                .map_err(|_| CliError::Config(format!("{}: column {i} holds no number", path.display())))
        };
        let s = rec
            .get(step)
            .unwrap_or("")
            .parse()
            .map_err(|_| CliError::Config(format!("{}: bad step value", path.display())))?;
        rows.push((s, -field(obj)?, -field(angle)?));
    }
    Ok(rows)
}

#[derive(Debug, Serialize)]
struct GroupSummary {
    lambda: f64,
    runs: usize,
    checkpoints: usize,
    rank_correlation: Option<f64>,
}

pub fn report(ctx: &Context, value: Value) -> Result<(), CliError> {
    let cfg: ReportConfig = parse(value)?;
    if cfg.inputs.is_empty() {
        return Err(CliError::Config("report needs at least one metrics input".into()));
    }
    let base = ctx.config_path.parent().unwrap_or(Path::new("."));
    let mut groups: BTreeMap<u64, Vec<(String, Vec<(usize, f64, f64)>)>> = BTreeMap::new();
    for (i, ReportInput { metrics, lambda, label }) in cfg.inputs.iter().enumerate() {
        if !(lambda.is_finite()) {
            return Err(CliError::Config("lambda must be finite".into()));
        }
        let path = if metrics.is_absolute() { metrics.clone() } else { base.join(metrics) };
        let rows = read_checkpoints(&path)?;
        let name = label.clone().unwrap_or_else(|| format!("run{}", i + 1));
        groups.entry(lambda.to_bits()).or_default().push((name, rows));
    }
    let out = ctx.out_dir(cfg.out)?;

    let mut w = csv::Writer::from_writer(create(&out, "report.csv")?);
    w.write_record(["lambda", "run", "step", "neg_objective", "subspace_quality_neg_max_principal_angle"])?;
    let mut summaries = Vec::new();
    let mut ordered: Vec<_> = groups.into_iter().map(|(bits, runs)| (f64::from_bits(bits), runs)).collect();
    ordered.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (lambda, runs) in &ordered {
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for (name, rows) in runs {
            for &(step, neg_obj, quality) in rows {
                w.write_record([lambda.to_string(), name.clone(), step.to_string(), neg_obj.to_string(), quality.to_string()])?;
                xs.push(neg_obj);
                ys.push(quality);
            }
        }
        summaries.push(GroupSummary {
            lambda: *lambda,
            runs: runs.len(),
            checkpoints: xs.len(),
            rank_correlation: spearman(&xs, &ys).ok(),
        });
    }
    w.flush()?;

    let mut s = csv::Writer::from_writer(create(&out, "report_summary.csv")?);
    s.write_record(["lambda", "runs", "checkpoints", "rank_correlation"])?;
    for g in &summaries {
        s.write_record([
            g.lambda.to_string(),
            g.runs.to_string(),
            g.checkpoints.to_string(),
            g.rank_correlation.map_or(String::new(), |v| v.to_string()),
        ])?;
    }
    s.flush()?;
    write_json(
        &out,
        "report.json",
        &json!({
            "quality_metric": "negative largest principal angle (radians) between the learned encoder span and the oracle canonical subspace; stands in for downstream accuracy, which has no analogue on finite tables",
            "groups": summaries,
            "seed": ctx.seed(cfg.seed),
        }),
    )
}
